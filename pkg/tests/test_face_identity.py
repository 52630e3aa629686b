import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
import hypothesis.strategies as st

from faceanon.core_data import PairRecord
from faceanon.face_identity import (
    ClassifierConfig,
    FaceClassifier,
    angular_softmax_loss,
    best_threshold,
    chebyshev_cos,
    classification_loss,
    cosine_similarity,
    embed,
    psi,
    verify_pairs,
)


def cosine_logit_ce(emb, head, labels):
    """Reference: plain cross-entropy over |x| cos(theta_j) logits."""
    w = F.normalize(head, dim=1)
    logits = emb @ w.t()  # equals |x| cos(theta_j) for unit-norm rows
    return F.cross_entropy(logits, labels)


def test_m1_reduces_to_cosine_softmax():
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(100):
        n, d, c = 8, 16, 5
        emb = torch.randn(n, d, generator=gen, dtype=torch.float64) * 3
        head = torch.randn(c, d, generator=gen, dtype=torch.float64)
        labels = torch.randint(0, c, (n,), generator=gen)
        a = angular_softmax_loss(emb, head, labels, margin=1)
        b = cosine_logit_ce(emb, head, labels)
        worst = max(worst, abs(a.item() - b.item()))
    assert worst < 1e-6


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_psi_monotone_decreasing(m):
    theta = torch.linspace(0, math.pi, 10_000, dtype=torch.float64)
    v = psi(theta, m)
    assert torch.all(v[1:] < v[:-1])


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_chebyshev_matches_cos(m):
    theta = torch.linspace(0, math.pi, 101, dtype=torch.float64)
    assert torch.allclose(chebyshev_cos(torch.cos(theta), m), torch.cos(m * theta), atol=1e-12)


def test_single_identity_loss_zero():
    emb = torch.randn(4, 8)
    head = torch.randn(1, 8)
    assert angular_softmax_loss(emb, head, torch.zeros(4, dtype=torch.long)).item() == 0.0


def test_invalid_label_rejected():
    with pytest.raises(ValueError):
        angular_softmax_loss(torch.randn(2, 4), torch.randn(3, 4), torch.tensor([0, 3]))


def small_classifier(n_ids=3, size=(16, 16), seed=0):
    torch.manual_seed(seed)
    cfg = ClassifierConfig(n_identities=n_ids, input_size=size, embed_dim=8, channels=(4, 8), margin=4)
    return FaceClassifier(cfg).double()


def test_input_gradient_fd_m4():
    D = small_classifier().eval()
    gen = torch.Generator().manual_seed(3)
    x = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    ids = torch.tensor([0, 2])

    def f(t):
        return classification_loss(D, t, ids, margin=4)

    xv = x.clone().requires_grad_(True)
    f(xv).backward()
    idx = torch.randperm(x.numel(), generator=gen)[:40]
    eps = 1e-6
    for i in idx.tolist():
        hi, lo = x.clone(), x.clone()
        hi.view(-1)[i] += eps
        lo.view(-1)[i] -= eps
        fd = (f(hi) - f(lo)).item() / (2 * eps)
        g = xv.grad.view(-1)[i].item()
        assert abs(g - fd) <= 1e-3 * max(abs(fd), 1e-6) + 1e-9


def test_parameter_gradient_fd_m4():
    D = small_classifier(seed=5).eval()
    gen = torch.Generator().manual_seed(4)
    x = torch.rand(3, 3, 16, 16, generator=gen, dtype=torch.float64)
    ids = torch.tensor([0, 1, 2])
    D.zero_grad()
    classification_loss(D, x, ids).backward()
    eps = 1e-6
    for name, p in [("fc.weight", D.fc.weight), ("head", D.head), ("trunk.0.weight", D.trunk[0].weight)]:
        for i in torch.randperm(p.numel(), generator=gen)[:10].tolist():
            old = p.data.view(-1)[i].item()
            with torch.no_grad():
                p.view(-1)[i] = old + eps
                hi = classification_loss(D, x, ids).item()
                p.view(-1)[i] = old - eps
                lo = classification_loss(D, x, ids).item()
                p.view(-1)[i] = old
            fd = (hi - lo) / (2 * eps)
            g = p.grad.view(-1)[i].item()
            assert abs(g - fd) <= 1e-3 * max(abs(fd), 1e-6) + 1e-9, name


def test_embedding_contracts():
    D = small_classifier()
    face = torch.rand(3, 16, 16, dtype=torch.float64)
    a, b = embed(D, face), embed(D, face)
    assert torch.equal(a, b)
    assert a.shape == (8,)
    assert torch.isfinite(embed(D, torch.zeros(3, 16, 16, dtype=torch.float64))).all()
    assert D.training  # embed restores the mode it found


def test_wrong_input_size_rejected():
    with pytest.raises(ValueError):
        small_classifier()(torch.rand(1, 3, 12, 16, dtype=torch.float64))


def test_head_rows_unit_norm_after_renormalize():
    D = small_classifier()
    with torch.no_grad():
        D.head.mul_(5)
    D.renormalize_head()
    assert torch.allclose(D.head.norm(dim=1), torch.ones(3, dtype=torch.float64))


def test_threshold_separable():
    acc, t = best_threshold([0.9, 0.9, 0.1, 0.1], [True, True, False, False])
    assert acc == 1.0 and 0.1 <= t < 0.9


def test_threshold_flipped_labels():
    acc, _ = best_threshold([0.1, 0.1, 0.9, 0.9], [True, True, False, False])
    assert acc == 0.5


def test_self_pair_similarity_one():
    v = torch.randn(16)
    assert cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-12)


def test_verify_pairs_embeds_each_reference_once():
    table = {"a": torch.tensor([1.0, 0.0]), "b": torch.tensor([0.9, 0.1]), "c": torch.tensor([0.0, 1.0])}
    calls = []

    def embedder(ref):
        calls.append(ref)
        return table[ref]

    pairs = [PairRecord("a", "b", True), PairRecord("a", "c", False), PairRecord("b", "c", False)]
    acc, _ = verify_pairs(pairs, embedder)
    assert acc == 1.0
    assert sorted(calls) == ["a", "b", "c"]


@given(st.lists(st.tuples(st.floats(-1, 1), st.booleans()), min_size=2, max_size=30))
def test_threshold_is_optimal_among_midpoints(rows):
    sims = [s for s, _ in rows]
    same = [y for _, y in rows]
    if all(same) or not any(same):
        with pytest.raises(ValueError):
            best_threshold(sims, same)
        return
    acc, t = best_threshold(sims, same)
    s = sorted(sims)
    for lo, hi in zip(s, s[1:]):
        m = (lo + hi) / 2
        alt = sum((x > m) == y for x, y in zip(sims, same)) / len(sims)
        assert alt <= acc + 1e-12
    assert sum((x > t) == y for x, y in zip(sims, same)) / len(sims) == pytest.approx(acc)
