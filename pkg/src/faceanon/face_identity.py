"""Face identity classifier with angular-margin softmax, embeddings and pair verification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_data import Box, PairRecord, image_box
from .image_ops import crop

EPS = 1e-12


@dataclass
class ClassifierConfig:
    n_identities: int = 10
    input_size: tuple[int, int] = (112, 96)
    embed_dim: int = 128
    channels: tuple[int, ...] = (16, 32, 64, 128)
    margin: int = 4

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.channels = tuple(self.channels)
        if self.margin < 1:
            raise ValueError("angular margin must be >= 1")
        if self.n_identities < 1:
            raise ValueError("need at least one identity")


class FaceClassifier(nn.Module):
    """Conv trunk -> FC embedding, plus a bias-free unit-norm identity head."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        blocks = []
        ch_in = 3
        for ch in config.channels:
            blocks += [
                nn.Conv2d(ch_in, ch, 3, stride=2, padding=1),
                nn.BatchNorm2d(ch),
                nn.PReLU(ch),
            ]
            ch_in = ch
        self.trunk = nn.Sequential(*blocks)
        h, w = config.input_size
        for _ in config.channels:
            h, w = (h + 1) // 2, (w + 1) // 2
        self.fc = nn.Linear(ch_in * h * w, config.embed_dim)
        self.head = nn.Parameter(torch.randn(config.n_identities, config.embed_dim))
        self.renormalize_head()

    def forward(self, faces: torch.Tensor) -> torch.Tensor:
        """``(N, 3, H, W)`` faces in [0, 1] -> ``(N, d)`` embeddings."""
        if faces.ndim != 4 or tuple(faces.shape[-2:]) != self.config.input_size:
            raise ValueError(
                f"classifier expects (N, 3, {self.config.input_size[0]}, "
                f"{self.config.input_size[1]}) input, got {tuple(faces.shape)}"
            )
        feats = self.trunk(faces * 2 - 1)
        return self.fc(feats.flatten(1))

    @torch.no_grad()
    def renormalize_head(self):
        self.head.div_(self.head.norm(dim=1, keepdim=True).clamp_min(EPS))


def chebyshev_cos(c: torch.Tensor, m: int) -> torch.Tensor:
    """cos(m * theta) expressed as the Chebyshev polynomial T_m(cos theta)."""
    prev, cur = torch.ones_like(c), c
    if m == 0:
        return prev
    for _ in range(m - 1):
        prev, cur = cur, 2 * c * cur - prev
    return cur


def psi(theta: torch.Tensor, m: int) -> torch.Tensor:
    """Monotone margin function (-1)^k cos(m theta) - 2k on theta in [k pi/m, (k+1) pi/m]."""
    k = torch.floor(theta * m / math.pi).clamp(0, m - 1)
    sign = 1 - 2 * torch.remainder(k, 2)
    return sign * torch.cos(m * theta) - 2 * k


def angular_softmax_loss(
    embeddings: torch.Tensor,
    head: torch.Tensor,
    labels: torch.Tensor,
    margin: int = 4,
    margin_weight: float = 1.0,
) -> torch.Tensor:
    """Mean A-Softmax cross-entropy.

    The true-class logit is ``|x| * ((1 - a) cos(theta_y) + a psi(theta_y))`` with
    ``a = margin_weight``; other logits are ``|x| cos(theta_j)``.
    """
    if labels.numel() and (labels.min() < 0 or labels.max() >= head.shape[0]):
        raise ValueError(f"identity labels must lie in [0, {head.shape[0]})")
    norm = embeddings.norm(dim=1, keepdim=True)
    unit = embeddings / norm.clamp_min(EPS)
    w = head / head.norm(dim=1, keepdim=True).clamp_min(EPS)
    cos = (unit @ w.t()).clamp(-1, 1)
    cos_y = cos.gather(1, labels[:, None])
    theta = torch.acos(cos_y.detach())
    k = torch.floor(theta * margin / math.pi).clamp(0, margin - 1)
    sign = 1 - 2 * torch.remainder(k, 2)
    psi_y = sign * chebyshev_cos(cos_y, margin) - 2 * k
    target = (1 - margin_weight) * cos_y + margin_weight * psi_y
    logits = cos.scatter(1, labels[:, None], target) * norm
    return F.cross_entropy(logits, labels)


def classification_loss(
    model: FaceClassifier,
    faces: torch.Tensor,
    identities: torch.Tensor,
    margin: int | None = None,
    margin_weight: float = 1.0,
) -> torch.Tensor:
    m = model.config.margin if margin is None else margin
    if m < 1:
        raise ValueError("angular margin must be >= 1")
    return angular_softmax_loss(model(faces), model.head, identities, m, margin_weight)


def align_face(image: torch.Tensor, size: tuple[int, int], align_box: Box | None = None) -> torch.Tensor:
    """Grid-crop the alignment box (default: the whole image) to the classifier resolution."""
    box = align_box if align_box is not None else image_box(image)
    if tuple(image.shape[-2:]) == tuple(size) and box == image_box(image):
        return image
    return crop(image, box, size)


@torch.no_grad()
def embed(model: FaceClassifier, faces: torch.Tensor) -> torch.Tensor:
    """Embeddings in inference mode. Accepts one ``(3, H, W)`` face or a batch."""
    single = faces.ndim == 3
    batch = faces[None] if single else faces
    was_training = model.training
    model.eval()
    try:
        out = model(batch)
    finally:
        model.train(was_training)
    return out[0] if single else out


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a = a.double()
    b = b.double()
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(EPS)


def best_threshold(similarities: Sequence[float], same: Sequence[bool]) -> tuple[float, float]:
    """Accuracy-maximizing threshold over midpoints of sorted similarities.

    A pair is predicted "same" when its similarity is strictly above the threshold.
    Ties between thresholds go to the smallest one.
    """
    sims = np.asarray(similarities, dtype=np.float64)
    labels = np.asarray(same, dtype=bool)
    if sims.size == 0:
        raise ValueError("no pairs to verify")
    if labels.all() or not labels.any():
        raise ValueError("verification needs at least one positive and one negative pair")
    s = np.sort(sims)
    candidates = (s[:-1] + s[1:]) / 2
    best_acc, best_t = -1.0, float(candidates[0])
    for chunk in np.array_split(candidates, max(1, candidates.size // 1024)):
        pred = sims[None, :] > chunk[:, None]
        accs = (pred == labels[None, :]).mean(axis=1)
        i = int(np.argmax(accs))
        if accs[i] > best_acc:
            best_acc, best_t = float(accs[i]), float(chunk[i])
    return best_acc, best_t


def verify_pairs(
    pairs: Sequence[PairRecord], embedder: Callable[[object], torch.Tensor]
) -> tuple[float, float]:
    """Cosine-similarity verification; returns ``(accuracy, threshold)``.

    ``embedder`` maps an image reference to its embedding; each reference is embedded once.
    """
    if not pairs:
        raise ValueError("no pairs to verify")
    cache: dict = {}

    def get(ref):
        if ref not in cache:
            cache[ref] = embedder(ref)
        return cache[ref]

    sims = [float(cosine_similarity(get(p.ref_a), get(p.ref_b))) for p in pairs]
    return best_threshold(sims, [p.same for p in pairs])
