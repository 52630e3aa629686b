import hashlib

import numpy as np
import pytest

from faceanon.core_data import load_image, load_manifest
from faceanon.synthetic import SyntheticConfig, make_synthetic


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


SMALL = dict(n_identities=5, n_faces=20, n_frames=6, n_eval_frames=2, n_pairs=10, face_size=16, frame_size=32)


def test_same_seed_same_dataset(tmp_path):
    make_synthetic(tmp_path / "a", SyntheticConfig(**SMALL, seed=11))
    make_synthetic(tmp_path / "b", SyntheticConfig(**SMALL, seed=11))
    make_synthetic(tmp_path / "c", SyntheticConfig(**SMALL, seed=12))
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_two_identities_have_both_pair_kinds(tmp_path):
    make_synthetic(tmp_path, SyntheticConfig(**{**SMALL, "n_identities": 2}))
    pairs = load_manifest(tmp_path / "pairs.jsonl", "pairs").records
    assert {p.same for p in pairs} == {True, False}


def test_rejects_degenerate_sizes():
    with pytest.raises(ValueError):
        SyntheticConfig(n_identities=1)
    with pytest.raises(ValueError):
        SyntheticConfig(n_frames=0)


def test_frames_have_actions_and_valid_boxes(tmp_path):
    make_synthetic(tmp_path, SyntheticConfig(**SMALL))
    m = load_manifest(tmp_path / "frames.jsonl", "frames", n_classes=3)
    for rec in m:
        assert rec.actions
        img = load_image(rec.image_ref)
        h, w = img.shape[1:]
        for a in rec.actions:
            assert 0 <= a.box.x1 < a.box.x2 <= w - 1 and 0 <= a.box.y1 < a.box.y2 <= h - 1


def test_nearest_mean_color_identifies_faces(tmp_path):
    make_synthetic(tmp_path, SyntheticConfig(seed=0))  # 20 identities, 200 faces
    recs = load_manifest(tmp_path / "faces.jsonl", "faces").records
    feats = np.stack([load_image(r.image_ref).reshape(3, -1).mean(1).numpy() for r in recs])
    ids = np.array([r.identity for r in recs])
    train = (np.arange(len(recs)) // 20) % 2 == 0  # faces cycle through identities
    means = np.stack([feats[train & (ids == k)].mean(0) for k in range(20)])
    pred = np.argmin(((feats[~train, None, :] - means[None]) ** 2).sum(-1), axis=1)
    acc = float((pred == ids[~train]).mean())
    assert acc > 0.9
