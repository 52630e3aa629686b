"""Procedural desk-scale stand-in for the face and action datasets.

Faces: an identity is a fixed palette (skin, hair, eyes) plus a hair style; every
render jitters position, size, brightness and pixel noise. Frames: one or two
people (face + torso) on a textured background, each doing one action drawn as a
prop next to the face (a cup at the mouth, a phone at the ear, a bar across the
mouth), so corrupting the enlarged face region also corrupts the action cue.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core_data import (
    ActionInstance,
    Box,
    FaceDetection,
    FaceRecord,
    FrameRecord,
    PairRecord,
    dump_manifest,
)

FACE_CONTEXT = 1.6
PROP_COLOR = np.array([0.95, 0.95, 0.2])
ACTION_NAMES = ("drink", "phone", "harmonica")


@dataclass
class SyntheticConfig:
    n_identities: int = 20
    n_faces: int = 200
    n_frames: int = 100
    n_eval_frames: int = 50
    n_pairs: int = 200
    n_pair_renders: int = 4
    n_classes: int = 3
    face_size: int = 32
    frame_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_identities < 2:
            raise ValueError("need at least two identities")
        if self.n_frames < 1:
            raise ValueError("need at least one frame")
        if not 1 <= self.n_classes <= len(ACTION_NAMES):
            raise ValueError(f"n_classes must be in [1, {len(ACTION_NAMES)}]")


@dataclass
class Identity:
    skin: np.ndarray
    hair: np.ndarray
    eyes: np.ndarray
    hair_style: int


def _canonical_mean(ident: Identity) -> np.ndarray:
    canvas = np.full((32, 32, 3), 0.5)
    draw_face(canvas, 15.5, 15.5, 10.0, ident, None)
    return canvas.reshape(-1, 3).mean(0)


def make_identities(n: int, rng: np.random.Generator, min_dist: float = 0.08) -> list[Identity]:
    out, means = [], []
    while len(out) < n:
        ident = Identity(
            skin=rng.uniform(0.15, 0.95, 3),
            hair=rng.uniform(0.0, 0.9, 3),
            eyes=rng.uniform(0.0, 1.0, 3),
            hair_style=int(rng.integers(3)),
        )
        m = _canonical_mean(ident)
        if all(np.linalg.norm(m - o) >= min_dist for o in means):
            out.append(ident)
            means.append(m)
    return out


def draw_face(canvas: np.ndarray, cx: float, cy: float, r: float, ident: Identity, rng) -> None:
    """Paint a face of radius ``r`` centered at ``(cx, cy)`` into an HxWx3 canvas in place."""
    h, w, _ = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    gain = 1.0 if rng is None else rng.uniform(0.9, 1.1)
    dx = (xx - cx) / r
    dy = (yy - cy) / (r * 1.15)
    head = dx**2 + dy**2 <= 1.0
    canvas[head] = np.clip(ident.skin * gain, 0, 1)
    if ident.hair_style == 0:
        hair = head & (dy < -0.45)
    elif ident.hair_style == 1:
        hair = head & ((dy < -0.55) | (np.abs(dx) > 0.75))
    else:
        hair = (dx**2 + (dy + 0.2) ** 2 <= 1.1) & ~head | (head & (dy < -0.7))
    canvas[hair] = np.clip(ident.hair * gain, 0, 1)
    eye_r = max(r * 0.16, 0.8)
    for ex in (-0.38, 0.38):
        eye = ((xx - (cx + ex * r)) ** 2 + (yy - (cy - 0.1 * r)) ** 2) <= eye_r**2
        canvas[eye] = ident.eyes
    mouth = (np.abs(yy - (cy + 0.5 * r)) <= max(r * 0.06, 0.5)) & (np.abs(xx - cx) <= 0.35 * r)
    canvas[mouth] = ident.skin * 0.4


def _background(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.3, 0.7, 3)
    tilt = rng.uniform(-0.15, 0.15, 3)
    ramp = np.linspace(-1, 1, w)[None, :, None] * tilt[None, None, :]
    return np.clip(base[None, None, :] + ramp + rng.normal(0, 0.03, (h, w, 3)), 0, 1)


def render_face_image(ident: Identity, size: int, rng: np.random.Generator) -> np.ndarray:
    """A face crop with background context, framed the way an enlarged detection would be."""
    canvas = np.clip(np.full((size, size, 3), 0.5) + rng.normal(0, 0.03, (size, size, 3)), 0, 1)
    r = size / (2 * FACE_CONTEXT) * rng.uniform(0.92, 1.08)
    c = (size - 1) / 2
    draw_face(canvas, c + rng.uniform(-1.5, 1.5), c + rng.uniform(-1.5, 1.5), r, ident, rng)
    return np.clip(canvas + rng.normal(0, 0.02, canvas.shape), 0, 1)


def _draw_rect(canvas, x1, y1, x2, y2, color):
    h, w, _ = canvas.shape
    xa, xb = max(int(round(x1)), 0), min(int(round(x2)), w - 1)
    ya, yb = max(int(round(y1)), 0), min(int(round(y2)), h - 1)
    if xa <= xb and ya <= yb:
        canvas[ya : yb + 1, xa : xb + 1] = color


def _prop_box(action: int, cx: float, cy: float, r: float) -> tuple[float, float, float, float]:
    if action == 0:  # cup held at the mouth
        return cx - 0.25 * r, cy + 0.3 * r, cx + 0.25 * r, cy + 1.3 * r
    if action == 1:  # phone at the ear
        return cx + 0.75 * r, cy - 0.5 * r, cx + 1.25 * r, cy + 0.4 * r
    return cx - 0.8 * r, cy + 0.35 * r, cx + 0.8 * r, cy + 0.65 * r  # harmonica


def render_frame(
    cfg: SyntheticConfig, identities: list[Identity], rng: np.random.Generator
) -> tuple[np.ndarray, list[ActionInstance], list[FaceDetection]]:
    size = cfg.frame_size
    canvas = _background(size, size, rng)
    n_people = 2 if rng.random() < 0.3 else 1
    slots = [(size * 0.28, size * 0.72)] if n_people == 2 else [(size * 0.3, size * 0.7)]
    actions, faces = [], []
    for p in range(n_people):
        if n_people == 2:
            cx = slots[0][p] + rng.uniform(-2, 2)
        else:
            cx = rng.uniform(*slots[0])
        r = size * rng.uniform(0.095, 0.12)
        cy = rng.uniform(size * 0.22, size * 0.32)
        torso_w = r * rng.uniform(1.9, 2.3)
        torso_top = cy + 1.15 * r
        torso_bot = min(torso_top + r * rng.uniform(2.4, 3.0), size - 1.0)
        _draw_rect(canvas, cx - torso_w / 2, torso_top, cx + torso_w / 2, torso_bot, rng.uniform(0.1, 0.9, 3))
        ident = identities[int(rng.integers(len(identities)))]
        draw_face(canvas, cx, cy, r, ident, rng)
        action = int(rng.integers(cfg.n_classes))
        px1, py1, px2, py2 = _prop_box(action, cx, cy, r)
        _draw_rect(canvas, px1, py1, px2, py2, PROP_COLOR)
        x1 = max(min(cx - torso_w / 2, cx - r, px1) - 1, 0.0)
        x2 = min(max(cx + torso_w / 2, cx + r, px2) + 1, size - 1.0)
        y1 = max(cy - 1.15 * r - 1, 0.0)
        y2 = min(torso_bot + 1, size - 1.0)
        actions.append(ActionInstance(Box(x1, y1, x2, y2), action))
        u = rng.random()
        if u < 0.1:
            continue  # face missed by the detector (turned away / occluded)
        face_box = Box(max(cx - r, 0.0), max(cy - 1.15 * r, 0.0), min(cx + r, size - 1.0), min(cy + 1.15 * r, size - 1.0))
        if u < 0.3:
            faces.append(FaceDetection(face_box, float(rng.uniform(0.4, 0.8)), True))
        else:
            faces.append(FaceDetection(face_box, float(rng.uniform(0.81, 1.0)), False))
    if rng.random() < 0.2:
        # low-confidence false positive that the second stage rejects
        fx, fy = rng.uniform(0, size - 12, 2)
        faces.append(FaceDetection(Box(fx, fy, fx + 10, fy + 10), float(rng.uniform(0.2, 0.75)), False))
    canvas = np.clip(canvas + rng.normal(0, 0.02, canvas.shape), 0, 1)
    return canvas, actions, faces


def _save(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


def _r(box: Box, nd: int = 3) -> Box:
    return Box(*(round(v, nd) for v in box.to_list()))


def make_synthetic(out_dir, config: SyntheticConfig | None = None) -> dict:
    """Write images and ``faces/pairs/frames/frames_eval`` manifests under ``out_dir``.

    Returns the dataset metadata that is also written to ``dataset.json``.
    """
    cfg = config or SyntheticConfig()
    out = Path(out_dir)
    for sub in ("faces", "pair_faces", "frames", "frames_eval"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    identities = make_identities(cfg.n_identities, rng)
    s = cfg.face_size
    full = Box(0.0, 0.0, s - 1.0, s - 1.0)

    faces = []
    for i in range(cfg.n_faces):
        ident = i % cfg.n_identities
        p = out / "faces" / f"{i:05d}.png"
        _save(render_face_image(identities[ident], s, rng), p)
        faces.append(FaceRecord(p, ident, full))
    dump_manifest(faces, out / "faces.jsonl")

    # verification pairs come from fresh renders never used for training
    renders = {}
    for ident in range(cfg.n_identities):
        for j in range(cfg.n_pair_renders):
            p = out / "pair_faces" / f"{ident:03d}_{j}.png"
            _save(render_face_image(identities[ident], s, rng), p)
            renders[ident, j] = p
    pairs = []
    n_pos = cfg.n_pairs // 2
    for k in range(cfg.n_pairs):
        a = int(rng.integers(cfg.n_identities))
        ja = int(rng.integers(cfg.n_pair_renders))
        if k < n_pos:
            jb = (ja + 1 + int(rng.integers(cfg.n_pair_renders - 1))) % cfg.n_pair_renders
            pairs.append(PairRecord(renders[a, ja], renders[a, jb], True))
        else:
            b = (a + 1 + int(rng.integers(cfg.n_identities - 1))) % cfg.n_identities
            jb = int(rng.integers(cfg.n_pair_renders))
            pairs.append(PairRecord(renders[a, ja], renders[b, jb], False))
    order = rng.permutation(len(pairs))
    dump_manifest([pairs[i] for i in order], out / "pairs.jsonl")

    for split, n in (("frames", cfg.n_frames), ("frames_eval", cfg.n_eval_frames)):
        records = []
        for i in range(n):
            img, actions, dets = render_frame(cfg, identities, rng)
            p = out / split / f"{i:05d}.png"
            _save(img, p)
            records.append(
                FrameRecord(
                    p,
                    tuple(ActionInstance(_r(a.box), a.action_class) for a in actions),
                    tuple(FaceDetection(_r(d.box), round(d.score, 4), d.secondary_verified) for d in dets),
                )
            )
        dump_manifest(records, out / f"{split}.jsonl")

    meta = {
        **asdict(cfg),
        "actions": list(ACTION_NAMES[: cfg.n_classes]),
        "manifests": {
            "faces": "faces.jsonl",
            "pairs": "pairs.jsonl",
            "frames": "frames.jsonl",
            "eval_frames": "frames_eval.jsonl",
        },
    }
    (out / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta
