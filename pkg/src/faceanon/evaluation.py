"""Privacy / utility evaluation: detection mAP and face verification per anonymizer."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .action_detection import ActionDetector, detect
from .baselines import AnonymizerSpec, anonymize_face_image, apply_anonymizer
from .core_data import FaceRecord, PairRecord, load_image
from .face_identity import FaceClassifier, align_face, embed, verify_pairs
from .metrics import mean_average_precision
from .modifier import ModifierNetwork
from .trainer import FrameSample, to_classifier_input

TRADEOFF_COLUMNS = ("method", "verification_error", "map")


@dataclass(frozen=True)
class TradeoffPoint:
    method: str
    verification_error: float
    map: float

    def __post_init__(self):
        for name in ("verification_error", "map"):
            v = getattr(self, name)
            if v == v and not 0.0 <= v <= 1.0:  # NaN marks "not measured"
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@torch.no_grad()
def anonymize_frames(frames: Sequence[FrameSample], spec: AnonymizerSpec, M=None, enlarge=1.6):
    out = []
    for i, f in enumerate(frames):
        s = AnonymizerSpec(spec.method, spec.param, spec.seed + 1000 * i)
        out.append(apply_anonymizer(f.image, f.faces, s, M, enlarge))
    return out


@torch.no_grad()
def detection_map(
    A: ActionDetector, frames: Sequence[FrameSample], spec: AnonymizerSpec, M=None,
    iou_thresh: float = 0.5, enlarge: float = 1.6,
) -> tuple[float, dict[int, float]]:
    images = anonymize_frames(frames, spec, M, enlarge)
    dets = [detect(A, img) for img in images]
    return mean_average_precision(dets, [f.actions for f in frames], iou_thresh)


class FaceEmbedder:
    """Loads, aligns, optionally anonymizes and embeds face images by reference."""

    def __init__(self, D: FaceClassifier, spec: AnonymizerSpec, M: ModifierNetwork | None = None,
                 align: dict | None = None):
        self.D = D
        self.spec = spec
        self.M = M
        self.align = align or {}
        self._n = 0

    @torch.no_grad()
    def __call__(self, ref) -> torch.Tensor:
        img = load_image(ref)
        if self.M is not None:
            size = (self.M.work_size,) * 2
        else:
            size = self.D.config.input_size
        face = align_face(img, size, self.align.get(Path(ref)))
        s = AnonymizerSpec(self.spec.method, self.spec.param, self.spec.seed + self._n)
        self._n += 1
        face = anonymize_face_image(face, s, self.M)
        face = to_classifier_input(face[None], self.D)[0]
        return embed(self.D, face)


def align_lookup(faces: Sequence[FaceRecord] | None) -> dict:
    return {Path(r.image_ref): r.align_box for r in faces or [] if r.align_box is not None}


def verification_accuracy(
    D: FaceClassifier, pairs: Sequence[PairRecord], spec: AnonymizerSpec, M=None, faces=None
) -> float:
    acc, _ = verify_pairs(pairs, FaceEmbedder(D, spec, M if spec.method == "learned" else None,
                                              align_lookup(faces)))
    return acc


def ablation_d_accuracy(D, M, pairs, faces=None) -> tuple[float, float]:
    """Verification accuracy of D on original pairs and on pairs passed through M."""
    orig = verification_accuracy(D, pairs, AnonymizerSpec("none"), None, faces)
    modified = verification_accuracy(D, pairs, AnonymizerSpec("learned"), M, faces)
    return orig, modified


@dataclass
class MethodResult:
    point: TradeoffPoint
    per_class: dict[int, float]


def evaluate_method(
    spec: AnonymizerSpec, A: ActionDetector, D: FaceClassifier, frames, pairs, M=None, faces=None,
    enlarge: float = 1.6,
) -> MethodResult:
    m = M if spec.method == "learned" else None
    mAP, per_class = detection_map(A, frames, spec, m, enlarge=enlarge)
    acc = verification_accuracy(D, pairs, spec, m, faces)
    label = "learned" if spec.method == "learned" else spec.label
    return MethodResult(TradeoffPoint(label, 1.0 - acc, mAP), per_class)


def _fmt(v: float) -> str:
    return "" if v != v else f"{v:.6f}"


def tradeoff_csv(points: Sequence[TradeoffPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRADEOFF_COLUMNS)
    for p in points:
        w.writerow([p.method, _fmt(p.verification_error), _fmt(p.map)])
    return buf.getvalue()


def per_class_csv(results: Sequence[MethodResult], class_names: Sequence[str] | None = None) -> str:
    """Method x class AP table with a trailing mAP column, values in percent."""
    classes = sorted({c for r in results for c in r.per_class})
    names = [class_names[c] if class_names and c < len(class_names) else str(c) for c in classes]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *names, "mAP"])
    for r in results:
        w.writerow([r.point.method, *(f"{100 * r.per_class.get(c, 0.0):.2f}" for c in classes),
                    f"{100 * r.point.map:.2f}"])
    return buf.getvalue()


def plot_tradeoff(points: Sequence[TradeoffPoint], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for p in points:
        if p.map != p.map:
            continue
        style = dict(marker="s", color="red") if p.method == "learned" else dict(marker="o")
        ax.scatter(p.verification_error, p.map, **style)
        ax.annotate(p.method, (p.verification_error, p.map), fontsize=7)
    ax.set_xlabel("face verification error")
    ax.set_ylabel("action detection mAP")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
