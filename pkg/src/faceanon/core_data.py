"""Record types, manifest I/O and the face-detection cascade filter.

Images are carried as float32 torch tensors shaped ``(3, H, W)`` with values in
``[0, 1]``. Box coordinates are continuous pixel coordinates in which pixel
``(row r, col c)`` sits at ``(x=c, y=r)``; a box spanning a whole ``W x H``
image is therefore ``(0, 0, W - 1, H - 1)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

DEFAULT_FACE_THRESHOLD = 0.8


class ManifestError(ValueError):
    """A manifest line could not be parsed or failed validation."""

    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"invalid box {vals}: need x1 < x2 and y1 < y2")

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> "Box":
        if len(coords) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2


@dataclass(frozen=True)
class FaceDetection:
    box: Box
    score: float
    secondary_verified: bool = False

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("face detection score must be finite")


@dataclass(frozen=True)
class ActionInstance:
    box: Box
    action_class: int


@dataclass(frozen=True)
class FrameRecord:
    image_ref: Path
    actions: tuple[ActionInstance, ...] = ()
    faces: tuple[FaceDetection, ...] = ()


@dataclass(frozen=True)
class FaceRecord:
    image_ref: Path
    identity: int
    align_box: Box | None = None


@dataclass(frozen=True)
class PairRecord:
    ref_a: Path
    ref_b: Path
    same: bool


@dataclass
class Manifest:
    """Records loaded from one manifest file, plus what was inferred about them."""

    kind: str
    records: list = field(default_factory=list)
    path: Path | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def identity_count(self) -> int:
        if self.kind != "faces":
            raise AttributeError("identity_count only exists for faces manifests")
        return 1 + max((r.identity for r in self.records), default=-1)

    @property
    def class_count(self) -> int:
        if self.kind != "frames":
            raise AttributeError("class_count only exists for frames manifests")
        return 1 + max(
            (a.action_class for r in self.records for a in r.actions), default=-1
        )


def filter_face_detections(
    dets: Iterable[FaceDetection], threshold: float = DEFAULT_FACE_THRESHOLD
) -> list[FaceDetection]:
    """Two-stage cascade: keep confident detections, and low-scoring ones that
    the second-stage verifier accepted."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return [d for d in dets if d.score > threshold or d.secondary_verified]


# ---------------------------------------------------------------------------
# manifest parsing

_KINDS = ("frames", "faces", "pairs")


def _resolve(base: Path, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else base / p


def _parse_frame(obj: dict, base: Path, n_classes: int | None) -> FrameRecord:
    actions = []
    for a in obj.get("actions", []):
        cls = int(a["class"])
        if cls < 0 or (n_classes is not None and cls >= n_classes):
            raise ValueError(f"action class {cls} out of range")
        actions.append(ActionInstance(Box.from_list(a["box"]), cls))
    faces = [
        FaceDetection(
            Box.from_list(f["box"]), float(f["score"]), bool(f.get("verified", False))
        )
        for f in obj.get("faces", [])
    ]
    for f in faces:
        if not 0.0 <= f.score <= 1.0:
            raise ValueError(f"face score {f.score} outside [0, 1]")
    return FrameRecord(_resolve(base, obj["image"]), tuple(actions), tuple(faces))


def _parse_face(obj: dict, base: Path, n_ids: int | None) -> FaceRecord:
    ident = int(obj["identity"])
    if ident < 0 or (n_ids is not None and ident >= n_ids):
        raise ValueError(f"identity {ident} out of range")
    align = obj.get("align_box")
    return FaceRecord(
        _resolve(base, obj["image"]), ident, Box.from_list(align) if align else None
    )


def _parse_pair(obj: dict, base: Path) -> PairRecord:
    return PairRecord(
        _resolve(base, obj["a"]), _resolve(base, obj["b"]), bool(obj["same"])
    )


def load_manifest(
    path, kind: str, *, n_classes: int | None = None, n_identities: int | None = None
) -> Manifest:
    """Parse a line-delimited JSON manifest. Image files are not opened.

    Relative image paths resolve against the manifest's directory.
    """
    if kind not in _KINDS:
        raise ValueError(f"unknown manifest kind {kind!r}; expected one of {_KINDS}")
    path = Path(path)
    base = path.parent
    out = Manifest(kind=kind, path=path)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(path, lineno, f"parse error: {e.msg}") from e
            try:
                if kind == "frames":
                    rec = _parse_frame(obj, base, n_classes)
                elif kind == "faces":
                    rec = _parse_face(obj, base, n_identities)
                else:
                    rec = _parse_pair(obj, base)
            except (KeyError, TypeError, ValueError) as e:
                raise ManifestError(path, lineno, f"validation error: {e}") from e
            out.records.append(rec)
    return out


def _ref(p: Path, base: Path | None) -> str:
    if base is not None:
        try:
            return str(Path(p).relative_to(base))
        except ValueError:
            pass
    return str(p)


def record_to_json(rec, base: Path | None = None) -> dict:
    if isinstance(rec, FrameRecord):
        return {
            "image": _ref(rec.image_ref, base),
            "actions": [
                {"box": a.box.to_list(), "class": a.action_class} for a in rec.actions
            ],
            "faces": [
                {"box": f.box.to_list(), "score": f.score, "verified": f.secondary_verified}
                for f in rec.faces
            ],
        }
    if isinstance(rec, FaceRecord):
        obj = {"image": _ref(rec.image_ref, base), "identity": rec.identity}
        if rec.align_box is not None:
            obj["align_box"] = rec.align_box.to_list()
        return obj
    if isinstance(rec, PairRecord):
        return {"a": _ref(rec.ref_a, base), "b": _ref(rec.ref_b, base), "same": rec.same}
    raise TypeError(f"not a manifest record: {type(rec).__name__}")


def dump_manifest(records: Iterable, path) -> None:
    """Write records as line-delimited JSON, image paths relative to ``path``'s dir."""
    path = Path(path)
    base = path.parent
    lines = [json.dumps(record_to_json(r, base)) for r in records]
    path.write_text("".join(line + "\n" for line in lines))


# ---------------------------------------------------------------------------
# images


def load_image(path) -> torch.Tensor:
    """Read an image file into a ``(3, H, W)`` float32 tensor in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = image.detach().clamp(0, 1).cpu().numpy().transpose(1, 2, 0)
    return np.round(arr * 255.0).astype(np.uint8)


def save_image(image: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(image)).save(path)


def check_image(image: torch.Tensor) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {tuple(image.shape)}")
    if not torch.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")


def image_box(image: torch.Tensor) -> Box:
    """The box covering every pixel center of ``image``."""
    h, w = image.shape[-2:]
    return Box(0.0, 0.0, float(w - 1), float(h - 1))
