"""Hand-crafted face anonymizers and the frame-level driver that applies them."""

from __future__ import annotations

import re

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from skimage.segmentation import slic

from .core_data import Box, image_box
from .image_ops import crop, enlarge_box, integer_box, paste_composite, pixel_extent

METHODS = ("none", "blur", "mask", "noise", "superpixel", "edge", "learned")
DEFAULT_PARAMS = {"blur": 16.0, "noise": 0.1, "superpixel": 64.0}
FACE_ENLARGE = 1.6
MASK_VALUE = 0.0
SLIC_ITERS = 10


@dataclass(frozen=True)
class AnonymizerSpec:
    method: str = "none"
    param: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown anonymizer {self.method!r}; expected one of {METHODS}")
        if self.param is None and self.method in DEFAULT_PARAMS:
            object.__setattr__(self, "param", DEFAULT_PARAMS[self.method])
        if self.method == "blur" and (self.param < 1 or self.param != int(self.param)):
            raise ValueError(f"blur size must be a positive integer, got {self.param}")
        if self.method == "noise" and self.param < 0:
            raise ValueError(f"noise variance must be non-negative, got {self.param}")
        if self.method == "superpixel" and self.param < 1:
            raise ValueError(f"superpixel count must be >= 1, got {self.param}")

    @property
    def label(self) -> str:
        """Short name used in reports and checkpoint file names, e.g. ``blur8``."""
        if self.method == "blur":
            return f"blur{int(self.param)}"
        if self.method == "noise":
            return f"noise{self.param:g}"
        if self.method == "superpixel" and self.param != DEFAULT_PARAMS["superpixel"]:
            return f"superpixel{int(self.param)}"
        return self.method

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "AnonymizerSpec":
        """Parse ``method``, ``method:param`` (``blur:8``) or a label (``blur8``, ``noise0.3``)."""
        method, _, param = text.strip().partition(":")
        if not param:
            m = re.fullmatch(r"([a-z]+)(\d+(?:\.\d*)?(?:e-?\d+)?)", method)
            if m and m.group(1) in METHODS:
                method, param = m.groups()
        return cls(method, float(param) if param else None, seed)


def anonymize_blur(crop_img: torch.Tensor, s: int) -> torch.Tensor:
    """Area-average down to ``s x s`` then bilinear back up."""
    if s < 1:
        raise ValueError("blur size must be >= 1")
    h, w = crop_img.shape[-2:]
    if s > min(h, w):
        return crop_img.clone()
    small = F.adaptive_avg_pool2d(crop_img[None], (s, s))
    out = F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].clamp(0, 1)


def anonymize_mask(crop_img: torch.Tensor) -> torch.Tensor:
    return torch.full_like(crop_img, MASK_VALUE)


def anonymize_noise(crop_img: torch.Tensor, var: float, seed: int) -> torch.Tensor:
    if var < 0:
        raise ValueError("noise variance must be >= 0")
    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(crop_img.shape, generator=gen, dtype=crop_img.dtype)
    return (crop_img + noise * float(np.sqrt(var))).clamp(0, 1)


def superpixel_segments(crop_img: torch.Tensor, k: int) -> np.ndarray:
    """SLIC labels (k-means over Lab color + position) for an ``(3, H, W)`` crop."""
    arr = crop_img.detach().cpu().double().numpy().transpose(1, 2, 0)
    return slic(
        arr,
        n_segments=int(k),
        max_num_iter=SLIC_ITERS,
        start_label=0,
        convert2lab=True,
        channel_axis=-1,
    )


def anonymize_superpixel(crop_img: torch.Tensor, k: int) -> torch.Tensor:
    labels = superpixel_segments(crop_img, k)
    flat = crop_img.reshape(3, -1)
    lab = torch.from_numpy(labels.reshape(-1)).long()
    n = int(lab.max()) + 1
    sums = torch.zeros(3, n, dtype=crop_img.dtype).index_add_(1, lab, flat)
    counts = torch.bincount(lab, minlength=n).to(crop_img.dtype)
    means = sums / counts
    return means[:, lab].reshape(crop_img.shape).clamp(0, 1)


_LUMA = (0.299, 0.587, 0.114)


def anonymize_edge(crop_img: torch.Tensor) -> torch.Tensor:
    """Sobel magnitude of luma, scaled so its maximum is 1, on all three channels."""
    r, g, b = crop_img.unbind(0)
    luma = _LUMA[0] * r + _LUMA[1] * g + _LUMA[2] * b
    p = F.pad(luma[None, None], (1, 1, 1, 1), mode="replicate")[0, 0]
    # explicit differences keep flat regions at exactly zero
    dx = p[:, 2:] - p[:, :-2]
    dy = p[2:, :] - p[:-2, :]
    gx = dx[:-2] + 2 * dx[1:-1] + dx[2:]
    gy = dy[:, :-2] + 2 * dy[:, 1:-1] + dy[:, 2:]
    mag = (gx * gx + gy * gy).sqrt()
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return mag[None].expand(3, -1, -1).clone()


def anonymize_crop(crop_img: torch.Tensor, spec: AnonymizerSpec) -> torch.Tensor:
    """Apply a hand-crafted method to a single crop (``learned`` is not handled here)."""
    m = spec.method
    if m == "none":
        return crop_img.clone()
    if m == "blur":
        return anonymize_blur(crop_img, int(spec.param))
    if m == "mask":
        return anonymize_mask(crop_img)
    if m == "noise":
        return anonymize_noise(crop_img, spec.param, spec.seed)
    if m == "superpixel":
        return anonymize_superpixel(crop_img, int(spec.param))
    if m == "edge":
        return anonymize_edge(crop_img)
    raise ValueError(f"{m!r} is not a hand-crafted anonymizer")


def face_regions(frame: torch.Tensor, faces: Sequence[Box], enlarge: float = FACE_ENLARGE) -> list[Box]:
    h, w = frame.shape[-2:]
    return [enlarge_box(b, enlarge, (h, w)) for b in faces]


def apply_anonymizer(
    frame: torch.Tensor,
    faces: Sequence[Box],
    spec: AnonymizerSpec,
    modifier=None,
    enlarge: float = FACE_ENLARGE,
) -> torch.Tensor:
    """Anonymize every face box of ``frame`` in order and composite the results back.

    With ``spec.method == "learned"`` each enlarged box is grid-cropped to the
    modifier's working resolution and the graph stays differentiable w.r.t. the
    modifier parameters. Hand-crafted methods run on the native-resolution crop.
    """
    if spec.method == "learned" and modifier is None:
        raise ValueError("the learned anonymizer needs a modifier network")
    if spec.method == "none" or not faces:
        return frame
    out = frame
    for i, region in enumerate(face_regions(frame, faces, enlarge)):
        if spec.method == "learned":
            size = modifier.work_size
            patch = modifier(crop(out, region, (size, size))[None])[0]
            out = paste_composite(out, region, patch)
        else:
            region = integer_box(region)
            c0, r0, c1, r1 = pixel_extent(region)
            native = out[:, r0 : r1 + 1, c0 : c1 + 1]
            # distinct noise per face so two faces in a frame do not share a pattern
            face_spec = AnonymizerSpec(spec.method, spec.param, spec.seed + i)
            out = paste_composite(out, region, anonymize_crop(native, face_spec))
    return out


def anonymize_face_image(face: torch.Tensor, spec: AnonymizerSpec, modifier=None) -> torch.Tensor:
    """Anonymize a whole face-dataset image (the image already is the face crop)."""
    if spec.method == "learned":
        if modifier is None:
            raise ValueError("the learned anonymizer needs a modifier network")
        size = modifier.work_size
        h, w = face.shape[-2:]
        if (h, w) == (size, size):
            return modifier(face[None])[0]
        box = image_box(face)
        return paste_composite(face, box, modifier(crop(face, box, (size, size))[None])[0])
    return anonymize_crop(face, spec)
