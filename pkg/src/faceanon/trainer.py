"""Alternating min-max training of modifier M, face classifier D and action detector A.

Phase 1 alternates a D step (maximize the adversarial objective, i.e. classify
both modified and original faces) with a joint M, A step (detection loss on
anonymized frames + adversarial loss + weighted L1). Phase 2 freezes M and D and
fine-tunes A alone on the now-stationary anonymized frames.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .action_detection import ActionDetector, DetectorConfig, LossBundle, detector_loss
from .baselines import AnonymizerSpec, apply_anonymizer
from .checkpoint import load_checkpoint, save_checkpoint
from .core_data import (
    ActionInstance,
    Box,
    DEFAULT_FACE_THRESHOLD,
    filter_face_detections,
    load_image,
    load_manifest,
)
from .face_identity import ClassifierConfig, FaceClassifier, align_face, angular_softmax_loss
from .modifier import ModifierConfig, ModifierNetwork

log = logging.getLogger(__name__)

OBJECTIVES = ("gradient_ascent", "random_target")
CSV_COLUMNS = ("iter", "phase", "rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg", "adv", "l1", "total")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    T1: int = 100
    T2: int = 50
    pretrain_d: int = 0
    pretrain_a: int = 0
    lam: float = 0.02
    det_weight: float = 1.0
    lr_detector: float = 1e-3
    lr_modifier: float = 3e-4
    lr_classifier: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 12
    lr_drop_epoch: int = 7
    lr_drop: float = 0.1
    face_batch: int = 32
    frame_batch: int = 4
    seed: int = 0
    modifier_objective: str = "gradient_ascent"
    anneal_steps: int | None = None  # None: one epoch; 0: full margin from the start
    plateau_window: int = 0
    plateau_tol: float = 0.01
    checkpoint_every: int = 0
    track_ascent: bool = False
    anonymizer: str = "learned"
    anonymizer_param: float | None = None
    enlarge: float = 1.6
    face_threshold: float = DEFAULT_FACE_THRESHOLD

    def __post_init__(self):
        for name in ("lr_detector", "lr_modifier", "lr_classifier"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if min(self.T1, self.T2, self.pretrain_d, self.pretrain_a) < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.modifier_objective not in OBJECTIVES:
            raise ValueError(f"modifier_objective must be one of {OBJECTIVES}")
        if self.face_batch < 1 or self.frame_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.anneal_steps is not None and self.anneal_steps < 0:
            raise ValueError("anneal_steps must be non-negative")

    @property
    def anonymizer_spec(self) -> AnonymizerSpec:
        return AnonymizerSpec(self.anonymizer, self.anonymizer_param, self.seed)

    @property
    def anneal_length(self) -> int:
        """Classifier steps over which the margin blends in linearly."""
        if self.anneal_steps is not None:
            return self.anneal_steps
        return round((self.T1 + self.T2) / self.epochs)

    def lr_factor(self, global_step: int) -> float:
        """Step decay applied across the whole run, expressed in global steps."""
        total = self.T1 + self.T2
        drop_at = total * self.lr_drop_epoch / self.epochs
        return self.lr_drop if total and global_step >= drop_at else 1.0


# ---------------------------------------------------------------------------
# data


@dataclass
class FrameSample:
    image: torch.Tensor
    actions: tuple[ActionInstance, ...]
    faces: tuple[Box, ...]
    ref: Path | None = None


@dataclass
class TrainingData:
    faces: torch.Tensor  # (N, 3, S, S) at the modifier work size
    identities: torch.Tensor  # (N,)
    frames: list[FrameSample]
    n_identities: int
    n_classes: int


def resize_frame(image: torch.Tensor, min_side: int | None, max_side: int | None = None):
    """Resize so the shorter side equals ``min_side`` (capped by ``max_side``); returns (image, scale)."""
    if not min_side:
        return image, 1.0
    h, w = image.shape[-2:]
    scale = min_side / min(h, w)
    if max_side and max(h, w) * scale > max_side:
        scale = max_side / max(h, w)
    if scale == 1.0:
        return image, 1.0
    size = (round(h * scale), round(w * scale))
    out = F.interpolate(image[None], size=size, mode="bilinear", align_corners=True)[0]
    return out.clamp(0, 1), scale


def scale_box(box: Box, scale: float, image: torch.Tensor) -> Box:
    h, w = image.shape[-2:]
    return Box(
        min(box.x1 * scale, w - 1.0),
        min(box.y1 * scale, h - 1.0),
        min(box.x2 * scale, w - 1.0),
        min(box.y2 * scale, h - 1.0),
    )


def load_frames(
    manifest, face_threshold: float = DEFAULT_FACE_THRESHOLD, min_side=None, max_side=None,
    require_actions: bool = True,
) -> list[FrameSample]:
    out = []
    for rec in manifest:
        if require_actions and not rec.actions:
            continue
        image, s = resize_frame(load_image(rec.image_ref), min_side, max_side)
        faces = tuple(scale_box(d.box, s, image) for d in filter_face_detections(rec.faces, face_threshold))
        actions = tuple(ActionInstance(scale_box(a.box, s, image), a.action_class) for a in rec.actions)
        out.append(FrameSample(image, actions, faces, rec.image_ref))
    return out


def load_faces(manifest, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    imgs, ids = [], []
    for rec in manifest:
        imgs.append(align_face(load_image(rec.image_ref), (size, size), rec.align_box))
        ids.append(rec.identity)
    return torch.stack(imgs), torch.tensor(ids, dtype=torch.long)


def load_training_data(
    faces_path, frames_path, work_size: int, *, face_threshold=DEFAULT_FACE_THRESHOLD,
    min_side=None, max_side=None, n_identities=None, n_classes=None,
) -> TrainingData:
    faces_m = load_manifest(faces_path, "faces", n_identities=n_identities)
    frames_m = load_manifest(frames_path, "frames", n_classes=n_classes)
    faces, ids = load_faces(faces_m, work_size)
    frames = load_frames(frames_m, face_threshold, min_side, max_side)
    return TrainingData(
        faces, ids, frames,
        n_identities or faces_m.identity_count,
        n_classes or frames_m.class_count,
    )


# ---------------------------------------------------------------------------
# losses


def to_classifier_input(faces: torch.Tensor, D: FaceClassifier) -> torch.Tensor:
    size = D.config.input_size
    if tuple(faces.shape[-2:]) == size:
        return faces
    return F.interpolate(faces, size=size, mode="bilinear", align_corners=True)


def d_loss(D, faces, identities, margin_weight=1.0):
    return angular_softmax_loss(D(to_classifier_input(faces, D)), D.head, identities, D.config.margin, margin_weight)


def adversarial_loss(M, D, faces, identities, margin_weight=1.0, loss_fn=None) -> torch.Tensor:
    """``-mean L_D(M(f), i_f) - mean L_D(f, i_f)``; the second term carries no gradient to M."""
    loss_fn = loss_fn or d_loss
    modified = loss_fn(D, M(faces), identities, margin_weight)
    original = loss_fn(D, faces, identities, margin_weight)
    return -modified - original


def l1_loss(M, faces, lam: float, modified: torch.Tensor | None = None) -> torch.Tensor:
    if lam < 0:
        raise ValueError("lam must be non-negative")
    out = M(faces) if modified is None else modified
    per_sample = (out - faces).abs().flatten(1).mean(1)
    return lam * per_sample.mean()


def _random_targets(identities: torch.Tensor, n_identities: int, gen: torch.Generator) -> torch.Tensor:
    """Uniform identity per sample, never equal to the true one."""
    offset = torch.randint(1, n_identities, identities.shape, generator=gen)
    return (identities + offset) % n_identities


def anonymized_frame(frame: FrameSample, M, enlarge: float = 1.6) -> torch.Tensor:
    if not frame.faces:
        return frame.image
    return apply_anonymizer(frame.image, frame.faces, AnonymizerSpec("learned"), M, enlarge)


def detection_loss_batch(A, frames: Sequence[FrameSample], images: Sequence[torch.Tensor], gen) -> LossBundle:
    total = LossBundle()
    for frame, image in zip(frames, images):
        total = total + detector_loss(A, image, frame.actions, gen)
    return total.scaled(1.0 / len(frames))


# ---------------------------------------------------------------------------
# update steps


class _Frozen:
    """Disable grads and put a module in eval mode for the duration of a block."""

    def __init__(self, module):
        self.module = module

    def __enter__(self):
        self.training = self.module.training
        self.flags = [p.requires_grad for p in self.module.parameters()]
        self.module.eval()
        self.module.requires_grad_(False)
        return self.module

    def __exit__(self, *exc):
        for p, f in zip(self.module.parameters(), self.flags):
            p.requires_grad_(f)
        self.module.train(self.training)


def step_update_D(D, M, faces, identities, optimizer, margin_weight: float = 1.0) -> LossBundle:
    """One optimizer step on D toward classifying both ``M(f)`` and ``f`` (ascent on L_adv)."""
    with torch.no_grad():
        modified = M(faces)
    D.train()
    n = faces.shape[0]
    emb = D(to_classifier_input(torch.cat([modified, faces]), D))
    m = D.config.margin
    loss_mod = angular_softmax_loss(emb[:n], D.head, identities, m, margin_weight)
    loss_orig = angular_softmax_loss(emb[n:], D.head, identities, m, margin_weight)
    loss = loss_mod + loss_orig
    if not torch.isfinite(loss):
        raise TrainingAborted(f"non-finite classifier loss ({loss.item()})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    D.renormalize_head()
    return LossBundle(adv=-loss.detach())


@dataclass
class MAStepResult:
    losses: LossBundle
    ascent_inner: float | None = None


def step_update_MA(
    M, A, D, faces, identities, frames: Sequence[FrameSample], opt_M, opt_A,
    config: TrainingConfig, gen: torch.Generator, n_identities: int, margin_weight: float = 1.0,
) -> MAStepResult:
    """One joint step on M and A with D frozen."""
    with _Frozen(D):
        modified = M(faces)
        if config.modifier_objective == "gradient_ascent":
            loss_mod = d_loss(D, modified, identities, margin_weight)
            with torch.no_grad():
                loss_orig = d_loss(D, faces, identities, margin_weight)
            adv = -loss_mod - loss_orig
        else:
            targets = _random_targets(identities, n_identities, gen)
            adv = d_loss(D, modified, targets, margin_weight)
        l1 = l1_loss(M, faces, config.lam, modified)
        images = [anonymized_frame(f, M, config.enlarge) for f in frames]
        det = detection_loss_batch(A, frames, images, gen)
        det = det.scaled(config.det_weight)
        bundle = LossBundle(det.rpn_cls, det.rpn_reg, det.rcnn_cls, det.rcnn_reg, adv, l1)
        try:
            bundle.check_finite()
        except FloatingPointError as e:
            raise TrainingAborted(str(e)) from e

        inner = None
        m_params = [p for p in M.parameters() if p.requires_grad]
        if config.track_ascent and config.modifier_objective == "gradient_ascent":
            g_adv = torch.autograd.grad(adv, m_params, retain_graph=True, allow_unused=True)
            # the classification loss gradient, from an independent forward pass
            ref = d_loss(D, M(faces), identities, margin_weight)
            g_ref = torch.autograd.grad(ref, m_params, allow_unused=True)
            inner = float(sum(
                (-ga * gr).sum() for ga, gr in zip(g_adv, g_ref) if ga is not None and gr is not None
            ))

        opt_M.zero_grad(set_to_none=True)
        opt_A.zero_grad(set_to_none=True)
        bundle.total.backward()
        opt_M.step()
        opt_A.step()
    return MAStepResult(_detached(bundle), inner)


def step_update_A(A, M, frames: Sequence[FrameSample], opt_A, gen, images=None, enlarge=1.6) -> LossBundle:
    """Detector-only step; the anonymized inputs are treated as constants."""
    if images is None:
        with torch.no_grad():
            images = [anonymized_frame(f, M, enlarge) if M is not None else f.image for f in frames]
    det = detection_loss_batch(A, frames, images, gen)
    try:
        det.check_finite()
    except FloatingPointError as e:
        raise TrainingAborted(str(e)) from e
    opt_A.zero_grad(set_to_none=True)
    det.total.backward()
    opt_A.step()
    return _detached(det)


def _detached(bundle: LossBundle) -> LossBundle:
    return LossBundle(**{n: v.detach() for n, v in bundle.items()})


# ---------------------------------------------------------------------------
# the loop


@dataclass
class Models:
    M: ModifierNetwork | None
    D: FaceClassifier | None
    A: ActionDetector


def build_models(
    config: TrainingConfig, modifier_cfg: ModifierConfig, classifier_cfg: ClassifierConfig,
    detector_cfg: DetectorConfig,
) -> Models:
    torch.manual_seed(config.seed)
    learned = config.anonymizer == "learned"
    M = ModifierNetwork(modifier_cfg) if learned else None
    D = FaceClassifier(classifier_cfg) if learned else None
    A = ActionDetector(detector_cfg)
    return Models(M, D, A)


@dataclass
class TrainingState:
    step: int = 0
    d_steps: int = 0
    phase1_steps: int = 0
    phase2_steps: int = 0
    history: list[dict] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    rng_state: torch.Tensor | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rng_state"] = None if self.rng_state is None else self.rng_state.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingState":
        d = dict(d)
        if d.get("rng_state") is not None:
            d["rng_state"] = torch.tensor(d["rng_state"], dtype=torch.uint8)
        return cls(**d)


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in history:
        w.writerow([row["iter"], row["phase"]] + [
            "" if row.get(c) is None else f"{row[c]:.8g}" for c in CSV_COLUMNS[2:]
        ])
    return buf.getvalue()


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _batch_faces(data: TrainingData, n: int, gen):
    idx = torch.randperm(data.faces.shape[0], generator=gen)[:n]
    return data.faces[idx], data.identities[idx]


def _batch_frames(data: TrainingData, n: int, gen):
    idx = torch.randint(len(data.frames), (n,), generator=gen)
    return [data.frames[i] for i in idx.tolist()]


def _set_lr(opts_and_base, factor):
    for opt, base in opts_and_base:
        if opt is None:
            continue
        for g in opt.param_groups:
            g["lr"] = base * factor


class Trainer:
    """Owns the models, optimizers and RNG for one training run."""

    def __init__(self, config: TrainingConfig, data: TrainingData, models: Models,
                 out_dir=None, on_step=None):
        self.config = config
        self.data = data
        self.models = models
        self.out_dir = Path(out_dir) if out_dir else None
        self.on_step = on_step
        betas = (config.beta1, config.beta2)
        self.opt_A = torch.optim.Adam(models.A.parameters(), lr=config.lr_detector, betas=betas)
        self.opt_M = (torch.optim.Adam(models.M.parameters(), lr=config.lr_modifier, betas=betas)
                      if models.M is not None else None)
        self.opt_D = (torch.optim.Adam(models.D.parameters(), lr=config.lr_classifier, betas=betas)
                      if models.D is not None else None)
        self.gen = torch.Generator().manual_seed(config.seed)
        self.state = TrainingState()
        self._baseline_images = None

    @property
    def learned(self) -> bool:
        return self.models.M is not None

    def margin_weight(self) -> float:
        a = self.config.anneal_length
        return 1.0 if a <= 0 else min(1.0, self.state.d_steps / a)

    def _record(self, phase: str, bundle: LossBundle, **extra):
        row = {"iter": self.state.step, "phase": phase}
        row.update({n: None for n in LossBundle.NAMES})
        row.update(bundle.floats())
        row["total"] = float(bundle.total)
        row.update(extra)
        self.state.history.append(row)
        if self.on_step is not None:
            self.on_step(self, row)

    def _baseline_frames(self):
        if self._baseline_images is None:
            spec = self.config.anonymizer_spec
            self._baseline_images = {
                id(f): apply_anonymizer(f.image, f.faces, spec, None, self.config.enlarge)
                for f in self.data.frames
            }
        return self._baseline_images

    def pretrain_detector(self):
        """Detector warm start on unmodified frames, shared by every anonymizer."""
        _set_lr([(self.opt_A, self.config.lr_detector)], 1.0)
        for _ in range(self.config.pretrain_a):
            frames = _batch_frames(self.data, self.config.frame_batch, self.gen)
            step_update_A(self.models.A, None, frames, self.opt_A, self.gen, enlarge=self.config.enlarge)

    def pretrain_classifier(self):
        """Identity-classification warm start for D on the unmodified faces."""
        D = self.models.D
        for _ in range(self.config.pretrain_d):
            faces, ids = _batch_faces(self.data, self.config.face_batch, self.gen)
            D.train()
            loss = d_loss(D, faces, ids, self.margin_weight())
            if not torch.isfinite(loss):
                raise TrainingAborted("non-finite classifier loss during pretraining")
            self.opt_D.zero_grad(set_to_none=True)
            loss.backward()
            self.opt_D.step()
            D.renormalize_head()
            self.state.d_steps += 1

    def phase1_step(self):
        c, m = self.config, self.models
        _set_lr([(self.opt_A, c.lr_detector), (self.opt_M, c.lr_modifier), (self.opt_D, c.lr_classifier)],
                c.lr_factor(self.state.step))
        faces, ids = _batch_faces(self.data, c.face_batch, self.gen)
        d_bundle = step_update_D(m.D, m.M, faces, ids, self.opt_D, self.margin_weight())
        self.state.d_steps += 1
        faces, ids = _batch_faces(self.data, c.face_batch, self.gen)
        frames = _batch_frames(self.data, c.frame_batch, self.gen)
        res = step_update_MA(m.M, m.A, m.D, faces, ids, frames, self.opt_M, self.opt_A, c, self.gen,
                             self.data.n_identities, self.margin_weight())
        self.state.step += 1
        self.state.phase1_steps += 1
        self._record("1", res.losses, d_adv=float(d_bundle.adv), ascent_inner=res.ascent_inner)

    def phase2_step(self, phase="2"):
        c, m = self.config, self.models
        _set_lr([(self.opt_A, c.lr_detector)], c.lr_factor(self.state.step))
        frames = _batch_frames(self.data, c.frame_batch, self.gen)
        images = None
        if not self.learned:
            cache = self._baseline_frames()
            images = [cache[id(f)] for f in frames]
        if m.M is not None:
            with _Frozen(m.M):
                bundle = step_update_A(m.A, m.M, frames, self.opt_A, self.gen, images, c.enlarge)
        else:
            bundle = step_update_A(m.A, None, frames, self.opt_A, self.gen, images, c.enlarge)
        self.state.step += 1
        self.state.phase2_steps += 1
        self._record(phase, bundle)

    def _plateaued(self) -> bool:
        w = self.config.plateau_window
        hist = [r["total"] for r in self.state.history if r["phase"] == "1"]
        if w <= 0 or len(hist) < 2 * w:
            return False
        prev = sum(hist[-2 * w : -w]) / w
        last = sum(hist[-w:]) / w
        return abs(last - prev) <= self.config.plateau_tol * max(abs(prev), 1e-12)

    def checkpoint(self, tag: str = ""):
        if self.out_dir is None:
            return
        suffix = f"_{tag}" if tag else ""
        m = self.models
        if self.learned:
            paths = {
                "modifier": self.out_dir / f"modifier{suffix}.pt",
                "classifier": self.out_dir / f"classifier{suffix}.pt",
                "detector": self.out_dir / f"detector{suffix}.pt",
            }
            save_checkpoint(paths["modifier"], "modifier", m.M, m.M.config)
            save_checkpoint(paths["classifier"], "classifier", m.D, m.D.config)
        else:
            paths = {"detector": self.out_dir / f"detector_{self.config.anonymizer_spec.label}{suffix}.pt"}
        save_checkpoint(paths["detector"], "detector", m.A, m.A.config)
        self.state.checkpoints = {k: str(v) for k, v in paths.items()}

    def run(self) -> TrainingState:
        c = self.config
        self.pretrain_detector()
        if self.learned:
            self.pretrain_classifier()
            for _ in range(c.T1):
                self.phase1_step()
                if c.checkpoint_every and self.state.step % c.checkpoint_every == 0:
                    self.checkpoint()
                if self._plateaued():
                    log.info("phase 1 plateaued after %d steps", self.state.phase1_steps)
                    break
            for _ in range(c.T2):
                self.phase2_step()
                if c.checkpoint_every and self.state.step % c.checkpoint_every == 0:
                    self.checkpoint()
        else:
            for _ in range(c.T1 + c.T2):
                self.phase2_step(phase="A")
                if c.checkpoint_every and self.state.step % c.checkpoint_every == 0:
                    self.checkpoint()
        self.checkpoint()
        self.state.rng_state = self.gen.get_state()
        return self.state


def run_training(
    config: TrainingConfig, data: TrainingData, modifier_cfg: ModifierConfig | None = None,
    classifier_cfg: ClassifierConfig | None = None, detector_cfg: DetectorConfig | None = None,
    out_dir=None, models: Models | None = None, on_step=None,
) -> tuple[TrainingState, Models]:
    """Run pretraining, phase 1 (T1 alternating steps) and phase 2 (T2 detector steps)."""
    if models is None:
        modifier_cfg = modifier_cfg or ModifierConfig.desk()
        classifier_cfg = classifier_cfg or ClassifierConfig(
            n_identities=data.n_identities, input_size=(modifier_cfg.work_size,) * 2
        )
        detector_cfg = detector_cfg or DetectorConfig(n_classes=data.n_classes)
        models = build_models(config, modifier_cfg, classifier_cfg, detector_cfg)
    trainer = Trainer(config, data, models, out_dir, on_step)
    return trainer.run(), models


def load_models(ckpt_dir, detector_label: str | None = None, need_detector: bool = True) -> Models:
    """Rebuild M, D and A from a checkpoint directory (A may be skipped)."""
    ckpt_dir = Path(ckpt_dir)
    M = D = A = None
    if (ckpt_dir / "modifier.pt").exists():
        p = load_checkpoint(ckpt_dir / "modifier.pt", "modifier")
        M = ModifierNetwork(ModifierConfig(**p["config"]))
        M.load_state_dict(p["state"])
    if (ckpt_dir / "classifier.pt").exists():
        p = load_checkpoint(ckpt_dir / "classifier.pt", "classifier")
        D = FaceClassifier(ClassifierConfig(**p["config"]))
        D.load_state_dict(p["state"])
    if need_detector:
        name = f"detector_{detector_label}.pt" if detector_label else "detector.pt"
        p = load_checkpoint(ckpt_dir / name, "detector")
        A = ActionDetector(DetectorConfig(**p["config"]))
        A.load_state_dict(p["state"])
    return Models(M, D, A)
