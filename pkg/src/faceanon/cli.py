"""``faceanon`` command line: train, anonymize, evaluate, make-synthetic, ablate-d."""

from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import torch

from .baselines import AnonymizerSpec, apply_anonymizer, face_regions
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config
from .core_data import ManifestError, filter_face_detections, load_image, load_manifest, save_image
from .evaluation import (
    TradeoffPoint,
    ablation_d_accuracy,
    evaluate_method,
    per_class_csv,
    plot_tradeoff,
    tradeoff_csv,
)
from .synthetic import SyntheticConfig, make_synthetic
from .trainer import (
    TrainingAborted,
    atomic_write,
    history_csv,
    load_frames,
    load_models,
    load_training_data,
    run_training,
)

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3

def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.with_seed(args.seed)
    return cfg


def _method(args, cfg: ExperimentConfig | None = None, default: str = "learned") -> AnonymizerSpec:
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    try:
        return AnonymizerSpec.parse(args.method or default, seed)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if args.out else cfg.output_dir


def _ckpt_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.checkpoint_dir) if args.checkpoint_dir else cfg.output_dir


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg.data.check("faces", "frames")
    if args.method:
        spec = _method(args, cfg)
        cfg.training.anonymizer = spec.method
        cfg.training.anonymizer_param = spec.param
    out = _out_dir(args, cfg)
    data = load_training_data(
        cfg.data.faces, cfg.data.frames, cfg.modifier.work_size,
        face_threshold=cfg.data.face_threshold,
        min_side=cfg.detector.min_side, max_side=cfg.detector.max_side,
    )
    state, _ = run_training(
        cfg.training, data, cfg.modifier, cfg.classifier_config(data.n_identities),
        cfg.detector_config(data.n_classes), out_dir=out,
    )
    label = cfg.training.anonymizer_spec.label
    name = "loss.csv" if label == "learned" else f"loss_{label}.csv"
    atomic_write(out / name, history_csv(state.history))
    print(f"trained {state.phase1_steps} phase-1 and {state.phase2_steps} phase-2 steps -> {out}")
    return EXIT_OK


def cmd_anonymize(args) -> int:
    cfg = _config(args) if args.config else None
    spec = _method(args, cfg, default="none")
    manifest_path = args.input or (cfg.data.eval_frames if cfg else None)
    if manifest_path is None:
        raise ConfigError("give --input or a config with data.eval_frames")
    if not Path(manifest_path).is_file():
        raise ConfigError(f"no such manifest: {manifest_path}")
    manifest = load_manifest(manifest_path, "frames")
    M = None
    if spec.method == "learned":
        ckpt = Path(args.checkpoint_dir) if args.checkpoint_dir else (cfg.output_dir if cfg else None)
        if ckpt is None or not (ckpt / "modifier.pt").is_file():
            raise CheckpointError(f"the learned anonymizer needs {ckpt or '<checkpoint-dir>'}/modifier.pt")
        M = load_models(ckpt, need_detector=False).M.eval()
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threshold = cfg.data.face_threshold if cfg else 0.8
    enlarge = cfg.training.enlarge if cfg else 1.6
    for i, rec in enumerate(manifest):
        target = out / Path(rec.image_ref).name
        faces = [d.box for d in filter_face_detections(rec.faces, threshold)]
        if spec.method == "none" or not faces:
            shutil.copyfile(rec.image_ref, target)
            regions = []
        else:
            image = load_image(rec.image_ref)
            frame_spec = AnonymizerSpec(spec.method, spec.param, spec.seed + 1000 * i)
            with torch.no_grad():
                result = apply_anonymizer(image, faces, frame_spec, M, enlarge)
            save_image(result, target)
            regions = face_regions(image, faces, enlarge)
        sidecar = {
            "image": target.name,
            "source": str(rec.image_ref),
            "method": spec.label,
            "faces": [b.to_list() for b in faces],
            "regions": [b.to_list() for b in regions],
        }
        atomic_write(target.with_suffix(".json"), json.dumps(sidecar, indent=2) + "\n")
    print(f"anonymized {len(manifest)} images with {spec.label} -> {out}")
    return EXIT_OK


def _eval_inputs(cfg: ExperimentConfig):
    cfg.data.check("eval_frames", "pairs")
    frames = load_frames(
        load_manifest(cfg.data.eval_frames, "frames"), cfg.data.face_threshold,
        cfg.detector.min_side, cfg.detector.max_side,
    )
    pairs = load_manifest(cfg.data.pairs, "pairs").records
    faces = load_manifest(cfg.data.faces, "faces").records if cfg.data.faces.is_file() else None
    return frames, pairs, faces


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    specs = [_method(args, cfg)] if args.method else cfg.methods
    ckpt = _ckpt_dir(args, cfg)
    frames, pairs, faces = _eval_inputs(cfg)
    learned = load_models(ckpt, need_detector=any(s.method == "learned" for s in specs))
    if learned.D is None:
        raise CheckpointError(f"no classifier checkpoint in {ckpt}")
    results = []
    for spec in specs:
        if spec.method == "learned":
            models = learned
            if models.M is None:
                raise CheckpointError(f"no modifier checkpoint in {ckpt}")
        else:
            models = load_models(ckpt, detector_label=spec.label)
        M = models.M.eval() if spec.method == "learned" else None
        res = evaluate_method(spec, models.A.eval(), learned.D.eval(), frames, pairs, M, faces,
                              cfg.training.enlarge)
        print(f"{res.point.method}: verification_error={res.point.verification_error:.4f} "
              f"map={res.point.map:.4f}")
        results.append(res)
    out = _out_dir(args, cfg)
    atomic_write(out / "tradeoff.csv", tradeoff_csv([r.point for r in results]))
    atomic_write(out / "per_class.csv", per_class_csv(results, _class_names(cfg)))
    if cfg.plot:
        plot_tradeoff([r.point for r in results], out / "tradeoff.png")
    return EXIT_OK


def _class_names(cfg: ExperimentConfig):
    meta = Path(cfg.data.frames).parent / "dataset.json"
    if meta.is_file():
        return json.loads(meta.read_text()).get("actions")
    return None


def cmd_make_synthetic(args) -> int:
    cfg = _config(args) if args.config else None
    syn = cfg.synthetic if cfg else SyntheticConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.n_identities is not None:
        overrides["n_identities"] = args.n_identities
    if args.n_frames is not None:
        overrides["n_frames"] = args.n_frames
    try:
        syn = SyntheticConfig(**{**syn.__dict__, **overrides})
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if args.out:
        out = Path(args.out)
    elif cfg:
        out = Path(cfg.data.faces).parent
    else:
        raise ConfigError("--out is required without --config")
    make_synthetic(out, syn)
    print(f"wrote synthetic dataset ({syn.n_identities} identities, {syn.n_frames} frames) -> {out}")
    return EXIT_OK


def cmd_ablate_d(args) -> int:
    cfg = _config(args)
    ckpt = _ckpt_dir(args, cfg)
    for name in ("classifier.pt", "modifier.pt"):
        if not (ckpt / name).is_file():
            raise CheckpointError(f"missing {ckpt / name}")
    cfg.data.check("pairs")
    models = load_models(ckpt, need_detector=False)
    pairs = load_manifest(cfg.data.pairs, "pairs").records
    faces = load_manifest(cfg.data.faces, "faces").records if cfg.data.faces.is_file() else None
    orig, modified = ablation_d_accuracy(models.D.eval(), models.M.eval(), pairs, faces)
    print(f"original_accuracy: {orig:.6f}")
    print(f"modified_accuracy: {modified:.6f}")
    out = _out_dir(args, cfg)
    path = out / "tradeoff.csv"
    rows = [TradeoffPoint("D-original", 1.0 - orig, math.nan), TradeoffPoint("D-modified", 1.0 - modified, math.nan)]
    text = tradeoff_csv(rows)
    if path.is_file():
        text = path.read_text() + text.split("\n", 1)[1]
    atomic_write(path, text)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "anonymize": cmd_anonymize,
    "evaluate": cmd_evaluate,
    "make-synthetic": cmd_make_synthetic,
    "ablate-d": cmd_ablate_d,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faceanon", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment YAML")
        p.add_argument("--seed", type=int)
        p.add_argument("--method", help="anonymizer, e.g. learned, mask, blur:8, noise:0.3")
        p.add_argument("--checkpoint-dir")
        p.add_argument("--out")
        if name == "anonymize":
            p.add_argument("--input", help="frames manifest with face boxes")
        if name == "make-synthetic":
            p.add_argument("--n-identities", type=int)
            p.add_argument("--n-frames", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ManifestError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, FloatingPointError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
