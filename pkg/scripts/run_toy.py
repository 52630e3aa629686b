"""Run the full toy experiment: data, learned and baseline training, evaluation, D ablation.

    python3 scripts/run_toy.py [--config configs/toy.yaml] [--random-target]

Everything goes through the ``faceanon`` command line so the outputs match what
a user would get by calling the verbs by hand.
"""

from __future__ import annotations

import argparse
import sys
import tempfile
import time
from pathlib import Path

import yaml

from faceanon.cli import main as faceanon
from faceanon.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def step(*args) -> None:
    t0 = time.perf_counter()
    print(f"$ faceanon {' '.join(map(str, args))}", flush=True)
    code = faceanon([str(a) for a in args])
    if code != 0:
        sys.exit(code)
    print(f"  ({time.perf_counter() - t0:.0f}s)", flush=True)


def random_target_config(config: Path, out: Path) -> Path:
    raw = yaml.safe_load(config.read_text())
    base = config.parent.resolve()
    for k, v in raw["data"].items():
        if k != "face_threshold" and not Path(v).is_absolute():
            raw["data"][k] = str((base / v).resolve())
    raw["output_dir"] = str(out)
    raw.setdefault("training", {})["modifier_objective"] = "random_target"
    raw.setdefault("evaluate", {})["methods"] = ["none", "learned"]
    path = Path(tempfile.mkdtemp()) / "random_target.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def run() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, default=ROOT / "configs" / "toy.yaml")
    parser.add_argument("--random-target", action="store_true", help="also train the random-target ablation")
    args = parser.parse_args()

    cfg = load_config(args.config)
    if not cfg.data.faces.is_file():
        step("make-synthetic", "--config", args.config)
    step("train", "--config", args.config)
    for spec in cfg.methods:
        if spec.method != "learned":
            step("train", "--config", args.config, "--method", spec.label)
    step("evaluate", "--config", args.config)
    step("ablate-d", "--config", args.config)

    if args.random_target:
        rt = random_target_config(args.config, cfg.output_dir / "random_target")
        step("train", "--config", rt)
        step("train", "--config", rt, "--method", "none")
        step("evaluate", "--config", rt)

    print((cfg.output_dir / "tradeoff.csv").read_text())


if __name__ == "__main__":
    run()
