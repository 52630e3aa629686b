import csv
import json

import pytest
import torch
import yaml

from faceanon.checkpoint import load_checkpoint, parameter_hash
from faceanon.cli import main
from faceanon.config import ConfigError, load_config
from faceanon.core_data import load_image, load_manifest
from faceanon.evaluation import TRADEOFF_COLUMNS, ablation_d_accuracy
from faceanon.face_identity import ClassifierConfig, FaceClassifier
from faceanon.image_ops import pixel_extent
from faceanon.baselines import face_regions


TINY = {
    "modifier": {"n_blocks": 1, "base_channels": 4, "work_size": 16},
    "classifier": {"embed_dim": 8, "channels": [4, 8]},
    "detector": {"profile": "native", "channels": [4, 8], "strides": [2, 2], "anchor_sizes": [8.0, 16.0],
                 "anchor_ratios": [1.0], "hidden": 16, "pool_size": 3, "rpn_batch": 16, "roi_batch": 16,
                 "post_nms_train": 8, "post_nms_test": 8},
}


def write_config(tmp_path, data_dir, **sections):
    cfg = {
        "seed": 7,
        "output_dir": str(tmp_path / "run"),
        "data": {
            "faces": str(data_dir / "faces.jsonl"),
            "frames": str(data_dir / "frames.jsonl"),
            "eval_frames": str(data_dir / "frames_eval.jsonl"),
            "pairs": str(data_dir / "pairs.jsonl"),
        },
        "training": {"T1": 2, "T2": 1, "face_batch": 4, "frame_batch": 2},
        **TINY,
        "evaluate": {"methods": ["none", "learned", "mask"]},
    }
    for k, v in sections.items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_unknown_key_rejected(tmp_path, toy_dir):
    path = write_config(tmp_path, toy_dir, training={"T3": 5})
    with pytest.raises(ConfigError, match="T3"):
        load_config(path)
    assert main(["train", "--config", str(path)]) == 2


def test_relative_paths_and_env_overrides(tmp_path, toy_dir, monkeypatch):
    path = tmp_path / "rel.yaml"
    path.write_text(yaml.safe_dump({"data": {"faces": "d/faces.jsonl", "frames": "d/frames.jsonl"},
                                    "output_dir": "out"}))
    cfg = load_config(path)
    assert cfg.data.faces == tmp_path / "d" / "faces.jsonl"
    assert cfg.output_dir == tmp_path / "out"
    monkeypatch.setenv("FACEANON_DATA_ROOT", str(toy_dir))
    monkeypatch.setenv("FACEANON_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    cfg = load_config(path)
    assert cfg.data.faces == toy_dir / "d" / "faces.jsonl"
    assert cfg.output_dir == tmp_path / "elsewhere"


def test_missing_manifest_is_config_error(tmp_path, toy_dir):
    path = write_config(tmp_path, toy_dir, data={"frames": str(tmp_path / "nope.jsonl")})
    assert main(["train", "--config", str(path)]) == 2
    assert not (tmp_path / "run").exists()


def test_empty_run_writes_initial_checkpoints(tmp_path, toy_dir):
    from faceanon.trainer import TrainingConfig, build_models
    from faceanon.action_detection import DetectorConfig
    from faceanon.modifier import ModifierConfig

    path = write_config(tmp_path, toy_dir, training={"T1": 0, "T2": 0})
    assert main(["train", "--config", str(path)]) == 0
    run = tmp_path / "run"
    cfg = load_config(path)
    fresh = build_models(TrainingConfig(seed=7), ModifierConfig(**TINY["modifier"]),
                         cfg.classifier_config(4), cfg.detector_config(3))
    for name, model in (("modifier", fresh.M), ("classifier", fresh.D), ("detector", fresh.A)):
        payload = load_checkpoint(run / f"{name}.pt", name)
        model.load_state_dict(payload["state"])
    again = build_models(TrainingConfig(seed=7), ModifierConfig(**TINY["modifier"]),
                         cfg.classifier_config(4), cfg.detector_config(3))
    assert parameter_hash(fresh.M) == parameter_hash(again.M)
    assert parameter_hash(fresh.A) == parameter_hash(again.A)
    assert (run / "loss.csv").read_text().strip() == ",".join(
        ("iter", "phase", "rpn_cls", "rpn_reg", "rcnn_cls", "rcnn_reg", "adv", "l1", "total"))


def test_train_and_evaluate_are_reproducible(tmp_path, toy_dir):
    outputs = []
    for k in range(2):
        path = write_config(tmp_path, toy_dir, output_dir=str(tmp_path / f"run{k}"))
        run = tmp_path / f"run{k}"
        assert main(["train", "--config", str(path)]) == 0
        assert main(["train", "--config", str(path), "--method", "none"]) == 0
        assert main(["train", "--config", str(path), "--method", "mask"]) == 0
        assert main(["evaluate", "--config", str(path)]) == 0
        outputs.append({n: (run / n).read_bytes()
                        for n in ("loss.csv", "loss_none.csv", "loss_mask.csv", "tradeoff.csv", "per_class.csv")})
    assert outputs[0] == outputs[1]
    rows = list(csv.reader(outputs[0]["tradeoff.csv"].decode().splitlines()))
    assert tuple(rows[0]) == TRADEOFF_COLUMNS
    assert [r[0] for r in rows[1:]] == ["none", "learned", "mask"]


def test_seed_flag_changes_history(tmp_path, toy_dir):
    path = write_config(tmp_path, toy_dir)
    assert main(["train", "--config", str(path), "--seed", "1", "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(path), "--seed", "2", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "loss.csv").read_text() != (tmp_path / "b" / "loss.csv").read_text()


def test_evaluate_without_checkpoints_fails(tmp_path, toy_dir):
    path = write_config(tmp_path, toy_dir)
    assert main(["evaluate", "--config", str(path), "--checkpoint-dir", str(tmp_path / "empty")]) == 2


def _manifest_with_one_face(toy_dir):
    m = load_manifest(toy_dir / "frames_eval.jsonl", "frames")
    for rec in m:
        if len([f for f in rec.faces if f.score > 0.8 or f.secondary_verified]) == 1:
            return rec
    pytest.skip("toy eval split has no single-face frame")


def test_anonymize_none_is_byte_copy(tmp_path, toy_dir):
    out = tmp_path / "anon"
    assert main(["anonymize", "--method", "none", "--input", str(toy_dir / "frames_eval.jsonl"),
                 "--out", str(out)]) == 0
    for rec in load_manifest(toy_dir / "frames_eval.jsonl", "frames"):
        name = rec.image_ref.name
        assert (out / name).read_bytes() == rec.image_ref.read_bytes()
        side = json.loads((out / name).with_suffix(".json").read_text())
        assert side["method"] == "none" and side["regions"] == []


def test_anonymize_mask_zeroes_region(tmp_path, toy_dir):
    rec = _manifest_with_one_face(toy_dir)
    out = tmp_path / "anon"
    assert main(["anonymize", "--method", "mask", "--input", str(toy_dir / "frames_eval.jsonl"),
                 "--out", str(out)]) == 0
    img = load_image(out / rec.image_ref.name)
    side = json.loads((out / rec.image_ref.name).with_suffix(".json").read_text())
    assert len(side["regions"]) == 1
    orig = load_image(rec.image_ref)
    face = [f.box for f in rec.faces if f.score > 0.8 or f.secondary_verified]
    (region,) = face_regions(orig, face)
    c0, r0, c1, r1 = pixel_extent(region)
    assert torch.all(img[:, r0 : r1 + 1, c0 : c1 + 1] == 0)
    keep = torch.ones(orig.shape[1:], dtype=torch.bool)
    keep[r0 : r1 + 1, c0 : c1 + 1] = False
    assert torch.equal(img[:, keep], orig[:, keep])


def test_anonymize_noise_deterministic(tmp_path, toy_dir):
    for k in range(2):
        assert main(["anonymize", "--method", "noise:0.3", "--seed", "4",
                     "--input", str(toy_dir / "frames_eval.jsonl"), "--out", str(tmp_path / f"n{k}")]) == 0
    for p in (tmp_path / "n0").iterdir():
        assert p.read_bytes() == (tmp_path / "n1" / p.name).read_bytes()


def test_anonymize_learned_needs_checkpoint(tmp_path, toy_dir):
    assert main(["anonymize", "--method", "learned", "--input", str(toy_dir / "frames_eval.jsonl"),
                 "--checkpoint-dir", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2


def test_ablate_d_prints_and_appends(tmp_path, toy_dir, capsys):
    path = write_config(tmp_path, toy_dir)
    assert main(["train", "--config", str(path)]) == 0
    assert main(["evaluate", "--config", str(path), "--method", "learned"]) == 0
    capsys.readouterr()
    assert main(["ablate-d", "--config", str(path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("original_accuracy: ") and lines[1].startswith("modified_accuracy: ")
    rows = list(csv.reader((tmp_path / "run" / "tradeoff.csv").read_text().splitlines()))
    assert [r[0] for r in rows] == ["method", "learned", "D-original", "D-modified"]
    assert rows[2][2] == "" and float(rows[2][1]) == pytest.approx(1 - float(lines[0].split()[1]), abs=1e-6)


class _Identity(torch.nn.Module):
    work_size = 16

    def forward(self, x):
        return x


def test_ablate_identity_modifier_equal(toy_dir):
    torch.manual_seed(0)
    D = FaceClassifier(ClassifierConfig(n_identities=4, input_size=(16, 16), embed_dim=8, channels=(4, 8))).eval()
    pairs = load_manifest(toy_dir / "pairs.jsonl", "pairs").records
    orig, mod = ablation_d_accuracy(D, _Identity(), pairs)
    assert orig == mod


def test_make_synthetic_cli(tmp_path):
    assert main(["make-synthetic", "--out", str(tmp_path / "s"), "--n-identities", "2", "--n-frames", "3",
                 "--seed", "1"]) == 0
    pairs = load_manifest(tmp_path / "s" / "pairs.jsonl", "pairs").records
    assert {p.same for p in pairs} == {True, False}
    assert len(load_manifest(tmp_path / "s" / "frames.jsonl", "frames")) == 3
    assert main(["make-synthetic", "--out", str(tmp_path / "t"), "--n-identities", "1"]) == 2
