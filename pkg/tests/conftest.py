import hypothesis
import pytest
import torch

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")

torch.use_deterministic_algorithms(True)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    from faceanon.synthetic import SyntheticConfig, make_synthetic

    out = tmp_path_factory.mktemp("toy")
    make_synthetic(out, SyntheticConfig(
        n_identities=4, n_faces=8, n_frames=4, n_eval_frames=3, n_pairs=8, n_pair_renders=2,
        face_size=16, frame_size=32, seed=3,
    ))
    return out


@pytest.fixture(scope="session")
def toy_data(toy_dir):
    from faceanon.trainer import load_training_data

    return load_training_data(toy_dir / "faces.jsonl", toy_dir / "frames.jsonl", 16)


def tiny_configs(data):
    from faceanon.action_detection import DetectorConfig
    from faceanon.face_identity import ClassifierConfig
    from faceanon.modifier import ModifierConfig

    return dict(
        modifier_cfg=ModifierConfig(n_blocks=1, base_channels=4, work_size=16),
        classifier_cfg=ClassifierConfig(n_identities=data.n_identities, input_size=(16, 16), embed_dim=8,
                                        channels=(4, 8)),
        detector_cfg=DetectorConfig(n_classes=data.n_classes, channels=(4, 8), strides=(2, 2),
                                    anchor_sizes=(8.0, 16.0), anchor_ratios=(1.0,), hidden=16, pool_size=3,
                                    rpn_batch=16, roi_batch=16, post_nms_train=8, post_nms_test=8),
    )


@pytest.fixture
def tiny_models(toy_data):
    from faceanon.trainer import TrainingConfig, build_models

    cfgs = tiny_configs(toy_data)
    return build_models(TrainingConfig(seed=0), cfgs["modifier_cfg"], cfgs["classifier_cfg"], cfgs["detector_cfg"])


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
