import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfdaca import checkpoint as ckpt
from sfdaca.adapt import AdaptConfig, adapt, new_state
from sfdaca.config import ALPHA_GRID, THRESHOLD_GRID, ConfigError, ExperimentConfig
from sfdaca.core.model import ArchitectureMismatchError, clone_model, parameter_checksum
from sfdaca.toy.detector import ToyDetector


def test_model_checkpoint_roundtrip(tmp_path):
    model = ToyDetector(seed=3, channels=(4, 8, 8), strides=(2, 2, 2))
    ckpt.save_model(tmp_path / "m.npz", model, extra={"note": "x"})
    back, meta = ckpt.load_model(tmp_path / "m.npz")
    assert parameter_checksum(back) == parameter_checksum(model)
    assert back.architecture == model.architecture
    assert meta["extra"] == {"note": "x"} and meta["format_version"] == ckpt.FORMAT_VERSION
    assert not list(tmp_path.glob("*.tmp"))


def test_model_checkpoint_architecture_check(tmp_path):
    ckpt.save_model(tmp_path / "m.npz", ToyDetector(channels=(4, 8, 8), strides=(2, 2, 2)))
    with pytest.raises(ArchitectureMismatchError):
        ckpt.load_model(tmp_path / "m.npz", expect_architecture=ToyDetector().architecture)


def test_corrupt_and_missing_checkpoints(tmp_path):
    with pytest.raises(FileNotFoundError):
        ckpt.load_model(tmp_path / "nope.npz")
    (tmp_path / "bad.npz").write_bytes(b"not a zip")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_model(tmp_path / "bad.npz")


def test_adapt_state_resume_matches_uninterrupted_run(tmp_path, tiny_source_model, tiny_world):
    _, target, target_eval = tiny_world
    cfg2 = AdaptConfig(epochs=2, seed=3)
    full_student, full_metrics, _ = adapt(clone_model(tiny_source_model), clone_model(tiny_source_model),
                                          target, cfg2, eval_split=target_eval)

    cfg1 = AdaptConfig(epochs=1, seed=3)
    _, _, state = adapt(clone_model(tiny_source_model), clone_model(tiny_source_model), target, cfg1,
                        eval_split=target_eval)
    ckpt.save_adapt_state(tmp_path / "e1.npz", state)
    resumed = ckpt.load_adapt_state(tmp_path / "e1.npz", cfg2)
    assert resumed.epoch == 1
    student, metrics, _ = adapt(resumed.student, resumed.teacher, target, cfg2, eval_split=target_eval,
                                state=resumed)
    assert metrics.to_csv() == full_metrics.to_csv()
    assert parameter_checksum(student) == parameter_checksum(full_student)


def test_adapt_state_rejects_different_config(tmp_path, tiny_source_model):
    state = new_state(clone_model(tiny_source_model), clone_model(tiny_source_model), AdaptConfig())
    ckpt.save_adapt_state(tmp_path / "s.npz", state)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_adapt_state(tmp_path / "s.npz", AdaptConfig(alpha=0.5))
    # epoch count may change, which is what resuming a longer run needs
    ckpt.load_adapt_state(tmp_path / "s.npz", AdaptConfig(epochs=20))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_model(tmp_path / "s.npz")


# -- config --------------------------------------------------------------------------


def test_default_grids():
    cfg = ExperimentConfig()
    assert cfg.ablation.threshold_grid == THRESHOLD_GRID == (0.1, 0.3, 0.5, 0.7, 0.9, 0.95)
    assert cfg.ablation.alpha_grid == ALPHA_GRID == (0.3, 0.5, 0.7, 0.8, 0.9, 0.95, 0.99)
    assert cfg.adapt.learning_rate == 1e-3 and cfg.adapt.momentum == 0.9 and cfg.adapt.epochs == 12
    assert cfg.eval_every == 5
    assert cfg.world.shift.kind == "fog" and cfg.world.shift.severity == 0.8


def test_yaml_roundtrip_default(tmp_path):
    cfg = ExperimentConfig()
    cfg.save(tmp_path / "c.yaml")
    assert ExperimentConfig.load(tmp_path / "c.yaml") == cfg


@settings(max_examples=60, deadline=None)
@given(alpha=st.floats(0.01, 1.0), thr=st.floats(0.01, 0.99), lr=st.floats(1e-6, 1.0),
       seeds=st.lists(st.integers(0, 2**31), min_size=1, max_size=4, unique=True),
       kinds=st.sets(st.sampled_from(["horizontal_flip", "scale_jitter", "color_jitter", "grayscale",
                                      "gaussian_blur"])),
       severity=st.floats(0, 1), daca=st.booleans())
def test_yaml_roundtrip_is_identity(alpha, thr, lr, seeds, kinds, severity, daca):
    cfg = ExperimentConfig.from_dict({
        "adapt": {"alpha": alpha, "selection_confidence": thr, "learning_rate": lr, "enable_daca": daca},
        "augment": {"kinds": sorted(kinds)},
        "world": {"shift": {"kind": "fog", "severity": severity}},
        "seeds": seeds,
    })
    assert ExperimentConfig.from_yaml(cfg.to_yaml()) == cfg


def test_partial_sections_keep_other_defaults():
    cfg = ExperimentConfig.from_yaml("world:\n  shift:\n    severity: 0.5\nadapt:\n  learning_rate: 1e-4\n")
    assert cfg.world.shift.kind == "fog" and cfg.world.shift.severity == 0.5
    assert cfg.adapt.learning_rate == 1e-4 and cfg.adapt.alpha == 0.9


@pytest.mark.parametrize("text,path", [
    ("adapt:\n  alpha: 1.5\n", "adapt.alpha"),
    ("adapt:\n  alpah: 0.5\n", "adapt.alpah"),
    ("world:\n  shift:\n    severity: 2\n", "world.shift.severity"),
    ("world:\n  shift:\n    kind: rain\n", "world.shift.kind"),
    ("augment:\n  scale_range: [0.5, 1.0]\n", "augment.scale_range"),
    ("seeds: [0, zero]\n", "seeds[1]"),
    ("adapt:\n  enable_daca: 1\n", "adapt.enable_daca"),
    ("adapt: 3\n", "adapt"),
    ("pretrain:\n  epochs: 2.5\n", "pretrain.epochs"),
    ("seeds: [1, 1]\n", "seeds"),
    ("[1, 2]\n", "<root>"),
    ("adapt: {alpha: [\n", "<root>"),
])
def test_invalid_config_names_key_path(text, path):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_yaml(text)
    assert info.value.key_path == path


def test_adapt_config_composition():
    cfg = ExperimentConfig.from_dict({"adapt": {"alpha": 0.7}, "eval_every": 9})
    a = cfg.adapt_config(seed=5, enable_teacher=False)
    assert (a.alpha, a.seed, a.eval_every, a.enable_teacher) == (0.7, 5, 9, False)
    assert a.augment == cfg.augment
    assert ckpt.config_hash(a) == ckpt.config_hash(cfg.adapt_config(seed=5, enable_teacher=False))
    assert ckpt.config_hash(a) != ckpt.config_hash(cfg.adapt_config(seed=6, enable_teacher=False))


def test_detector_kwargs_build_model():
    model = ToyDetector(**ExperimentConfig().detector_kwargs())
    assert model.architecture == ToyDetector().architecture
    assert np.isclose(model.loss_scale, 0.05)
