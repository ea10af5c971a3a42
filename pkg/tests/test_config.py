"""Run-config parsing, formatting, and validation."""
import numpy as np
import pytest

from rdvit.config import (
    RunConfig,
    format_run_config,
    parse_run_config,
    read_run_config,
    write_run_config,
)
from rdvit.errors import ConfigError


def test_defaults_round_trip():
    cfg = RunConfig()
    assert parse_run_config(format_run_config(cfg)) == cfg


def test_round_trip_preserves_every_field():
    cfg = RunConfig(
        seed=7,
        precision="f64",
        variant="rdvit_tiny_moe",
        image_size=(32, 48),
        patch_size=8,
        dim=96,
        heads=3,
        loops=6,
        lora_rank=2,
        act_threshold=0.9,
        moe=True,
        moe_experts=4,
        dropout=0.0,
        noise_sigma=0.25,
        augment=("intensity", "noise"),
        epochs=3,
        lr=5e-4,
        lr_min=1e-5,
    )
    assert parse_run_config(format_run_config(cfg)) == cfg


def test_parse_overrides_and_comments():
    text = """
    # full-line comment
    seed = 9
    dim = 96  # trailing comment
    heads = 3

    moe = true
    augment = intensity, noise
    image_size = 32, 32
    """
    cfg = parse_run_config(text)
    assert cfg.seed == 9
    assert cfg.dim == 96
    assert cfg.moe is True
    assert cfg.augment == ("intensity", "noise")
    assert cfg.image_size == (32, 32)


def test_parse_empty_augment():
    assert parse_run_config("augment =\n").augment == ()


@pytest.mark.parametrize(
    "bad,match",
    [
        ("dim 96", "line 1: expected"),
        ("not_a_key = 3", "unknown key"),
        ("seed = 1\nseed = 2", "line 2: duplicate"),
        ("dim = twelve", "bad value for 'dim'"),
        ("moe = perhaps", "bad value for 'moe'"),
        ("lr = fast", "bad value for 'lr'"),
        ("image_size = a, b", "bad value for 'image_size'"),
    ],
)
def test_parse_errors(bad, match):
    with pytest.raises(ConfigError, match=match):
        parse_run_config(bad)


def test_parse_reports_correct_line():
    text = "seed = 1\ndim = 96\nbogus = 2\n"
    with pytest.raises(ConfigError, match="line 3"):
        parse_run_config(text)


def test_base_config_layering():
    base = parse_run_config("dim = 96\nheads = 3\n")
    out = parse_run_config("heads = 2\ndim = 48\n", base=base)
    assert (out.dim, out.heads) == (48, 2)
    assert out.seed == base.seed


@pytest.mark.parametrize(
    "text",
    [
        "precision = f16",
        "val_fraction = 1.0",
        "data_fraction = 0.0",
        "epochs = 0",
        "lr = 0.0",
        "lr_min = 0.01\nlr = 0.001",
        "augment = elastic",
        "data_kind = teeth3d\nimage_size = 16, 32, 32\nhead = instance\nnum_classes = 33\naugment = hflip",
        "dim = 25",
        "loops = 0",
    ],
)
def test_validation_rejects(text):
    with pytest.raises(ConfigError):
        parse_run_config(text)


def test_teeth_instance_config_accepted():
    cfg = parse_run_config(
        "data_kind = teeth3d\nimage_size = 16, 32, 32\nhead = instance\n"
        "num_classes = 33\naugment = rotate_z\n"
    )
    assert cfg.head == "instance"
    assert cfg.model_config().num_classes == 33
    assert cfg.synth_spec().kind == "teeth3d"


def test_model_config_adapter_fields():
    cfg = parse_run_config("dim = 96\nheads = 3\nloops = 6\nmoe = true\nmoe_experts = 4\n")
    mc = cfg.model_config()
    assert (mc.dim, mc.heads, mc.loops) == (96, 3, 6)
    assert mc.moe is True and mc.moe_experts == 4
    assert mc.image_size == tuple(cfg.image_size)


def test_synth_spec_adapter_fields():
    cfg = parse_run_config("noise_sigma = 0.3\nn_samples = 7\nseed = 3\n")
    spec = cfg.synth_spec()
    assert spec.noise_sigma == 0.3
    assert spec.n_samples == 7
    assert spec.seed == 3
    assert spec.kind == "cardiac2d"


def test_file_round_trip(tmp_path):
    cfg = RunConfig(dim=96, heads=3, noise_sigma=0.25)
    path = tmp_path / "run.cfg"
    write_run_config(path, cfg)
    assert read_run_config(path) == cfg


def test_float_formatting_is_lossless():
    cfg = RunConfig(lr=3.0000000000000004e-4, noise_sigma=0.1 + 0.2)
    out = parse_run_config(format_run_config(cfg))
    assert out.lr == cfg.lr
    assert out.noise_sigma == cfg.noise_sigma
