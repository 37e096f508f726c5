import pytest
from dataclasses import replace

from config.experiment_config import ExperimentConfig, dump_config, load_config, parse_config, save_config
from modules.dg_engine import SHIFT_MODES
from modules.errors import ConfigError

from tests.conftest import TINY_BENCH, TINY_MODEL

SAMPLE = """
[benchmark]
sources = clean-dense, scan-noisy-occluded
target = clean-clustered
n_train = 4

[model]
feature_dim = 32
epochs = 5

[engine]
lam = 0.25
negate_distances = yes

[experiment]
modes = none, full, macro-only
seeds = 7
"""


def test_defaults():
    cfg = parse_config("")
    assert cfg.modes == SHIFT_MODES
    assert cfg.seeds == (1, 2, 3)
    assert cfg.engine.lam == 0.5
    assert cfg.model.mask_ratio == 0.7
    assert cfg.benchmark.target == "low-res-jittered"


def test_parse_values():
    cfg = parse_config(SAMPLE)
    assert cfg.benchmark.sources == ("clean-dense", "scan-noisy-occluded")
    assert cfg.benchmark.n_train == 4
    assert cfg.model.feature_dim == 32 and cfg.model.epochs == 5
    assert cfg.engine.lam == 0.25 and cfg.engine.negate_distances is True
    assert cfg.modes == ("none", "full", "macro-only")
    assert cfg.seeds == (7,)


def test_round_trip():
    cfg = parse_config(SAMPLE)
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    assert dump_config(parse_config(text)) == text


def test_round_trip_tiny(tmp_path):
    cfg = ExperimentConfig(benchmark=TINY_BENCH, model=TINY_MODEL, seeds=(1,), out_dir=str(tmp_path))
    save_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg


@pytest.mark.parametrize("text", [
    "[bench]\nseed = 1\n",
    "[model]\nwidth = 3\n",
    "[model]\nepochs = many\n",
    "[engine]\nlam = 1.5\n",
    "[engine]\nprompt_selection = closest\n",
    "[experiment]\nmodes = none, sideways\n",
    "[experiment]\nseeds =\n",
    "[benchmark]\ntarget = clean-dense\n",
    "[benchmark]\ntasks = segmentation\n",
    "[model]\nfeature_dim = 30\nn_heads = 4\n",
    "no section header\n",
])
def test_rejects(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_patch_count_bounded_by_cloud():
    cfg = ExperimentConfig(benchmark=TINY_BENCH, model=replace(TINY_MODEL, patch_count=500))
    with pytest.raises(ConfigError):
        cfg.validate()
