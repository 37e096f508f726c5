"""
Experiment configuration file: sectioned, line-oriented `key = value` text.

    [benchmark]
    sources = clean-dense, clean-clustered, scan-noisy-occluded
    target = low-res-jittered
    ...
    [model]
    feature_dim = 128
    ...
    [engine]
    lam = 0.5
    ...
    [experiment]
    modes = none, full
    seeds = 1, 2, 3

dump(parse(text)) is stable, and parse(dump(cfg)) == cfg.
"""

import configparser
from dataclasses import dataclass, field, fields, replace

from modules.dg_engine import PROMPT_SELECTIONS, PROTOTYPE_SCOPES, SHIFT_MODES
from modules.domains import BenchmarkConfig
from modules.errors import ConfigError
from modules.mpm_model import ModelConfig

from config.settings import DGPIC_CONFIG

BENCHMARK_KEYS = ("sources", "target", "tasks", "n_train", "n_test", "n_points", "kinds",
                  "sparse_count", "noise_sigma", "max_angle", "augment", "seed")
LIST_KEYS = {"sources", "tasks", "kinds", "modes", "seeds"}


@dataclass(frozen=True)
class EngineConfig:
    lam: float = 0.5
    negate_distances: bool = False
    prototype_scope: str = "per-task"
    prompt_selection: str = "nearest"


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    modes: tuple = SHIFT_MODES
    seeds: tuple = (1, 2, 3)
    out_dir: str = field(default_factory=lambda: DGPIC_CONFIG["runtime"]["out_dir"])
    baseline: bool = False
    max_eval_samples: int = 0

    def validate(self):
        self.benchmark.validate()
        self.model.validate()
        if self.model.patch_count * self.model.patch_size < 1 or self.model.patch_count > self.benchmark.n_points:
            raise ConfigError("patch_count must not exceed n_points")
        if self.model.patch_size > self.benchmark.n_points:
            raise ConfigError("patch_size must not exceed n_points")
        if not 0.0 <= self.engine.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.engine.lam}")
        if self.engine.prototype_scope not in PROTOTYPE_SCOPES:
            raise ConfigError(f"prototype_scope must be one of {PROTOTYPE_SCOPES}")
        if self.engine.prompt_selection not in PROMPT_SELECTIONS:
            raise ConfigError(f"prompt_selection must be one of {PROMPT_SELECTIONS}")
        for mode in self.modes:
            if mode not in SHIFT_MODES:
                raise ConfigError(f"unknown mode '{mode}', valid modes: {', '.join(SHIFT_MODES)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.max_eval_samples < 0:
            raise ConfigError("max_eval_samples must be >= 0")
        return self


# ==============================
# VALUE CODECS
# ==============================
def _parse_bool(text):
    value = text.strip().lower()
    if value in ("true", "yes", "on", "1"):
        return True
    if value in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(key, text, default):
    if key in LIST_KEYS:
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(int(i) for i in items) if key == "seeds" else tuple(items)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _section_values(parser, section, defaults):
    values = {}
    if not parser.has_section(section):
        return values
    for key, text in parser.items(section):
        if key not in defaults:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        try:
            values[key] = _parse_value(key, text, defaults[key])
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: {e}") from e
    return values


# ==============================
# PARSE / DUMP
# ==============================
def parse_config(text):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    known = {"benchmark", "model", "engine", "experiment"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")

    base = ExperimentConfig()
    bench_defaults = {k: getattr(base.benchmark, k) for k in BENCHMARK_KEYS}
    model_defaults = base.model.to_dict()
    engine_defaults = {f.name: getattr(base.engine, f.name) for f in fields(EngineConfig)}
    exp_defaults = {"modes": base.modes, "seeds": base.seeds, "out_dir": base.out_dir,
                    "baseline": base.baseline, "max_eval_samples": base.max_eval_samples}

    cfg = ExperimentConfig(
        benchmark=replace(base.benchmark, **_section_values(parser, "benchmark", bench_defaults)),
        model=ModelConfig(**{**model_defaults, **_section_values(parser, "model", model_defaults)}),
        engine=replace(base.engine, **_section_values(parser, "engine", engine_defaults)),
        **_section_values(parser, "experiment", exp_defaults),
    )
    return cfg.validate()


def load_config(path):
    try:
        with open(path, "r") as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def dump_config(cfg):
    sections = {
        "benchmark": {k: getattr(cfg.benchmark, k) for k in BENCHMARK_KEYS},
        "model": cfg.model.to_dict(),
        "engine": {f.name: getattr(cfg.engine, f.name) for f in fields(EngineConfig)},
        "experiment": {"modes": cfg.modes, "seeds": cfg.seeds, "out_dir": cfg.out_dir,
                       "baseline": cfg.baseline, "max_eval_samples": cfg.max_eval_samples},
    }
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {_format_value(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


def save_config(cfg, path):
    with open(path, "w") as f:
        f.write(dump_config(cfg))

