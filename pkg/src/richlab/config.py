"""Flat TOML experiment configs.

Keys (all optional)::

    gauge = "mup"                 # mup | rescaling | stp | standard
    richness = [0.0, 0.25, 0.5]
    off_scale_allowed = false
    widths = [64, 128, 256, 512, 1024, 2048]
    seeds = 20                    # seed indices 0 .. seeds - 1
    samples = 50                  # probe samples per seed
    n_train = 50                  # training set size (defaults to samples)
    task = "gaussian_linear"      # or gaussian_relu
    depth = 3
    d_in = 10
    d_out = 10
    global_eta = 0.1
    beta = 0.9
    batch_size = 1
    probe_eta = 1.0
    probe_steps = [0]
    train_steps = 50
    quantities = ["rep_update_norm", "uuc.l2"]
    root_seed = 0
    fit_drop_fraction = 0.25

``probe`` runs additionally read ``r``, ``width`` and ``seed`` for the single cell.
"""

from __future__ import annotations

import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .network import OptimizerConfig
from .scaling import SweepConfig

SWEEP_KEYS = {"gauge", "richness", "off_scale_allowed", "widths", "seeds", "samples", "n_train",
              "task", "depth", "d_in", "d_out", "global_eta", "beta", "batch_size", "probe_eta",
              "probe_steps", "train_steps", "quantities", "root_seed", "fit_drop_fraction"}
PROBE_KEYS = {"r", "width", "seed"}


class ConfigError(ValueError):
    pass


def load_text(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return p.read_text(encoding="utf-8")


def parse_config(text: str, extra_keys=frozenset()) -> tuple[SweepConfig, dict]:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    unknown = set(raw) - SWEEP_KEYS - set(extra_keys)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kw = {k: v for k, v in raw.items() if k in SWEEP_KEYS}
    for k in ("richness", "widths", "probe_steps", "quantities"):
        if k in kw:
            kw[k] = tuple(kw[k])
    try:
        opt = OptimizerConfig(kw.pop("global_eta", 0.1), kw.pop("beta", 0.9), kw.pop("batch_size", 1))
        cfg = SweepConfig(optimizer=opt, **kw)
    except KeyError as exc:
        raise ConfigError(f"unknown quantity: {exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg, {k: raw[k] for k in extra_keys if k in raw}
