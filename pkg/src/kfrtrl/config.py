"""Flat key-value run configuration (INI sections, one per module).

Every key has a typed default below; files may override any subset and
unknown keys are rejected. The fully resolved mapping is what goes into a
run's manifest, and together with the seed it reproduces the run
bit-exactly.
"""

import configparser
import copy

DEFAULTS = {
    "cell": {
        "arch": "rhn",
        "n": 32,
        "scale": 1.0,
        "gate_bias": -1.0,
    },
    "train": {
        "estimator": "kf-rtrl",
        "learning_rate": 10 ** -2.5,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "batch_size": 32,
        "reset_prob": 0.0,
        "seed": 1,
        "max_steps": 60000,
        "horizon": 25,
        "avg_count": 1,
    },
    "copy": {
        "max_sequences": 150000,
        "threshold": 0.15,
        "window": 100,
    },
    "lm": {
        "valid_every": 1000,
        "valid_limit": 2000,
    },
    "analysis": {
        "units": (8, 16, 32, 64),
        "time_units": 32,
        "time_steps": 2000,
        "unit_steps": 100,
        "repeats": 100,
        "record_every": 20,
        "variance_t": 10,
        "variance_samples": 1500,
        "gate_bias": 0.0,
    },
    "check": {
        "oracle_configs": 8,
        "fd_configs": 12,
        "unbiased_samples": 20000,
        "uoro_variance_samples": 30000,
        "rel_tol": 1e-8,
        "fd_tol": 1e-5,
        "exact_tol": 1e-12,
    },
}


def _convert(raw, default, section, key):
    if isinstance(default, tuple):
        return tuple(int(part) for part in raw.replace(",", " ").split())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path=None):
    """Defaults overlaid with an optional INI file; typed values."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    for section in parser.sections():
        if section not in cfg:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in cfg[section]:
                raise ValueError(f"unknown config key {key!r} in [{section}]")
            cfg[section][key] = _convert(raw, cfg[section][key], section, key)
    return cfg


def snapshot(cfg):
    """JSON-friendly copy of a resolved config."""
    return {sec: {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in body.items()}
            for sec, body in cfg.items()}
