"""Run outputs: deterministic CSV files, the run manifest and parameter
checkpoints.

CSV files are the only data output. Floats are written with shortest
round-trip decimal formatting, so identical runs produce byte-identical
files. The manifest is written before any data row (a truncated run is
detectable by its missing end timestamp, filled in atomically at
completion); timestamps live only in the manifest, never in data files.
"""

import json
import os
import tempfile
from datetime import datetime, timezone

import numpy as np

from kfrtrl.cells import ARCH_NUM_MAPS, CellParams

FORMAT_VERSION = 1


def format_value(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    text = str(v)
    if any(c in text for c in ",\"\n"):
        text = '"' + text.replace('"', '""') + '"'
    return text


class CsvWriter:
    """Header-first CSV writer with round-trip numeric formatting."""

    def __init__(self, path, columns):
        self.path = path
        self.columns = list(columns)
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._fh.write(",".join(self.columns) + "\n")

    def write_row(self, *values):
        if len(values) != len(self.columns):
            raise ValueError("row width does not match the header")
        self._fh.write(",".join(format_value(v) for v in values) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _utc_now():
    return datetime.now(timezone.utc).isoformat()


def write_manifest(out_dir, command, config_snapshot, seed, output_paths,
                   version):
    """Writes manifest.json before any data row; end_time starts null."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "manifest.json")
    body = {
        "command": command,
        "config": config_snapshot,
        "seed": seed,
        "start_time": _utc_now(),
        "end_time": None,
        "outputs": [os.path.basename(p) for p in output_paths],
        "version": version,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def finalize_manifest(path):
    """Fills in end_time via an atomic replace; a manifest whose end_time
    is still null marks a truncated run."""
    with open(path, "r", encoding="utf-8") as fh:
        body = json.load(fh)
    body["end_time"] = _utc_now()
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def save_checkpoint(path, params):
    """Self-describing text container: named tensors with explicit shapes."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"kfrtrl-checkpoint {FORMAT_VERSION}\n")
        fh.write(f"arch {params.arch}\n")
        fh.write(f"n {params.n}\n")
        fh.write(f"m {params.m}\n")
        for name, tensor in (("w", params.w), ("w_out", params.w_out)):
            dims = " ".join(str(d) for d in tensor.shape)
            fh.write(f"tensor {name} {tensor.ndim} {dims}\n")
            flat = tensor.ravel()
            for start in range(0, flat.size, 8):
                fh.write(" ".join(repr(float(x))
                                  for x in flat[start:start + 8]) + "\n")


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split()
    cursor = 0

    def take(k):
        nonlocal cursor
        out = tokens[cursor:cursor + k]
        cursor += k
        return out

    magic, version = take(2)
    if magic != "kfrtrl-checkpoint" or int(version) != FORMAT_VERSION:
        raise ValueError(f"not a kfrtrl checkpoint: {path}")
    header = {}
    for _ in range(3):
        key, value = take(2)
        header[key] = value
    arch = header["arch"]
    if arch not in ARCH_NUM_MAPS:
        raise ValueError(f"unknown arch {arch!r} in checkpoint")
    tensors = {}
    while cursor < len(tokens):
        tag, name, ndim = take(3)
        if tag != "tensor":
            raise ValueError(f"malformed checkpoint near token {cursor}")
        shape = tuple(int(d) for d in take(int(ndim)))
        count = int(np.prod(shape))
        values = np.array([float(x) for x in take(count)])
        tensors[name] = values.reshape(shape)
    return CellParams(arch=arch, n=int(header["n"]), m=int(header["m"]),
                      w=tensors["w"], w_out=tensors["w_out"])
