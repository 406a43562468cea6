"""Metric files, structured records, checkpoints and run manifests.

Formats
-------
* metrics / sweep / comparison tables: comma-separated text with a header
  row; floats are written with ``repr`` so identical runs give identical
  bytes.
* pools, summaries and manifests: JSON with sorted keys.  Infinite values
  (e.g. a threshold on a sub-channel without a GB user) are written as the
  string ``"inf"``.
* checkpoints: a NumPy ``.npz`` archive.  Arrays are stored under their
  path in the nested state (``team/primary`` ...); everything else goes into
  a JSON document stored under ``__meta__``.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__

MANIFEST_VERSION = 1


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            raise ValueError(f"refusing to write non-finite value {v}")
        return repr(v)
    if value is None:
        return ""
    return value


def write_csv(path, columns: list[str], rows) -> int:
    """Write a header plus ``rows``; returns the number of data rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row[c] for c in columns]
            writer.writerow([_cell(v) for v in row])
            count += 1
    return count


def read_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            raise ValueError("refusing to write NaN")
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")
    return obj


def write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


# --------------------------------------------------------------------------
# checkpoints


def _split(obj, prefix: str, arrays: dict):
    if isinstance(obj, np.ndarray):
        arrays[prefix] = obj
        return {"__array__": prefix}
    if isinstance(obj, dict):
        return {k: _split(v, f"{prefix}/{k}", arrays) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_split(v, f"{prefix}/{i}", arrays) for i, v in enumerate(obj)]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _join(obj, arrays):
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            return arrays[obj["__array__"]]
        return {k: _join(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_join(v, arrays) for v in obj]
    return obj


def save_checkpoint(path, state: dict, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    meta = {"state": _split(state, "s", arrays), "config": config, "version": __version__}
    with path.open("wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path) -> tuple[dict, dict | None]:
    """Return ``(state, config_dict)``; raises FileNotFoundError when absent."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return _join(meta["state"], arrays), meta.get("config")


# --------------------------------------------------------------------------
# manifest


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    outputs: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    version: str = field(default_factory=code_version)

    def write(self, path) -> None:
        write_json(path, {
            "manifest_version": MANIFEST_VERSION,
            "command": self.command,
            "config": self.config,
            "seeds": self.seeds,
            "outputs": self.outputs,
            "timings": self.timings,
            "version": self.version,
            "python": platform.python_version(),
            "numpy": np.__version__,
        })


class Stopwatch:
    def __init__(self):
        self.marks: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def mark(self, name: str) -> None:
        now = time.perf_counter()
        self.marks[name] = round(now - self._t0, 3)
        self._t0 = now


def output_root(cli_value: str | None, env: dict | None = None) -> Path:
    env = os.environ if env is None else env
    return Path(cli_value or env.get("SGFNOMA_OUT") or "runs")


def dump_any(obj: Any) -> Any:
    """JSON-ready copy of ``obj`` (for tests and summaries)."""
    return _jsonable(obj)
