"""Shared fixtures: a session-wide cache of training runs and acceptance reporting.

Acceptance criteria reuse each other's training runs (the default dueling run
for seed 0 feeds the convergence, dueling-advantage, cluster-size and baseline
checks).  Runs are cached in memory for the session, keyed by the full
configuration and seed.  Setting ``SGFNOMA_ACCEPT_CACHE=<dir>`` also keeps the
final checkpoints on disk so a second session can skip retraining; the default
is to retrain everything.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import pytest

from sgfnoma import persist
from sgfnoma.config import ExperimentConfig
from sgfnoma.training import Trainer, TrainingResult

_RUNS: dict[tuple[str, int], TrainingResult] = {}
_REPORT: dict[int, tuple[bool, str]] = {}


def _key(cfg: ExperimentConfig, seed: int) -> str:
    blob = json.dumps(persist.dump_any(cfg.to_dict()), sort_keys=True)
    return hashlib.sha1(f"{blob}|{seed}".encode()).hexdigest()[:16]


def cached_training(cfg: ExperimentConfig, seed: int | None = None) -> TrainingResult:
    """``run_training`` with reuse across the whole session."""
    seed = cfg.seed if seed is None else seed
    key = (_key(cfg, seed), seed)
    if key in _RUNS:
        return _RUNS[key]
    disk = os.environ.get("SGFNOMA_ACCEPT_CACHE")
    path = Path(disk) / f"{key[0]}.npz" if disk else None
    if path is not None and path.exists():
        state, _ = persist.load_checkpoint(path)
        trainer = Trainer.from_state(cfg, state)
    else:
        t0 = time.perf_counter()
        trainer = Trainer(cfg, seed).run()
        print(f"trained {cfg.algorithm} agents={cfg.num_agents} actions={cfg.network.num_actions} "
              f"seed={seed} in {time.perf_counter() - t0:.0f}s")
        if path is not None:
            persist.save_checkpoint(path, trainer.state_dict(), cfg.to_dict())
    result = TrainingResult(cfg, seed, trainer.team, trainer.metrics, trainer.topology)
    _RUNS[key] = result
    return result


@pytest.fixture(scope="session")
def train():
    return cached_training


@pytest.fixture(scope="session")
def report():
    """``report(n, ok, detail)`` records the verdict for criterion ``n`` and asserts it."""

    def _report(number: int, ok: bool, detail: str = "") -> None:
        _REPORT[number] = (bool(ok), detail)
        assert ok, f"criterion {number} failed: {detail}"

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, max(12, *_REPORT) + 1):
        if number not in _REPORT:
            terminalreporter.write_line(f"CRITERION {number:>2}: NO VERDICT  (not run or errored before a verdict)")
            continue
        ok, detail = _REPORT[number]
        terminalreporter.write_line(f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
