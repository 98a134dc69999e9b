"""Experiment reports and deterministic replicate fan-out."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


def worker_count() -> int:
    env = os.environ.get("CMJ_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("CMJ_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _run_chunk(func: Callable, reps: Sequence[int]) -> list:
    return [func(r) for r in reps]


def map_replicates(func: Callable[[int], Any], replicates: int, workers: int | None = None) -> list:
    """``[func(0), ..., func(replicates - 1)]`` computed over a process pool.

    Each replicate draws from its own seed stream, so the result does not
    depend on the worker count.  ``func`` must be picklable.
    """
    workers = worker_count() if workers is None else workers
    if workers <= 1 or replicates < 2:
        return [func(r) for r in range(replicates)]
    n_chunks = min(replicates, 4 * workers)
    bounds = np.linspace(0, replicates, n_chunks + 1).astype(int)
    chunks = [range(bounds[c], bounds[c + 1]) for c in range(n_chunks)]
    out: list = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_run_chunk, [func] * n_chunks, chunks):
            out.extend(part)
    return out


def summarize(values) -> dict:
    """Mean, standard error and quantiles of a sample (NaNs dropped)."""
    x = np.asarray(values, dtype=float)
    x = x[~np.isnan(x)]
    n = x.size
    if n == 0:
        return {"n": 0, "mean": None, "se": None, "q50": None, "q90": None}
    se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {
        "n": int(n),
        "mean": float(x.mean()),
        "se": se,
        "q50": float(np.quantile(x, 0.5)),
        "q90": float(np.quantile(x, 0.9)),
    }


def within_se(estimate: float, target: float, se: float, k: float = 4.0, floor: float = 1e-9) -> bool:
    """``|estimate - target| <= k * se`` with an absolute floor for exact (zero-SE) cases."""
    return abs(estimate - target) <= max(k * se, floor)


def loglog_slope(t, y) -> float | None:
    """Least-squares slope of ``log y`` against ``log t`` (None if any ``y <= 0``)."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if (y <= 0).any() or t.size < 2:
        return None
    return float(np.polyfit(np.log(t), np.log(y), 1)[0])


def _clean(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return None
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


@dataclass
class ExperimentReport:
    name: str
    fingerprint: str
    seed: int
    params: dict
    replicates: int = 0
    discarded: int = 0
    grid: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)  # statistic -> per-grid-point summaries
    verdicts: dict = field(default_factory=dict)  # contract -> {"pass", "detail"}
    per_replicate: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def passed(self) -> bool:
        return all(v["pass"] for v in self.verdicts.values())

    def verdict(self, contract: str, ok: bool, **detail) -> bool:
        self.verdicts[contract] = {"pass": bool(ok), **detail}
        return bool(ok)

    def body(self) -> dict:
        """Everything except timing; byte-stable for a fixed seed."""
        return _clean(
            {
                "experiment": self.name,
                "model_fingerprint": self.fingerprint,
                "seed": self.seed,
                "params": self.params,
                "replicates": self.replicates,
                "discarded": self.discarded,
                "grid": self.grid,
                "stats": self.stats,
                "verdicts": self.verdicts,
                "passed": self.passed,
                "extra": self.extra,
                "per_replicate": self.per_replicate,
            }
        )

    def body_json(self) -> str:
        return json.dumps(self.body(), indent=2, sort_keys=True)

    def to_json(self) -> dict:
        return {"body": self.body(), "timing": {"wall_clock_s": self.wall_clock}}

    def write(self, directory, stem: str | None = None) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"{stem or self.name}.json")
        with open(path, "w") as fh:
            fh.write(self.body_json() + "\n")
        with open(os.path.join(directory, f"{stem or self.name}.timing.json"), "w") as fh:
            json.dump({"wall_clock_s": self.wall_clock}, fh)
        return path

    def summary_rows(self, label: str | None = None) -> list[dict]:
        label = label or self.name
        rows = []
        for stat, per_point in self.stats.items():
            for point, s in zip(self.grid, per_point):
                rows.append(
                    {
                        "experiment": label,
                        "grid_point": point,
                        "statistic": stat,
                        "value": s.get("mean"),
                        "se": s.get("se"),
                        "verdict": "pass" if self.passed else "fail",
                    }
                )
        for contract, v in self.verdicts.items():
            rows.append(
                {
                    "experiment": label,
                    "grid_point": "",
                    "statistic": contract,
                    "value": "",
                    "se": "",
                    "verdict": "pass" if v["pass"] else "fail",
                }
            )
        return rows


SUMMARY_FIELDS = ["experiment", "grid_point", "statistic", "value", "se", "verdict"]


def write_summary(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in SUMMARY_FIELDS})
