"""Limit constants and the end-to-end LLN, ratio and rate experiments."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np

from .characteristics import (
    Characteristic,
    MeanProfile,
    check_rate_condition,
    mean_profile,
    parse_characteristic,
    window_queries,
    z_phi_grid,
)
from .embedding import embedded_spectral_check
from .genealogy import DEFAULT_CAP, Horizon, simulate, stream_statistics
from .martingales import (
    DEFAULT_PROXY,
    NUMERICAL_ZERO,
    PROXY_COMING,
    PROXY_LAST_GENERATION,
    nerman_rate_experiment,
    w_proxy,
)
from .model import ModelError, ModelSpec, resolve_model
from .renewal import RenewalSpec, excess_decay_experiment
from .report import ExperimentReport, loglog_slope, map_replicates, summarize, within_se, write_summary
from .spectral import SpectralData, SpectralError, malthusian
from .spine import duality_check


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class LimitConstant:
    """``c = v_i sum_j u_j I_j / sum_{j,k} u_j v_k (-m_jk)'(alpha)``."""

    value: float
    i: int
    v_i: float
    numerator: float  # sum_j u_j I_j
    denominator: float
    integrals: tuple[float, ...]

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "type": self.i,
            "v_i": self.v_i,
            "sum_u_I": self.numerator,
            "denominator": self.denominator,
            "integrals": list(self.integrals),
        }


def limit_constant(spectral: SpectralData, profile: MeanProfile, i: int) -> LimitConstant:
    num = float(spectral.u @ profile.integrals)
    den = spectral.denominator
    if not den > 0:
        raise SpectralError("limit-constant denominator is not positive")
    v_i = float(spectral.v[i - 1])
    return LimitConstant(v_i * num / den, i, v_i, num, den, tuple(float(x) for x in profile.integrals))


def ratio_limit(spectral: SpectralData, phi: MeanProfile, psi: MeanProfile) -> float:
    den = float(spectral.u @ psi.integrals)
    if den <= 0:
        raise PreconditionError("the denominator characteristic has zero discounted mean")
    return float(spectral.u @ phi.integrals) / den


# --------------------------------------------------------------------------
# per-replicate evaluation
# --------------------------------------------------------------------------


def _queries(phis, grid):
    windows, layout = [], []
    for phi in phis:
        for t in grid:
            w, off = window_queries(phi, t)
            layout.append((len(windows), len(w), off))
            windows.extend(w)
    return windows, layout


def _grid_replicate(spec, spectral, i, phis, grid, horizon, proxy, seed, cap, r):
    """``Z^phi(t)`` for every characteristic and grid point, and the W proxy.

    Returns ``None`` when the population cap was hit.
    """
    n_phi, n_grid = len(phis), len(grid)
    if proxy == PROXY_LAST_GENERATION:
        tree = simulate(spec, i, Horizon(horizon), seed, replicate=r, cap=cap, copy=False)
        if tree.truncated:
            return None
        z = np.array([z_phi_grid(tree, phi, grid) for phi in phis])
        return z, w_proxy(tree, spectral, proxy)
    windows, layout = _queries(phis, grid)
    weights = spectral.v / spectral.v[i - 1]
    res = stream_statistics(
        spec, i, horizon, seed, r, windows, [horizon] if proxy else [], weights, spectral.alpha, cap
    )
    if res.truncated:
        return None
    z = np.array([res.counts[s : s + n].sum() + off for s, n, off in layout], dtype=float)
    return z.reshape(n_phi, n_grid), (float(res.coming_mass[0]) if proxy else math.nan)


def _collect(spec, spectral, i, phis, grid, horizon, proxy, seed, cap, replicates, workers):
    out = map_replicates(
        partial(_grid_replicate, spec, spectral, i, phis, grid, horizon, proxy, seed, cap), replicates, workers
    )
    kept = [o for o in out if o is not None]
    z = np.array([o[0] for o in kept]).reshape(len(kept), len(phis), len(grid))
    w = np.array([o[1] for o in kept])
    return z, w, replicates - len(kept)


def _check_grid(grid, horizon):
    grid = [float(t) for t in grid]
    if not grid:
        raise ValueError("empty grid")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be strictly increasing")
    if grid[-1] > horizon:
        raise ValueError(f"grid point {grid[-1]} exceeds the horizon {horizon}")
    return grid


def _pathwise_fraction(dev: np.ndarray, alive: np.ndarray) -> float | None:
    """Share of surviving paths whose deviation at the last grid point is below the first (or zero)."""
    d = dev[alive]
    d = d[~np.isnan(d).any(axis=1)]
    if d.shape[0] == 0:
        return None
    return float(np.mean((d[:, -1] < d[:, 0]) | (d[:, -1] <= NUMERICAL_ZERO)))


def _decays(q: list[float]) -> bool:
    """Last value strictly below the first, or every value at rounding level."""
    return q[-1] < q[0] or max(q) <= NUMERICAL_ZERO


def h_rate(x, delta: float):
    """``h(x) = x (log y)^{2 delta} log log y`` with ``y = x + e^e`` so that ``h`` is finite at 0."""
    y = np.asarray(x, dtype=float) + math.exp(math.e)
    return np.asarray(x) * np.log(y) ** (2 * delta) * np.log(np.log(y))


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


def wlln_experiment(
    spec: ModelSpec,
    phi: Characteristic,
    i: int,
    t_grid,
    horizon: float,
    replicates: int,
    seed: int,
    proxy: str = DEFAULT_PROXY,
    cap: int = DEFAULT_CAP,
    workers: int | None = None,
) -> ExperimentReport:
    """``D(t) = e^{-alpha t} Z^phi(t) - W_hat c`` on a coupled grid."""
    t0 = time.perf_counter()
    grid = _check_grid(t_grid, horizon)
    spectral = malthusian(spec)
    c = limit_constant(spectral, mean_profile(spec, phi, spectral.alpha), i)
    rep = ExperimentReport(
        "wlln",
        spec.fingerprint(),
        seed,
        {"phi": str(phi), "type": i, "horizon": horizon, "proxy_rule": proxy, "cap": cap},
    )
    z, w, rep.discarded = _collect(spec, spectral, i, [phi], grid, horizon, proxy, seed, cap, replicates, workers)
    rep.replicates = len(w)
    rep.grid = grid
    x = z[:, 0, :] * np.exp(-spectral.alpha * np.array(grid))
    dev = np.abs(x - w[:, None] * c.value)
    rep.stats["e^{-alpha t} Z(t)"] = [summarize(x[:, g]) for g in range(len(grid))]
    rep.stats["|D(t)|"] = [summarize(dev[:, g]) for g in range(len(grid))]
    rep.stats["W_hat"] = [summarize(w)] * len(grid)
    q90 = [s["q90"] for s in rep.stats["|D(t)|"]]
    last = rep.stats["e^{-alpha t} Z(t)"][-1]
    steps_down = all(b < a for a, b in zip(q90, q90[1:]))
    rep.verdict("q90_|D|_decreasing", steps_down or max(q90) <= NUMERICAL_ZERO, q90=q90)
    rep.verdict(
        "mean_matches_limit_constant",
        within_se(last["mean"], c.value, last["se"]),
        t=grid[-1],
        mean=last["mean"],
        se=last["se"],
        limit_constant=c.value,
    )
    rep.extra = {
        "limit_constant": c.to_json(),
        "alpha": spectral.alpha,
        "pathwise_fraction": _pathwise_fraction(dev, w > 0),
    }
    rep.per_replicate = {"Z": z[:, 0, :].tolist(), "W_hat": w.tolist()}
    rep.wall_clock = time.perf_counter() - t0
    return rep


def ratio_experiment(
    spec: ModelSpec,
    phi: Characteristic,
    psi: Characteristic,
    i: int,
    t_grid,
    horizon: float | None,
    replicates: int,
    seed: int,
    cap: int = DEFAULT_CAP,
    workers: int | None = None,
) -> ExperimentReport:
    """``Z^phi(t) / Z^psi(t)`` on surviving paths against the ratio of discounted means."""
    t0 = time.perf_counter()
    horizon = float(max(t_grid)) if horizon is None else horizon
    grid = _check_grid(t_grid, horizon)
    spectral = malthusian(spec)
    prof_phi = mean_profile(spec, phi, spectral.alpha)
    prof_psi = mean_profile(spec, psi, spectral.alpha)
    limit = ratio_limit(spectral, prof_phi, prof_psi)
    rep = ExperimentReport(
        "ratio",
        spec.fingerprint(),
        seed,
        {"phi": str(phi), "psi": str(psi), "type": i, "horizon": horizon, "cap": cap},
    )
    pts = grid if grid[-1] == horizon else grid + [horizon]
    z, _, rep.discarded = _collect(spec, spectral, i, [phi, psi], pts, horizon, None, seed, cap, replicates, workers)
    alive = z[:, 1, -1] > 0  # survival surrogate: Z^psi positive at the last grid point
    zp, zq = z[:, 0, : len(grid)], z[:, 1, : len(grid)]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(zq > 0, zp / zq, np.nan)
    dev = np.abs(ratio - limit)[alive]
    rep.replicates = int(alive.sum())
    rep.grid = grid
    rep.stats["ratio"] = [summarize(ratio[alive, g]) for g in range(len(grid))]
    rep.stats["|ratio - limit|"] = [summarize(dev[:, g]) for g in range(len(grid))]
    q50 = [s["q50"] for s in rep.stats["|ratio - limit|"]]
    rep.verdict("q50_decreasing", _decays(q50), q50_first=q50[0], q50_last=q50[-1])
    frac = _pathwise_fraction(dev, np.ones(dev.shape[0], dtype=bool))
    rep.verdict("pathwise_at_least_60pct", frac is not None and frac >= 0.6, fraction=frac)
    rep.extra = {
        "limit": limit,
        "alpha": spectral.alpha,
        "surviving": int(alive.sum()),
        "extinct": int((~alive).sum()),
    }
    rep.per_replicate = {"Z_phi": z[:, 0, :].tolist(), "Z_psi": z[:, 1, :].tolist()}
    rep.wall_clock = time.perf_counter() - t0
    return rep


def rate_experiment(
    spec: ModelSpec,
    phi: Characteristic,
    i: int,
    delta: float,
    t_grid,
    horizon: float,
    replicates: int,
    seed: int,
    proxy: str = DEFAULT_PROXY,
    cap: int = DEFAULT_CAP,
    workers: int | None = None,
) -> ExperimentReport:
    """``t^delta |e^{-alpha t} Z^phi(t) - W_hat c|`` on a coupled grid; the contract is q90 decay."""
    t0 = time.perf_counter()
    grid = _check_grid(t_grid, horizon)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if spec.all_deterministic():
        raise PreconditionError("rate theorem needs a spread-out displacement; every displacement is deterministic")
    spectral = malthusian(spec)
    profile = mean_profile(spec, phi, spectral.alpha)
    cond = check_rate_condition(profile, delta)
    if not cond["passes"]:
        raise PreconditionError(f"rate condition on phi fails for delta={delta}")
    c = limit_constant(spectral, profile, i)
    rep = ExperimentReport(
        "rate",
        spec.fingerprint(),
        seed,
        {"phi": str(phi), "type": i, "delta": delta, "horizon": horizon, "proxy_rule": proxy, "cap": cap},
    )
    z, w, rep.discarded = _collect(spec, spectral, i, [phi], grid, horizon, proxy, seed, cap, replicates, workers)
    rep.replicates = len(w)
    rep.grid = grid
    tg = np.array(grid)
    x = z[:, 0, :] * np.exp(-spectral.alpha * tg)
    dev = np.abs(x - w[:, None] * c.value)
    stat = tg**delta * dev
    rep.stats["t^delta|D(t)|"] = [summarize(stat[:, g]) for g in range(len(grid))]
    rep.stats["h(e^{-alpha t} Z(t))"] = [summarize(h_rate(x[:, g], delta)) for g in range(len(grid))]
    q90 = [s["q90"] for s in rep.stats["t^delta|D(t)|"]]
    rep.verdict("q90_last_below_first", _decays(q90), q90_first=q90[0], q90_last=q90[-1])
    rep.extra = {
        "limit_constant": c.to_json(),
        "alpha": spectral.alpha,
        "loglog_slope_q90": loglog_slope(grid, q90),
        "h_sup_mean": max(s["mean"] for s in rep.stats["h(e^{-alpha t} Z(t))"]),
        "pathwise_fraction": _pathwise_fraction(dev, w > 0),
        "rate_condition": cond,
    }
    rep.per_replicate = {"Z": z[:, 0, :].tolist(), "W_hat": w.tolist()}
    rep.wall_clock = time.perf_counter() - t0
    return rep


# --------------------------------------------------------------------------
# suites
# --------------------------------------------------------------------------

EXPERIMENT_KINDS = ("wlln", "ratio", "rate", "nerman_rate", "embedded", "duality", "excess_decay")


def _grid(entry) -> list[float]:
    g = entry["grid"]
    return [float(x) for x in (g.split(",") if isinstance(g, str) else g)]


def run_experiment(entry: dict, base_seed: int, base_dir: Path | None = None, workers: int | None = None) -> ExperimentReport:
    """Run one suite entry."""
    kind = entry.get("kind")
    if kind not in EXPERIMENT_KINDS:
        raise ValueError(f"unknown experiment kind {kind!r}")
    seed = int(entry.get("seed", base_seed))
    reps = int(entry.get("replicates", 100))
    cap = int(entry.get("cap", DEFAULT_CAP))
    t0 = time.perf_counter()
    if kind == "excess_decay":
        from .model import parse_displacement

        law = parse_displacement(entry["law"], "$.law")
        rep = excess_decay_experiment(RenewalSpec(law), float(entry.get("delta", 0.5)), float(entry.get("a", 1.0)), _grid(entry), reps, seed)
        rep.wall_clock = time.perf_counter() - t0
        return rep
    ref = entry["model"]
    if base_dir is not None and not Path(ref).is_absolute() and (base_dir / ref).exists():
        ref = str(base_dir / ref)
    spec = resolve_model(ref)
    i = int(entry.get("type", 1))
    if kind == "wlln":
        rep = wlln_experiment(
            spec, parse_characteristic(entry.get("phi", "born")), i, _grid(entry), float(entry["horizon"]),
            reps, seed, entry.get("proxy", DEFAULT_PROXY), cap, workers,
        )
    elif kind == "ratio":
        rep = ratio_experiment(
            spec, parse_characteristic(entry["phi"]), parse_characteristic(entry["psi"]), i, _grid(entry),
            entry.get("horizon"), reps, seed, cap, workers,
        )
    elif kind == "rate":
        rep = rate_experiment(
            spec, parse_characteristic(entry.get("phi", "born")), i, float(entry.get("delta", 0.25)), _grid(entry),
            float(entry["horizon"]), reps, seed, entry.get("proxy", DEFAULT_PROXY), cap, workers,
        )
    elif kind == "nerman_rate":
        rep = nerman_rate_experiment(
            spec, malthusian(spec), float(entry.get("delta", 0.25)), _grid(entry), float(entry["horizon"]),
            reps, seed, cap, workers,
        )
    elif kind == "embedded":
        rep = embedded_spectral_check(spec, malthusian(spec), reps, seed, i, cap, workers)
    else:
        funcs = entry.get("functions", ["one", "s", "exp_neg_s"])
        rep = duality_check(spec, malthusian(spec), i, funcs, reps, seed, cap=cap, workers=workers)
    rep.wall_clock = time.perf_counter() - t0
    return rep


def load_suite(path) -> dict:
    path = Path(path)
    doc = json.loads(path.read_text())
    if not isinstance(doc, dict) or not isinstance(doc.get("experiments", []), list):
        raise ValueError("suite must be an object with an 'experiments' list")
    return doc


def run_suite(path, out_dir, seed: int | None = None, workers: int | None = None, log=print) -> int:
    """Run every experiment of a suite file; 0 iff all contracts pass, 1 on a failed contract, 2 on errors."""
    path = Path(path)
    try:
        doc = load_suite(path)
    except (OSError, ValueError) as exc:
        log(f"error: cannot read suite {path}: {exc}")
        return 2
    base_seed = int(doc.get("seed", 0) if seed is None else seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, failed = [], []
    for k, entry in enumerate(doc.get("experiments", [])):
        label = entry.get("name") or f"{k:02d}_{entry.get('kind')}"
        try:
            rep = run_experiment(entry, base_seed, path.parent, workers)
        except (KeyError, OSError, ValueError, ModelError, SpectralError) as exc:
            log(f"error: experiment {label!r}: {exc}")
            return 2
        rep.write(out, label)
        rows.extend(rep.summary_rows(label))
        status = "pass" if rep.passed else "FAIL"
        log(f"{status} {label} ({rep.wall_clock:.1f} s)")
        if not rep.passed:
            failed.append(label)
    write_summary(out / "summary.csv", rows)
    if failed:
        log("failing experiments: " + ", ".join(failed))
        return 1
    return 0


def bundled_suite_path(name: str = "suite-quick") -> Path:
    from importlib.resources import files

    return Path(str(files("cmj") / "models" / f"{name}.json"))


__all__ = [
    "LimitConstant",
    "PreconditionError",
    "limit_constant",
    "ratio_limit",
    "wlln_experiment",
    "ratio_experiment",
    "rate_experiment",
    "run_experiment",
    "run_suite",
    "PROXY_COMING",
    "PROXY_LAST_GENERATION",
]
