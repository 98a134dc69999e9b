"""Ordinary renewal excess and Markov-renewal moment diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .genealogy import replicate_rng
from .model import DisplacementLaw, ModelSpec
from .report import ExperimentReport, summarize
from .spectral import SpectralData
from .spine import excursions, spine_law

RENEWAL_STREAM = 11


@dataclass(frozen=True)
class RenewalSpec:
    """Zero-delayed renewal process with i.i.d. inter-arrival times."""

    law: DisplacementLaw

    def __post_init__(self):
        if not self.law.mean > 0:
            raise ValueError("inter-arrival times must have a positive mean")


@dataclass
class FirstPassage:
    t: float
    nu: np.ndarray  # inf{n : S_n > t}
    s_nu: np.ndarray
    s_before: np.ndarray  # S_{nu - 1}

    @property
    def excess(self) -> np.ndarray:
        return self.s_nu - self.t


def first_passage(spec: RenewalSpec, t: float, n: int, rng: np.random.Generator) -> FirstPassage:
    """Run ``n`` independent walks until they first exceed ``t``."""
    s = np.zeros(n)
    prev = np.zeros(n)
    nu = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    while active.size:
        step = spec.law.sample(rng, active.size)
        prev[active] = s[active]
        s[active] += step
        nu[active] += 1
        active = active[s[active] <= t]
    return FirstPassage(t, nu, s, prev)


def excess_tail(spec: RenewalSpec, t: float, a: float, replicates: int, seed: int) -> dict:
    """Estimate ``P(R_t > a t)`` for the excess ``R_t = S_{nu(t)} - t``."""
    if a <= 0 or t <= 0:
        raise ValueError("need a > 0 and t > 0")
    key = int(round(t * 1e6)), int(round(a * 1e6))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(RENEWAL_STREAM, *key)))
    fp = first_passage(spec, t, replicates, rng)
    hit = (fp.excess > a * t).astype(float)
    s = summarize(hit)
    return {"t": t, "a": a, "estimate": s["mean"], "se": s["se"], "replicates": replicates}


def excess_decay_experiment(
    spec: RenewalSpec, delta: float, a: float, t_grid, replicates: int, seed: int
) -> ExperimentReport:
    """``t^delta P(R_t > a t)`` along the grid; the contract is decay."""
    grid = [float(t) for t in t_grid]
    rep = ExperimentReport(
        "renewal_excess_decay",
        "",
        seed,
        {"law": spec.law.to_json(), "delta": delta, "a": a, "grid": grid},
    )
    rep.replicates = replicates
    rep.grid = grid
    rows = []
    for t in grid:
        e = excess_tail(spec, t, a, replicates, seed)
        rows.append({"mean": t**delta * e["estimate"], "se": t**delta * e["se"], "tail": e["estimate"], "tail_se": e["se"]})
    rep.stats["t^delta P(R_t > a t)"] = rows
    first, last = rows[0]["mean"], rows[-1]["mean"]
    rep.verdict("decreasing", last < first or first == last == 0.0, first=first, last=last)
    return rep


def renewal_count_check(spec: RenewalSpec, replicates: int, seed: int, factor: float = 50.0) -> dict:
    """Elementary renewal theorem: ``E[#{n : S_n <= t}] / t`` against ``1 / E[X]`` at ``t = factor E[X]``."""
    mu = spec.law.mean
    t = factor * mu
    fp = first_passage(spec, t, replicates, replicate_rng(seed, 0, RENEWAL_STREAM))
    # S_0, ..., S_{nu-1} are <= t
    rate = float(fp.nu.mean()) / t
    return {"t": t, "rate": rate, "target": 1.0 / mu, "rel_error": abs(rate * mu - 1.0), "pass": abs(rate * mu - 1.0) <= 0.05}


# --------------------------------------------------------------------------
# Markov renewal moments
# --------------------------------------------------------------------------


def h_function(eps: float):
    """``h(x) = x log^{1+eps}(1 + x)``."""
    return lambda x: x * np.log1p(x) ** (1.0 + eps)


def hill_tail_index(x: np.ndarray, frac: float = 0.05) -> float | None:
    """Hill estimate of the tail index from the top ``frac`` of the sample."""
    x = np.sort(np.asarray(x, dtype=float))[::-1]
    k = max(int(frac * x.size), 10)
    if x.size <= k or x[k] <= 0:
        return None
    return float(1.0 / np.mean(np.log(x[:k] / x[k])))


def mrp_moment_check(
    spec: ModelSpec, spectral: SpectralData, i: int, eps: float, replicates: int, seed: int
) -> dict:
    """Finite-moment diagnostic for ``h(S_sigma)`` and ``sum_{k<sigma} h(S_k)`` over spine excursions.

    Means are reported on nested prefixes of ``R/4, R/2, R`` excursions; the
    diagnostic is stable when consecutive means agree within four standard
    errors of the smaller sample.
    """
    h = h_function(eps)
    ex = excursions(spine_law(spec, spectral), i, replicates, seed)
    at = h(ex.s_sigma)
    rep, _, s = ex.before_sigma()
    before = np.bincount(rep, weights=h(s), minlength=ex.n)
    out = {"type": i, "eps": eps, "replicates": replicates}
    stable = True
    for name, arr in (("h(S_sigma)", at), ("sum_{k<sigma} h(S_k)", before)):
        sizes = [replicates // 4, replicates // 2, replicates]
        means = [summarize(arr[:m]) for m in sizes]
        ok = all(
            abs(means[k + 1]["mean"] - means[k]["mean"]) <= max(4 * means[k]["se"], 1e-12)
            for k in range(len(sizes) - 1)
        )
        stable &= ok
        out[name] = {
            "sizes": sizes,
            "means": [m["mean"] for m in means],
            "ses": [m["se"] for m in means],
            "tail_index": hill_tail_index(arr),
            "stable": ok,
            "max": float(arr.max()),
        }
    out["stable"] = bool(stable)
    return out
