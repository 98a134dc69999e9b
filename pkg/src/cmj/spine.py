"""The Markov random walk seen along the spine of the tilted process.

Types move with ``p_jk = m_jk(alpha) v_k / v_j``; each step draws its
displacement from the ``e^{-alpha t}``-tilted law of the clutch entry that
produced the next type.  Walks are simulated directly from these closed-form
laws, independently of the genealogy code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numba as nb
import numpy as np

from .characteristics import MeanProfile
from .embedding import grow_to_line
from .genealogy import DEFAULT_CAP, replicate_rng
from .martingales import fsum
from .model import (
    KIND_DETERMINISTIC,
    KIND_EXPONENTIAL,
    KIND_GAMMA,
    KIND_TILTED_UNIFORM,
    DisplacementLaw,
    ModelSpec,
    TiltedUniform,
)
from .report import ExperimentReport, map_replicates, summarize, within_se
from .spectral import SpectralData

SPINE_STREAM = 7


@dataclass(frozen=True)
class Component:
    weight: float  # probability within the row
    target: int  # 1-based
    law: DisplacementLaw  # tilted


@dataclass(frozen=True)
class SpineStepLaw:
    alpha: float
    transition: np.ndarray  # p_jk
    rows: tuple[tuple[Component, ...], ...]

    @property
    def p(self) -> int:
        return self.transition.shape[0]

    def step_law(self, j: int, k: int) -> list[tuple[float, DisplacementLaw]]:
        """Mixture ``[(weight, law)]`` of the displacement given a ``j -> k`` step."""
        comps = [c for c in self.rows[j - 1] if c.target == k]
        total = sum(c.weight for c in comps)
        return [(c.weight / total, c.law) for c in comps]

    def mean_step(self, j: int) -> float:
        return sum(c.weight * c.law.mean for c in self.rows[j - 1])

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "transition": self.transition.tolist(),
            "components": [
                [{"weight": c.weight, "target": c.target, "law": c.law.to_json()} for c in row]
                for row in self.rows
            ],
        }


def spine_law(spec: ModelSpec, spectral: SpectralData) -> SpineStepLaw:
    a, v = spectral.alpha, spectral.v
    P = np.zeros((spec.p, spec.p))
    rows = []
    for j, law in enumerate(spec.laws):
        comps = []
        for clutch in law.clutches:
            for e in clutch.entries:
                k = e.child_type
                w = clutch.weight * e.count * v[k - 1] * e.displacement.laplace(a) / v[j]
                comps.append(Component(w, k, e.displacement.tilted(a)))
                P[j, k - 1] += w
        rows.append(tuple(comps))
    return SpineStepLaw(a, P, tuple(rows))


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------


def _tables(law: SpineStepLaw):
    ptr, cum, target, kind, pa, pb, pc = [0], [], [], [], [], [], []
    for row in law.rows:
        acc = 0.0
        for c in row:
            acc += c.weight
            cum.append(acc)
            target.append(c.target - 1)
            kind.append(c.law.code)
            a, b = c.law.params
            pa.append(a)
            pb.append(b)
            pc.append(c.law.tilt if isinstance(c.law, TiltedUniform) else 0.0)
        # guard the last bucket against round-off
        cum[-1] = math.inf
        ptr.append(len(cum))
    return (
        np.array(ptr, dtype=np.int64),
        np.array(cum),
        np.array(target, dtype=np.int64),
        np.array(kind, dtype=np.int64),
        np.array(pa),
        np.array(pb),
        np.array(pc),
    )


@nb.njit(cache=True)
def _step(j, ptr, cum, target, kind, pa, pb, pc, rng):
    c = ptr[j]
    u = rng.random()
    while u >= cum[c]:
        c += 1
    kd = kind[c]
    if kd == KIND_DETERMINISTIC:
        d = pa[c]
    elif kd == KIND_EXPONENTIAL:
        d = rng.standard_exponential() / pa[c]
    elif kd == KIND_GAMMA:
        d = rng.standard_gamma(pa[c]) / pb[c]
    elif kd == KIND_TILTED_UNIFORM:
        d = pa[c] - math.log1p(-rng.random() * -math.expm1(-pc[c] * (pb[c] - pa[c]))) / pc[c]
    else:
        d = pa[c] + (pb[c] - pa[c]) * rng.random()
    return target[c], d


@nb.njit(cache=True)
def _walk(start, n_steps, ptr, cum, target, kind, pa, pb, pc, rng):
    types = np.empty(n_steps + 1, dtype=np.int64)
    pos = np.empty(n_steps + 1)
    types[0] = start
    pos[0] = 0.0
    for n in range(n_steps):
        k, d = _step(types[n], ptr, cum, target, kind, pa, pb, pc, rng)
        types[n + 1] = k
        pos[n + 1] = pos[n] + d
    return types, pos


@nb.njit(cache=True)
def _excursions(start, n_rep, max_len, ptr, cum, target, kind, pa, pb, pc, rng):
    """Concatenated paths ``M_0..M_sigma`` of ``n_rep`` excursions from ``start``."""
    cap = 4 * n_rep + 16
    types = np.empty(cap, dtype=np.int64)
    pos = np.empty(cap)
    offsets = np.empty(n_rep + 1, dtype=np.int64)
    n = 0
    for r in range(n_rep):
        offsets[r] = n
        j = start
        s = 0.0
        steps = 0
        while True:
            if n >= cap:
                cap *= 2
                t2 = np.empty(cap, dtype=np.int64)
                p2 = np.empty(cap)
                t2[:n] = types[:n]
                p2[:n] = pos[:n]
                types, pos = t2, p2
            types[n] = j
            pos[n] = s
            n += 1
            if (steps > 0 and j == start) or steps >= max_len:
                break
            j, d = _step(j, ptr, cum, target, kind, pa, pb, pc, rng)
            s += d
            steps += 1
    offsets[n_rep] = n
    return offsets, types[:n], pos[:n]


@dataclass
class SpinePath:
    types: np.ndarray  # 1-based
    positions: np.ndarray

    @property
    def sigma(self) -> int | None:
        """First return time to the starting type (None if not within the path)."""
        hits = np.flatnonzero(self.types[1:] == self.types[0])
        return int(hits[0]) + 1 if hits.size else None


def walk(law: SpineStepLaw, start: int, n_steps: int, seed: int, replicate: int = 0) -> SpinePath:
    rng = replicate_rng(seed, replicate, SPINE_STREAM)
    types, pos = _walk(start - 1, int(n_steps), *_tables(law), rng)
    return SpinePath(types + 1, pos)


@dataclass
class Excursions:
    """Independent paths ``(M_k, S_k)_{0 <= k <= sigma}`` started at the same type."""

    offsets: np.ndarray
    types: np.ndarray  # 1-based
    positions: np.ndarray

    @property
    def n(self) -> int:
        return self.offsets.size - 1

    @property
    def sigma(self) -> np.ndarray:
        return np.diff(self.offsets) - 1

    @property
    def s_sigma(self) -> np.ndarray:
        return self.positions[self.offsets[1:] - 1]

    def before_sigma(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(replicate, M_k, S_k)`` for ``0 <= k < sigma``."""
        mask = np.ones(self.types.size, dtype=bool)
        mask[self.offsets[1:] - 1] = False
        rep = np.repeat(np.arange(self.n), np.diff(self.offsets))
        return rep[mask], self.types[mask], self.positions[mask]

    def prefix_sums(self, values: np.ndarray) -> np.ndarray:
        """Per-excursion sums of ``values`` over the states ``k < sigma``."""
        rep, _, _ = self.before_sigma()
        return np.bincount(rep, weights=values, minlength=self.n)


def excursions(law: SpineStepLaw, start: int, n: int, seed: int, max_len: int = 10**7) -> Excursions:
    rng = replicate_rng(seed, 0, SPINE_STREAM)
    off, types, pos = _excursions(start - 1, int(n), int(max_len), *_tables(law), rng)
    return Excursions(off, types + 1, pos)


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


def sigma_stats(law: SpineStepLaw, spectral: SpectralData, i: int, replicates: int, seed: int) -> dict:
    """Return-time and occupation statistics of excursions from type ``i``."""
    ex = excursions(law, i, replicates, seed)
    sig = ex.sigma.astype(float)
    pi = spectral.pi
    s = summarize(sig)
    target = 1.0 / pi[i - 1]
    rep, types, _ = ex.before_sigma()
    occupation = []
    for j in range(1, law.p + 1):
        counts = np.bincount(rep[types == j], minlength=ex.n).astype(float)
        sj = summarize(counts)
        tj = pi[j - 1] / pi[i - 1]
        occupation.append(
            {"type": j, "mean": sj["mean"], "se": sj["se"], "target": tj, "pass": within_se(sj["mean"], tj, sj["se"])}
        )
    # P(sigma > k) decays geometrically; fit log-survival on the observed range
    ks = np.arange(1, int(sig.max()) + 1)
    surv = np.array([(sig > k).mean() for k in ks])
    good = surv > 10.0 / replicates
    rate = None
    if good.sum() >= 2:
        rate = float(-np.polyfit(ks[good], np.log(surv[good]), 1)[0])
    return {
        "type": i,
        "replicates": replicates,
        "sigma_mean": s["mean"],
        "sigma_se": s["se"],
        "sigma_var": float(sig.var(ddof=1)) if sig.size > 1 else 0.0,
        "sigma_target": target,
        "sigma_pass": within_se(s["mean"], target, s["se"]),
        "occupation": occupation,
        "geometric_tail_rate": rate,
        "pass": within_se(s["mean"], target, s["se"]) and all(o["pass"] for o in occupation),
    }


def stationary_occupation(law: SpineStepLaw, spectral: SpectralData, n_steps: int, seed: int, batches: int = 100) -> dict:
    """Occupation frequencies of ``M_0..M_{n-1}`` with batch-means standard errors."""
    path = walk(law, 1, n_steps, seed)
    types = path.types[:n_steps]
    size = n_steps // batches
    out = []
    for j in range(1, law.p + 1):
        hit = (types == j).astype(float)
        freq = float(hit.mean())
        bm = hit[: size * batches].reshape(batches, size).mean(axis=1)
        se = float(bm.std(ddof=1) / math.sqrt(batches))
        target = float(spectral.pi[j - 1])
        out.append({"type": j, "freq": freq, "se": se, "target": target, "pass": within_se(freq, target, se)})
    return {"steps": n_steps, "types": out, "pass": all(o["pass"] for o in out)}


def mean_step_target(spectral: SpectralData, j: int) -> float:
    """``E[S_1 | M_0 = j] = (1/v_j) sum_k v_k (-m_jk)'(alpha)``."""
    return float(spectral.mprime[j - 1] @ spectral.v / spectral.v[j - 1])


# --------------------------------------------------------------------------
# dualities
# --------------------------------------------------------------------------

DUALITY_FUNCTIONS = ("one", "s", "exp_neg_s")


def named_function(name: str):
    """Vectorized ``f(type, s)`` for a name in ``one | s | exp_neg_s | type:k``."""
    if name == "one":
        return lambda j, s: np.ones_like(s, dtype=float)
    if name == "s":
        return lambda j, s: np.asarray(s, dtype=float)
    if name == "exp_neg_s":
        return lambda j, s: np.exp(-np.asarray(s, dtype=float))
    if name.startswith("type:"):
        k = int(name.split(":", 1)[1])
        return lambda j, s: (np.asarray(j) == k).astype(float)
    raise ValueError(f"unknown test function {name!r}")


def _tree_side(spec, spectral, i, names, seed, cap, r):
    lt = grow_to_line(spec, spectral, i, 1, seed, r, cap=cap)
    tree, dec = lt.tree, lt.dec
    line = dec.line(1)
    s_line = tree.birth[line]
    w_line = np.exp(-spectral.alpha * s_line)
    before = dec.strictly_before(0)
    types_b = tree.type_idx[before].astype(np.int64) + 1
    s_b = tree.birth[before]
    w_b = spectral.v[types_b - 1] / spectral.v[i - 1] * np.exp(-spectral.alpha * s_b)
    out = {}
    for name in names:
        f = named_function(name)
        out[name] = (
            fsum(w_line * f(np.full(line.size, i), s_line)),
            fsum(w_b * f(types_b, s_b)),
        )
    return out, lt.residual, tree.truncated


def duality_check(
    spec: ModelSpec,
    spectral: SpectralData,
    i: int,
    functions=DUALITY_FUNCTIONS,
    replicates: int = 2000,
    seed: int = 0,
    walk_replicates: int | None = None,
    cap: int = DEFAULT_CAP,
    workers: int | None = None,
) -> ExperimentReport:
    """Both sides of the first-return and strictly-before duality identities.

    Walk side: ``E[f(M_sigma, S_sigma)]`` and ``E[sum_{k<sigma} f(M_k, S_k)]``.
    Tree side: the ``e^{-alpha S} v_tau / v_i``-weighted sums over the first
    optional line and over the individuals strictly before it.
    """
    names = list(functions)
    law = spine_law(spec, spectral)
    rep = ExperimentReport(
        "spine_duality",
        spec.fingerprint(),
        seed,
        {"type": i, "functions": names, "cap": cap, "walk_replicates": walk_replicates or replicates},
    )
    ex = excursions(law, i, walk_replicates or replicates, seed)
    tree_out = map_replicates(partial(_tree_side, spec, spectral, i, names, seed, cap), replicates, workers)
    kept = [o for o in tree_out if not o[2]]
    rep.replicates = len(kept)
    rep.discarded = replicates - len(kept)
    rep.grid = names
    bef_rep, bef_types, bef_s = ex.before_sigma()
    stats = {k: [] for k in ("walk_at_sigma", "tree_line", "walk_before_sigma", "tree_strictly_before")}
    per = {}
    for name in names:
        f = named_function(name)
        walk_at = f(np.full(ex.n, i), ex.s_sigma)
        walk_before = np.bincount(bef_rep, weights=f(bef_types, bef_s), minlength=ex.n)
        tree_line = np.array([o[0][name][0] for o in kept])
        tree_before = np.array([o[0][name][1] for o in kept])
        for key, arr in (
            ("walk_at_sigma", walk_at),
            ("tree_line", tree_line),
            ("walk_before_sigma", walk_before),
            ("tree_strictly_before", tree_before),
        ):
            stats[key].append(summarize(arr))
        for label, a, b in (("at_sigma", walk_at, tree_line), ("before_sigma", walk_before, tree_before)):
            sa, sb = summarize(a), summarize(b)
            se = math.hypot(sa["se"], sb["se"])
            rep.verdict(
                f"{label}:{name}",
                within_se(sa["mean"], sb["mean"], se),
                walk=sa["mean"],
                tree=sb["mean"],
                combined_se=se,
            )
        per[name] = {"tree_line": tree_line.tolist(), "tree_strictly_before": tree_before.tolist()}
    rep.stats = stats
    residual = np.array([o[1] for o in kept])
    rep.extra = {"residual_mass": summarize(residual), "sigma_mean": float(ex.sigma.mean())}
    rep.per_replicate = {**per, "sigma": ex.sigma.tolist(), "s_sigma": ex.s_sigma.tolist()}
    return rep


def phi_J_mean_spine(
    law: SpineStepLaw, spectral: SpectralData, profile: MeanProfile, i: int, t: float, replicates: int, seed: int
) -> tuple[float, float]:
    """``E[e^{-alpha t} phi_J(t)]`` from the walk, with its standard error.

    Uses ``sum_{k<sigma} (v_i / v_{M_k}) e^{-alpha (t - S_k)} E^{M_k}[phi(t - S_k)]``.
    """
    ex = excursions(law, i, replicates, seed)
    rep, types, s = ex.before_sigma()
    v = spectral.v
    mean_phi = np.array([profile.mean(int(j), t - sk) for j, sk in zip(types, s)])
    vals = v[i - 1] / v[types - 1] * np.exp(-spectral.alpha * (t - s)) * mean_phi
    per = np.bincount(rep, weights=vals, minlength=ex.n)
    st = summarize(per)
    return st["mean"], st["se"]
