"""Optional lines of the root type and the embedded single-type process.

For a tree rooted at type ``i`` the optional line ``J_n`` holds the type-``i``
individuals with exactly ``n`` type-``i`` strict ancestors.  Every individual
is owned by its nearest type-``i`` ancestor-or-self; the individuals owned by
a line member ``y`` are exactly those ``x`` with ``x`` strictly before the
next line relative to ``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import partial

import numpy as np

from .characteristics import Characteristic, evaluate, phi_value, z_phi
from .genealogy import DEFAULT_CAP, EmbeddedLines, Tree, simulate
from .martingales import fsum
from .model import ModelSpec
from .report import ExperimentReport, map_replicates, summarize, within_se
from .spectral import SpectralData


@dataclass(eq=False)
class OptionalLineDecomposition:
    tree: Tree
    target_type: int
    owner: np.ndarray  # nearest type-i ancestor-or-self
    block: np.ndarray  # line index of the owner
    complete_through: float  # lines 0..complete_through are fully present

    def complete(self, n: int) -> bool:
        return n <= self.complete_through

    @property
    def n_lines_present(self) -> int:
        members = self.tree.type_idx == self.target_type - 1
        return int(self.block[members].max()) + 1

    def line(self, n: int) -> np.ndarray:
        """Indices of ``J_n``."""
        t = self.tree
        if n == 0:
            return np.array([0])
        return np.flatnonzero((t.type_idx == self.target_type - 1) & (t.root_count == n))

    @property
    def lines(self) -> list[np.ndarray]:
        return [self.line(n) for n in range(self.n_lines_present)]

    def strictly_before(self, y: int = 0) -> np.ndarray:
        """Individuals owned by the line member ``y`` (``y`` included)."""
        return np.flatnonzero(self.owner == y)

    def flags(self) -> list[bool]:
        return [self.complete(n) for n in range(self.n_lines_present)]


def optional_lines(tree: Tree, i: int) -> OptionalLineDecomposition:
    """Decompose ``tree`` along the optional lines of type ``i`` (the root's type)."""
    if i != tree.root_type:
        raise ValueError(
            f"optional lines of type {i} need a tree rooted at type {i} (root is type {tree.root_type})"
        )
    ti = i - 1
    n = len(tree)
    owner = np.empty(n, dtype=np.int64)
    owner[0] = 0
    g = 1
    while True:
        s = tree.generation_slice(g)
        if s.start >= s.stop:
            break
        idx = np.arange(s.start, s.stop)
        owner[idx] = np.where(tree.type_idx[idx] == ti, idx, owner[tree.parent[idx]])
        g += 1
    block = tree.root_count[owner].astype(np.int64)
    unexp = ~tree.expanded
    complete_through = float(block[unexp].min()) if unexp.any() else math.inf
    return OptionalLineDecomposition(tree, i, owner, block, complete_through)


def v_n(dec: OptionalLineDecomposition, spectral: SpectralData, n: int) -> float:
    """``V_n = sum_{x in J_n} e^{-alpha S(x)}``."""
    if not dec.complete(n):
        raise ValueError(f"line {n} is incomplete (complete through {dec.complete_through})")
    return fsum(np.exp(-spectral.alpha * dec.tree.birth[dec.line(n)]))


def phi_J(dec: OptionalLineDecomposition, phi: Characteristic, t: float) -> tuple[np.ndarray, np.ndarray]:
    """``[phi_J]_y(t - S(y))`` for every type-``i`` individual ``y``.

    Returns ``(members, values)``.  ``values[k]`` sums ``[phi]_x(t - S(x))``
    over the individuals owned by ``members[k]``.
    """
    tree = dec.tree
    tree.check_time(t)
    vals = evaluate(tree, phi, t)
    per_owner = np.bincount(dec.owner, weights=vals, minlength=len(tree))
    members = np.flatnonzero(tree.type_idx == dec.target_type - 1)
    return members, per_owner[members]


def phi_J_direct(tree: Tree, i: int, y: int, phi: Characteristic, t: float) -> int:
    """``[phi_J]_y(t - S(y))`` by walking the subtree of ``y`` up to the next type-``i`` individuals."""
    total = phi_value(tree, phi, y, t)
    stack = list(tree.children(y))
    while stack:
        x = stack.pop()
        if tree.type_idx[x] == i - 1 or tree.birth[x] > t:
            continue
        total += phi_value(tree, phi, x, t)
        stack.extend(tree.children(x))
    return total


def _z_by_lines(tree: Tree, i: int, phi: Characteristic, t: float) -> int:
    """``Z^{1, phi_J}(t)``: line members are discovered while each block is walked."""
    total = 0
    lines = [0]
    while lines:
        y = lines.pop()
        block = phi_value(tree, phi, y, t)
        stack = list(tree.children(y))
        while stack:
            x = stack.pop()
            if tree.birth[x] > t:
                continue  # contributes nothing, nor does its subtree
            if tree.type_idx[x] == i - 1:
                lines.append(x)
                continue
            block += phi_value(tree, phi, x, t)
            stack.extend(tree.children(x))
        total += block
    return total


def key_identity_check(tree: Tree, phi: Characteristic, t_grid, i: int | None = None) -> dict:
    """Compare ``Z^{1, phi_J}(t)`` from the line traversal with ``Z^phi(t)``."""
    i = tree.root_type if i is None else i
    if i != tree.root_type:
        raise ValueError("key identity is checked for the root type")
    devs = []
    for t in t_grid:
        rhs = z_phi(tree, phi, t)
        lhs = float(_z_by_lines(tree, i, phi, t))
        devs.append(abs(lhs - rhs) / rhs if rhs != 0 else abs(lhs))
    return {"phi": str(phi), "grid": [float(t) for t in t_grid], "deviation": devs, "max_deviation": max(devs)}


# --------------------------------------------------------------------------
# trees grown to a given optional line
# --------------------------------------------------------------------------


def residual_mass(dec: OptionalLineDecomposition, spectral: SpectralData, n: int) -> float:
    """Expected discounted mass missing from lines ``<= n``.

    Each unexpanded individual ``z`` owned by a line ``< n`` would on average
    contribute ``(v_tau(z) / v_i) e^{-alpha S(z)}`` to the later lines.
    """
    tree = dec.tree
    idx = np.flatnonzero(~tree.expanded & (dec.block < n))
    v = spectral.v
    return fsum(v[tree.type_idx[idx]] / v[dec.target_type - 1] * np.exp(-spectral.alpha * tree.birth[idx]))


@dataclass
class LinedTree:
    tree: Tree
    dec: OptionalLineDecomposition
    horizon: float
    residual: float


def grow_to_line(
    spec: ModelSpec,
    spectral: SpectralData,
    i: int,
    n_lines: int,
    seed: int,
    replicate: int,
    horizon0: float | None = None,
    tol: float = 1e-6,
    cap: int = DEFAULT_CAP,
    max_doublings: int = 6,
) -> LinedTree:
    """Simulate until line ``n_lines``, doubling the time horizon until the residual mass is below ``tol``."""
    horizon = horizon0 if horizon0 is not None else 16.0 / spectral.alpha
    for attempt in range(max_doublings + 1):
        tree = simulate(spec, i, EmbeddedLines(n_lines, horizon), seed, replicate=replicate, cap=cap)
        dec = optional_lines(tree, i)
        res = residual_mass(dec, spectral, n_lines)
        if res <= tol or tree.truncated or attempt == max_doublings:
            return LinedTree(tree, dec, horizon, res)
        horizon *= 2.0
    raise AssertionError("unreachable")


def _embedded_replicate(spec, spectral, i, seed, cap, r):
    lt = grow_to_line(spec, spectral, i, 1, seed, r, cap=cap)
    members = lt.dec.line(1)
    s = lt.tree.birth[members]
    w = np.exp(-spectral.alpha * s)
    return fsum(w), fsum(w * s), lt.residual, lt.tree.truncated


def embedded_spectral_check(
    spec: ModelSpec,
    spectral: SpectralData,
    replicates: int,
    seed: int,
    i: int = 1,
    cap: int = DEFAULT_CAP,
    workers: int | None = None,
) -> ExperimentReport:
    """Monte Carlo check of ``m(alpha) = 1`` and ``-m'(alpha)`` for the embedded process."""
    rep = ExperimentReport("embedded_spectral", spec.fingerprint(), seed, {"type": i, "cap": cap})
    out = map_replicates(partial(_embedded_replicate, spec, spectral, i, seed, cap), replicates, workers)
    kept = [o for o in out if not o[3]]
    rep.replicates = len(kept)
    rep.discarded = replicates - len(kept)
    v1 = np.array([o[0] for o in kept])
    vs = np.array([o[1] for o in kept])
    resid = np.array([o[2] for o in kept])
    target = spectral.embedded_mprime_for(i)
    rep.grid = [1]
    rep.stats = {"V_1": [summarize(v1)], "sum_J e^{-alpha S} S": [summarize(vs)], "residual_mass": [summarize(resid)]}
    s1, s2 = rep.stats["V_1"][0], rep.stats["sum_J e^{-alpha S} S"][0]
    rep.verdict("V_1_mean_one", within_se(s1["mean"], 1.0, s1["se"]), mean=s1["mean"], se=s1["se"])
    rep.verdict(
        "embedded_mprime",
        within_se(s2["mean"], target, s2["se"]),
        mean=s2["mean"],
        se=s2["se"],
        target=target,
    )
    rep.per_replicate = {"V_1": v1.tolist(), "S_weighted": vs.tolist(), "residual": resid.tolist()}
    return rep
