"""Random characteristics and the process counted with them.

Every built-in characteristic is integer valued, so ``Z^phi(t)`` is
accumulated in ``int64`` and is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .genealogy import Tree
from .model import ModelSpec, sample_first_generation


@dataclass(frozen=True)
class BornIndicator:
    """1 from birth on."""

    def __str__(self) -> str:
        return "born"


@dataclass(frozen=True)
class Window:
    """1 while the age is in ``[0, c)``."""

    c: float

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"window length must be > 0, got {self.c}")

    def __str__(self) -> str:
        return f"window:{self.c:g}"


@dataclass(frozen=True)
class TypeWindow:
    """:class:`Window` restricted to individuals of type ``j``."""

    j: int
    c: float

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"window length must be > 0, got {self.c}")

    def __str__(self) -> str:
        return f"typewindow:{self.j}:{self.c:g}"


@dataclass(frozen=True)
class ChildrenByAge:
    """Number of own children born by the given age."""

    def __str__(self) -> str:
        return "childrenbyage"


Characteristic = Union[BornIndicator, Window, TypeWindow, ChildrenByAge]


def parse_characteristic(text: str) -> Characteristic:
    parts = text.strip().lower().split(":")
    try:
        if parts == ["born"]:
            return BornIndicator()
        if parts == ["childrenbyage"]:
            return ChildrenByAge()
        if parts[0] == "window" and len(parts) == 2:
            return Window(float(parts[1]))
        if parts[0] == "typewindow" and len(parts) == 3:
            return TypeWindow(int(parts[1]), float(parts[2]))
    except ValueError as exc:
        raise ValueError(f"bad characteristic {text!r}: {exc}") from None
    raise ValueError(f"unknown characteristic {text!r}; expected born | window:c | typewindow:j:c | childrenbyage")


# --------------------------------------------------------------------------
# evaluation on trees
# --------------------------------------------------------------------------


def evaluate(tree: Tree, phi: Characteristic, t: float) -> np.ndarray:
    """``[phi]_x(t - S(x))`` for every individual ``x`` of the tree (int64)."""
    born = tree.birth <= t
    if isinstance(phi, BornIndicator):
        return born.astype(np.int64)
    if isinstance(phi, Window):
        return (born & (tree.birth > t - phi.c)).astype(np.int64)
    if isinstance(phi, TypeWindow):
        return (born & (tree.birth > t - phi.c) & (tree.type_idx == phi.j - 1)).astype(np.int64)
    if isinstance(phi, ChildrenByAge):
        # a child counts for its parent once its displacement is <= the parent's age
        idx = np.flatnonzero(born[1:]) + 1
        return np.bincount(tree.parent[idx], minlength=len(tree)).astype(np.int64)
    raise TypeError(f"unknown characteristic {phi!r}")


def z_phi(tree: Tree, phi: Characteristic, t: float) -> float:
    """``Z^phi(t) = sum_x [phi]_x(t - S(x))``."""
    tree.check_time(t)
    return float(_z_count(tree, phi, t))


def _z_count(tree: Tree, phi: Characteristic, t: float) -> int:
    b = tree.birth
    if isinstance(phi, BornIndicator):
        return int(np.count_nonzero(b <= t))
    if isinstance(phi, Window):
        return int(np.count_nonzero((b <= t) & (b > t - phi.c)))
    if isinstance(phi, TypeWindow):
        return int(np.count_nonzero((b <= t) & (b > t - phi.c) & (tree.type_idx == phi.j - 1)))
    return int(evaluate(tree, phi, t).sum())


def z_phi_grid(tree: Tree, phi: Characteristic, grid) -> np.ndarray:
    for t in grid:
        tree.check_time(t)
    return np.array([_z_count(tree, phi, t) for t in grid], dtype=float)


# --------------------------------------------------------------------------
# mean profiles
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MeanProfile:
    """``t -> E^j[phi(t)]`` and ``I_j = int_0^inf e^{-alpha s} E^j[phi(s)] ds`` per type."""

    phi: Characteristic
    alpha: float
    integrals: np.ndarray
    _means: tuple[Callable[[float], float], ...]
    sup_mean: np.ndarray  # sup_t E^j[phi(t)], used for tail bounds

    def mean(self, j: int, t: float) -> float:
        """``E^j[phi(t)]`` for type ``j`` (1-based)."""
        if t < 0:
            return 0.0
        return self._means[j - 1](t)

    def to_json(self) -> dict:
        return {"phi": str(self.phi), "alpha": self.alpha, "integrals": self.integrals.tolist()}


def mean_profile(spec: ModelSpec, phi: Characteristic, alpha: float) -> MeanProfile:
    p = spec.p
    window_int = lambda c: -math.expm1(-alpha * c) / alpha  # noqa: E731
    if isinstance(phi, BornIndicator):
        means = tuple((lambda t: 1.0) for _ in range(p))
        integrals = np.full(p, 1.0 / alpha)
        sup = np.ones(p)
    elif isinstance(phi, Window):
        c = phi.c
        means = tuple((lambda t, c=c: 1.0 if t < c else 0.0) for _ in range(p))
        integrals = np.full(p, window_int(c))
        sup = np.ones(p)
    elif isinstance(phi, TypeWindow):
        if not 1 <= phi.j <= p:
            raise ValueError(f"type {phi.j} outside 1..{p}")
        c, j0 = phi.c, phi.j - 1
        means = tuple(
            (lambda t, c=c: 1.0 if t < c else 0.0) if j == j0 else (lambda t: 0.0) for j in range(p)
        )
        integrals = np.zeros(p)
        integrals[j0] = window_int(c)
        sup = np.zeros(p)
        sup[j0] = 1.0
    elif isinstance(phi, ChildrenByAge):
        # int_0^inf e^{-alpha s} F(s) ds = L(alpha) / alpha
        means_l, ints, sups = [], [], []
        for law in spec.laws:
            terms = [
                (clutch.weight * e.count, e.displacement)
                for clutch in law.clutches
                for e in clutch.entries
            ]
            means_l.append(lambda t, terms=terms: sum(w * d.cdf(t) for w, d in terms))
            ints.append(sum(w * d.laplace(alpha) for w, d in terms) / alpha)
            sups.append(law.mean_count)
        means = tuple(means_l)
        integrals = np.array(ints)
        sup = np.array(sups)
    else:
        raise TypeError(f"unknown characteristic {phi!r}")
    return MeanProfile(phi, alpha, integrals, means, sup)


def tail_integral(profile: MeanProfile, j: int, t: float) -> float:
    """``int_t^inf e^{-alpha s} E^j[phi(s)] ds``; an upper bound for ChildrenByAge."""
    a = profile.alpha
    phi = profile.phi
    if t < 0:
        return float(profile.integrals[j - 1])
    if isinstance(phi, (Window, TypeWindow)):
        if profile.sup_mean[j - 1] == 0 or t >= phi.c:
            return 0.0
        return (math.exp(-a * t) - math.exp(-a * phi.c)) / a
    return profile.sup_mean[j - 1] * math.exp(-a * t) / a


def tail_sup(profile: MeanProfile, j: int, t: float) -> float:
    """``sup_{s >= t} e^{-alpha s} E^j[phi(s)]`` (upper bound for ChildrenByAge)."""
    phi = profile.phi
    if isinstance(phi, (Window, TypeWindow)) and t >= phi.c:
        return 0.0
    return profile.sup_mean[j - 1] * math.exp(-profile.alpha * max(t, 0.0))


def check_rate_condition(profile: MeanProfile, delta: float, alpha: float | None = None) -> dict:
    """Decay check of ``t^delta`` times the tail integral and tail supremum.

    Every built-in characteristic has ``E^j[phi(t)]`` bounded, so both tails
    decay like ``exp(-alpha t)`` and the condition holds for every
    ``delta > 0``.  The report lists the exponents and the scaled tails at a
    few checkpoints.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    alpha = profile.alpha if alpha is None else alpha
    checkpoints = [1.0, 10.0, 100.0]
    per_type = []
    for j in range(1, len(profile.integrals) + 1):
        bounded = math.isfinite(profile.sup_mean[j - 1])
        per_type.append(
            {
                "type": j,
                "bounded": bounded,
                "integral": float(profile.integrals[j - 1]),
                "tail_exponent": alpha,
                "scaled_tail_integral": [t**delta * tail_integral(profile, j, t) for t in checkpoints],
                "scaled_tail_sup": [t**delta * tail_sup(profile, j, t) for t in checkpoints],
            }
        )
    passes = alpha > 0 and all(
        d["bounded"] and math.isfinite(d["integral"]) and d["scaled_tail_integral"][-1] < 1e-12
        for d in per_type
    )
    return {"phi": str(profile.phi), "delta": delta, "checkpoints": checkpoints, "types": per_type, "passes": passes}


def sample_phi(
    spec: ModelSpec, phi: Characteristic, j: int, ages, n: int, rng: np.random.Generator
) -> np.ndarray:
    """``phi(age)`` for ``n`` independent type-``j`` individuals; shape ``(len(ages), n)``."""
    ages = np.atleast_1d(np.asarray(ages, dtype=float))
    out = np.zeros((ages.size, n))
    if isinstance(phi, ChildrenByAge):
        gen = sample_first_generation(spec, j, n, rng)
        for r, a in enumerate(ages):
            out[r] = np.bincount(gen.owner[gen.displacement <= a], minlength=n)
        return out
    for r, a in enumerate(ages):
        if a < 0:
            continue
        if isinstance(phi, BornIndicator):
            out[r] = 1.0
        elif isinstance(phi, Window):
            out[r] = float(a < phi.c)
        elif isinstance(phi, TypeWindow):
            out[r] = float(a < phi.c and j == phi.j)
    return out


def phi_value(tree: Tree, phi: Characteristic, x: int, t: float) -> int:
    """``[phi]_x(t - S(x))`` for a single individual, read straight off the tree."""
    age = t - tree.birth[x]
    if age < 0:
        return 0
    if isinstance(phi, BornIndicator):
        return 1
    if isinstance(phi, Window):
        return int(age < phi.c)
    if isinstance(phi, TypeWindow):
        return int(age < phi.c and tree.type_idx[x] == phi.j - 1)
    if isinstance(phi, ChildrenByAge):
        return sum(1 for c in tree.children(x) if tree.birth[c] <= t)
    raise TypeError(f"unknown characteristic {phi!r}")


def window_queries(phi: Characteristic, t: float) -> tuple[list[tuple[float, float, int]], int]:
    """``Z^phi(t)`` as birth-window counts: ``(windows, offset)``.

    ``Z^phi(t) = offset + sum of #{x : lo < S(x) <= hi, type matches}`` over
    the windows, with type 0 meaning any type.  ChildrenByAge counts every
    non-ancestor born by ``t`` once, through its parent.
    """
    if isinstance(phi, BornIndicator):
        return [(-math.inf, t, 0)], 0
    if isinstance(phi, Window):
        return [(t - phi.c, t, 0)], 0
    if isinstance(phi, TypeWindow):
        return [(t - phi.c, t, phi.j)], 0
    if isinstance(phi, ChildrenByAge):
        return [(-math.inf, t, 0)], (-1 if t >= 0 else 0)
    raise TypeError(f"unknown characteristic {phi!r}")
