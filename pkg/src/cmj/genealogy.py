"""Ulam-Harris genealogies, simulated breadth first.

A :class:`Tree` is a flat, breadth-first table.  Children of an individual
occupy a contiguous index range, generations are contiguous, and within a
generation the index order is the lexicographic order of Ulam-Harris
addresses.  Indices are 0-based; type labels in the public API are 1-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

import numba as nb
import numpy as np

from .model import ModelSpec

DEFAULT_CAP = 10_000_000


@dataclass(frozen=True)
class Horizon:
    """Every individual whose parent is born by ``T``."""

    T: float


@dataclass(frozen=True)
class Generations:
    """Generations ``0..n_max``."""

    n_max: int


@dataclass(frozen=True)
class EmbeddedLines:
    """Individuals up to and including the optional line ``n_lines`` of the root's type.

    Root-type individuals on line ``n_lines`` are kept but not expanded, and
    nothing born to a parent after ``horizon`` is drawn.
    """

    n_lines: int
    horizon: float = math.inf


Mode = Union[Horizon, Generations, EmbeddedLines]


@dataclass(frozen=True)
class Individual:
    index: int
    address: tuple[int, ...]
    type: int
    birth_time: float
    parent_index: Optional[int]
    generation: int


@dataclass(eq=False)
class Tree:
    parent: np.ndarray  # int32, -1 for the ancestor
    type_idx: np.ndarray  # int16, 0-based
    birth: np.ndarray  # float64
    generation: np.ndarray  # int32
    first_child: np.ndarray  # int32
    n_children: np.ndarray  # int32
    expanded: np.ndarray  # bool: offspring were drawn
    root_count: np.ndarray  # int32: strict ancestors sharing the ancestor's type
    mode: Mode
    root_type: int
    seed: int
    truncated: bool = False
    replicate: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.birth.size

    @property
    def horizon(self) -> float:
        if isinstance(self.mode, Horizon):
            return self.mode.T
        if isinstance(self.mode, EmbeddedLines):
            return self.mode.horizon
        return math.inf

    @property
    def types(self) -> np.ndarray:
        """1-based type labels."""
        return self.type_idx.astype(np.int64) + 1

    @property
    def first_unexpanded_generation(self) -> float:
        """Smallest generation holding an individual whose offspring were not drawn."""
        if "fug" not in self._cache:
            unexp = ~self.expanded
            self._cache["fug"] = float(self.generation[unexp].min()) if unexp.any() else math.inf
        return self._cache["fug"]

    def generation_complete(self, n: int) -> bool:
        return n <= self.first_unexpanded_generation

    def generation_slice(self, n: int) -> slice:
        bounds = self._generation_bounds()
        if n + 1 >= bounds.size:
            return slice(len(self), len(self))
        return slice(int(bounds[n]), int(bounds[n + 1]))

    def _generation_bounds(self) -> np.ndarray:
        if "gb" not in self._cache:
            counts = np.bincount(self.generation)
            self._cache["gb"] = np.concatenate([[0], np.cumsum(counts)])
        return self._cache["gb"]

    def children(self, k: int) -> range:
        start = int(self.first_child[k])
        return range(start, start + int(self.n_children[k]))

    def address(self, k: int) -> tuple[int, ...]:
        out = []
        while self.parent[k] >= 0:
            par = int(self.parent[k])
            out.append(k - int(self.first_child[par]) + 1)
            k = par
        return tuple(reversed(out))

    def individual(self, k: int) -> Individual:
        par = int(self.parent[k])
        return Individual(
            index=k,
            address=self.address(k),
            type=int(self.type_idx[k]) + 1,
            birth_time=float(self.birth[k]),
            parent_index=None if par < 0 else par,
            generation=int(self.generation[k]),
        )

    def __iter__(self) -> Iterator[Individual]:
        for k in range(len(self)):
            yield self.individual(k)

    def check_time(self, t: float) -> None:
        """Raise unless every individual born by ``t`` and all its children are present."""
        if self.truncated:
            raise ValueError("tree was truncated at the population cap")
        if isinstance(self.mode, Horizon):
            if t > self.mode.T:
                raise ValueError(f"t = {t} exceeds the horizon {self.mode.T}")
            return
        if not self.expanded.any() or self.first_unexpanded_generation == math.inf:
            return
        raise ValueError("time-indexed quantities need a Horizon-mode tree")

    def parent_birth(self) -> np.ndarray:
        """Birth time of each individual's parent (``-inf`` for the ancestor)."""
        if "pb" not in self._cache:
            pb = np.empty_like(self.birth)
            pb[0] = -math.inf
            pb[1:] = self.birth[self.parent[1:]]
            self._cache["pb"] = pb
        return self._cache["pb"]

    def dump(self, path) -> None:
        """Write one JSON record per individual (debugging aid)."""
        import json

        with open(path, "w") as fh:
            for ind in self:
                fh.write(
                    json.dumps(
                        {
                            "address": list(ind.address),
                            "type": ind.type,
                            "birth_time": ind.birth_time,
                            "parent": ind.parent_index,
                        }
                    )
                    + "\n"
                )


# --------------------------------------------------------------------------
# kernel
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _Tables:
    type_clutch_ptr: np.ndarray
    clutch_cumw: np.ndarray
    clutch_slot_ptr: np.ndarray
    slot_type: np.ndarray
    slot_kind: np.ndarray
    slot_a: np.ndarray
    slot_b: np.ndarray
    max_clutch: int


def _tables(spec: ModelSpec) -> _Tables:
    type_ptr = [0]
    cumw: list[float] = []
    slot_ptr = [0]
    s_type, s_kind, s_a, s_b = [], [], [], []
    for law in spec.laws:
        acc = 0.0
        for clutch in law.clutches:
            acc += clutch.weight
            cumw.append(acc)
            for e in clutch.entries:
                a, b = e.displacement.params
                for _ in range(e.count):
                    s_type.append(e.child_type - 1)
                    s_kind.append(e.displacement.code)
                    s_a.append(a)
                    s_b.append(b)
            slot_ptr.append(len(s_type))
        type_ptr.append(len(cumw))
    return _Tables(
        np.array(type_ptr, dtype=np.int64),
        np.array(cumw, dtype=np.float64),
        np.array(slot_ptr, dtype=np.int64),
        np.array(s_type, dtype=np.int16),
        np.array(s_kind, dtype=np.int8),
        np.array(s_a, dtype=np.float64),
        np.array(s_b, dtype=np.float64),
        max(1, max(law.max_clutch for law in spec.laws)),
    )


@nb.njit(cache=True)
def _grow(
    k, n, parent, type_idx, birth, generation, first_child, n_children, expanded, root_count,
    horizon, n_max, n_lines, cap, max_clutch,
    type_clutch_ptr, clutch_cumw, clutch_slot_ptr, slot_type, slot_kind, slot_a, slot_b, rng,
):
    """Expand individuals ``k, k+1, ...`` in index order.

    Returns ``(k, n, status)``: status 0 done, 1 buffers full (resume after
    growing), 2 population cap reached.
    """
    capacity = birth.shape[0]
    root_t = type_idx[0]
    while k < n:
        ok = birth[k] <= horizon and generation[k] < n_max
        if ok and n_lines >= 0 and k > 0 and type_idx[k] == root_t and root_count[k] >= n_lines:
            ok = False
        if not ok:
            expanded[k] = False
            first_child[k] = n
            n_children[k] = 0
            k += 1
            continue
        if n + max_clutch > capacity:
            return k, n, 1
        j = type_idx[k]
        c = type_clutch_ptr[j]
        c_end = type_clutch_ptr[j + 1] - 1
        u = rng.random()
        while c < c_end and u >= clutch_cumw[c]:
            c += 1
        s0 = clutch_slot_ptr[c]
        s1 = clutch_slot_ptr[c + 1]
        if n + (s1 - s0) > cap:
            return k, n, 2
        rc = root_count[k]
        if type_idx[k] == root_t:
            rc += 1
        first_child[k] = n
        n_children[k] = s1 - s0
        expanded[k] = True
        for s in range(s0, s1):
            parent[n] = k
            type_idx[n] = slot_type[s]
            kind = slot_kind[s]
            if kind == 0:
                d = slot_a[s]
            elif kind == 1:
                d = rng.standard_exponential() / slot_a[s]
            elif kind == 2:
                d = rng.standard_gamma(slot_a[s]) / slot_b[s]
            else:
                d = slot_a[s] + (slot_b[s] - slot_a[s]) * rng.random()
            birth[n] = birth[k] + d
            generation[n] = generation[k] + 1
            root_count[n] = rc
            n += 1
        k += 1
    return k, n, 0


_BUFFER_FIELDS = (
    ("parent", np.int32),
    ("type_idx", np.int16),
    ("birth", np.float64),
    ("generation", np.int32),
    ("first_child", np.int32),
    ("n_children", np.int32),
    ("expanded", np.bool_),
    ("root_count", np.int32),
)


class _Workspace:
    """Per-process scratch buffers reused across replicates."""

    def __init__(self):
        self.capacity = 0
        self.arrays: dict[str, np.ndarray] = {}

    def ensure(self, capacity: int, keep: int = 0) -> None:
        if capacity <= self.capacity:
            return
        new = {}
        for name, dtype in _BUFFER_FIELDS:
            arr = np.empty(capacity, dtype=dtype)
            if keep:
                arr[:keep] = self.arrays[name][:keep]
            new[name] = arr
        self.arrays = new
        self.capacity = capacity


_WORKSPACE = _Workspace()


def replicate_rng(seed: int, replicate: int = 0, stream: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, replicate, stream)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replicate), int(stream)))
    return np.random.default_rng(ss)


def simulate(
    spec: ModelSpec,
    root_type: int,
    mode: Mode,
    seed: int,
    replicate: int = 0,
    cap: int = DEFAULT_CAP,
    copy: bool = True,
) -> Tree:
    """Simulate one genealogy.

    Identical ``(spec, root_type, mode, seed, replicate)`` give bit-identical
    trees.  Hitting ``cap`` individuals stops expansion and sets
    ``truncated``.  With ``copy=False`` the tree views a shared scratch
    buffer and is only valid until the next call.
    """
    if not 1 <= root_type <= spec.p:
        raise ValueError(f"root_type {root_type} outside 1..{spec.p}")
    if cap < 1 or cap > np.iinfo(np.int32).max:
        raise ValueError(f"cap must be in 1..{np.iinfo(np.int32).max}")
    horizon, n_max, n_lines = math.inf, np.iinfo(np.int32).max, -1
    if isinstance(mode, Horizon):
        horizon = float(mode.T)
    elif isinstance(mode, Generations):
        if mode.n_max < 0:
            raise ValueError("n_max must be >= 0")
        n_max = int(mode.n_max)
    elif isinstance(mode, EmbeddedLines):
        if mode.n_lines < 0:
            raise ValueError("n_lines must be >= 0")
        horizon, n_lines = float(mode.horizon), int(mode.n_lines)
    else:
        raise TypeError(f"unknown mode {mode!r}")

    tab = _tables(spec)
    rng = replicate_rng(seed, replicate)
    ws = _WORKSPACE
    ws.ensure(max(1 << 16, ws.capacity))
    a = ws.arrays
    a["parent"][0] = -1
    a["type_idx"][0] = root_type - 1
    a["birth"][0] = 0.0
    a["generation"][0] = 0
    a["root_count"][0] = 0
    k, n, status = 0, 1, 1
    while status == 1:
        k, n, status = _grow(
            k, n, a["parent"], a["type_idx"], a["birth"], a["generation"], a["first_child"],
            a["n_children"], a["expanded"], a["root_count"],
            horizon, n_max, n_lines, cap, tab.max_clutch,
            tab.type_clutch_ptr, tab.clutch_cumw, tab.clutch_slot_ptr,
            tab.slot_type, tab.slot_kind, tab.slot_a, tab.slot_b, rng,
        )
        if status == 1:
            ws.ensure(2 * ws.capacity, keep=n)
            a = ws.arrays
    truncated = status == 2
    if truncated:
        a["expanded"][k:n] = False
        a["first_child"][k:n] = n
        a["n_children"][k:n] = 0
    out = {name: a[name][:n].copy() if copy else a[name][:n] for name, _ in _BUFFER_FIELDS}
    return Tree(
        mode=mode, root_type=root_type, seed=int(seed), truncated=truncated, replicate=replicate, **out
    )


# --------------------------------------------------------------------------
# queries
# --------------------------------------------------------------------------


def generation_sizes(tree: Tree) -> list[int]:
    return np.bincount(tree.generation).tolist()


def birth_order(tree: Tree) -> np.ndarray:
    """Indices sorted by birth time, ties by generation then lexicographic address."""
    # index order already is (generation, lexicographic address)
    return np.argsort(tree.birth, kind="stable")


def births_up_to(tree: Tree, t: float) -> tuple[int, np.ndarray]:
    """``T_t`` and the ordered birth times ``t_1 <= t_2 <= ...`` of those born by ``t``."""
    tree.check_time(t)
    order = birth_order(tree)
    times = tree.birth[order]
    count = int(np.searchsorted(times, t, side="right"))
    return count, times[:count]


# --------------------------------------------------------------------------
# streaming statistics (no tree kept)
# --------------------------------------------------------------------------


@nb.njit(cache=True)
def _stream(
    root, horizon, cap, q_lo, q_hi, q_type, j_times, j_weight, alpha, st_type, st_birth,
    type_clutch_ptr, clutch_cumw, clutch_slot_ptr, slot_type, slot_kind, slot_a, slot_b, rng,
):
    """Depth-first pass; status 0 done, 1 stack overflow, 2 population cap reached."""
    counts = np.zeros(q_lo.size, dtype=np.int64)
    mass = np.zeros(j_times.size)
    comp = np.zeros(j_times.size)  # Kahan compensation
    st_type[0] = root
    st_birth[0] = 0.0
    top = 1
    processed = 0
    # the ancestor belongs to J(t) for t < 0
    for g in range(j_times.size):
        if j_times[g] < 0.0:
            mass[g] += j_weight[root]
    while top > 0:
        top -= 1
        j = st_type[top]
        b = st_birth[top]
        processed += 1
        if processed > cap:
            return counts, mass, processed, 2
        for q in range(q_lo.size):
            if q_lo[q] < b and b <= q_hi[q] and (q_type[q] < 0 or q_type[q] == j):
                counts[q] += 1
        c = type_clutch_ptr[j]
        c_end = type_clutch_ptr[j + 1] - 1
        u = rng.random()
        while c < c_end and u >= clutch_cumw[c]:
            c += 1
        s0 = clutch_slot_ptr[c]
        s1 = clutch_slot_ptr[c + 1]
        if top + (s1 - s0) > st_type.size:
            return counts, mass, processed, 1
        for s in range(s0, s1):
            kind = slot_kind[s]
            if kind == 0:
                d = slot_a[s]
            elif kind == 1:
                d = rng.standard_exponential() / slot_a[s]
            elif kind == 2:
                d = rng.standard_gamma(slot_a[s]) / slot_b[s]
            else:
                d = slot_a[s] + (slot_b[s] - slot_a[s]) * rng.random()
            cb = b + d
            ct = slot_type[s]
            for g in range(j_times.size):
                if b <= j_times[g] and cb > j_times[g]:
                    y = j_weight[ct] * math.exp(-alpha * cb) - comp[g]
                    t = mass[g] + y
                    comp[g] = (t - mass[g]) - y
                    mass[g] = t
            if cb <= horizon:
                st_type[top] = ct
                st_birth[top] = cb
                top += 1
    return counts, mass, processed, 0


@dataclass
class StreamResult:
    counts: np.ndarray  # one per window query
    coming_mass: np.ndarray  # weighted mass of J(t) per requested time
    processed: int  # individuals born by the horizon
    truncated: bool


def stream_statistics(
    spec: ModelSpec,
    root_type: int,
    horizon: float,
    seed: int,
    replicate: int = 0,
    windows=(),
    coming_times=(),
    weights=None,
    alpha: float = 0.0,
    cap: int = DEFAULT_CAP,
) -> StreamResult:
    """Simulate depth first up to ``horizon`` and keep only summary statistics.

    ``windows`` holds ``(lo, hi, type)`` triples and each count is
    ``#{x : lo < S(x) <= hi}`` restricted to the 1-based ``type`` (0 for
    any type); every ``hi`` must be at most ``horizon``.  For each time ``t``
    in ``coming_times`` (at most ``horizon``) the result holds
    ``sum_{x in J(t)} weights[tau(x)] e^{-alpha S(x)}``.

    The draw order differs from :func:`simulate`, so the two do not produce
    the same realization for a given seed; both are deterministic.
    """
    windows = list(windows)
    coming_times = [float(t) for t in coming_times]
    if any(w[1] > horizon for w in windows) or any(t > horizon for t in coming_times):
        raise ValueError("queries must not exceed the horizon")
    tab = _tables(spec)
    w = np.ones(spec.p) if weights is None else np.asarray(weights, dtype=float)
    stack = 1024 * tab.max_clutch
    while True:
        # a stack overflow restarts the same stream with a deeper stack
        counts, mass, processed, status = _stream(
            root_type - 1,
            float(horizon),
            int(cap),
            np.array([x[0] for x in windows], dtype=float),
            np.array([x[1] for x in windows], dtype=float),
            np.array([x[2] - 1 for x in windows], dtype=np.int64),
            np.array(coming_times, dtype=float),
            w,
            float(alpha),
            np.empty(stack, dtype=np.int64),
            np.empty(stack),
            tab.type_clutch_ptr, tab.clutch_cumw, tab.clutch_slot_ptr,
            tab.slot_type, tab.slot_kind, tab.slot_a, tab.slot_b,
            replicate_rng(seed, replicate, 1),
        )
        if status != 1:
            return StreamResult(counts, mass, int(processed), status == 2)
        stack *= 8
