import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmj.genealogy import (
    EmbeddedLines,
    Generations,
    Horizon,
    birth_order,
    births_up_to,
    generation_sizes,
    simulate,
    stream_statistics,
)
from cmj.model import BUNDLED, Clutch, ClutchEntry, Deterministic, ModelSpec, OffspringLaw
from cmj.report import summarize
from cmj.spectral import repro_matrix

# two types with deterministic displacements: trees and streams must agree exactly
DET2 = ModelSpec(
    2,
    (
        OffspringLaw((Clutch(1.0, (ClutchEntry(2, 2, Deterministic(1.0)),)),)),
        OffspringLaw((Clutch(1.0, (ClutchEntry(1, 1, Deterministic(0.5)), ClutchEntry(2, 1, Deterministic(1.5)))),)),
    ),
)


def _check_structure(tree):
    n = len(tree)
    par = tree.parent[1:]
    assert tree.parent[0] == -1 and tree.birth[0] == 0.0 and tree.generation[0] == 0
    assert (par < np.arange(1, n)).all()
    assert (tree.generation[1:] == tree.generation[par] + 1).all()
    assert (tree.birth[1:] >= tree.birth[par]).all()
    # children are contiguous blocks
    for k in np.flatnonzero(tree.n_children > 0)[:200]:
        kids = np.arange(tree.first_child[k], tree.first_child[k] + tree.n_children[k])
        assert (tree.parent[kids] == k).all()
    # root_count counts strict ancestors of the root's type
    rt = tree.root_type - 1
    expect = tree.root_count[par] + (tree.type_idx[par] == rt)
    assert (tree.root_count[1:] == expect).all()
    # generation order: index order sorts by generation
    assert (np.diff(tree.generation) >= 0).all()


@settings(max_examples=25, deadline=None)
@given(name=st.sampled_from(BUNDLED), seed=st.integers(0, 2**32), T=st.floats(0.5, 5.0))
def test_horizon_tree_structure(models, name, seed, T):
    spec = models[name]
    tree = simulate(spec, 1, Horizon(T), seed, cap=200_000)
    if tree.truncated:
        return
    _check_structure(tree)
    # exactly the individuals born by T have their offspring drawn
    assert (tree.expanded == (tree.birth <= T)).all()


@settings(max_examples=25, deadline=None)
@given(name=st.sampled_from(BUNDLED), seed=st.integers(0, 2**32), n=st.integers(0, 6))
def test_generation_tree_structure(models, name, seed, n):
    tree = simulate(models[name], 1, Generations(n), seed)
    _check_structure(tree)
    assert tree.generation.max() <= n
    assert (tree.expanded == (tree.generation < n)).all()
    assert tree.generation_complete(n)


def test_determinism_and_replicate_independence(models):
    spec = models["three_type"]
    a = simulate(spec, 1, Horizon(6.0), 42, replicate=3)
    b = simulate(spec, 1, Horizon(6.0), 42, replicate=3)
    c = simulate(spec, 1, Horizon(6.0), 42, replicate=4)
    assert np.array_equal(a.birth, b.birth) and np.array_equal(a.type_idx, b.type_idx)
    assert not (len(a) == len(c) and np.array_equal(a.birth, c.birth))


def test_binary_deterministic_sizes(models):
    tree = simulate(models["binary_det"], 1, Generations(5), 0)
    assert generation_sizes(tree) == [1, 2, 4, 8, 16, 32]
    tree = simulate(models["binary_det"], 1, Horizon(3.5), 0)
    # generations 0..3 are born by 3.5; generation 4 is drawn as their offspring
    assert generation_sizes(tree) == [1, 2, 4, 8, 16]
    assert tree.first_unexpanded_generation == 4


def test_generation_means_match_m0_powers(models):
    spec = models["three_type"]
    M0 = repro_matrix(spec, 0.0)
    target = np.linalg.matrix_power(M0, 4)[0]
    counts = []
    for r in range(3000):
        tree = simulate(spec, 1, Generations(4), 9, replicate=r, copy=False)
        s = tree.generation_slice(4)
        counts.append(np.bincount(tree.type_idx[s], minlength=3))
    counts = np.array(counts, dtype=float)
    for j in range(3):
        s = summarize(counts[:, j])
        assert abs(s["mean"] - target[j]) <= 4 * s["se"], j


def test_population_mean_binary_exp(models):
    # renewal equation m(t) = 1 + 2 int_0^t m(t-s) e^{-s} ds has solution 2e^t - 1
    spec = models["binary_exp"]
    for t in (1.0, 3.0):
        z = [births_up_to(simulate(spec, 1, Horizon(t), 5, replicate=r, copy=False), t)[0] for r in range(3000)]
        s = summarize(np.array(z, dtype=float))
        assert abs(s["mean"] - (2 * math.exp(t) - 1)) <= 4 * s["se"]


def test_birth_order_and_births_up_to(models):
    tree = simulate(models["alternating"], 1, Horizon(3.0), 1)
    order = birth_order(tree)
    assert (np.diff(tree.birth[order]) >= 0).all()
    n, times = births_up_to(tree, 2.0)
    assert n == int((tree.birth <= 2.0).sum()) and (times <= 2.0).all()
    with pytest.raises(ValueError):
        births_up_to(tree, 3.5)


def test_cap_truncates(models):
    tree = simulate(models["binary_exp"], 1, Horizon(20.0), 0, cap=1000)
    assert tree.truncated and len(tree) <= 1000
    with pytest.raises(ValueError):
        tree.check_time(1.0)
    with pytest.raises(ValueError):
        simulate(models["binary_exp"], 1, Horizon(1.0), 0, cap=0)


def test_extinct_tree(models):
    spec = models["single_mixed"]
    for r in range(200):
        tree = simulate(spec, 1, Horizon(50.0), 2, replicate=r, copy=False)
        if len(tree) == 1:
            assert tree.first_unexpanded_generation == math.inf
            assert generation_sizes(tree) == [1]
            return
    pytest.fail("no extinct tree among 200 replicates")


def test_bad_root_type(models):
    with pytest.raises(ValueError):
        simulate(models["alternating"], 3, Horizon(1.0), 0)


def test_embedded_lines_mode(models):
    spec = models["alternating"]
    tree = simulate(spec, 1, EmbeddedLines(2), 4)
    rc = tree.root_count
    members = tree.type_idx == 0
    assert rc[members].max() == 2
    # root-type individuals on line 2 are present but not expanded
    assert not tree.expanded[members & (rc == 2)].any()
    assert tree.expanded[members & (rc < 2)].all()


def test_dump_tree(tmp_path, models):
    tree = simulate(models["binary_det"], 1, Generations(2), 0)
    path = tmp_path / "tree.ndjson"
    tree.dump(path)
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(recs) == 7
    assert recs[0] == {"address": [], "type": 1, "birth_time": 0.0, "parent": None}
    assert recs[4]["address"] == [1, 2] and recs[4]["parent"] == 1 and recs[4]["birth_time"] == 2.0


# --------------------------------------------------------------------------
# streaming statistics
# --------------------------------------------------------------------------


@pytest.mark.parametrize("T", [0.0, 1.0, 2.75, 4.5, 6.0])
def test_stream_matches_tree_on_deterministic_model(T):
    alpha = 0.7
    weights = np.array([1.0, 0.6])
    windows = [(-math.inf, T, 0), (T - 1.0, T, 0), (T - 2.0, T, 2), (-math.inf, T, 1)]
    coming = sorted({T, T / 2})
    res = stream_statistics(DET2, 1, T, 0, windows=windows, coming_times=coming, weights=weights, alpha=alpha)
    tree = simulate(DET2, 1, Horizon(T), 0)
    b, ty = tree.birth, tree.types
    for (lo, hi, j), got in zip(windows, res.counts):
        sel = (b > lo) & (b <= hi) & ((ty == j) if j else True)
        assert got == sel.sum()
    pb = tree.parent_birth()
    for g, got in zip(coming, res.coming_mass):
        sel = (b > g) & (pb <= g)
        assert got == pytest.approx(float((weights[ty[sel] - 1] * np.exp(-alpha * b[sel])).sum()), rel=1e-13)
    assert res.processed == int((b <= T).sum()) and not res.truncated


def test_stream_binary_det_exact():
    from cmj.model import bundled_model

    res = stream_statistics(
        bundled_model("binary_det"), 1, 3.5, 0, windows=[(-math.inf, 3.5, 0)], coming_times=[3.5],
        weights=np.ones(1), alpha=math.log(2),
    )
    assert res.counts[0] == 15
    assert res.coming_mass[0] == pytest.approx(1.0, abs=1e-14)


def test_stream_mean_population(models):
    spec = models["binary_exp"]
    z = [stream_statistics(spec, 1, 3.0, 8, r, windows=[(-math.inf, 3.0, 0)]).counts[0] for r in range(3000)]
    s = summarize(np.array(z, dtype=float))
    assert abs(s["mean"] - (2 * math.exp(3.0) - 1)) <= 4 * s["se"]


def test_stream_errors_and_cap(models):
    spec = models["binary_exp"]
    with pytest.raises(ValueError):
        stream_statistics(spec, 1, 2.0, 0, windows=[(0.0, 3.0, 0)])
    with pytest.raises(ValueError):
        stream_statistics(spec, 1, 2.0, 0, coming_times=[2.5], weights=np.ones(1), alpha=1.0)
    assert stream_statistics(spec, 1, 20.0, 0, cap=500).truncated


def test_stream_is_deterministic(models):
    spec = models["three_type"]
    kw = dict(windows=[(-math.inf, 5.0, 0), (4.0, 5.0, 3)], coming_times=[5.0], weights=np.ones(3), alpha=0.8)
    a = stream_statistics(spec, 1, 5.0, 3, 7, **kw)
    b = stream_statistics(spec, 1, 5.0, 3, 7, **kw)
    assert np.array_equal(a.counts, b.counts) and np.array_equal(a.coming_mass, b.coming_mass)
