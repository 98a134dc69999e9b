import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from cmj.characteristics import (
    BornIndicator,
    ChildrenByAge,
    TypeWindow,
    Window,
    check_rate_condition,
    evaluate,
    mean_profile,
    parse_characteristic,
    phi_value,
    sample_phi,
    tail_integral,
    window_queries,
    z_phi,
    z_phi_grid,
)
from cmj.genealogy import Generations, Horizon, simulate
from cmj.model import BUNDLED

PHIS = [BornIndicator(), Window(1.0), Window(0.3), TypeWindow(2, 1.5), ChildrenByAge()]
phi_strategy = st.one_of(
    st.just(BornIndicator()),
    st.just(ChildrenByAge()),
    st.builds(Window, st.floats(0.05, 3.0)),
    st.builds(TypeWindow, st.integers(1, 2), st.floats(0.05, 3.0)),
)


@pytest.mark.parametrize("text", ["born", "window:1.5", "typewindow:2:0.5", "childrenbyage"])
def test_parse_roundtrip(text):
    phi = parse_characteristic(text)
    assert parse_characteristic(str(phi)) == phi


@pytest.mark.parametrize("text", ["", "window", "window:0", "window:-1", "typewindow:1", "window:x", "age"])
def test_parse_rejects(text):
    with pytest.raises(ValueError):
        parse_characteristic(text)


@settings(max_examples=40, deadline=None)
@given(phi=phi_strategy, seed=st.integers(0, 10**6), t=st.floats(0.0, 4.0))
def test_vectorized_evaluation_matches_pointwise(models, phi, seed, t):
    tree = simulate(models["alternating"], 1, Horizon(4.0), seed)
    vals = evaluate(tree, phi, t)
    ref = np.array([phi_value(tree, phi, x, t) for x in range(len(tree))])
    assert np.array_equal(vals, ref)
    assert z_phi(tree, phi, t) == float(ref.sum())


@settings(max_examples=40, deadline=None)
@given(phi=phi_strategy, seed=st.integers(0, 10**6), t=st.floats(-1.0, 4.0))
def test_window_queries_reproduce_z(models, phi, seed, t):
    tree = simulate(models["alternating"], 1, Horizon(4.0), seed)
    windows, offset = window_queries(phi, t)
    b, ty = tree.birth, tree.types
    total = offset + sum(int(((b > lo) & (b <= hi) & ((ty == j) if j else True)).sum()) for lo, hi, j in windows)
    expect = z_phi(tree, phi, t) if t >= 0 else 0.0
    assert total == expect


def test_z_requires_complete_tree(models):
    tree = simulate(models["binary_exp"], 1, Horizon(2.0), 0)
    with pytest.raises(ValueError):
        z_phi(tree, BornIndicator(), 2.5)
    gen = simulate(models["binary_exp"], 1, Generations(3), 0)
    with pytest.raises(ValueError):
        z_phi(gen, BornIndicator(), 1.0)


def test_deterministic_tree_counts(models):
    tree = simulate(models["binary_det"], 1, Horizon(4.5), 0)
    grid = [0.0, 1.0, 2.5, 4.0]
    assert list(z_phi_grid(tree, BornIndicator(), grid)) == [1, 3, 7, 31]
    assert z_phi(tree, Window(1.0), 4.0) == 16  # only generation 4 is younger than 1
    assert z_phi(tree, ChildrenByAge(), 4.0) == 30


@pytest.mark.parametrize("name", BUNDLED)
@pytest.mark.parametrize("phi", PHIS[:4] + [ChildrenByAge()], ids=str)
def test_profile_integral_matches_quadrature(models, spectra, name, phi):
    spec, alpha = models[name], spectra[name].alpha
    if isinstance(phi, TypeWindow) and phi.j > spec.p:
        pytest.skip("type outside the model")
    prof = mean_profile(spec, phi, alpha)
    for j in range(1, spec.p + 1):
        f = lambda s: math.exp(-alpha * s) * prof.mean(j, s)  # noqa: E731
        # split at the discontinuities so quad sees smooth pieces
        pts = sorted({0.0, 0.5, 1.0, 1.5, 2.0, getattr(phi, "c", 1.0), 40.0})
        ref = sum(integrate.quad(f, a, b, limit=200)[0] for a, b in zip(pts, pts[1:]))
        ref += integrate.quad(f, 40.0, np.inf)[0]
        assert prof.integrals[j - 1] == pytest.approx(ref, rel=1e-6, abs=1e-10)
        assert tail_integral(prof, j, 0.0) >= prof.integrals[j - 1] - 1e-12


@pytest.mark.parametrize("name", ["three_type", "single_mixed"])
def test_profile_mean_matches_sampling(models, spectra, name):
    spec = models[name]
    prof = mean_profile(spec, ChildrenByAge(), spectra[name].alpha)
    rng = np.random.default_rng(17)
    ages = [0.25, 0.75, 2.0]
    for j in range(1, spec.p + 1):
        x = sample_phi(spec, ChildrenByAge(), j, ages, 40_000, rng)
        for r, a in enumerate(ages):
            se = x[r].std(ddof=1) / math.sqrt(x.shape[1])
            assert abs(x[r].mean() - prof.mean(j, a)) <= 4 * se + 1e-12


def test_born_and_window_profile_closed_forms(spectra, models):
    alpha = spectra["binary_exp"].alpha
    assert mean_profile(models["binary_exp"], BornIndicator(), alpha).integrals[0] == pytest.approx(1.0)
    w = mean_profile(models["binary_exp"], Window(math.log(2)), alpha)
    assert w.integrals[0] == pytest.approx(0.5)


def test_rate_condition(models, spectra):
    for name, spec in models.items():
        for phi in (BornIndicator(), Window(1.0), ChildrenByAge()):
            prof = mean_profile(spec, phi, spectra[name].alpha)
            assert check_rate_condition(prof, 0.25)["passes"]
    with pytest.raises(ValueError):
        check_rate_condition(prof, -0.1)


def test_type_window_checks_type(models, spectra):
    with pytest.raises(ValueError):
        mean_profile(models["binary_exp"], TypeWindow(2, 1.0), 1.0)
