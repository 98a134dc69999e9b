import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmj.characteristics import BornIndicator, mean_profile
from cmj.embedding import optional_lines, phi_J
from cmj.genealogy import Horizon, simulate
from cmj.model import BUNDLED
from cmj.report import summarize
from cmj.spine import (
    duality_check,
    excursions,
    mean_step_target,
    named_function,
    phi_J_mean_spine,
    sigma_stats,
    spine_law,
    stationary_occupation,
    walk,
)


@pytest.mark.parametrize("name", BUNDLED)
def test_transition_is_stochastic_with_stationary_pi(models, spectra, name):
    s = spectra[name]
    law = spine_law(models[name], s)
    P = law.transition
    assert (P >= 0).all()
    assert P.sum(axis=1) == pytest.approx(np.ones(s.p), abs=1e-12)
    assert s.pi @ P == pytest.approx(s.pi, abs=1e-12)
    for j in range(1, s.p + 1):
        assert sum(c.weight for c in law.rows[j - 1]) == pytest.approx(1.0, abs=1e-12)
        assert law.mean_step(j) == pytest.approx(mean_step_target(s, j), rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(name=st.sampled_from(BUNDLED), seed=st.integers(0, 2**31))
def test_walk_paths_are_valid(models, spectra, name, seed):
    law = spine_law(models[name], spectra[name])
    path = walk(law, 1, 200, seed)
    assert path.types[0] == 1 and path.positions[0] == 0.0
    assert ((path.types >= 1) & (path.types <= law.p)).all()
    assert (np.diff(path.positions) >= 0).all()
    P = law.transition
    assert all(P[a - 1, b - 1] > 0 for a, b in zip(path.types[:-1], path.types[1:]))


def test_walk_is_deterministic(models, spectra):
    law = spine_law(models["three_type"], spectra["three_type"])
    a, b = walk(law, 2, 500, 9), walk(law, 2, 500, 9)
    assert np.array_equal(a.types, b.types) and np.array_equal(a.positions, b.positions)


def test_step_means_from_walk(models, spectra):
    s = spectra["three_type"]
    law = spine_law(models["three_type"], s)
    path = walk(law, 1, 200_000, 3)
    steps = np.diff(path.positions)
    for j in (1, 2, 3):
        x = steps[path.types[:-1] == j]
        assert abs(x.mean() - mean_step_target(s, j)) <= 4 * x.std(ddof=1) / math.sqrt(x.size)


def test_alternating_excursions_exact(models, spectra):
    s = spectra["alternating"]
    ex = excursions(spine_law(models["alternating"], s), 1, 20_000, 5)
    assert (ex.sigma == 2).all()
    st_ = summarize(ex.s_sigma)
    assert abs(st_["mean"] - 2 / math.sqrt(6)) <= 4 * st_["se"]


@pytest.mark.parametrize("name", ["three_type", "single_mixed"])
def test_sigma_stats(models, spectra, name):
    s = spectra[name]
    out = sigma_stats(spine_law(models[name], s), s, 1, 20_000, 2)
    assert out["pass"], out
    assert out["sigma_target"] == pytest.approx(1 / s.pi[0])


def test_stationary_occupation(models, spectra):
    s = spectra["three_type"]
    out = stationary_occupation(spine_law(models["three_type"], s), s, 100_000, 4)
    assert out["pass"], out


def test_duality_three_type(models, spectra):
    rep = duality_check(models["three_type"], spectra["three_type"], 1, replicates=1500, seed=3, workers=1)
    assert rep.passed, rep.verdicts
    assert set(rep.verdicts) == {f"{a}:{f}" for a in ("at_sigma", "before_sigma") for f in ("one", "s", "exp_neg_s")}


def test_duality_type_indicator(models, spectra):
    rep = duality_check(models["alternating"], spectra["alternating"], 1, ["type:2"], 1000, 1, workers=1)
    assert rep.passed, rep.verdicts


def test_named_function():
    assert named_function("exp_neg_s")(np.array([1]), np.array([0.0]))[0] == 1.0
    assert named_function("type:2")(np.array([1, 2]), np.zeros(2)).tolist() == [0.0, 1.0]
    with pytest.raises(ValueError):
        named_function("cosine")


def test_phi_J_mean_matches_trees(models, spectra):
    spec, s = models["three_type"], spectra["three_type"]
    t = 2.0
    prof = mean_profile(spec, BornIndicator(), s.alpha)
    m_walk, se_walk = phi_J_mean_spine(spine_law(spec, s), s, prof, 1, t, 20_000, 1)
    vals = []
    for r in range(3000):
        tree = simulate(spec, 1, Horizon(t), 8, replicate=r, copy=False)
        members, v = phi_J(optional_lines(tree, 1), BornIndicator(), t)
        vals.append(math.exp(-s.alpha * t) * v[members == 0][0])
    st_ = summarize(np.array(vals))
    assert abs(m_walk - st_["mean"]) <= 4 * math.hypot(se_walk, st_["se"])
