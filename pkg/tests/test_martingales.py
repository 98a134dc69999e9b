import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmj.genealogy import Generations, Horizon, simulate
from cmj.martingales import (
    PROXY_COMING,
    PROXY_LAST_GENERATION,
    biggins_trace,
    biggins_w,
    coming_generation,
    fsum,
    last_complete_generation,
    nerman_rate_experiment,
    nerman_v,
    r_sequence,
    w_proxy,
    weighted_coming_mass,
)
from cmj.report import summarize


def test_fsum_is_exact_on_cancellation():
    x = np.array([1e16, 1.0, -1e16, 1.0])
    assert fsum(x) == 2.0


def test_deterministic_binary_martingales_are_one(models, spectra):
    spec, s = models["binary_det"], spectra["binary_det"]
    tree = simulate(spec, 1, Generations(6), 0)
    assert np.allclose(biggins_trace(tree, s, 6).values, 1.0, atol=1e-14)
    tree = simulate(spec, 1, Horizon(5.5), 0)
    for t in (0.0, 1.0, 2.7, 5.5):
        assert nerman_v(tree, s, t) == pytest.approx(1.0, abs=1e-14)


def test_proxy_examples(models, spectra):
    spec, s = models["binary_det"], spectra["binary_det"]
    tree = simulate(spec, 1, Horizon(3.5), 0)
    assert last_complete_generation(tree) == 3
    assert w_proxy(tree, s, PROXY_LAST_GENERATION) == pytest.approx(1.0)
    assert w_proxy(tree, s, PROXY_COMING) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        w_proxy(tree, s, "bogus")


def test_extinct_tree_has_zero_proxy(models, spectra):
    spec, s = models["single_mixed"], spectra["single_mixed"]
    for r in range(300):
        tree = simulate(spec, 1, Horizon(30.0), 6, replicate=r, copy=False)
        if not (~tree.expanded).any():
            assert w_proxy(tree, s, PROXY_LAST_GENERATION) == 0.0
            assert w_proxy(tree, s, PROXY_COMING) == 0.0
            return
    pytest.fail("no extinct tree found")


def test_incomplete_generation_rejected(models, spectra):
    tree = simulate(models["binary_exp"], 1, Horizon(1.0), 0)
    with pytest.raises(ValueError):
        biggins_w(tree, spectra["binary_exp"], 30)
    with pytest.raises(ValueError):
        biggins_w(tree, spectra["binary_exp"], -1)


def test_nerman_v_requires_single_type(models, spectra):
    tree = simulate(models["alternating"], 1, Horizon(2.0), 0)
    with pytest.raises(ValueError):
        nerman_v(tree, spectra["alternating"], 1.0)
    # the v-weighted analogue is defined
    assert weighted_coming_mass(tree, spectra["alternating"], 1.0) > 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.floats(0.0, 4.0))
def test_coming_generation_definition(models, seed, t):
    tree = simulate(models["three_type"], 1, Horizon(4.0), seed)
    idx = coming_generation(tree, t)
    # every member is born after t and every strict ancestor by t
    for x in idx[:50]:
        assert tree.birth[x] > t
        y = tree.parent[x]
        while y >= 0:
            assert tree.birth[y] <= t
            y = tree.parent[y]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_r_sequence_identity(models, spectra, seed):
    tree = simulate(models["binary_exp"], 1, Horizon(5.0), seed)
    tr = r_sequence(tree, spectra["binary_exp"], t_grid=[0.0, 1.0, 2.5, 5.0])
    assert tr.values[0] == 1.0
    assert tr.extra["identity_max_rel_dev"] <= 1e-10


@pytest.mark.parametrize("name", ["binary_exp", "alternating", "three_type"])
def test_w_n_mean_one(models, spectra, name):
    spec, s = models[name], spectra[name]
    w = np.array([biggins_w(simulate(spec, 1, Generations(3), 21, replicate=r, copy=False), s, 3) for r in range(2000)])
    st_ = summarize(w)
    assert abs(st_["mean"] - 1) <= 4 * st_["se"]


def test_nerman_rate_experiment(models, spectra):
    rep = nerman_rate_experiment(models["binary_exp"], spectra["binary_exp"], 0.25, [2, 4, 6], 8, 300, 1, workers=1)
    assert rep.passed
    assert rep.extra["loglog_slope_q90"] < 0
    det = nerman_rate_experiment(models["binary_det"], spectra["binary_det"], 0.25, [2, 4], 6, 5, 1, workers=1)
    assert det.passed
    assert max(s["q90"] for s in det.stats["t^delta|V(t)-V_hat|"]) < 1e-12
    with pytest.raises(ValueError):
        nerman_rate_experiment(models["alternating"], spectra["alternating"], 0.25, [1], 2, 5, 1)
    with pytest.raises(ValueError):
        nerman_rate_experiment(models["binary_exp"], spectra["binary_exp"], 0.25, [1, 5], 4, 5, 1)


def test_nerman_delta_zero_decays(models, spectra):
    rep = nerman_rate_experiment(models["binary_exp"], spectra["binary_exp"], 0.0, [2, 4, 6], 8, 300, 2, workers=1)
    assert rep.passed


def test_proxies_agree_in_mean(models, spectra):
    spec, s = models["binary_exp"], spectra["binary_exp"]
    a, b = [], []
    for r in range(1000):
        tree = simulate(spec, 1, Horizon(4.0), 13, replicate=r, copy=False)
        a.append(w_proxy(tree, s, PROXY_COMING))
        b.append(w_proxy(tree, s, PROXY_LAST_GENERATION))
    for vals in (a, b):
        st_ = summarize(np.array(vals))
        assert abs(st_["mean"] - 1) <= 4 * st_["se"]
    assert math.isfinite(sum(a))
