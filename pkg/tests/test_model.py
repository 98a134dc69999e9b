import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from cmj.model import (
    BUNDLED,
    Clutch,
    ClutchEntry,
    Deterministic,
    Exponential,
    Gamma,
    ModelError,
    ModelSpec,
    OffspringLaw,
    Uniform,
    dump_model,
    is_irreducible,
    load_model,
    parse_displacement,
    parse_model,
    resolve_model,
    sample_first_generation,
    validate,
)

rates = st.floats(0.2, 5.0)
thetas = st.floats(0.0, 4.0)


def _quad_laplace(pdf, lo, hi, theta):
    return integrate.quad(lambda x: math.exp(-theta * x) * pdf(x), lo, hi, limit=200)[0]


@settings(max_examples=40, deadline=None)
@given(rate=rates, theta=thetas)
def test_exponential_laplace_matches_quadrature(rate, theta):
    law = Exponential(rate)
    ref = _quad_laplace(stats.expon(scale=1 / rate).pdf, 0, np.inf, theta)
    assert law.laplace(theta) == pytest.approx(ref, rel=1e-8)


@settings(max_examples=40, deadline=None)
@given(shape=st.floats(0.5, 6.0), rate=rates, theta=thetas)
def test_gamma_laplace_matches_quadrature(shape, rate, theta):
    law = Gamma(shape, rate)
    ref = _quad_laplace(stats.gamma(shape, scale=1 / rate).pdf, 0, np.inf, theta)
    assert law.laplace(theta) == pytest.approx(ref, rel=1e-7)


@settings(max_examples=40, deadline=None)
@given(low=st.floats(0.0, 3.0), width=st.floats(1e-3, 3.0), theta=thetas)
def test_uniform_laplace_and_derivative(low, width, theta):
    law = Uniform(low, low + width)
    ref = _quad_laplace(lambda x: 1 / width, low, low + width, theta)
    assert law.laplace(theta) == pytest.approx(ref, rel=1e-8)
    dref = -integrate.quad(lambda x: x * math.exp(-theta * x) / width, low, low + width)[0]
    assert law.laplace_derivative(theta) == pytest.approx(dref, rel=1e-7, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    law=st.one_of(
        st.builds(Exponential, rates),
        st.builds(Gamma, st.floats(0.5, 6.0), rates),
        st.builds(lambda lo, w: Uniform(lo, lo + w), st.floats(0.0, 3.0), st.floats(0.01, 3.0)),
        st.builds(Deterministic, st.floats(0.01, 3.0)),
    ),
    alpha=st.floats(0.05, 3.0),
)
def test_tilted_law_is_exponential_reweighting(law, alpha):
    tilted = law.tilted(alpha)
    # E_tilted[e^{-theta X}] = L(alpha + theta) / L(alpha)
    for theta in (0.0, 0.5, 1.7):
        assert tilted.laplace(theta) == pytest.approx(law.laplace(alpha + theta) / law.laplace(alpha), rel=1e-9)
    assert tilted.mean == pytest.approx(-law.laplace_derivative(alpha) / law.laplace(alpha), rel=1e-9)


@pytest.mark.parametrize(
    "law",
    [Exponential(1.3), Gamma(2.5, 2.0), Uniform(0.5, 1.5), Uniform(0.0, 2.0).tilted(1.2)],
    ids=["exp", "gamma", "uniform", "tilted_uniform"],
)
def test_sampler_matches_cdf(law):
    rng = np.random.default_rng(3)
    x = law.sample(rng, 40_000)
    ks = stats.kstest(x, np.vectorize(law.cdf))
    assert ks.pvalue > 1e-4
    assert x.mean() == pytest.approx(law.mean, rel=0.03)


def test_deterministic_law():
    law = Deterministic(1.0)
    assert law.laplace(math.log(2)) == pytest.approx(0.5)
    assert law.cdf(0.999) == 0.0 and law.cdf(1.0) == 1.0
    assert np.all(law.sample(np.random.default_rng(0), 5) == 1.0)


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_models_roundtrip(name, tmp_path):
    spec = resolve_model(name)
    path = tmp_path / "m.json"
    dump_model(spec, path)
    again = load_model(path)
    assert again == spec
    assert again.fingerprint() == spec.fingerprint()
    assert is_irreducible(spec)


def test_fingerprint_distinguishes_models(models):
    prints = {m.fingerprint() for m in models.values()}
    assert len(prints) == len(models)


@pytest.mark.parametrize(
    "doc, where",
    [
        ({"schema": 1, "types": 1, "laws": [[{"weight": 0.5, "clutch": []}]]}, "$.laws[0]"),
        ({"schema": 1, "types": 1, "laws": [[{"weight": 1.0, "clutch": [{"type": 2, "count": 1, "displacement": {"kind": "exponential", "rate": 1}}]}]]}, ".type"),
        ({"schema": 1, "types": 1, "laws": [[{"weight": 1.0, "clutch": [{"type": 1, "count": 0, "displacement": {"kind": "exponential", "rate": 1}}]}]]}, ".count"),
        ({"schema": 1, "types": 1, "laws": [[{"weight": 1.0, "clutch": [{"type": 1, "count": 1, "displacement": {"kind": "exponential", "rate": -1}}]}]]}, "rate"),
        ({"schema": 1, "types": 1, "laws": [[{"weight": 1.0, "clutch": [{"type": 1, "count": 1, "displacement": {"kind": "cauchy"}}]}]]}, "kind"),
        ({"schema": 1, "types": 2, "laws": [[{"weight": 1.0, "clutch": []}]]}, "$.laws"),
    ],
    ids=["weights", "child_type", "count", "rate", "kind", "law_count"],
)
def test_malformed_models_rejected_with_path(doc, where):
    with pytest.raises(ModelError) as exc:
        parse_model(json.loads(json.dumps(doc)))
    assert where in str(exc.value)


def test_unknown_displacement_kind():
    with pytest.raises(ModelError):
        parse_displacement({"kind": "lognormal", "mu": 0})


def test_validate_flags_reducible_and_subcritical():
    e = Exponential(1.0)
    reducible = ModelSpec(
        2,
        (
            OffspringLaw((Clutch(1.0, (ClutchEntry(1, 2, e),)),)),
            OffspringLaw((Clutch(1.0, (ClutchEntry(2, 2, e),)),)),
        ),
    )
    assert not is_irreducible(reducible)
    assert not validate(reducible, a5_samples=100).ok
    sub = ModelSpec(1, (OffspringLaw((Clutch(0.6, ()), Clutch(0.4, (ClutchEntry(1, 2, e),)))),))
    rep = validate(sub, a5_samples=100)
    assert not rep.supercritical and not rep.ok


def test_validate_bundled(models):
    for name, spec in models.items():
        rep = validate(spec, a5_samples=2000)
        assert rep.ok, name
        assert rep.lattice_warning == (name == "binary_det")


def test_first_generation_means(models):
    spec = models["three_type"]
    rng = np.random.default_rng(11)
    n = 50_000
    gen = sample_first_generation(spec, 1, n, rng)
    counts = np.array([(gen.child_type == j).sum() / n for j in (1, 2, 3)])
    # type 1: half the time one type-2 and one type-3 child, otherwise two type-1 children
    assert counts == pytest.approx([1.0, 0.5, 0.5], abs=0.02)
    assert np.all(np.diff(gen.owner) >= 0)
