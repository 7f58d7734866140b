import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqmatch.divergence import (
    PhiSpec,
    mixture_regularizer,
    parse_kind,
    phi,
    phi_prime,
    scaled_phi,
)

KINDS = ("kl", "js", "chi2", "chi2_mixture")


def test_phi_examples():
    assert phi(PhiSpec("chi2"), 2.0) == 1.0
    assert phi(PhiSpec("chi2"), 0.0) == 0.0
    assert phi(PhiSpec("kl"), 0.0) == -1.0
    assert phi(PhiSpec("js"), 0.0) == 0.0


@pytest.mark.parametrize("kind", KINDS)
def test_phi_prime_is_one_at_zero(kind):
    assert phi_prime(PhiSpec(kind), 0.0) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("kind", KINDS)
def test_phi_prime_matches_central_differences(kind):
    spec = PhiSpec(kind)
    h = 1e-5
    for x in np.linspace(-0.6, 3.0, 37):
        fd = (phi(spec, x + h) - phi(spec, x - h)) / (2 * h)
        assert fd == pytest.approx(phi_prime(spec, x), rel=1e-7, abs=1e-9)


def test_js_guard_is_continuous_and_concave():
    spec = PhiSpec("js")
    x0 = spec.js_knot
    assert phi(spec, x0 - 1e-12) == pytest.approx(phi(spec, x0 + 1e-12), abs=1e-9)
    assert phi_prime(spec, x0 - 1e-12) == pytest.approx(phi_prime(spec, x0 + 1e-12), abs=1e-8)
    # total: finite far below log(1/2), where the raw formula is undefined
    assert np.isfinite(phi(spec, -5.0))
    assert phi(spec, -5.0) < phi(spec, -1.0)


@pytest.mark.parametrize("kind", KINDS)
@given(st.floats(-0.6, 4.0), st.floats(-0.6, 4.0))
def test_phi_concave_on_grid(kind, a, b):
    spec = PhiSpec(kind)
    mid = phi(spec, 0.5 * (a + b))
    assert mid >= 0.5 * (phi(spec, a) + phi(spec, b)) - 1e-12


@pytest.mark.parametrize("kind", KINDS)
def test_scaled_phi_linearizes_with_halving_alpha(kind):
    x = 0.7
    gaps = [abs(scaled_phi(PhiSpec(kind, alpha=a), x) - x) for a in (0.08, 0.04, 0.02, 0.01)]
    if kind == "chi2_mixture":
        assert max(gaps) == 0.0
        return
    ratios = [g1 / g2 for g1, g2 in zip(gaps, gaps[1:])]
    assert all(1.8 < r < 2.2 for r in ratios)


def test_chi2_conjugate_numerically():
    # f(t) = (t - 1)^2 gives -f*(-x) = x - x^2/4
    ts = np.linspace(-10, 10, 400001)
    for x in (-0.5, 0.0, 0.3, 1.2):
        conj = np.max(-x * ts - (ts - 1) ** 2)
        assert -conj == pytest.approx(phi(PhiSpec("chi2"), x), abs=1e-8)


def test_kl_conjugate_exact():
    # f(t) = t log t has f*(y) = exp(y - 1); -f*(-x) = -exp(-x - 1), which is phi_kl up to scale
    for x in (-0.5, 0.0, 0.4, 2.0):
        assert -math.exp(-x - 1) * math.e == pytest.approx(phi(PhiSpec("kl"), x))


def test_mixture_regularizer_examples():
    spec = PhiSpec("chi2_mixture")
    assert mixture_regularizer(spec, [0.0, 0.0], [0.0]) == 0.0
    # beta * c * mean(r_data^2) = 0.5 * 0.5 * 4
    assert mixture_regularizer(spec, [2.0], [0.0]) == pytest.approx(1.0)
    beta1 = PhiSpec("chi2_mixture", mixture_beta=1.0, mixture_c=0.5)
    assert mixture_regularizer(beta1, [1.0, 3.0], [7.0]) == pytest.approx(0.5 * 5.0)
    with pytest.raises(ValueError):
        mixture_regularizer(PhiSpec("chi2"), [1.0], [1.0])


def test_mixture_regularizer_weighted():
    spec = PhiSpec("chi2_mixture")
    assert mixture_regularizer(spec, [2.0], [1.0], w_data=[0.5], w_model=[2.0]) == pytest.approx(0.25 * 2 + 0.25 * 2)


def test_spec_validation_and_names():
    with pytest.raises(ValueError):
        PhiSpec("tv")
    with pytest.raises(ValueError):
        PhiSpec("kl", alpha=0.0)
    assert parse_kind("chi2-mixture") == "chi2_mixture"
    with pytest.raises(ValueError):
        parse_kind("wasserstein")
