import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magchan.periodic import (MAX_ORDER, FieldConfig, PeriodicFunction, antiderivative, bump_field,
                              check_noncritical, flux)

coeffs = st.lists(st.floats(-2.0, 2.0, allow_nan=False), min_size=0, max_size=4)
functions = st.builds(PeriodicFunction, st.floats(-2.0, 2.0, allow_nan=False), coeffs, coeffs)
angles = st.floats(-20.0, 20.0, allow_nan=False)


def test_eval_examples():
    sin = PeriodicFunction(0.0, (), (1.0,))
    assert sin(math.pi / 2) == pytest.approx(1.0, abs=1e-15)
    assert sin(0.0, 1) == pytest.approx(1.0, abs=1e-15)
    assert PeriodicFunction(0.0, (2.0,))(math.pi / 2, 1) == pytest.approx(-2.0, abs=1e-15)


def test_eval_rejects_order_above_max():
    with pytest.raises(ValueError):
        PeriodicFunction(0.0, (1.0,))(0.3, MAX_ORDER + 1)


def test_eval_vectorized_matches_scalar():
    f = PeriodicFunction(0.3, (1.0, -0.5), (0.2, 0.1, 0.7))
    th = np.linspace(-3, 9, 17)
    vec = f(th, 2)
    assert np.allclose(vec, [f(float(t), 2) for t in th], rtol=0, atol=1e-14)


def test_flux_examples():
    assert flux(PeriodicFunction(0.0, (), (1.0,))) == 0.0
    assert flux(PeriodicFunction(-1.0)) == pytest.approx(-2 * math.pi)
    assert flux(PeriodicFunction(-0.3, (), (1.0,))) == pytest.approx(-0.6 * math.pi)


def test_antiderivative_examples():
    A = antiderivative(PeriodicFunction(0.0, (), (1.0,)))
    th = np.linspace(0, 7, 11)
    assert np.allclose(A.value(th), 1 - np.cos(th), atol=1e-14)
    assert A.slope == 0.0
    assert A.value(2 * math.pi) == pytest.approx(0.0, abs=1e-14)
    B = antiderivative(PeriodicFunction(-1.0))
    assert B.slope == -1.0
    assert np.allclose(B.value(th), -th)


def test_check_noncritical_examples():
    ok, eps = check_noncritical(PeriodicFunction(), (0.5, 2.0))
    assert ok and eps == math.inf
    cosv = PeriodicFunction(0.0, (1.0,))
    assert check_noncritical(cosv, (0.5, 1.5)) == (False, 0.0)
    ok, eps = check_noncritical(cosv, (-0.5, 0.5))
    # |sin θ|/2 minimized where |cos θ| = 0.5
    assert ok and eps == pytest.approx(math.sqrt(3) / 4, rel=1e-9)


def test_check_noncritical_rejects_empty_interval():
    with pytest.raises(ValueError):
        check_noncritical(PeriodicFunction(0.0, (1.0,)), (1.0, 1.0))


def test_json_roundtrip():
    cfg = FieldConfig(PeriodicFunction(0.1, (1.0,), (0.0, 2.0)), PeriodicFunction(0.0, (), (0.3,)), "x")
    assert FieldConfig.from_json(cfg.to_json()) == cfg


def test_reflection():
    f = PeriodicFunction(0.2, (0.5, -0.1), (1.0, 0.3))
    g = f.reflect()
    th = np.linspace(0, 6, 9)
    assert np.allclose(g(th), f(-th), atol=1e-14)


def test_from_samples_recovers_series():
    f = PeriodicFunction(0.4, (1.0, 0.0, -0.25), (0.0, 0.5))
    th = np.arange(64) * 2 * math.pi / 64
    g = PeriodicFunction.from_samples(f(th), 5)
    x = np.linspace(0, 6, 13)
    assert np.allclose(g(x), f(x), atol=1e-13)


def test_bump_field_shape():
    cfg = bump_field()
    assert cfg.truncation == 64
    assert cfg.b(0.0) == pytest.approx(-1.0, abs=0.05)
    assert cfg.b(math.pi) > 0.5
    assert cfg.V.is_constant


@settings(max_examples=60, deadline=None)
@given(functions, angles, st.integers(0, MAX_ORDER))
def test_eval_periodic_in_every_order(f, th, k):
    assert f(th + 2 * math.pi, k) == pytest.approx(f(th, k), abs=1e-11)


@settings(max_examples=60, deadline=None)
@given(functions, st.integers(0, MAX_ORDER - 1), st.integers(0, 2**31 - 1))
def test_derivative_matches_central_difference(f, k, seed):
    th = np.random.default_rng(seed).uniform(0, 2 * math.pi, 100)
    h = 1e-5
    fd = (f(th + h, k) - f(th - h, k)) / (2 * h)
    exact = f(th, k + 1)
    scale = max(1.0, float(np.max(np.abs(exact))))
    assert np.max(np.abs(fd - exact)) <= 1e-6 * scale


@settings(max_examples=60, deadline=None)
@given(functions, angles)
def test_antiderivative_differentiates_back(f, th):
    A = antiderivative(f)
    h = 1e-4
    d = (A.value(th + h) - A.value(th - h)) / (2 * h)
    assert d == pytest.approx(f(th), abs=1e-7)
    assert A.value(0.0) == pytest.approx(0.0, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(functions)
def test_flux_equals_antiderivative_over_period(f):
    assert antiderivative(f).value(2 * math.pi) == pytest.approx(flux(f), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(functions, angles)
def test_antiderivative_termwise_derivative_is_exact(f, th):
    A = antiderivative(f)
    assert A.slope + A.periodic_part(th, 1) == pytest.approx(f(th), abs=1e-12)
