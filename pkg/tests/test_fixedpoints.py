import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from conftest import const_field, random_field, sin_field
from magchan.errors import BranchCollision
from magchan.fixedpoints import (CLASSES, SADDLE_MINUS, SADDLE_PLUS, SINK, SOURCE, continue_branch, liapunov,
                                 locate, numeric_eigenvalues, regime_thresholds, resonances)
from magchan.periodic import FieldConfig, PeriodicFunction

S3 = math.sqrt(3.0)


def test_locate_sin_at_energy_two():
    recs = locate(sin_field(), 2.0)
    expected = [  # (sign, θ, κ, λ, λ̃, class)
        (1, 0.0, 2.0, -1 + 1j, -1 - 1j, SINK),
        (1, math.pi, -2.0, -1 + S3, -1 - S3, SADDLE_PLUS),
        (-1, 0.0, -2.0, 1 + S3, 1 - S3, SADDLE_MINUS),
        (-1, math.pi, 2.0, 1 + 1j, 1 - 1j, SOURCE),
    ]
    assert len(recs) == 4
    for r, (sign, th, kap, l1, l2, cls) in zip(recs, expected):
        assert r.sign == sign and r.cls == cls
        assert r.theta == pytest.approx(th, abs=1e-12)
        assert r.rho == pytest.approx(2.0 * sign, abs=1e-12)
        assert r.kappa == pytest.approx(kap, abs=1e-12)
        assert abs(r.lam - l1) < 1e-12 and abs(r.lam_t - l2) < 1e-12


def test_locate_constant_field_is_empty():
    assert locate(const_field(-1.0), 2.0) == []


def test_double_eigenvalue_at_energy_eight():
    sink = locate(sin_field(), 8.0)[0]
    assert abs(sink.lam + 2.0) < 1e-7 and abs(sink.lam_t + 2.0) < 1e-7
    assert abs(sink.beta + 0.5) < 1e-7 and abs(sink.beta_t + 0.5) < 1e-7
    assert not liapunov(sink).well_defined


def test_locate_rejects_energy_below_potential():
    cfg = FieldConfig(PeriodicFunction(0.0, (), (1.0,)), PeriodicFunction(0.0, (1.0,)))
    with pytest.raises(ValueError):
        locate(cfg, -2.0)


def test_regime_thresholds_unit_slope():
    sink = locate(sin_field(), 9.0)[0]
    E_high, E_low = regime_thresholds(sin_field(), sink)
    assert E_high == pytest.approx(8.0, abs=1e-12)
    assert E_low == pytest.approx(10.125, abs=1e-12)
    assert E_high < E_low


def _linear_l_monotone(rec, sign_expected, n=50, seed=3):
    L = liapunov(rec)
    A = rec.matrix()
    rng = np.random.default_rng(seed)
    for _ in range(n):
        z0 = rng.normal(size=2)
        sol = solve_ivp(lambda t, z: A @ z, (0, 2.0), z0, t_eval=np.linspace(0, 2, 41), rtol=1e-11, atol=1e-13)
        ls = np.array([L.l(z) for z in sol.y.T])
        assert np.all(sign_expected * np.diff(ls) > 0)
        assert sign_expected * L.dl_linear(z0) > 0


def test_liapunov_decreases_at_sink_and_increases_at_source():
    recs = locate(sin_field(), 2.0)
    _linear_l_monotone(recs[0], -1)
    _linear_l_monotone(recs[3], +1)


def test_liapunov_positive_definite():
    L = liapunov(locate(sin_field(), 2.0)[0])
    assert L.l([0.0, 0.0]) == 0.0
    assert L.l([1e-3, -2e-3]) > 0


def test_resonance_beta_tilde_twice_beta():
    sink = locate(sin_field(), 9.5)[0]
    scan = resonances(sin_field(), sink, (9.0, 11.0), m_max=2)
    hits = [r for r in scan.reports if r.order == 2 and r.relation == (2, 0, "beta_tilde")]
    assert len(hits) == 1
    assert hits[0].energy == pytest.approx(10.125, abs=1e-9)
    assert scan.condition_certified


def test_no_resonance_on_complex_stretch():
    sink = locate(sin_field(), 4.0)[0]
    scan = resonances(sin_field(), sink, (2.0, 7.0), m_max=5)
    assert scan.reports == []
    assert scan.condition_certified


def test_branch_angle_constant_when_potential_vanishes():
    sink = locate(sin_field(), 2.0)[0]
    br = continue_branch(sin_field(), sink, np.linspace(2.0, 6.0, 9))
    assert np.max(np.abs(br.theta)) < 1e-13


def test_branch_continuation_matches_direct_rooting():
    # V = 0.1 sin θ moves the sink (with 0.1 cos θ the roots of sin θ·(ω − 0.1) stay at 0 and π)
    cfg = FieldConfig(PeriodicFunction(0.0, (), (1.0,)), PeriodicFunction(0.0, (), (0.1,)))
    sink = [r for r in locate(cfg, 1.0) if r.cls == SINK][0]
    grid = np.linspace(1.0, 3.0, 11)
    br = continue_branch(cfg, sink, grid)
    for E, th in zip(grid, br.theta):
        direct = [r for r in locate(cfg, E) if r.cls == SINK]
        gap = min(abs(math.remainder(th - r.theta, 2 * math.pi)) for r in direct)
        assert gap <= 1e-8
    slopes = np.diff(br.theta) / np.diff(grid)
    assert np.all(np.isfinite(slopes)) and np.max(np.abs(slopes)) > 0


def test_branch_collision_detected():
    # b = 1/2, V = cos θ: the two + roots of b·ω = sin θ merge below E = 2
    cfg = FieldConfig(PeriodicFunction(0.5), PeriodicFunction(0.0, (1.0,)))
    rec = locate(cfg, 1.2)[0]
    with pytest.raises(BranchCollision):
        continue_branch(cfg, rec, np.linspace(1.2, 2.5, 14))


def _check_records(cfg, E):
    for r in locate(cfg, E):
        b = cfg.b(r.theta)
        assert abs(b * r.rho + cfg.V(r.theta, 1)) <= 1e-10
        assert abs(r.rho**2 - 2 * (E - cfg.V(r.theta))) <= 1e-10
        assert r.cls == {(1, True): SADDLE_PLUS, (1, False): SINK, (-1, True): SADDLE_MINUS,
                         (-1, False): SOURCE}[(r.sign, r.kappa < 0)]
        lam = numeric_eigenvalues(cfg, r)
        assert abs(lam[0] - r.lam) <= 1e-7 and abs(lam[1] - r.lam_t) <= 1e-7
        assert abs(r.beta + r.beta_t + 1.0) <= 1e-10
        assert abs(r.beta * r.beta_t - r.kappa / r.rho**2) <= 1e-10
        assert abs(r.beta - r.lam / r.rho) <= 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_field_record_invariants(seed):
    rng = np.random.default_rng(seed)
    cfg = random_field(rng)
    _check_records(cfg, float(cfg.V.max()) + rng.uniform(0.5, 3.0))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_zero_flux_all_classes_present(seed):
    rng = np.random.default_rng(seed)
    cfg = random_field(rng, zero_flux=True)
    recs = locate(cfg, float(cfg.V.max()) + rng.uniform(0.5, 3.0))
    assert {r.cls for r in recs} == set(CLASSES)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_reflection_maps_plus_records_to_minus(seed):
    rng = np.random.default_rng(seed)
    cfg = random_field(rng)
    E = float(cfg.V.max()) + 1.0
    refl = [r for r in locate(cfg.reflect(), E) if r.sign < 0]
    for r in (r for r in locate(cfg, E) if r.sign > 0):
        th = (-r.theta) % (2 * math.pi)
        m = min(refl, key=lambda q: abs(math.remainder(q.theta - th, 2 * math.pi)))
        assert abs(math.remainder(m.theta - th, 2 * math.pi)) < 1e-9
        assert m.kappa == pytest.approx(r.kappa, abs=1e-9)
        assert abs(m.lam + r.lam_t) < 1e-9 and abs(m.lam_t + r.lam) < 1e-9
