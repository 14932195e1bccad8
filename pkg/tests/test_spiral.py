import math

import numpy as np
import pytest

from conftest import const_field, sin_field
from magchan.errors import BoundaryHit, EmptyWindow, NoSolution
from magchan.fixedpoints import SADDLE_PLUS, locate
from magchan.periodic import FieldConfig, PeriodicFunction, bump_field
from magchan.spiral import (INCOMING, KERNEL_GROWING, OUTGOING, arcsine_bound, bifurcate, critical_energy,
                            dE_rho, dE_rho_grid, find_periodic, incoming_set, nonnegative_intervals,
                            ordering_gap, quadratic_coefficients_v0, reflect_solution, shoot,
                            shoot_derivatives, singular_cycle, window)

S3 = math.sqrt(3.0)
TWO_PI = 2 * math.pi


@pytest.fixture(scope="module")
def const_window():
    return window(const_field(-1.0), (0.1, 10.0))


@pytest.fixture(scope="module")
def bump():
    return bump_field()


@pytest.fixture(scope="module")
def cycle_field():
    cfg = FieldConfig(PeriodicFunction(-1.0, (), (1.1,)))
    return cfg, window(cfg, (0.1, 20.0))


def test_shoot_constant_field():
    c = const_field(-1.0)
    assert shoot(c, 2.0, S3) == pytest.approx(S3, abs=1e-12)
    with pytest.raises(ValueError):
        shoot(c, 2.0, 2.0)


def test_shoot_derivatives_constant_field_closed_forms():
    d = shoot_derivatives(const_field(-1.0), 2.0, S3)
    assert d.fa == pytest.approx(math.exp(-TWO_PI * S3) - 1.0, abs=1e-9)
    assert d.fE == pytest.approx((1.0 - math.exp(-TWO_PI * S3)) / S3, abs=1e-9)
    assert d.faa < 0.0
    assert d.winding == pytest.approx(TWO_PI * S3, rel=1e-10)


def test_shoot_derivatives_match_finite_differences(rng):
    cfg = FieldConfig(PeriodicFunction(-0.8, (0.3,), (0.4,)), PeriodicFunction(0.0, (0.1,)))
    done = 0
    while done < 20:
        E = rng.uniform(1.0, 4.0)
        lim = math.sqrt(2.0 * (E - float(cfg.V(0.0))))
        a = rng.uniform(-0.6, 0.6) * lim
        try:
            d = shoot_derivatives(cfg, E, a)
            h = 1e-5
            fa = (shoot(cfg, E, a + h) - shoot(cfg, E, a - h)) / (2 * h) - 1.0
            fE = (shoot(cfg, E + h, a) - shoot(cfg, E - h, a)) / (2 * h)
            faa = (shoot(cfg, E, a + 1e-3) - 2 * shoot(cfg, E, a) + shoot(cfg, E, a - 1e-3)) / 1e-6
        except BoundaryHit:
            continue
        assert d.fa == pytest.approx(fa, rel=1e-5, abs=1e-9)
        assert d.fE == pytest.approx(fE, rel=1e-5, abs=1e-9)
        assert d.faa == pytest.approx(faa, rel=1e-3, abs=1e-6)
        done += 1


def test_find_periodic_constant_field():
    sol = find_periodic(const_field(-1.0), 2.0)
    assert np.max(np.abs(sol.rho_values - S3)) < 1e-8
    assert sol.winding == pytest.approx(TWO_PI * S3, rel=1e-10)
    assert sol.sense == OUTGOING
    assert sol.residual() < 1e-10 and sol.periodicity_gap() < 1e-10


def test_find_periodic_zero_flux_has_no_solution():
    with pytest.raises(NoSolution):
        find_periodic(sin_field(), 2.0)


def test_find_periodic_bump_field(bump):
    sol = find_periodic(bump, 1.0)
    # the spline derivative resolves the 64-mode bump to a few 1e−6
    assert sol.winding > 0.0 and sol.residual() < 1e-5
    assert np.all(sol.eta_values > 0.0)


def test_find_periodic_unique_from_several_seeds():
    cfg = FieldConfig(PeriodicFunction(-0.8, (0.3,), (0.4,)))
    E = 2.0
    lim = math.sqrt(2.0 * E)
    ref = find_periodic(cfg, E)
    th = np.linspace(0, TWO_PI, 257)
    for seed in np.linspace(-0.8, 0.8, 5) * lim:
        sol = find_periodic(cfg, E, seed=float(seed))
        assert np.max(np.abs(sol.rho_at(th) - ref.rho_at(th))) <= 1e-8


def test_dE_rho_constant_field():
    sol = find_periodic(const_field(-1.0), 2.0)
    th = np.linspace(0, TWO_PI, 9)
    assert np.allclose(dE_rho(sol, th), 1.0 / S3, atol=1e-9)


def test_dE_rho_growing_kernel_diverges():
    sol = find_periodic(const_field(-1.0), 2.0)
    with pytest.raises(ArithmeticError):
        dE_rho(sol, 0.5, KERNEL_GROWING)


def test_dE_rho_matches_finite_difference_on_bump(bump):
    E, h = 1.0, 1e-4
    sol = find_periodic(bump, E)
    up = find_periodic(bump, E + h, seed=sol.a)
    dn = find_periodic(bump, E - h, seed=sol.a)
    th = np.linspace(0.1, 6.1, 13)
    fd = (up.rho_at(th) - dn.rho_at(th)) / (2 * h)
    ex = dE_rho(sol, th)
    assert np.max(np.abs(fd - ex) / np.abs(ex)) <= 1e-5
    assert np.min(ex) > 1.0 / math.sqrt(2.0 * (E - float(bump.V.min())))


def test_window_constant_field(const_window):
    assert const_window.E_d == pytest.approx(0.5, abs=1e-6)
    assert math.isinf(const_window.E_e)
    assert const_window.to_json()["E_e"] == "inf"
    assert const_window.contains(2.0) and not const_window.contains(0.4)
    assert shoot_derivatives(const_field(-1.0), 0.5, 0.0).fa == pytest.approx(0.0, abs=1e-9)


def test_window_zero_flux_is_empty():
    with pytest.raises(EmptyWindow):
        window(sin_field(), (0.1, 10.0))
    with pytest.raises(EmptyWindow):
        incoming_set(sin_field(), (0.1, 10.0))


def test_bifurcation_law_constant_field(const_window):
    bf = bifurcate(const_field(-1.0), const_window)
    assert bf.a_d == pytest.approx(0.0, abs=1e-6)
    assert abs(bf.fa_d) < 1e-6
    for p in bf.fit_exponent:
        assert abs(p - 0.5) <= 0.01
    for c in bf.fit_coefficient:
        assert c == pytest.approx(bf.C_closed_form, rel=0.01)
    assert bf.C_closed_form == pytest.approx(math.sqrt(2.0), rel=1e-6)
    assert np.all(bf.winding_plus > 0) and np.all(bf.winding_minus < 0)


def test_incoming_set_constant_field():
    c = const_field(-1.0)
    iw = incoming_set(c, (0.1, 10.0))
    assert iw.E_d == pytest.approx(0.5, abs=1e-6) and math.isinf(iw.E_e)
    assert iw.sense == INCOMING
    for s in iw.branch:
        assert np.allclose(s.rho_values, -math.sqrt(2 * s.E - 1), atol=1e-8)
        assert s.winding < 0


def test_ordering_of_incoming_and_outgoing():
    c = const_field(-1.0)
    out = find_periodic(c, 2.0)
    inc = find_periodic(c, 2.0, sense=INCOMING)
    assert np.allclose(inc.rho_values, -S3, atol=1e-8)
    assert ordering_gap(out, inc) == pytest.approx(2 * S3, abs=1e-8)


def test_reflect_solution_roundtrip(bump):
    sol = find_periodic(bump, 1.0)
    back = reflect_solution(reflect_solution(sol, bump.reflect()), bump)
    assert np.allclose(back.rho_values, sol.rho_values, atol=1e-14)
    assert back.winding == pytest.approx(sol.winding, abs=1e-14)


def test_singular_cycle_absent_for_unbounded_window(const_window):
    assert singular_cycle(const_field(-1.0), win=const_window) is None


def test_singular_cycle_upper(cycle_field):
    cfg, win = cycle_field
    assert math.isfinite(win.E_e)
    up = singular_cycle(cfg, win=win)
    assert up is not None and up.side == "upper"
    assert up.E == pytest.approx(win.E_e, rel=1e-4)
    assert up.touch_set and all(k < 0 for k in up.kappa_at_touch)
    ex = up.expansion_check
    assert ex["right_fit"] == pytest.approx(ex["right_pred"], rel=1e-3)
    assert ex["left_fit"] == pytest.approx(ex["left_pred"], rel=1e-3)
    # the cycle reaches the shell boundary at its touch angle
    th0 = up.touch_set[0]
    assert float(up.eta_at(th0)) < 1e-2


def test_singular_cycle_lower_is_reflected_upper(cycle_field):
    cfg, _ = cycle_field
    lo = singular_cycle(cfg, "lower")
    up_r = singular_cycle(cfg.reflect(), "upper")
    assert lo.E == pytest.approx(up_r.E, abs=1e-12)
    th = np.linspace(0.2, 6.0, 30)
    assert np.allclose(lo.rho_at(th), -up_r.rho_at(-th), atol=1e-6)
    assert [t for t in lo.touch_set] == pytest.approx([(TWO_PI - t) % TWO_PI for t in up_r.touch_set])


def test_quadratic_coefficients_match_eigenvalues():
    # V = 0: the right/left coefficients are −λ²/ρ with λ the saddle's unstable/stable exponent
    cfg = FieldConfig(PeriodicFunction(-1.0, (), (1.1,)))
    E = 1.0
    rec = [r for r in locate(cfg, E) if r.cls == SADDLE_PLUS][0]
    bp = float(cfg.b(rec.theta, 1))
    right, left = quadratic_coefficients_v0(bp, E)
    assert right == pytest.approx(-rec.lambda_pair[0].real ** 2 / rec.rho, rel=1e-10)
    assert left == pytest.approx(-rec.lambda_pair[1].real ** 2 / rec.rho, rel=1e-10)


def test_critical_energy_constant_field():
    cd = critical_energy(const_field(-1.0), 2.0)
    assert cd.E_crt == pytest.approx(2.5, abs=1e-9)
    assert cd.eps1 == pytest.approx(1.0, abs=1e-8)
    assert cd.eps1_alt == pytest.approx(1.0, abs=1e-8)
    assert cd.neighborhood_max <= -cd.eps1 / 2


@pytest.mark.parametrize("E", [0.7, 1.5, 3.0])
def test_bound_suite_on_bump(bump, E):
    sol = find_periodic(bump, E)
    h = 1e-3
    up = find_periodic(bump, E + h, seed=sol.a)
    dn = find_periodic(bump, E - h, seed=sol.a)
    th = np.linspace(0.05, 6.2, 41)
    d1 = dE_rho(sol, th)
    assert np.all(d1 > 1.0 / math.sqrt(2 * (E - float(bump.V.min()))))
    # monotone and concave in E
    assert np.all(up.rho_at(th) > sol.rho_at(th)) and np.all(sol.rho_at(th) > dn.rho_at(th))
    assert np.all(up.rho_at(th) - 2 * sol.rho_at(th) + dn.rho_at(th) < 0)
    assert np.max(sol.eta_values) <= bump.b.max_abs() + 1e-12
    Et2 = 2 * (E - float(bump.V.max())) - bump.b.max_abs() ** 2
    if Et2 > 0:
        assert np.min(sol.rho_values) >= math.sqrt(Et2)
        assert np.max(d1) <= 1.0 / math.sqrt(Et2)


def test_nonnegative_half_circle_forbids_spirals():
    # b = sin θ − 0.4 sin²θ is ≥ 0 on [0, π] and has negative flux
    cfg = FieldConfig(PeriodicFunction(-0.2, (0.0, 0.2), (1.0,)))
    (lo, hi), = nonnegative_intervals(cfg.b)
    assert hi - lo >= math.pi - 1e-2
    for E in (0.5, 1.0, 2.0, 5.0):
        with pytest.raises(NoSolution):
            find_periodic(cfg, E)


def test_arcsine_bound_on_bump(bump):
    for E in (1.0, 3.0):
        sol = find_periodic(bump, E)
        for lo, hi in nonnegative_intervals(bump.b):
            bound = arcsine_bound(E, float(sol.rho_at(hi)), float(sol.rho_at(lo)))
            assert hi - lo <= bound + 1e-9
