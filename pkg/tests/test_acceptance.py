"""Acceptance criteria, one test per criterion.

Each test carries an ``acceptance`` marker; the terminal summary prints one
PASS/FAIL line per criterion.
"""
import math
import time

import numpy as np
import pytest

from conftest import const_field, random_field, sin_field
from magchan.channel import LagrangeField, build_chart, jacobian, quad_model, w_field
from magchan.cli import parse_config, render_json, sweep
from magchan.errors import BoundaryHit, NoSolution
from magchan.exceptional import (angle_field, collapse_analysis, construct_exceptional_field, divergence,
                                 find_heteroclinic)
from magchan.fixedpoints import SINK, locate, numeric_eigenvalues, regime_thresholds
from magchan.flow import FIXED_POINT, a1_along, classify, integrate, random_shell_states
from magchan.geomodel import (FIXED_POINT as GEO_FIXED_POINT, GEO_DEGENERATE, GeoConfig, geo_classify,
                              geo_fixed_points, numeric_eigenvalues as geo_numeric_eigenvalues, psi_periodic,
                              verify_conjugation)
from magchan.periodic import FieldConfig, PeriodicFunction, bump_field
from magchan.spiral import (INCOMING, bifurcate, dE_rho, find_periodic, incoming_set, shoot, shoot_derivatives,
                            window)

S3 = math.sqrt(3.0)
TWO_PI = 2.0 * math.pi

pytestmark = pytest.mark.slow


def _winding(cfg, E, a):
    return shoot_derivatives(cfg, E, a).winding


def _central(f, x, h):
    """Richardson-extrapolated central difference, error O(h⁴)."""
    d1 = (f(x + h) - f(x - h)) / (2 * h)
    d2 = (f(x + h / 2) - f(x - h / 2)) / h
    return (4 * d2 - d1) / 3


@pytest.mark.acceptance(1, "constant-field spiral window")
def test_ac1_constant_field_window():
    t0 = time.perf_counter()
    c = const_field(-1.0)
    win = window(c, (0.1, 10.0))
    assert win.E_d == pytest.approx(0.5, abs=1e-6)
    assert math.isinf(win.E_e)
    for E in (1.0, 2.0, 5.0):
        exact = math.sqrt(2 * E - 1)
        sol = find_periodic(c, E)
        th = np.linspace(0.0, TWO_PI, 97)
        assert np.max(np.abs(sol.rho_at(th) - exact)) <= 1e-8
        inc = find_periodic(c, E, sense=INCOMING)
        assert np.max(np.abs(inc.rho_at(th) + exact)) <= 1e-8
    mirror = incoming_set(c, (0.1, 10.0))
    assert mirror.E_d == pytest.approx(0.5, abs=1e-6)
    assert time.perf_counter() - t0 < 10.0


@pytest.mark.acceptance(2, "zero-flux fields send every orbit to a fixed point")
def test_ac2_zero_flux_totality():
    t0 = time.perf_counter()
    cfg = sin_field()
    E = 2.0
    recs = locate(cfg, E)
    states = random_shell_states(cfg, E, 200, np.random.default_rng(2))
    outcomes = [classify(cfg, E, s, records=recs) for s in states]
    assert [o.variant for o in outcomes] == [FIXED_POINT] * 200
    for s, o in zip(states, outcomes):
        assert abs(o.diagnostics["energy_drift"]) <= 1e-8
        orb = integrate(cfg, s, (0.0, o.diagnostics["tau"]))
        assert abs(orb.energy_drift(cfg)) <= 1e-8
        assert np.all(np.diff(a1_along(orb, cfg)) >= -1e-10)
    assert time.perf_counter() - t0 < 60.0


@pytest.mark.acceptance(3, "fixed-point eigenvalues: closed form vs linearization")
def test_ac3_eigenvalue_cross_check():
    rng = np.random.default_rng(3)
    n_fields = n_points = 0
    worst = 0.0
    while n_fields < 20:
        cfg = random_field(rng)
        E = float(cfg.V.max()) + rng.uniform(0.5, 4.0)
        recs = locate(cfg, E)
        if not recs:
            continue
        n_fields += 1
        for r in recs:
            num = np.array(numeric_eigenvalues(cfg, r))
            worst = max(worst, float(np.max(np.abs(num - np.array([r.lam, r.lam_t])))))
            assert abs(r.beta + r.beta_t + 1.0) <= 1e-10
            assert abs(r.beta * r.beta_t - r.kappa / r.rho**2) <= 1e-10
            n_points += 1
    assert n_points >= 40
    assert worst <= 1e-7


@pytest.mark.acceptance(4, "return-map derivative quadratures vs finite differences")
def test_ac4_shooting_derivatives():
    d = shoot_derivatives(const_field(-1.0), 2.0, S3)
    e = math.exp(-TWO_PI * S3)
    assert d.fa == pytest.approx(e - 1.0, abs=1e-9)
    assert d.fE == pytest.approx((1.0 - e) / S3, abs=1e-9)

    cfg = FieldConfig(PeriodicFunction(-0.8, (0.3,), (0.4,)), PeriodicFunction(0.0, (0.1,)))
    rng = np.random.default_rng(4)
    done = 0
    while done < 20:
        E = rng.uniform(1.0, 4.0)
        a = rng.uniform(-0.6, 0.6) * math.sqrt(2.0 * (E - float(cfg.V.max())))
        try:
            d = shoot_derivatives(cfg, E, a)
            fa = _central(lambda x: shoot(cfg, E, x), a, 2e-2) - 1.0
            fE = _central(lambda x: shoot(cfg, x, a), E, 2e-2)
            # ∂_a f = e^{−W} − 1, so ∂²_a f = −e^{−W} ∂_a W; differencing W avoids
            # the absolute noise floor of second differences when e^{−W} is tiny
            dW = _central(lambda x: _winding(cfg, E, x), a, 2e-2)
        except BoundaryHit:
            continue
        faa = -math.exp(-d.winding) * dW
        assert d.fa == pytest.approx(fa, rel=1e-5)
        assert d.fE == pytest.approx(fE, rel=1e-5)
        assert d.faa == pytest.approx(faa, rel=1e-5)
        done += 1


@pytest.mark.acceptance(5, "square-root bifurcation at the window edge")
def test_ac5_bifurcation_law():
    c = const_field(-1.0)
    win = window(c, (0.1, 10.0))
    bif = bifurcate(c, win)
    assert bif.C_closed_form == pytest.approx(math.sqrt(2.0), rel=1e-6)
    for p in bif.fit_exponent:
        assert p == pytest.approx(0.5, abs=0.01)
    for k in bif.fit_coefficient:
        assert k == pytest.approx(bif.C_closed_form, rel=0.01)
    assert np.all(bif.a_plus > bif.a_d) and np.all(bif.a_minus < bif.a_d)
    assert np.all(bif.winding_plus > 0) and np.all(bif.winding_minus < 0)


@pytest.fixture(scope="module")
def sin_channel():
    cfg = sin_field()
    chart = build_chart(cfg, locate(cfg, 12.5)[0], (12.0, 13.0))
    fld = LagrangeField(chart)
    fld.calibrate()
    return fld


@pytest.mark.acceptance(6, "channel asymptotics")
def test_ac6_channel_asymptotics(sin_channel):
    fld = sin_channel
    ch = fld.chart
    thetas = np.linspace(ch.theta0 - 0.95 * ch.eps, ch.theta0 + 0.95 * ch.eps, 50)
    fracs = np.linspace(0.02, 0.98, 50)
    worst = 0.0
    for th in thetas:
        lo, hi = fld.bounds(th)
        for fr in fracs:
            u = lo + fr * (hi - lo)
            worst = max(worst, abs(fld.hj_residual(1.0, u, th)))
            J, _ = fld.jacobian(u, th)
            assert J > 0
    assert worst <= 1e-6

    rng = np.random.default_rng(6)
    for _ in range(20):
        th = ch.theta0 + ch.eps * rng.uniform(-0.8, 0.8)
        lo, hi = fld.bounds(th)
        u = lo + rng.uniform(0.2, 0.8) * (hi - lo)
        w1 = w_field(fld, 1.0, u, th)
        beta = ch.beta(fld.energy(1.0, u, th))
        for t in (0.5, 3.0):
            assert w_field(fld, t, t * u, th) == pytest.approx(t ** (-beta) * w1, rel=1e-13)
        assert jacobian(fld, 2.0, 2.0 * u, th) == pytest.approx(2.0 ** (-beta - 1) * fld.jacobian(u, th)[0],
                                                                 rel=1e-12)
        assert abs(w1 - fld.asymptotic_w(1.0, u, th)) <= 1e-3

    h = 1e-3
    for E in (12.3, 12.5, 12.7):
        tj = ch.theta_j(E)
        rho, r1, r2 = ch.rho_jet(E, tj)
        _, _, eE, _ = ch.eta_jet(E, tj)
        fd1 = (ch.rho(E + h, tj) - ch.rho(E - h, tj)) / (2 * h)
        fd2 = (ch.rho(E + h, tj) - 2 * ch.rho(E, tj) + ch.rho(E - h, tj)) / h**2
        assert float(r1) == pytest.approx(1.0 / float(rho), rel=1e-5)
        assert float(r1) == pytest.approx(float(fd1), rel=1e-5)
        assert float(r2) == pytest.approx(-(1 + (rho * eE) ** 2) / rho**3, rel=1e-5)
        assert float(r2) == pytest.approx(float(fd2), rel=1e-5)


@pytest.mark.acceptance(7, "quadratic model decay exponents and regime thresholds")
def test_ac7_quadratic_model():
    cfg = sin_field()
    xi1 = 4.2
    qm = quad_model(cfg, 0.0, xi1)
    beta = -0.5 + 0.5 * math.sqrt(1.0 - 4.0 / xi1)
    beta_t = -1.0 - beta
    assert qm.beta.real == pytest.approx(beta, abs=1e-12)
    assert qm.beta_t.real == pytest.approx(beta_t, abs=1e-12)
    assert qm.decay == pytest.approx(-beta, abs=1e-3)
    assert qm.decay_t == pytest.approx(-beta_t, abs=1e-3)

    sink = [r for r in locate(cfg, 12.5) if r.cls == SINK][0]
    E_high, E_low = regime_thresholds(cfg, sink)
    assert E_high == pytest.approx(8.0, abs=1e-12)
    assert E_low == pytest.approx(10.125, abs=1e-12)
    assert E_high < E_low


@pytest.mark.acceptance(8, "exceptional energy, Melnikov value, zero-flux exclusion")
def test_ac8_exceptional_machinery():
    b = PeriodicFunction(0.0, (), (1.0,))
    ex = construct_exceptional_field(b)
    assert ex.heteroclinic is not None
    lo, hi = ex.bracket
    hets, _ = find_heteroclinic(ex.cfg, (lo, hi), n_scan=9)
    assert len({round(h.E_exc, 8) for h in hets}) == 1
    alt, _ = find_heteroclinic(ex.cfg, (lo, hi), n_scan=9, level=0.1)
    assert len({round(h.E_exc, 8) for h in alt}) == 1
    assert alt[0].E_exc == pytest.approx(hets[0].E_exc, abs=1e-6)
    assert lo < hets[0].E_exc < hi
    for h in hets + alt:
        assert h.melnikov < 0
        assert abs(h.melnikov - h.melnikov_alt) <= 1e-6
    none, prof = find_heteroclinic(sin_field(), (0.5, 5.0), n_scan=21)
    assert none == []
    assert prof.energies[0] == 0.5


@pytest.mark.acceptance(9, "measure transport, divergence identity, collapsing fraction")
def test_ac9_measure_identity():
    c = const_field(-1.0)
    E = 2.0
    rep = collapse_analysis(c, E, n=100_000, tau_max=20.0, transport_taus=(0.5, 1.0, 2.0))
    assert [t.tau for t in rep.transport] == [0.5, 1.0, 2.0]
    for chk in rep.transport:
        assert chk.rel_gap <= 0.01

    rng = np.random.default_rng(9)
    for cfg in (c, sin_field(), random_field(rng)):
        EE = float(cfg.V.max()) + 1.0
        th = rng.uniform(0, TWO_PI, 200)
        psi = rng.uniform(0, TWO_PI, 200)
        _, _, rho = angle_field(cfg, EE, th, psi)
        assert np.max(np.abs(divergence(cfg, EE, th, psi) + rho)) <= 1e-8

    coarse = collapse_analysis(c, E, n=10_000, tau_max=20.0)
    f_coarse = coarse.fractions[-1][1]
    f_fine = rep.fractions[-1][1]
    assert f_fine <= f_coarse
    assert f_fine <= 1e-3


@pytest.fixture(scope="module")
def bump_energies():
    return np.linspace(0.6, 9.0, 10)


@pytest.mark.acceptance(10, "spiral bounds, concavity and ordering on a localized field")
def test_ac10_property_suite(bump_energies):
    cfg = bump_field()
    shared = 0
    Vmin, Vmax, bmax = float(cfg.V.min()), float(cfg.V.max()), cfg.b.max_abs()
    th = np.linspace(0.05, 6.2, 41)
    h = 1e-3
    for E in bump_energies:
        sol = find_periodic(cfg, E)
        up = find_periodic(cfg, E + h, seed=sol.a)
        dn = find_periodic(cfg, E - h, seed=sol.a)
        d1 = dE_rho(sol, th)
        assert np.all(d1 > 1.0 / math.sqrt(2 * (E - Vmin)))
        assert np.all(up.rho_at(th) - 2 * sol.rho_at(th) + dn.rho_at(th) < 0)
        assert np.max(sol.eta_values) <= bmax + 1e-12
        Et = E - Vmax - 0.5 * bmax**2
        if Et > 0:
            assert np.min(sol.rho_values) >= math.sqrt(2 * Et)
        try:
            inc = find_periodic(cfg, E, sense=INCOMING)
        except NoSolution:
            continue
        shared += 1
        assert np.all(inc.rho_values <= sol.rho_at(inc.theta_grid))
    assert shared > 0


@pytest.mark.acceptance(11, "twisted geodesic model")
def test_ac11_geodesic_model():
    geos = [GeoConfig(PeriodicFunction(0.0, (1.0,)), 0.5), GeoConfig(PeriodicFunction(0.0, (0.5,)), 0.2),
            GeoConfig(PeriodicFunction(0.1, (0.4, 0.2), (0.3,)), 0.3), GeoConfig(PeriodicFunction(0.0, (1.0,)), 1.0)]
    degenerate = 0
    for geo in geos:
        for fp in geo_fixed_points(geo, 1.3):
            ref = np.sort_complex(np.array(fp.eigen_pair, dtype=complex))
            assert np.max(np.abs(geo_numeric_eigenvalues(geo, fp) - ref)) <= 1e-7
            degenerate += fp.cls == GEO_DEGENERATE
    assert degenerate > 0

    geo = GeoConfig(PeriodicFunction(0.0, (2.0,)), 0.5)
    fps = geo_fixed_points(geo, 1.0)
    rng = np.random.default_rng(11)
    starts = rng.uniform(0.0, TWO_PI, (100, 2))
    assert [geo_classify(geo, 1.0, tuple(s), fixed_points=fps).variant for s in starts] == [GEO_FIXED_POINT] * 100

    computed = 0
    for amp, c in ((0.3, 0.5), (0.2, 0.8), (0.4, 0.3)):
        g = GeoConfig(PeriodicFunction(0.0, (amp,)), c)
        for seed in ((0.0, -0.5), (1.0, 2.0), (3.0, 4.5)):
            for direction in (1, -1):
                sol = psi_periodic(g, seed, direction)
                if sol is not None:
                    computed += 1
                    assert sol.range_length < math.pi / 2
    assert computed > 0

    samples = np.column_stack([rng.uniform(-3, 3, (100, 2)), rng.normal(size=(100, 2))])
    assert verify_conjugation(GeoConfig(PeriodicFunction(0.0, (1.0,)), 0.7), samples) <= 1e-8


@pytest.mark.acceptance(12, "sweeps are byte-identical across worker counts")
def test_ac12_determinism():
    rc = parse_config({"field": {"b": {"const": -1.0, "sin": [0.3]}},
                       "energy": {"grid": {"lo": 1.0, "hi": 3.0, "n": 4}},
                       "ensemble": {"count": 6, "seed": 12}})
    a = render_json(rc, "sweep", sweep(rc, threads=1).to_json())
    b = render_json(rc, "sweep", sweep(rc, threads=8).to_json())
    assert a == b
