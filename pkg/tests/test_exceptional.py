import math

import numpy as np
import pytest

from conftest import const_field, random_field, sin_field
from magchan.errors import ChartInvalid, NotSaddle
from magchan.exceptional import (angle_field, collapse_analysis, divergence, find_heteroclinic, flow_ensemble, gap,
                                 incoming_collapses, manifold_seed, melnikov, melnikov_integrals,
                                 offset_certificate, pairings, saddle_order, transport_identity,
                                 unstable_manifold)
from magchan.fixedpoints import SADDLE_PLUS, SINK, locate
from magchan.periodic import FieldConfig, PeriodicFunction
from magchan.spiral import INCOMING, find_periodic

S3 = math.sqrt(3.0)


def _saddle(cfg, E, cls=SADDLE_PLUS):
    return [r for r in locate(cfg, E) if r.cls == cls][0]


def test_manifold_seed_along_unstable_eigenvector():
    cfg = sin_field()
    rec = _saddle(cfg, 2.0)
    assert rec.theta == pytest.approx(math.pi) and rec.rho == pytest.approx(2.0)
    seed = manifold_seed(cfg, rec, 1)
    d = np.array(seed.direction)
    # on-shell linearization in (θ, η): the unstable direction solves (A − λ)v = 0
    A = rec.matrix()
    lam = -1 + S3
    assert np.linalg.norm(A @ d[:2] - lam * d[:2]) < 1e-12
    assert offset_certificate(cfg, seed) < 1e-9
    for side in (1, -1):
        _, orb = unstable_manifold(cfg, rec, side, tau_max=5.0)
        assert abs(orb.energy_drift(cfg)) < 1e-8


def test_manifold_seed_rejections():
    cfg = sin_field()
    with pytest.raises(NotSaddle):
        manifold_seed(cfg, _saddle(cfg, 2.0, SINK))
    with pytest.raises(ValueError):
        manifold_seed(cfg, _saddle(cfg, 2.0), offset=0.0)


def test_sin_field_heteroclinic_at_one_eighth():
    cfg = sin_field()
    hets, _ = find_heteroclinic(cfg, (0.1, 0.15), n_scan=11)
    assert hets
    for h in hets:
        assert h.E_exc == pytest.approx(0.125, abs=1e-9)
        assert h.melnikov == pytest.approx(-2 * math.pi, rel=1e-9)
        assert abs(h.melnikov - h.melnikov_alt) <= 1e-6
        assert h.source.cls == SADDLE_PLUS and h.target.sign < 0


def test_gap_changes_sign_across_exceptional_energy():
    cfg = sin_field()
    for p in pairings(cfg, 0.125):
        lo, hi = gap(cfg, 0.115, p), gap(cfg, 0.135, p)
        if np.isfinite(lo) and np.isfinite(hi):
            assert lo * hi < 0


def test_melnikov_scales_with_seed_radius():
    cfg = sin_field()
    hets, _ = find_heteroclinic(cfg, (0.12, 0.13), n_scan=3)
    h = hets[0]
    assert melnikov(h, cfg, r0=3.0) == pytest.approx(3.0 * melnikov(h, cfg), rel=1e-12)
    m1, _, orb1 = melnikov_integrals(cfg, h.E_exc, h.pair, r0=1.0)
    m2, _, orb2 = melnikov_integrals(cfg, h.E_exc, h.pair, r0=2.0)
    assert np.allclose(orb1.theta, orb2.theta) and np.allclose(orb1.rho, orb2.rho)
    # x(t) → c·x(t/c): physical times scale with the radius
    assert np.allclose(orb2.t_phys - orb2.t_phys[0], 2.0 * (orb1.t_phys - orb1.t_phys[0]), rtol=1e-9)


def test_no_heteroclinic_above_the_zero_flux_bound():
    hets, prof = find_heteroclinic(sin_field(), (0.6, 5.0), n_scan=21)
    assert hets == []
    assert prof.energies[0] == 0.6


def test_divergence_identity(rng):
    cfg = random_field(rng)
    E = float(cfg.V.max()) + 1.0
    th = rng.uniform(0, 2 * math.pi, 50)
    psi = rng.uniform(0, 2 * math.pi, 50)
    _, _, rho = angle_field(cfg, E, th, psi)
    assert np.max(np.abs(divergence(cfg, E, th, psi) + rho)) < 1e-8


def test_chart_requires_energy_above_potential():
    cfg = FieldConfig(PeriodicFunction(-1.0), PeriodicFunction(0.0, (1.0,)))
    with pytest.raises(ChartInvalid):
        collapse_analysis(cfg, 0.5, n=10)


def test_flow_ensemble_time_reversal():
    cfg = sin_field()
    th0, ps0 = np.array([0.3, 2.0]), np.array([1.0, 4.0])
    th, ps, lr = flow_ensemble(cfg, 2.0, th0, ps0, 1.0, h=0.005)
    tb, pb, lb = flow_ensemble(cfg, 2.0, th, ps, -1.0, h=0.005)
    assert np.allclose(tb, th0, atol=1e-8) and np.allclose(pb, ps0, atol=1e-8)
    assert np.allclose(lr + lb, 0.0, atol=1e-8)


def test_incoming_spiral_collapses():
    c = const_field(-1.0)
    inc = find_periodic(c, 2.0, sense=INCOMING)
    assert incoming_collapses(c, 2.0, inc)


def test_collapse_fraction_small_ensemble():
    rep = collapse_analysis(const_field(-1.0), 2.0, n=4000, tau_max=20.0)
    fr = [f for _, f in rep.fractions]
    assert all(f <= 1e-3 for f in fr)
    assert rep.incoming_collapses and rep.below_incoming


def test_transport_identity_small_sample():
    chk = transport_identity(const_field(-1.0), 2.0, (0.0, math.pi, 0.0, math.pi), 0.5, n_log2=14)
    assert chk.rel_gap < 0.05


def test_saddle_order_sin_field():
    so = saddle_order(sin_field(), 2.0)
    assert len(so.plus) == 1 and so.plus[0][0] == pytest.approx(math.pi)
    assert all(d == 0 for d in so.depth.values())


def test_saddle_order_acyclic_on_zero_flux_fields():
    rng = np.random.default_rng(5)
    for _ in range(10):
        cfg = random_field(rng, zero_flux=True)
        so = saddle_order(cfg, float(cfg.V.max()) + rng.uniform(0.5, 2.0))
        a2 = [a for _, a in so.plus]
        assert a2 == sorted(a2)
        assert all(d >= 0 for d in so.depth.values())
