"""Saddle manifolds, exceptional (doubly collapsing) orbits and collapse statistics.

An exceptional orbit leaves a saddle on the ρ > 0 sheet and enters a saddle
on the ρ < 0 sheet, so r = exp∫ρ dτ vanishes at both ends.  Such
connections are located as zeros of a gap function Δ(E) on the section
ρ = 0, and their splitting under a change of energy is measured by the
integral −∫ r dτ.

Ensemble statistics use the angle chart (η, ρ) = ω(cos ψ, sin ψ) with
ω = √(2(E − V)), in which θ' = ω cos ψ, ψ' = ω cos ψ + b + (V'/ω) sin ψ and
the divergence of the field is −ρ.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq
from scipy.stats import qmc

from .errors import (ChartInvalid, ContinuationStall, CycleDetected, NoSolution, NotSaddle, NumericalFailure,
                     TailDivergence)
from .fixedpoints import SADDLE_MINUS, SADDLE_PLUS, FixedPointRecord, locate
from .flow import FastField, OrbitSample, a2_constant, observables, ReducedState
from .periodic import TWO_PI, FieldConfig, PeriodicFunction

OFFSET = 1e-7
TAU_SHOT = 200.0
EXIT_RADIUS = 0.05


# -- reduced system with r and quadratures -------------------------------------------

def _system(cfg: FieldConfig, quad: bool):
    ff = FastField(cfg)

    def g(tau, y):
        th, eta, rho = y[0], y[1], y[2]
        b, dv = ff.bv(th)
        s = eta + b
        return [eta, -s * rho - dv, s * eta, rho]

    def f(tau, y):
        th, eta, rho, lr = y[0], y[1], y[2], y[3]
        b, dv = ff.bv(th)
        s = eta + b
        r = math.exp(lr)
        w2 = eta * eta + rho * rho
        return [eta, -s * rho - dv, s * eta, rho, r, r * (2.0 * dv * eta * rho / (w2 * w2) + b * eta / w2)]

    return f if quad else g


def _shot(cfg, y0, span, events=(), dense=False, rtol=1e-11, atol=1e-13, quad=False):
    """(θ, η, ρ, log r), plus ∫r and the unsimplified splitting integrand when ``quad``."""
    n = 6 if quad else 4
    y = (list(y0) + [0.0] * n)[:n]
    return solve_ivp(_system(cfg, quad), span, y, method="DOP853", rtol=rtol, atol=atol, events=list(events),
                     dense_output=dense)


def _orbit_sample(sol, E: float) -> OrbitSample:
    t = sol.t
    y = sol.y
    r = np.exp(y[3])
    # physical time by trapezoid on the accepted nodes
    tp = np.concatenate([[0.0], np.cumsum(0.5 * (r[1:] + r[:-1]) * np.diff(t))])
    return OrbitSample(t, y[0], y[1], y[2], y[3], tp, E)


# -- manifolds -------------------------------------------------------------------

@dataclass(frozen=True)
class ManifoldSeed:
    record: FixedPointRecord
    direction: Tuple[float, float, float]
    side: int
    offset: float
    stable: bool

    def state(self, cfg: FieldConfig, offset: Optional[float] = None) -> Tuple[float, float, float]:
        """Seed projected back onto the energy shell."""
        h = self.side * (self.offset if offset is None else offset)
        th = self.record.theta + h * self.direction[0]
        eta = h * self.direction[1]
        s = 2.0 * (self.record.energy - float(cfg.V(th))) - eta * eta
        return th, eta, math.copysign(math.sqrt(s), self.record.rho)


def manifold_seed(cfg: FieldConfig, rec: FixedPointRecord, side: int = 1, stable: bool = False,
                  offset: float = OFFSET) -> ManifoldSeed:
    """Eigen-direction (dθ, dη, dρ) ∝ (1, λ, −V'/ρ) of the saddle ``rec``."""
    if not rec.is_saddle:
        raise NotSaddle(f"{rec.cls} at θ={rec.theta:.6g} is not a saddle")
    if offset <= 0.0:
        raise ValueError("a zero offset seeds the equilibrium itself")
    lam = float(np.real(rec.lam_t if stable else rec.lam))
    d = np.array([1.0, lam, -float(cfg.V(rec.theta, 1)) / rec.rho])
    d /= math.hypot(d[0], d[1])
    return ManifoldSeed(rec, tuple(float(v) for v in d), 1 if side >= 0 else -1, offset, stable)


def _exit_event(rec, radius):
    def ev(tau, y):
        return math.hypot(y[0] - rec.theta, y[1]) - radius

    ev.terminal = True
    ev.direction = 1
    return ev


def unstable_manifold(cfg: FieldConfig, rec: FixedPointRecord, side: int = 1, stable: bool = False,
                      offset: float = OFFSET, tau_max: float = 60.0) -> Tuple[ManifoldSeed, OrbitSample]:
    """Launch one branch of the unstable (or, with ``stable``, stable) manifold.

    The stable branch is integrated backward in τ; the returned sample keeps
    the integration order.
    """
    seed = manifold_seed(cfg, rec, side, stable, offset)
    span = (0.0, -tau_max if stable else tau_max)
    sol = _shot(cfg, seed.state(cfg), span)
    return seed, _orbit_sample(sol, rec.energy)


def exit_point(cfg: FieldConfig, seed: ManifoldSeed, offset: Optional[float] = None,
               radius: float = EXIT_RADIUS, tau_max: float = TAU_SHOT) -> np.ndarray:
    """First point of the branch at distance ``radius`` from the saddle in the (θ, η) plane."""
    span = (0.0, -tau_max if seed.stable else tau_max)
    sol = _shot(cfg, seed.state(cfg, offset), span, events=[_exit_event(seed.record, radius)])
    if not sol.t_events[0].size:
        raise NumericalFailure("branch did not leave the saddle neighbourhood")
    return sol.y_events[0][0][:3]


def offset_certificate(cfg: FieldConfig, seed: ManifoldSeed) -> float:
    """Shift of the exit point when the seed offset is halved."""
    a = exit_point(cfg, seed)
    b = exit_point(cfg, seed, 0.5 * seed.offset)
    return float(np.max(np.abs(a - b)))


# -- heteroclinic search -------------------------------------------------------------

def _section_event(level: float):
    def ev(tau, y):
        return y[2] - level

    ev.terminal = True
    return ev


def _branch(cfg, seed, level=0.0, tau_max=TAU_SHOT, quad=False):
    """Branch from ``seed`` up to its first crossing of ρ = level, or None."""
    span = (0.0, -tau_max if seed.stable else tau_max)
    sol = _shot(cfg, seed.state(cfg), span, events=[_section_event(level)], quad=quad,
                rtol=1e-12 if quad else 1e-11, atol=1e-14 if quad else 1e-13)
    if not sol.t_events[0].size:
        return None
    return sol


def _crossing(cfg, seed, level=0.0, tau_max=TAU_SHOT):
    sol = _branch(cfg, seed, level, tau_max)
    return None if sol is None else sol.y_events[0][0][:3]


def _saddle_near(cfg, E, sign, theta, cls):
    recs = [r for r in locate(cfg, E) if r.sign == sign and r.cls == cls]
    if not recs:
        return None
    d = [abs(math.remainder(r.theta - theta, TWO_PI)) for r in recs]
    i = int(np.argmin(d))
    return recs[i] if d[i] < 0.5 else None


@dataclass(frozen=True)
class Pairing:
    """A source saddle on ρ > 0 and a target saddle on ρ < 0, with branch sides."""

    source_theta: float
    target_theta: float
    source_side: int
    target_side: int


def _ends(cfg, E, pair):
    src = _saddle_near(cfg, E, 1, pair.source_theta, SADDLE_PLUS)
    tgt = _saddle_near(cfg, E, -1, pair.target_theta, SADDLE_MINUS)
    if src is None or tgt is None:
        return None
    return (manifold_seed(cfg, src, pair.source_side),
            manifold_seed(cfg, tgt, pair.target_side, stable=True))


def gap(cfg: FieldConfig, E: float, pair: Pairing, level: float = 0.0) -> float:
    """Δ(E): angular gap on ρ = level between the source's unstable and the target's stable branch.

    NaN when either branch misses the section or the crossings lie on
    opposite halves (η of different signs).
    """
    ends = _ends(cfg, E, pair)
    if ends is None:
        return float("nan")
    cu = _crossing(cfg, ends[0], level)
    cs = _crossing(cfg, ends[1], level)
    if cu is None or cs is None or cu[1] * cs[1] <= 0.0:
        return float("nan")
    return math.remainder(cu[0] - cs[0], TWO_PI)


@dataclass
class Heteroclinic:
    E_exc: float
    source: FixedPointRecord
    target: FixedPointRecord
    orbit: OrbitSample
    angular_increment: float
    melnikov: float
    melnikov_alt: float
    pair: Pairing
    bracket: Tuple[float, float]
    section_state: Tuple[float, float, float]
    level: float = 0.0

    def to_json(self) -> dict:
        return {"E_exc": self.E_exc, "source": self.source.to_json(), "target": self.target.to_json(),
                "melnikov": self.melnikov, "melnikov_alt": self.melnikov_alt,
                "angular_increment": self.angular_increment, "bracket": list(self.bracket),
                "section_level": self.level}


def pairings(cfg: FieldConfig, E: float) -> List[Pairing]:
    recs = locate(cfg, E)
    src = [r for r in recs if r.cls == SADDLE_PLUS]
    tgt = [r for r in recs if r.cls == SADDLE_MINUS]
    return [Pairing(a.theta, b.theta, sa, sb) for a in src for b in tgt for sa in (1, -1) for sb in (1, -1)]


@dataclass
class GapProfile:
    energies: np.ndarray
    values: Dict[Pairing, np.ndarray]


def find_heteroclinic(cfg: FieldConfig, bracket: Tuple[float, float], n_scan: int = 41,
                      tol: float = 1e-10, level: float = 0.0) -> Tuple[List[Heteroclinic], GapProfile]:
    """Zeros of Δ(E) over the bracket for every saddle pairing present at its midpoint.

    A sign change is accepted as a root only where both neighbouring gaps
    are below π/2 (so the wrap of Δ at ±π is not mistaken for a zero).
    ``level`` selects the section ρ = level.
    """
    lo, hi = bracket
    Es = np.linspace(lo, hi, n_scan)
    found = []
    profile = {}
    for pair in pairings(cfg, 0.5 * (lo + hi)):
        vals = np.array([gap(cfg, E, pair, level) for E in Es])
        profile[pair] = vals
        for i in range(n_scan - 1):
            a, b = vals[i], vals[i + 1]
            if not (np.isfinite(a) and np.isfinite(b)) or a * b > 0 or max(abs(a), abs(b)) > 0.5 * math.pi:
                continue
            if a == 0.0:
                Er = Es[i]
            else:
                def g(E, pair=pair):
                    v = gap(cfg, E, pair, level)
                    if not np.isfinite(v):
                        raise NoSolution("gap undefined inside the bracket")
                    return v

                try:
                    Er = brentq(g, Es[i], Es[i + 1], xtol=tol, rtol=1e-15)
                except NoSolution:
                    continue
            het = _heteroclinic_at(cfg, float(Er), pair, (float(Es[i]), float(Es[i + 1])), level)
            if het is not None:
                found.append(het)
    return found, GapProfile(Es, profile)


def _heteroclinic_at(cfg, E, pair, bracket, level=0.0):
    m, m_alt, orbit = melnikov_integrals(cfg, E, pair, level=level)
    ends = _ends(cfg, E, pair)
    i0 = int(np.argmin(np.abs(orbit.tau)))
    z = (float(orbit.theta[i0]), float(orbit.eta[i0]), float(orbit.rho[i0]))
    inc = float(orbit.theta[-1] - orbit.theta[0])
    return Heteroclinic(E, ends[0].record, ends[1].record, orbit, inc, m, m_alt, pair, bracket, z, level)


def melnikov_integrals(cfg: FieldConfig, E: float, pair: Pairing, r0: float = 1.0,
                       level: float = 0.0) -> Tuple[float, float, OrbitSample]:
    """(−∫ r dτ, ∫ r(2V'ω⁻²cosψ sinψ + bω⁻¹cosψ) dτ) along the connection, with r = r0 on the section.

    The connection is assembled from the two branches, each integrated in
    its stable direction (unstable branch forward, stable branch backward)
    up to the section ρ = level.  Inside the seed offset r is exponential in
    τ, so the ∫ r tails beyond the seeds are completed with r_seed/|ρ_saddle|.

    Raises
    ------
    TailDivergence
        If either branch misses the section.
    """
    ends = _ends(cfg, E, pair)
    if ends is None:
        raise TailDivergence("the pairing has no saddles at this energy")
    pieces = []
    for seed in ends:
        sol = _branch(cfg, seed, level, quad=True)
        if sol is None:
            raise TailDivergence("a branch does not reach the section")
        yc = sol.y_events[0][0]
        sgn = -1.0 if seed.stable else 1.0
        scale = math.exp(-yc[3])
        i1 = (sgn * yc[4] + 1.0 / abs(seed.record.rho)) * scale
        i2 = sgn * yc[5] * scale
        t = np.append(sol.t, sol.t_events[0][0]) - sol.t_events[0][0]
        Y = np.column_stack([sol.y, yc])
        Y[3] -= yc[3]
        pieces.append((i1, i2, t, Y))
    (u1, u2, tu, Yu), (s1, s2, ts, Ys) = pieces
    # lift the stable branch onto the unstable branch's covering sheet
    Ys[0] += TWO_PI * round((Yu[0, -1] - Ys[0, -1]) / TWO_PI)
    tau = np.concatenate([tu, ts[::-1][1:]])
    Y = np.concatenate([Yu[:4], Ys[:4, ::-1][:, 1:]], axis=1)
    r = np.exp(Y[3])
    i0 = tu.size - 1
    tp = np.concatenate([[0.0], np.cumsum(0.5 * (r[1:] + r[:-1]) * np.diff(tau))])
    tp -= tp[i0]
    orbit = OrbitSample(tau, Y[0], Y[1], Y[2], Y[3] + math.log(r0), r0 * tp, E)
    return -r0 * (u1 + s1), r0 * (u2 + s2), orbit


def melnikov(het: Heteroclinic, cfg: FieldConfig, r0: float = 1.0) -> float:
    """Splitting integral −∫ r dτ of ``het`` normalized by r = r0 on its section."""
    return melnikov_integrals(cfg, het.E_exc, het.pair, r0, het.level)[0]


# -- exceptional field constructor ----------------------------------------------

@dataclass
class ExceptionalField:
    cfg: FieldConfig
    kappa0: float
    E0: float
    bracket: Tuple[float, float]
    path: List[Tuple[float, float]]
    heteroclinic: Optional[Heteroclinic] = None

    def to_json(self) -> dict:
        return {"kappa0": self.kappa0, "E0": self.E0, "bracket": list(self.bracket),
                "path": [list(p) for p in self.path], "field": self.cfg.to_json(),
                "heteroclinic": None if self.heteroclinic is None else self.heteroclinic.to_json()}


def _shifted(b: PeriodicFunction, kappa: float) -> FieldConfig:
    return FieldConfig(b + kappa, PeriodicFunction(), label=f"b+{kappa:.12g}")


def _winding(b, kappa, E, seed=None):
    from .spiral import find_periodic

    try:
        return find_periodic(_shifted(b, kappa), E, seed=seed)
    except NumericalFailure:
        return None


def _level_energy(b, kappa, E_guess, level, hi_factor=1.02, max_expand=60):
    """Energy with winding = level: W² − level² is close to linear near the fold, so bracket on it."""
    def g(E):
        s = _winding(b, kappa, E)
        return -level**2 if s is None else s.winding**2 - level**2

    # find a point with W > level near the guess, scanning down then up
    hi = None
    for fac in np.concatenate([1.0 - 0.01 * np.arange(0, 30), 1.0 + 0.02 * np.arange(1, max_expand)]):
        E = E_guess * fac
        if E <= 0:
            continue
        if g(E) > 0:
            hi = E
            break
    if hi is None:
        return None
    lo = hi
    for _ in range(200):
        lo *= 0.99
        if g(lo) < 0:
            break
    else:
        return None
    return brentq(g, lo, hi, xtol=1e-12, rtol=1e-14)


def construct_exceptional_field(b_base: PeriodicFunction, kappa_bracket: Optional[Tuple[float, float]] = None,
                                level: float = 1.0, d_kappa: float = 0.1, min_step: float = 0.0125,
                                half_width: float = 0.05, max_steps: int = 400) -> ExceptionalField:
    """Continue the winding-level spiral of b + κ upward in κ until it ceases to exist.

    Starts at ``kappa_bracket[0]`` (default −1.2·max|b|, where b + κ has
    no fixed points) and never passes ``kappa_bracket[1]`` (default 0); the
    endpoint κ₀ is located to ``min_step``.  A heteroclinic is then sought
    for b + κ₀ on E₀ ± ``half_width``.

    Raises
    ------
    ContinuationStall
        If the start fails, the path is not monotone, or no exceptional
        energy is found near the endpoint.
    """
    if b_base.is_constant or abs(b_base.constant_term) > 1e-12:
        raise ValueError("b_base must be non-constant with zero flux")
    m = b_base.max_abs()
    k_lo, k_hi = (-1.2 * m, 0.0) if kappa_bracket is None else kappa_bracket
    kappa = k_lo
    E = _level_energy(b_base, kappa, 1.0, level)
    if E is None:
        raise ContinuationStall("no winding-level spiral at the starting κ", (kappa, None))
    path = [(kappa, E)]
    step = d_kappa
    for _ in range(max_steps):
        if step < min_step:
            break
        k_new = kappa + step
        if k_new >= k_hi:
            step *= 0.5
            continue
        if len(path) >= 2:
            (k1, e1), (k2, e2) = path[-2], path[-1]
            guess = e2 + (e2 - e1) / (k2 - k1) * step
        else:
            guess = E
        E_new = _level_energy(b_base, k_new, guess, level)
        if E_new is None:
            step *= 0.5
            continue
        kappa, E = k_new, E_new
        path.append((kappa, E))
    else:
        raise ContinuationStall("continuation did not terminate", path[-1])
    dE = np.diff([p[1] for p in path])
    if np.any(dE >= 0.0):
        raise ContinuationStall("E(κ) is not decreasing along the path", path[-1])
    cfg = _shifted(b_base, kappa)
    hets, _ = find_heteroclinic(cfg, (E - half_width, E + half_width))
    if not hets:
        raise ContinuationStall("no exceptional energy near the continuation endpoint", (kappa, E))
    h = min(hets, key=lambda x: abs(x.E_exc - E))
    br = (h.E_exc - 0.5 * half_width, h.E_exc + 0.5 * half_width)
    return ExceptionalField(cfg, kappa, E, br, path, h)


# -- collapse statistics in the (θ, ψ) chart ------------------------------------------

def _check_chart(cfg: FieldConfig, E: float):
    vmax = cfg.V.max() if not cfg.V.is_constant else cfg.V.constant_term
    if E <= vmax:
        raise ChartInvalid(f"E = {E} does not exceed max V = {vmax}")


def angle_field(cfg: FieldConfig, E: float, th, psi):
    """(θ', ψ', ρ) in the angle chart (vectorized)."""
    w = np.sqrt(2.0 * (E - cfg.V(th)))
    c, s = np.cos(psi), np.sin(psi)
    return w * c, w * c + cfg.b(th) + cfg.V(th, 1) / w * s, w * s


def divergence(cfg: FieldConfig, E: float, th, psi, h: float = 1e-6):
    """∂_θF₁ + ∂_ψF₂ by central differences."""
    a1, _, _ = angle_field(cfg, E, th + h, psi)
    a0, _, _ = angle_field(cfg, E, th - h, psi)
    _, b1, _ = angle_field(cfg, E, th, psi + h)
    _, b0, _ = angle_field(cfg, E, th, psi - h)
    return (a1 - a0) / (2 * h) + (b1 - b0) / (2 * h)


def flow_ensemble(cfg: FieldConfig, E: float, th, psi, tau: float, h: float = 0.01):
    """RK4 of (θ, ψ, log r) for many starts at once; τ may be negative."""
    n = max(1, int(math.ceil(abs(tau) / h)))
    dt = tau / n
    th = np.array(th, dtype=float)
    psi = np.array(psi, dtype=float)
    lr = np.zeros_like(th)

    def rhs(a, b):
        return angle_field(cfg, E, a, b)

    for _ in range(n):
        k1 = rhs(th, psi)
        k2 = rhs(th + 0.5 * dt * k1[0], psi + 0.5 * dt * k1[1])
        k3 = rhs(th + 0.5 * dt * k2[0], psi + 0.5 * dt * k2[1])
        k4 = rhs(th + dt * k3[0], psi + dt * k3[1])
        th = th + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        psi = psi + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        lr = lr + dt / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return th, psi, lr


@dataclass
class TransportCheck:
    tau: float
    image_area: float
    weighted_area: float

    @property
    def rel_gap(self) -> float:
        return abs(self.image_area - self.weighted_area) / abs(self.weighted_area)


def transport_identity(cfg: FieldConfig, E: float, box: Tuple[float, float, float, float], tau: float,
                       n_log2: int = 17, seed: int = 0, h: float = 0.01) -> TransportCheck:
    """Two estimates of |φ_τ(A)| for the box A = [θa, θb] × [ψa, ψb].

    Image side: scrambled Sobol points on the torus flowed back by τ and
    counted in A.  Weighted side: ∫_A r(τ)⁻¹ from Sobol points in A.
    """
    _check_chart(cfg, E)
    ta, tb, pa, pb = box
    eng = qmc.Sobol(2, scramble=True, seed=seed)
    u = eng.random_base2(n_log2)
    th, ps, _ = flow_ensemble(cfg, E, TWO_PI * u[:, 0], TWO_PI * u[:, 1], -tau, h)
    th = np.mod(th - ta, TWO_PI) + ta
    ps = np.mod(ps - pa, TWO_PI) + pa
    inside = (th >= ta) & (th < tb) & (ps >= pa) & (ps < pb)
    image = TWO_PI**2 * float(np.mean(inside))
    eng2 = qmc.Sobol(2, scramble=True, seed=seed + 1)
    v = eng2.random_base2(n_log2)
    _, _, lr = flow_ensemble(cfg, E, ta + (tb - ta) * v[:, 0], pa + (pb - pa) * v[:, 1], tau, h)
    weighted = (tb - ta) * (pb - pa) * float(np.mean(np.exp(-lr)))
    return TransportCheck(tau, image, weighted)


@dataclass
class CollapseReport:
    E: float
    n: int
    tau_max: float
    fractions: List[Tuple[float, float]]
    collapsing_index: np.ndarray
    below_incoming: Optional[bool] = None
    converge_to_incoming: Optional[bool] = None
    incoming_collapses: Optional[bool] = None
    transport: List[TransportCheck] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"E": self.E, "n": self.n, "tau_max": self.tau_max,
                "fractions": [list(p) for p in self.fractions],
                "n_collapsing": int(self.collapsing_index.size), "below_incoming": self.below_incoming,
                "converge_to_incoming": self.converge_to_incoming, "incoming_collapses": self.incoming_collapses,
                "transport": [{"tau": t.tau, "image": t.image_area, "weighted": t.weighted_area,
                               "rel_gap": t.rel_gap} for t in self.transport]}


def collapse_analysis(cfg: FieldConfig, E: float, n: int = 100_000, tau_max: float = 40.0,
                      log_r_threshold: float = -30.0, seed: int = 0, h: float = 0.02,
                      transport_taus: Sequence[float] = ()) -> CollapseReport:
    """Collapsing fraction of a random shell ensemble at horizons τ_max/2 and τ_max.

    With negative flux and an incoming spiral present, every flagged member
    is also checked against ρ ≤ ρ⁻(θ) at the end of the run, and (when no
    ρ < 0 fixed points exist) for convergence to the incoming spiral.
    """
    _check_chart(cfg, E)
    rng = np.random.default_rng(seed)
    th0 = rng.uniform(0.0, TWO_PI, n)
    ps0 = rng.uniform(0.0, TWO_PI, n)
    th, ps, lr = flow_ensemble(cfg, E, th0, ps0, 0.5 * tau_max, h)
    f_half = float(np.mean(lr < log_r_threshold))
    th, ps, lr2 = flow_ensemble(cfg, E, th, ps, 0.5 * tau_max, h)
    lr = lr + lr2
    idx = np.nonzero(lr < log_r_threshold)[0]
    rep = CollapseReport(E, n, tau_max, [(0.5 * tau_max, f_half), (tau_max, float(idx.size) / n)], idx)
    if cfg.flux < 0:
        from .spiral import INCOMING, find_periodic

        try:
            inc = find_periodic(cfg, E, sense=INCOMING)
        except NumericalFailure:
            inc = None
        if inc is not None:
            w = np.sqrt(2.0 * (E - cfg.V(th[idx])))
            rho = w * np.sin(ps[idx])
            rho_m = inc.rho_at(th[idx])
            rep.below_incoming = bool(np.all(rho <= rho_m + 1e-6))
            no_minus = not any(r.sign < 0 for r in locate(cfg, E))
            if no_minus:
                rep.converge_to_incoming = bool(np.all(np.abs(rho - rho_m) < 1e-4))
            rep.incoming_collapses = incoming_collapses(cfg, E, inc)
    rep.transport = [transport_identity(cfg, E, (0.0, math.pi, 0.0, math.pi), t) for t in transport_taus]
    return rep


def incoming_collapses(cfg: FieldConfig, E: float, inc, tau: float = 20.0) -> bool:
    """log r along the incoming spiral decreases without bound (linear in τ with negative slope)."""
    y0 = [0.0, float(inc.eta_at(0.0)), float(inc.rho_at(0.0)), 0.0]
    sol = _shot(cfg, y0, (0.0, tau))
    lr = sol.y[3]
    return bool(lr[-1] < -0.5 * tau * abs(np.min(inc.rho_values)) and np.all(np.diff(lr) < 0.0))


# -- saddle ordering ------------------------------------------------------------

@dataclass
class SaddleOrder:
    E: float
    plus: List[Tuple[float, float]]
    minus: List[Tuple[float, float]]
    edges: Dict[str, List[str]]
    depth: Dict[str, int]

    def to_json(self) -> dict:
        return {"E": self.E, "plus": [{"theta": t, "a2": a} for t, a in self.plus],
                "minus": [{"theta": t, "a2": a} for t, a in self.minus], "edges": self.edges,
                "depth": self.depth}


def _label(rec: FixedPointRecord) -> str:
    return f"{'+' if rec.sign > 0 else '-'}{rec.theta:.10f}"


def saddle_order(cfg: FieldConfig, E: float, tol_edge: float = 1e-6, tau_max: float = 80.0) -> SaddleOrder:
    """a₂-sorted saddle lists and the graph of detected saddle-to-saddle launches.

    An edge u → v is recorded when an unstable branch of u comes within
    ``tol_edge`` of v in (θ mod 2π, η, ρ).  The graph must be acyclic; the
    depth of a saddle is the length of the longest chain ending at it.

    Raises
    ------
    CycleDetected
        With the witness loop.
    """
    recs = [r for r in locate(cfg, E) if r.is_saddle]
    C = a2_constant(cfg, E)
    a2 = {_label(r): observables(ReducedState(r.theta, 0.0, r.rho), cfg, C).a2 for r in recs}
    plus = sorted(((r.theta, a2[_label(r)]) for r in recs if r.sign > 0), key=lambda p: p[1])
    minus = sorted(((r.theta, a2[_label(r)]) for r in recs if r.sign < 0), key=lambda p: p[1])
    edges: Dict[str, List[str]] = {_label(r): [] for r in recs}
    for u in recs:
        for side in (1, -1):
            _, orb = unstable_manifold(cfg, u, side, tau_max=tau_max)
            thm = np.mod(orb.theta, TWO_PI)
            for v in recs:
                if v is u:
                    continue
                dth = np.abs(np.remainder(thm - v.theta + math.pi, TWO_PI) - math.pi)
                dist = np.sqrt(dth**2 + orb.eta**2 + (orb.rho - v.rho) ** 2)
                if np.min(dist) < tol_edge and _label(v) not in edges[_label(u)]:
                    edges[_label(u)].append(_label(v))
    ts = TopologicalSorter({k: set() for k in edges})
    for u, vs in edges.items():
        for v in vs:
            ts.add(v, u)
    try:
        order = list(ts.static_order())
    except CycleError as exc:
        raise CycleDetected("saddle connections form a loop", exc.args[1]) from exc
    depth = {k: 0 for k in edges}
    for u in order:
        for v in edges[u]:
            depth[v] = max(depth[v], depth[u] + 1)
    return SaddleOrder(E, plus, minus, edges, depth)
