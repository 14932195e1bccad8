"""Asymptotic channel data attached to a stable sink and to the spiral branch.

Near a sink θ_j of the reduced flow the invariant curve through the node is
the graph θ ↦ η_E(θ) of the singular equation

    η dη/dθ = −(η + b)ρ − V',   ρ = √(2(E − V) − η²),   η(θ_j) = 0,

leaving θ_j with slope λ (the eigenvalue of smaller modulus).  From η_E one
builds ρ_E, the eikonal S_E = rρ_E, the energy chart r/t = 1/∂_Eρ_E(θ), the
action S(t, r, θ) = rρ_E − tE and the normalized transverse coordinate w.

The (E, θ) dependence of η_E is stored as a tensor Chebyshev expansion of
q = η/(θ − θ_j(E)), so every E-derivative used by the chart is the exact
derivative of one smooth interpolant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import chebyshev as C
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .errors import (DomainExit, NearSingularJacobian, NoSolution, NotApplicable, OutsideDomain,
                     RegimeViolation, ResonanceInterval, SingularBlowup, UnboundedWindow)
from .fixedpoints import SINK, FixedPointRecord, continue_branch, make_record, resonances, track_root
from .periodic import TWO_PI, FieldConfig

SERIES_ORDER = 8
N_E = 16
N_X = 40
RTOL = 1e-13
ATOL = 1e-20
N_GAUSS = 48

CONV_EXACT = "exact"
CONV_ZETA_MINUS = "zeta_minus"
CONV_ZETA_PLUS = "zeta_plus"
CONVENTIONS = (CONV_EXACT, CONV_ZETA_MINUS, CONV_ZETA_PLUS)

_GL_X, _GL_W = np.polynomial.legendre.leggauss(N_GAUSS)


# -- local series at the node ------------------------------------------------------

def _sqrt_series(A: np.ndarray) -> np.ndarray:
    s = np.zeros_like(A)
    s[0] = math.sqrt(A[0])
    for k in range(1, A.size):
        s[k] = (A[k] - np.dot(s[1:k], s[k - 1:0:-1])) / (2.0 * s[0])
    return s


def channel_series(cfg: FieldConfig, rec: FixedPointRecord, order: int = SERIES_ORDER) -> np.ndarray:
    """Taylor coefficients c_k of η_E about θ_j, k = 0..order.

    c_1 = λ; for k ≥ 2 the order-k balance of ηη' = F(θ, η) is linear in c_k
    with coefficient (k + 1)λ + ρ_j, which vanishes exactly at the resonance
    kλ = λ̃.
    """
    lam = float(np.real(rec.lam))
    rho = rec.rho
    n = order
    bt = cfg.b.taylor(rec.theta, n)
    Vt = cfg.V.taylor(rec.theta, n + 1)
    dVt = np.arange(1, n + 2) * Vt[1:]
    e = np.zeros(n + 1)
    e[1] = lam
    for k in range(2, n + 1):
        A = -2.0 * Vt[: n + 1]
        A[0] += 2.0 * rec.energy
        A = A - np.convolve(e, e)[: n + 1]
        r = rec.sign * _sqrt_series(A)
        F = -np.convolve(e + bt, r)[: n + 1] - dVt
        de = np.arange(1, n + 1) * e[1:]
        L = np.convolve(e[:n], de)[: n + 1]
        den = (k + 1) * lam + rho
        if abs(den) < 1e-12 * abs(rho):
            raise ResonanceInterval(f"resonant denominator at order {k}")
        e[k] = (F[k] - L[k]) / den
    return e


def _series_eval(c: np.ndarray, x):
    return np.polynomial.polynomial.polyval(x, c)


# -- single-energy solve -------------------------------------------------------------

def _rhs(cfg: FieldConfig, E: float, sign: int):
    def f(th, y):
        eta = y[0]
        b = cfg.b(th)
        s = 2.0 * (E - cfg.V(th)) - eta * eta
        rho = sign * math.sqrt(max(s, 0.0))
        return [(-(eta + b) * rho - cfg.V(th, 1)) / eta]

    def blow(th, y):
        return 2.0 * (E - cfg.V(th)) - y[0] * y[0]

    blow.terminal = True
    return f, blow


@dataclass
class EtaSolution:
    """η_E on [θ_j + x_lo, θ_j + x_hi] at a single energy."""

    E: float
    record: FixedPointRecord
    coeffs: np.ndarray
    delta: float
    x_lo: float
    x_hi: float
    left: object = field(repr=False)
    right: object = field(repr=False)

    @property
    def theta_j(self) -> float:
        return self.record.theta

    @property
    def lam(self) -> float:
        return float(np.real(self.record.lam))

    def __call__(self, theta):
        x = np.asarray(theta, dtype=float) - self.theta_j
        out = np.empty_like(x)
        near = np.abs(x) <= self.delta
        out[near] = _series_eval(self.coeffs, x[near])
        pos = (~near) & (x > 0)
        neg = (~near) & (x < 0)
        if np.any(pos):
            out[pos] = self.right(self.theta_j + x[pos])[0]
        if np.any(neg):
            out[neg] = self.left(self.theta_j + x[neg])[0]
        return out if out.ndim else float(out)


def eta_channel(cfg: FieldConfig, rec: FixedPointRecord, E: Optional[float] = None, eps: float = 0.5,
                delta: Optional[float] = None, x_range: Optional[Tuple[float, float]] = None,
                order: int = SERIES_ORDER) -> EtaSolution:
    """Solve the singular channel equation at energy E through the sink ``rec``.

    Parameters
    ----------
    rec : FixedPointRecord
        A SinkStable record; when ``E`` differs from ``rec.energy`` the sink is
        tracked to E first.
    eps : float
        Half-width of the θ-interval around θ_j.
    delta : float, optional
        Launch offset, default 1e-4·eps.
    x_range : (float, float), optional
        Explicit offsets (x_lo < 0 < x_hi) overriding ±eps.

    Raises
    ------
    RegimeViolation
        If 4κ < ρ² fails (complex or degenerate exponents).
    ResonanceInterval
        If a series denominator vanishes.
    SingularBlowup
        If η² reaches 2(E − V) inside the interval.
    """
    if rec.cls != SINK:
        raise NotApplicable("channel charts are built at stable sinks")
    if E is not None and E != rec.energy:
        th = track_root(cfg, rec.sign, rec.theta, E, rec.kappa)
        rec = make_record(cfg, th, E, rec.sign)
    E = rec.energy
    if not (0.0 < 4.0 * rec.kappa < rec.rho**2):
        raise RegimeViolation(f"4κ < ρ² fails at E={E}")
    x_lo, x_hi = (-eps, eps) if x_range is None else x_range
    delta = 1e-4 * min(-x_lo, x_hi) if delta is None else delta
    c = channel_series(cfg, rec, order)
    f, blow = _rhs(cfg, E, rec.sign)
    sols = []
    for x0, x1 in ((-delta, x_lo), (delta, x_hi)):
        th0 = rec.theta + x0
        sol = solve_ivp(f, (th0, rec.theta + x1), [_series_eval(c, x0)], method="DOP853", rtol=RTOL, atol=ATOL,
                        dense_output=True, events=blow)
        if sol.status == 1:
            raise SingularBlowup(f"η² reaches 2(E − V) at θ={sol.t_events[0][0]:.6g}")
        if not sol.success:
            raise SingularBlowup(sol.message)
        sols.append(sol.sol)
    return EtaSolution(E, rec, c, delta, x_lo, x_hi, sols[0], sols[1])


def delta_convergence(cfg: FieldConfig, rec: FixedPointRecord, eps: float = 0.5) -> float:
    """Change of η at both chart edges when the launch offset is halved."""
    a = eta_channel(cfg, rec, eps=eps)
    b = eta_channel(cfg, rec, eps=eps, delta=0.5 * a.delta)
    edges = np.array([rec.theta - eps, rec.theta + eps])
    return float(np.max(np.abs(a(edges) - b(edges))))


def integral_residual(eta: Callable, cfg: FieldConfig, E: float, sign: int, lo: float, hi: float,
                      n_sub: int = 64) -> float:
    """max over subintervals of |η(β) − η(α) − ∫_α^β F/η|, a derivative-free ODE residual."""
    edges = np.linspace(lo, hi, n_sub + 1)
    gx, gw = np.polynomial.legendre.leggauss(20)
    worst = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        th = 0.5 * (b - a) * gx + 0.5 * (a + b)
        et = np.asarray(eta(th))
        s = 2.0 * (E - cfg.V(th)) - et**2
        rho = sign * np.sqrt(np.maximum(s, 0.0))
        F = (-(et + cfg.b(th)) * rho - cfg.V(th, 1)) / et
        integral = 0.5 * (b - a) * np.dot(gw, F)
        ends = np.asarray(eta(np.array([a, b])))
        worst = max(worst, abs(ends[1] - ends[0] - integral))
    return worst


# -- chart ---------------------------------------------------------------------------

def _cheb_nodes(n: int, lo: float, hi: float) -> np.ndarray:
    k = np.arange(n)
    z = np.cos(np.pi * (k + 0.5) / n)[::-1]
    return 0.5 * (hi - lo) * z + 0.5 * (hi + lo)


def _to_unit(x, lo, hi):
    return (2.0 * np.asarray(x) - (hi + lo)) / (hi - lo)


@dataclass
class ChannelChart:
    """η_E(θ) on I × {|θ − θ_j(E⁰)| < ε} for one sink branch."""

    cfg: FieldConfig
    sign: int
    E_lo: float
    E_hi: float
    E0: float
    theta0: float
    eps: float
    x_lo: float
    x_hi: float
    q_coef: np.ndarray = field(repr=False)
    t_coef: np.ndarray = field(repr=False)
    kappa_ref: float = 1.0
    m_max: int = 5
    resonance_free: bool = True
    resonance_energies: List[float] = field(default_factory=list)
    node_energies: np.ndarray = field(default=None, repr=False)
    node_records: List[FixedPointRecord] = field(default_factory=list, repr=False)
    delta_change: float = float("nan")
    interp_error: float = float("nan")

    def __post_init__(self):
        sE = 2.0 / (self.E_hi - self.E_lo)
        sX = 2.0 / (self.x_hi - self.x_lo)
        q = self.q_coef
        self._q = {
            (0, 0): q,
            (1, 0): C.chebder(q, 1, sE, axis=0),
            (2, 0): C.chebder(q, 2, sE, axis=0),
            (0, 1): C.chebder(q, 1, sX, axis=1),
            (0, 2): C.chebder(q, 2, sX, axis=1),
        }
        self._q[(1, 1)] = C.chebder(self._q[(1, 0)], 1, sX, axis=1)
        self._t = [self.t_coef, C.chebder(self.t_coef, 1, sE), C.chebder(self.t_coef, 2, sE)]

    # -- branch data --

    def theta_j(self, E: float, order: int = 0) -> float:
        return float(C.chebval(_to_unit(E, self.E_lo, self.E_hi), self._t[order]))

    def record(self, E: float) -> FixedPointRecord:
        th = track_root(self.cfg, self.sign, self.theta_j(E), E, self.kappa_ref)
        return make_record(self.cfg, th, E, self.sign)

    def lam(self, E: float) -> float:
        return float(np.real(self.record(E).lam))

    def beta(self, E: float) -> float:
        return float(np.real(self.record(E).beta))

    # -- η and its derivatives --

    def _qv(self, key, E, x):
        z = _to_unit(x, self.x_lo, self.x_hi)
        e = np.broadcast_to(_to_unit(E, self.E_lo, self.E_hi), np.shape(z))
        return C.chebval2d(e, z, self._q[key])

    def in_chart(self, theta) -> bool:
        return bool(np.all(np.abs(np.asarray(theta) - self.theta0) <= self.eps * (1 + 1e-12)))

    def eta(self, E, theta):
        x = np.asarray(theta) - self.theta_j(E)
        return x * self._qv((0, 0), E, x)

    def eta_jet(self, E: float, theta):
        """(η, ∂_θη, ∂_Eη, ∂²_Eη) at fixed θ."""
        T1, T2 = self.theta_j(E, 1), self.theta_j(E, 2)
        x = np.asarray(theta) - self.theta_j(E)
        q = self._qv((0, 0), E, x)
        qE = self._qv((1, 0), E, x)
        qEE = self._qv((2, 0), E, x)
        qx = self._qv((0, 1), E, x)
        qxx = self._qv((0, 2), E, x)
        qxE = self._qv((1, 1), E, x)
        xE, xEE = -T1, -T2
        eta = x * q
        eta_th = q + x * qx
        eta_E = xE * eta_th + x * qE
        d_eta_th = qE + 2.0 * qx * xE + x * (qxE + qxx * xE)
        eta_EE = xEE * eta_th + xE * d_eta_th + xE * qE + x * (qEE + qxE * xE)
        return eta, eta_th, eta_E, eta_EE

    def rho(self, E, theta):
        th = np.asarray(theta)
        et = self.eta(E, th)
        return self.sign * np.sqrt(2.0 * (E - self.cfg.V(th)) - et**2)

    def rho_jet(self, E: float, theta):
        """(ρ_E, ∂_Eρ_E, ∂²_Eρ_E) from ρ² + η² = 2(E − V)."""
        th = np.asarray(theta)
        eta, _, eE, eEE = self.eta_jet(E, th)
        rho = self.sign * np.sqrt(2.0 * (E - self.cfg.V(th)) - eta**2)
        r1 = (1.0 - eta * eE) / rho
        r2 = (-eE**2 - eta * eEE - r1**2) / rho
        return rho, r1, r2

    def zeta(self, E: float, theta):
        """ζ_E with ρ_E = ρ_E(θ_j)(1 + ζ_E η_E); finite at θ_j."""
        tj = self.theta_j(E)
        th = np.asarray(theta, dtype=float)
        x = th - tj
        q = self._qv((0, 0), E, x)
        rj = self.sign * math.sqrt(2.0 * (E - self.cfg.V(tj)))
        Vj = float(self.cfg.V(tj))
        with np.errstate(invalid="ignore", divide="ignore"):
            dv = np.where(x != 0.0, (Vj - self.cfg.V(th)) / np.where(x != 0, x, 1.0), -self.cfg.V(tj, 1))
        z_over_eta = (2.0 * dv / q - x * q) / rj**2
        z = z_over_eta * x * q
        return z_over_eta / (np.sqrt(1.0 + z) + 1.0)

    def residual(self, E: float) -> float:
        """Integral-form ODE residual of the interpolated η_E off the launch collar."""
        tj = self.theta_j(E)
        collar = 1e-4 * self.eps
        lo, hi = self.theta0 - self.eps, self.theta0 + self.eps
        out = 0.0
        for a, b in ((lo, tj - collar), (tj + collar, hi)):
            if b > a:
                out = max(out, integral_residual(lambda th: self.eta(E, th), self.cfg, E, self.sign, a, b))
        return out

    def to_json(self) -> dict:
        Es = np.linspace(self.E_lo, self.E_hi, 9)
        return {"kind": "sink_channel", "E_interval": [self.E_lo, self.E_hi], "E0": self.E0,
                "theta_j0": self.theta0, "eps": self.eps, "m_max": self.m_max,
                "resonance_free": self.resonance_free, "resonance_energies": self.resonance_energies,
                "beta_grid": [[float(E), self.beta(float(E))] for E in Es],
                "delta_change": self.delta_change, "interp_error": self.interp_error,
                "field": self.cfg.to_json()}

    def csv_rows(self, n_E: int = 9, n_theta: int = 41):
        for E in np.linspace(self.E_lo, self.E_hi, n_E):
            th = np.linspace(self.theta0 - self.eps, self.theta0 + self.eps, n_theta)
            et = self.eta(E, th)
            for a, b in zip(th, et):
                yield (float(E), float(a), float(b))


def _check_regime(recs: Sequence[FixedPointRecord]):
    for r in recs:
        if not (0.0 < 4.0 * r.kappa < r.rho**2):
            raise RegimeViolation(f"4κ < ρ² fails at E={r.energy}")


def build_chart(cfg: FieldConfig, rec: FixedPointRecord, interval: Tuple[float, float], eps: float = 0.5,
                n_E: int = N_E, n_x: int = N_X, m_max: int = 5, shrink: int = 3) -> ChannelChart:
    """Tabulate η_E over the energy interval and certify the chart.

    On a resonance, regime or blow-up failure the interval (then ε) is
    halved about its centre up to ``shrink`` times before the error is
    re-raised.
    """
    lo, hi = interval
    for attempt in range(shrink + 1):
        try:
            return _build_chart(cfg, rec, (lo, hi), eps, n_E, n_x, m_max)
        except (ResonanceInterval, RegimeViolation) as exc:
            if attempt == shrink:
                raise exc
            mid, half = rec.energy, 0.25 * (hi - lo)
            lo, hi = max(lo, mid - half), min(hi, mid + half)
        except SingularBlowup as exc:
            if attempt == shrink:
                raise exc
            eps *= 0.5


def _build_chart(cfg, rec, interval, eps, n_E, n_x, m_max):
    lo, hi = interval
    if not lo < rec.energy < hi:
        raise ValueError("the record energy must lie inside the interval")
    scan = resonances(cfg, rec, (lo, hi), m_max=m_max, n_grid=200)
    if scan.reports:
        raise ResonanceInterval(f"resonances at E = {[r.energy for r in scan.reports]}")
    E_nodes = _cheb_nodes(n_E, lo, hi)
    up = E_nodes[E_nodes >= rec.energy]
    dn = E_nodes[E_nodes < rec.energy][::-1]
    recs = {}
    for part in (up, dn):
        if part.size:
            br = continue_branch(cfg, rec, part)
            recs.update(zip(part, br.records))
    node_recs = [recs[E] for E in E_nodes]
    _check_regime(node_recs)
    fine = continue_branch(cfg, rec, np.linspace(rec.energy, hi, 33)).records
    fine += continue_branch(cfg, rec, np.linspace(rec.energy, lo, 33)).records
    _check_regime(fine)
    thetas = np.array([r.theta for r in node_recs])
    theta0 = rec.theta
    shift = float(np.max(np.abs(thetas - theta0))) + 1e-9
    x_lo, x_hi = -eps - shift, eps + shift
    x_nodes = _cheb_nodes(n_x, x_lo, x_hi)
    Q = np.empty((n_E, n_x))
    for i, r in enumerate(node_recs):
        sol = eta_channel(cfg, r, eps=eps, x_range=(x_lo, x_hi))
        Q[i] = sol(r.theta + x_nodes) / x_nodes
    VE = C.chebvander(_to_unit(E_nodes, lo, hi), n_E - 1)
    VX = C.chebvander(_to_unit(x_nodes, x_lo, x_hi), n_x - 1)
    coef = np.linalg.solve(VE, np.linalg.solve(VX, Q.T).T)
    t_coef = np.linalg.solve(VE, thetas)
    chart = ChannelChart(cfg, rec.sign, lo, hi, rec.energy, theta0, eps, x_lo, x_hi, coef, t_coef,
                         rec.kappa, m_max, True, [], E_nodes, node_recs)
    # interpolation check against fresh solves between the nodes
    errs = []
    for E in (0.5 * (E_nodes[0] + E_nodes[1]), 0.5 * (lo + hi) + 0.37 * (E_nodes[1] - E_nodes[0]),
              0.5 * (E_nodes[-2] + E_nodes[-1])):
        sol = eta_channel(cfg, rec, E=E, eps=eps, x_range=(x_lo, x_hi))
        th = np.linspace(theta0 - eps, theta0 + eps, 37)
        errs.append(float(np.max(np.abs(sol(th) - chart.eta(E, th)))))
    chart.interp_error = max(errs)
    chart.delta_change = delta_convergence(cfg, rec, eps)
    return chart


# -- Lagrangian field on the chart ----------------------------------------------------

@dataclass
class DirectPath:
    """Samples of the direct flow with the energy frozen at E."""

    E: float
    tau: np.ndarray
    t: np.ndarray
    log_r: np.ndarray
    theta: np.ndarray
    chart_drift: float = float("nan")

    @property
    def r(self) -> np.ndarray:
        return np.exp(self.log_r)


class LagrangeField:
    """S, E and w on the cone {|θ − θ_j(E⁰)| < ε, g(E⁻, θ) < r/t < g(E⁺, θ)}, g = 1/∂_Eρ_E."""

    def __init__(self, chart: ChannelChart, convention: Optional[str] = None):
        self.chart = chart
        if convention is not None and convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {convention!r}")
        self.convention = convention
        self.calibration: dict = {}

    # -- domain and energy --

    def g(self, E: float, theta: float) -> float:
        return 1.0 / float(self.chart.rho_jet(E, theta)[1])

    def bounds(self, theta: float) -> Tuple[float, float]:
        return self.g(self.chart.E_lo, theta), self.g(self.chart.E_hi, theta)

    def in_domain(self, t: float, r: float, theta: float) -> bool:
        if t <= 0 or r <= 0 or not self.chart.in_chart(theta):
            return False
        lo, hi = self.bounds(theta)
        return lo < r / t < hi

    def energy(self, t: float, r: float, theta: float) -> float:
        """Invert r/t = 1/∂_Eρ_E(θ) by Brent's method with a Newton polish."""
        if t <= 0 or r <= 0 or not self.chart.in_chart(theta):
            raise OutsideDomain(f"({t}, {r}, {theta}) outside the chart")
        u = r / t
        ch = self.chart
        h = lambda E: self.g(E, theta) - u
        a, b = h(ch.E_lo), h(ch.E_hi)
        if not a < 0.0 < b:
            raise OutsideDomain(f"r/t = {u} outside ({a + u}, {b + u}) at θ = {theta}")
        E = brentq(h, ch.E_lo, ch.E_hi, xtol=1e-14, rtol=1e-15)
        for _ in range(2):
            _, r1, r2 = ch.rho_jet(E, theta)
            d = -float(r2) / float(r1) ** 2
            step = (1.0 / float(r1) - u) / d
            if abs(step) > 1e-10 * max(1.0, abs(E)):
                break
            E -= step
        return float(E)

    def action(self, t: float, r: float, theta: float) -> float:
        E = self.energy(t, r, theta)
        return r * float(self.chart.rho(E, theta)) - t * E

    def hj_residual(self, t: float, r: float, theta: float, h: float = 1e-5) -> float:
        """½((∂_r S)² + (r⁻¹∂_θ S − b)²) + V + ∂_t S by central differences."""
        S = self.action
        ht, hr = h * t, h * r
        St = (S(t + ht, r, theta) - S(t - ht, r, theta)) / (2 * ht)
        Sr = (S(t, r + hr, theta) - S(t, r - hr, theta)) / (2 * hr)
        Sth = (S(t, r, theta + h) - S(t, r, theta - h)) / (2 * h)
        cfg = self.chart.cfg
        return 0.5 * (Sr**2 + (Sth / r - float(cfg.b(theta))) ** 2) + float(cfg.V(theta)) + St

    # -- transverse coordinate --

    def _log_factor(self, E: float, theta: float, tj: float, beta: float, lam: float, convention: str) -> float:
        X = theta - tj
        if X == 0.0:
            return 0.0
        x = 0.5 * X * (_GL_X + 1.0)
        th = tj + x
        ch = self.chart
        if convention == CONV_EXACT:
            q = ch._qv((0, 0), E, th - ch.theta_j(E))
            rho = ch.rho(E, th)
            vals = (beta * rho - q) / (x * q)
        else:
            vals = ch.zeta(E, th)
            vals = (-lam if convention == CONV_ZETA_MINUS else lam) * vals
        return 0.5 * X * float(np.dot(_GL_W, vals))

    def w(self, t: float, r: float, theta: float, convention: Optional[str] = None) -> float:
        """w = (θ − θ_j) r^{−β} e^{I(θ)}; I depends on the exponent convention.

        ``exact``: I = ∫_{θ_j}^{θ} (βρ_E/η_E − 1/(θ' − θ_j)) dθ', the value
        matched by the direct-flow limit.  ``zeta_minus`` and ``zeta_plus`` use
        ∓λ∫ζ_E.
        """
        conv = convention or self.convention or self.calibrate()
        E = self.energy(t, r, theta)
        rec = self.chart.record(E)
        beta = float(np.real(rec.beta))
        lam = float(np.real(rec.lam))
        X = theta - rec.theta
        return X * math.exp(-beta * math.log(r) + self._log_factor(E, theta, rec.theta, beta, lam, conv))

    def jacobian(self, u: float, theta: float, h: float = 1e-6) -> Tuple[float, np.ndarray]:
        """det ∂(E, w)/∂(r/t, θ) at t = 1 by central differences."""
        hu = h * u
        Ep = self.energy(1.0, u + hu, theta)
        Em = self.energy(1.0, u - hu, theta)
        wp = self.w(1.0, u + hu, theta)
        wm = self.w(1.0, u - hu, theta)
        Eq = self.energy(1.0, u, theta + h)
        Eh = self.energy(1.0, u, theta - h)
        wq = self.w(1.0, u, theta + h)
        wh = self.w(1.0, u, theta - h)
        M = np.array([[(Ep - Em) / (2 * hu), (Eq - Eh) / (2 * h)], [(wp - wm) / (2 * hu), (wq - wh) / (2 * h)]])
        J = float(np.linalg.det(M))
        if abs(J) < 1e-10:
            raise NearSingularJacobian(f"|J| = {abs(J):.3g} at (r/t, θ) = ({u}, {theta})")
        return J, M

    # -- direct flow --

    def direct_flow(self, t0: float, r0: float, theta0: float, tau_end: float = 20.0, t1: Optional[float] = None,
                    n_out: int = 201) -> DirectPath:
        """θ' = η_E(θ), (log r)' = ρ_E(θ), t' = r with E fixed at the chart energy of the start.

        Integration stops at τ = ``tau_end`` or when t reaches ``t1``.
        """
        ch = self.chart
        E = self.energy(t0, r0, theta0)

        def f(tau, y):
            th, lr, lt = y
            return [float(ch.eta(E, th)), float(ch.rho(E, th)), math.exp(lr - lt)]

        def leave(tau, y):
            return ch.eps - abs(y[0] - ch.theta0)

        leave.terminal = True
        events = [leave]
        if t1 is not None:
            def reach(tau, y):
                return y[2] - math.log(t1)

            reach.terminal = True
            events.append(reach)
        y0 = [theta0, math.log(r0), math.log(t0)]
        sol = solve_ivp(f, (0.0, tau_end), y0, method="DOP853", rtol=1e-12, atol=1e-14, events=events,
                        dense_output=True)
        if sol.status == 1 and sol.t_events[0].size:
            th = sol.y_events[0][0][0]
            raise DomainExit(f"direct flow leaves the chart at θ = {th:.6g}, τ = {sol.t_events[0][0]:.6g}")
        tt = np.linspace(0.0, sol.t[-1], n_out)
        Y = sol.sol(tt)
        path = DirectPath(E, tt, np.exp(Y[2]), Y[1], Y[0])
        drift = 0.0
        for k in range(0, n_out, max(1, n_out // 10)):
            try:
                drift = max(drift, abs(self.energy(path.t[k], path.r[k], path.theta[k]) - E))
            except OutsideDomain:
                drift = float("inf")
        path.chart_drift = drift
        return path

    def asymptotic_w(self, t: float, r: float, theta: float, tau_end: Optional[float] = None) -> float:
        """Limit of (θ̃ − θ_j) r̃^{−β} along the direct flow, Richardson-extrapolated in θ̃ − θ_j."""
        E = self.energy(t, r, theta)
        rec = self.chart.record(E)
        beta = float(np.real(rec.beta))
        lam = float(np.real(rec.lam))
        if tau_end is None:
            tau_end = 20.0 / abs(lam)
        p = self.direct_flow(t, r, theta, tau_end=tau_end)
        X = p.theta - rec.theta
        L = X * np.exp(-beta * p.log_r)
        x1, x2, l1, l2 = X[-20], X[-1], L[-20], L[-1]
        if x1 == x2:
            return float(l2)
        return float((l2 * x1 - l1 * x2) / (x1 - x2))

    def calibrate(self, n_points: int = 4, seed: int = 7) -> str:
        """Pick the exponent convention that reproduces the direct-flow limit."""
        if self.calibration:
            return self.calibration["convention"]
        rng = np.random.default_rng(seed)
        ch = self.chart
        pts = []
        while len(pts) < n_points:
            th = ch.theta0 + ch.eps * rng.uniform(-0.8, 0.8)
            lo, hi = self.bounds(th)
            pts.append((th, lo + (hi - lo) * rng.uniform(0.2, 0.8)))
        errs = {c: 0.0 for c in CONVENTIONS}
        for th, u in pts:
            ref = self.asymptotic_w(1.0, u, th)
            for c in CONVENTIONS:
                errs[c] = max(errs[c], abs(self.w(1.0, u, th, convention=c) - ref) / max(1.0, abs(ref)))
        best = min(CONVENTIONS, key=lambda c: errs[c])
        self.calibration = {"convention": best, "errors": errs, "points": len(pts)}
        if self.convention is None:
            self.convention = best
        return best

    def metadata(self) -> dict:
        out = self.chart.to_json()
        out["w_convention"] = self.convention or self.calibrate()
        out["calibration"] = self.calibration
        return out


# module-level operations

def energy_chart(fld: LagrangeField, t: float, r: float, theta: float) -> float:
    return fld.energy(t, r, theta)


def w_field(fld: LagrangeField, t: float, r: float, theta: float) -> float:
    return fld.w(t, r, theta)


def direct_flow(fld: LagrangeField, t0: float, r0: float, theta0: float, t1: Optional[float] = None,
                tau_end: float = 20.0) -> DirectPath:
    return fld.direct_flow(t0, r0, theta0, tau_end=tau_end, t1=t1)


def jacobian(fld: LagrangeField, t: float, r: float, theta: float) -> float:
    """J_t(r, θ) = t^{−β−1} J(r/t, θ)."""
    J, _ = fld.jacobian(r / t, theta)
    beta = fld.chart.beta(fld.energy(t, r, theta))
    return t ** (-beta - 1.0) * J


# -- quadratic model --------------------------------------------------------------

@dataclass(frozen=True)
class QuadModel:
    alpha1: float
    alpha2: float
    beta: complex
    beta_t: complex
    decay: float
    decay_t: float
    indicial_roots: Tuple[complex, complex]
    separated: bool

    def to_json(self) -> dict:
        return {"alpha1": self.alpha1, "alpha2": self.alpha2, "beta": [self.beta.real, self.beta.imag],
                "beta_tilde": [self.beta_t.real, self.beta_t.imag], "decay": self.decay,
                "decay_tilde": self.decay_t, "separated": self.separated}


def quad_coefficients(cfg: FieldConfig, theta_j: float, xi1: float) -> Tuple[float, float]:
    """α₁ = −b'/ξ₁ and 2α₂ = (b'/ξ₁)(2 + b'/ξ₁) + V''/ξ₁² at θ_j."""
    u = float(cfg.b(theta_j, 1)) / xi1
    return -u, 0.5 * (u * (2.0 + u) + float(cfg.V(theta_j, 2)) / xi1**2)


def quad_trajectory(alpha1: float, alpha2: float, x0: Tuple[float, float], t: np.ndarray) -> np.ndarray:
    """Solve ẋ = ξ + α₁x/t, ξ̇ = −α₁ξ/t − 2α₂x/t² from t = t[0]; rows (x, ξ)."""
    def f(s, y):
        return [y[1] + alpha1 * y[0] / s, -alpha1 * y[1] / s - 2.0 * alpha2 * y[0] / s**2]

    sol = solve_ivp(f, (t[0], t[-1]), list(x0), method="DOP853", rtol=1e-12, atol=1e-300, t_eval=t)
    return sol.y


def quad_model(cfg: FieldConfig, theta_j: float, xi1: float, t_end: float = 1e4,
               x0: Tuple[float, float] = (1.0, 0.3), n: int = 200) -> QuadModel:
    """Quadratic comparison model at a node with b(θ_j) = V'(θ_j) = 0.

    The linear observables γ = ξ₂ + (β + α₁)x₂/t and γ̃ (β ↦ β̃) are exact
    modes of the classical flow with |γ| ∝ t^{β}; the returned ``decay`` and
    ``decay_t`` are the fitted exponents −d log|γ|/d log t.

    Raises
    ------
    NotApplicable
        If b(θ_j) or V'(θ_j) does not vanish, or ξ₁ ≤ 0.
    RegimeViolation
        If ℜβ ≥ −1/3.
    """
    if xi1 <= 0:
        raise NotApplicable("ξ₁ must be positive")
    if abs(cfg.b(theta_j)) > 1e-12 or abs(cfg.V(theta_j, 1)) > 1e-12:
        raise NotApplicable("b(θ_j) = V'(θ_j) = 0 required")
    a1, a2 = quad_coefficients(cfg, theta_j, xi1)
    c = float(cfg.b(theta_j, 1)) / xi1 + float(cfg.V(theta_j, 2)) / xi1**2
    disc = complex(1.0 - 4.0 * c)
    beta = (-1.0 + np.sqrt(disc)) / 2.0
    beta_t = (-1.0 - np.sqrt(disc)) / 2.0
    if beta.real >= -1.0 / 3.0:
        raise RegimeViolation(f"ℜβ = {beta.real:.6g} ≥ −1/3")
    roots = tuple(np.roots([1.0, -1.0, a1 - a1 * a1 + 2.0 * a2]))
    t = np.geomspace(1.0, t_end, n)
    x, xi = quad_trajectory(a1, a2, x0, t)
    fits = []
    for bb in (beta, beta_t):
        g = xi + (bb + a1) * x / t
        fits.append(-float(np.polyfit(np.log(t), np.log(np.abs(g)), 1)[0]))
    return QuadModel(a1, a2, complex(beta), complex(beta_t), fits[0], fits[1], (complex(roots[0]), complex(roots[1])),
                     bool(abs(beta - beta_t) > 1e-12))


# -- spiral channel --------------------------------------------------------------------

class SpiralChannel:
    """S, E and the initial angle on the cone swept by the outgoing spiral branch.

    ρ_E(θ) is tabulated on Chebyshev nodes in s = √(E − E_d) (the branch
    has a square-root fold at E_d) and on the uniform θ grid of each
    periodic solution.
    """

    def __init__(self, cfg: FieldConfig, E_d: float, E_top: float, sols: List, s_lo: float, s_hi: float,
                 dE_quad: np.ndarray):
        self.cfg = cfg
        self.E_d = E_d
        self.E_top = E_top
        self.sols = sols
        self.s_lo, self.s_hi = s_lo, s_hi
        n = len(sols)
        grid = sols[0].theta_grid
        vals = np.array([s.rho_values for s in sols])
        V = C.chebvander(_to_unit(np.sqrt(np.array([s.E for s in sols]) - E_d), s_lo, s_hi), n - 1)
        coef = np.linalg.solve(V, vals)
        coef[:, -1] = coef[:, 0]
        self._rho = CubicSpline(grid, coef.T, bc_type="periodic")
        self._dquad = dE_quad
        self.E_bot = E_d + s_lo**2

    def _T(self, E: float, d: int = 0) -> np.ndarray:
        n = len(self.sols)
        s = math.sqrt(E - self.E_d)
        z = float(_to_unit(s, self.s_lo, self.s_hi))
        ds = 2.0 / (self.s_hi - self.s_lo)
        eye = np.eye(n)
        if d == 0:
            return C.chebval(z, eye)
        d1 = C.chebval(z, C.chebder(eye, 1, ds)) if n > 1 else np.zeros(n)
        dsdE = 0.5 / s
        if d == 1:
            return d1 * dsdE
        d2 = C.chebval(z, C.chebder(eye, 2, ds)) if n > 2 else np.zeros(n)
        return d2 * dsdE**2 - 0.25 * s**-3 * d1

    def rho(self, E: float, theta) -> float:
        return float(self._T(E) @ self._rho(np.mod(theta, TWO_PI)))

    def eta(self, E: float, theta) -> float:
        r = self.rho(E, theta)
        return math.sqrt(max(2.0 * (E - float(self.cfg.V(theta))) - r * r, 0.0))

    def dE_rho(self, E: float, theta) -> float:
        return float(self._T(E, 1) @ self._rho(np.mod(theta, TWO_PI)))

    def f(self, theta) -> float:
        """1/∂_Eρ_E(θ) at the top of the tabulated branch."""
        return 1.0 / self.dE_rho(self.E_top, theta)

    def bounds(self, theta) -> Tuple[float, float]:
        return 1.0 / self.dE_rho(self.E_bot, theta), self.f(theta)

    def energy(self, t: float, r: float, theta: float) -> float:
        if t <= 0 or r <= 0:
            raise OutsideDomain("t and r must be positive")
        u = r / t
        h = lambda E: 1.0 / self.dE_rho(E, theta) - u
        a, b = h(self.E_bot), h(self.E_top)
        if a * b > 0:
            raise OutsideDomain(f"r/t = {u} outside the tabulated cone at θ = {theta}")
        return float(brentq(h, self.E_bot, self.E_top, xtol=1e-14, rtol=1e-15))

    def action(self, t: float, r: float, theta: float) -> float:
        E = self.energy(t, r, theta)
        return r * self.rho(E, theta) - t * E

    def hj_residual(self, t: float, r: float, theta: float, h: float = 1e-5) -> float:
        S = self.action
        ht, hr = h * t, h * r
        St = (S(t + ht, r, theta) - S(t - ht, r, theta)) / (2 * ht)
        Sr = (S(t, r + hr, theta) - S(t, r - hr, theta)) / (2 * hr)
        Sth = (S(t, r, theta + h) - S(t, r, theta - h)) / (2 * h)
        return 0.5 * (Sr**2 + (Sth / r - float(self.cfg.b(theta))) ** 2) + float(self.cfg.V(theta)) + St

    def dE_cross_check(self) -> float:
        """max relative gap between the interpolant derivative and the kernel quadrature at the nodes."""
        gap = 0.0
        for s, d in zip(self.sols, self._dquad):
            th = s.theta_grid[::64]
            mine = np.array([self.dE_rho(s.E, x) for x in th])
            gap = max(gap, float(np.max(np.abs(mine - d[::64]) / np.abs(d[::64]))))
        return gap

    def flow(self, t0: float, r0: float, theta0: float, t1: float) -> Tuple[float, float, float]:
        """Direct spiral flow from time t0 to t1 (either direction); returns (r, θ, E)."""
        E = self.energy(t0, r0, theta0)

        def f(tau, y):
            th, lr, lt = y
            return [self.eta(E, th), self.rho(E, th), math.exp(lr - lt)]

        def reach(tau, y):
            return y[2] - math.log(t1)

        reach.terminal = True
        span = 50.0 if t1 > t0 else -50.0
        sol = solve_ivp(f, (0.0, span), [theta0, math.log(r0), math.log(t0)], method="DOP853", rtol=1e-12,
                        atol=1e-13, events=reach)
        if not sol.t_events[0].size:
            raise DomainExit("direct spiral flow did not reach the target time")
        y = sol.y_events[0][0]
        return math.exp(y[1]), float(y[0]), E

    def initial_angle(self, t: float, r: float, theta: float) -> float:
        """θ₁ of the direct-flow orbit through (t, r, θ) at time 1."""
        return self.flow(t, r, theta, 1.0)[1]

    def to_json(self) -> dict:
        return {"kind": "spiral_channel", "E_d": self.E_d, "E_bottom": self.E_bot, "E_top": self.E_top,
                "nodes": [s.E for s in self.sols], "field": self.cfg.to_json()}


def spiral_channel_field(cfg: FieldConfig, win, ceiling: Optional[float] = None, n_E: int = 12,
                         bottom: float = 0.02, top: float = 0.98) -> SpiralChannel:
    """Tabulate the spiral branch on [E_d + bottom·ΔE, E_d + top·ΔE] with ΔE = E_top − E_d.

    ``E_top`` is the window end E_e, or ``ceiling`` when the window is
    unbounded or the ceiling is lower.
    """
    from .spiral import dE_rho_grid, find_periodic

    E_e = win.E_e
    if math.isinf(E_e) and ceiling is None:
        raise UnboundedWindow("the window has no upper end; pass a ceiling")
    E_top = E_e if ceiling is None else min(E_e, ceiling)
    span = E_top - win.E_d
    s_lo = math.sqrt(bottom * span)
    s_hi = math.sqrt(top * span) if not (ceiling is not None and ceiling < E_e) else math.sqrt(span)
    nodes = _cheb_nodes(n_E, s_lo, s_hi)[::-1]
    sols, dq = [], []
    seed = None
    for s in nodes:
        E = win.E_d + s * s
        try:
            sol = find_periodic(cfg, E, seed=seed, sense=win.sense)
        except NoSolution as exc:
            raise NoSolution(f"branch lost at E={E}", exc.profile) from exc
        seed = sol.a
        sols.append(sol)
        dq.append(dE_rho_grid(sol))
    order = np.argsort([s.E for s in sols])
    sols = [sols[i] for i in order]
    dq = np.array([dq[i] for i in order])
    chan = SpiralChannel(cfg, win.E_d, win.E_d + s_hi**2, sols, s_lo, s_hi, dq)
    return chan
