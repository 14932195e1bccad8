"""Conformal-metric model h = ½ e^{f(θ − c ln r)} ξ² and its reduced (θ, ψ) flow.

With g(θ) = f'(θ) + 2c/(1 + c²) the reduced equations read

    θ' = sin ψ,    ψ' = −½ g(θ) cos ψ − sin ψ / (1 + c²),

their fixed points are {g = 0} × {0, π}, and along any orbit the quantity
a₁ = exp(−½G(θ)) cos ψ, G(θ) = ∫₀^θ g, is nondecreasing.  Where sin ψ ≠ 0
the orbit is a graph ψ(θ) solving dψ/dθ = −½ g cot ψ − 1/(1 + c²).

The reduced time used here is the one in which the chart amplitude
A = √(2E(1 + c²)) e^{−f/2} has been divided out; linearized eigenvalues in
the physical reduced time are A(θ₀) times those of the system above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline

from .errors import StepFailure
from .periodic import TWO_PI, PeriodicFunction, find_roots

GEO_SADDLE = "saddle"
GEO_SINK = "sink"
GEO_SOURCE = "source"
GEO_DEGENERATE = "degenerate"

FIXED_POINT = "FixedPoint"
REGULAR_PSI = "RegularPsi"
SINGULAR_PSI = "SingularPsi"
UNDETERMINED = "Undetermined"

REGULAR = "regular"
SINGULAR = "singular"

DEGENERATE_TOL = 1e-12
A1_TOL = 1e-10


@dataclass(frozen=True)
class GeoConfig:
    """Metric profile f and twist c ≥ 0 (c = 0 is the homogeneous limit)."""

    f: PeriodicFunction
    c: float
    label: str = ""

    def __post_init__(self):
        if self.f.is_constant:
            raise ValueError("f must be non-constant")
        if not self.c >= 0.0:
            raise ValueError("c must be non-negative")
        object.__setattr__(self, "c", float(self.c))

    @property
    def kappa(self) -> float:
        """2c/(1 + c²), the constant part of g."""
        return 2.0 * self.c / (1.0 + self.c**2)

    @property
    def damping(self) -> float:
        return 1.0 / (1.0 + self.c**2)

    def g(self, theta, order: int = 0):
        v = self.f.eval(theta, order + 1)
        return v + self.kappa if order == 0 else v

    def G(self, theta):
        """∫₀^θ g, valid on the universal cover."""
        return self.f(theta) - self.f(0.0) + self.kappa * np.asarray(theta, dtype=float)

    def amplitude(self, E: float, theta) -> np.ndarray:
        """A(θ) = √(2E(1 + c²)) e^{−f(θ)/2}."""
        return np.sqrt(2.0 * E * (1.0 + self.c**2)) * np.exp(-0.5 * self.f(theta))

    def to_json(self) -> dict:
        return {"f": self.f.to_json(), "c": self.c, "label": self.label}

    @classmethod
    def from_json(cls, desc: dict) -> "GeoConfig":
        return cls(PeriodicFunction.from_json(desc["f"]), float(desc["c"]), desc.get("label", ""))


def geo_rhs(geo: GeoConfig, th, psi):
    """(θ', ψ') of the reduced flow (vectorized)."""
    s, co = np.sin(psi), np.cos(psi)
    return s, -0.5 * geo.g(th) * co - geo.damping * s


# -- fixed points ----------------------------------------------------------------

@dataclass(frozen=True)
class GeoFixedPoint:
    theta0: float
    psi0: float
    rho0: float
    eigen_pair: Tuple[complex, complex]
    mu_pair: Tuple[complex, complex]
    discriminant: float
    cls: str
    E: float

    def to_json(self) -> dict:
        return {"theta0": self.theta0, "psi0": self.psi0, "rho0": self.rho0, "class": self.cls,
                "discriminant": self.discriminant,
                "eigenvalues": [[z.real, z.imag] for z in self.eigen_pair]}


def geo_fixed_points(geo: GeoConfig, E: float, n_grid: int = 2048) -> List[GeoFixedPoint]:
    """Zeros of g paired with ψ₀ ∈ {0, π}, with eigenvalues −½ρ₀cos ψ₀{1 ± √D}.

    D = 1 − 2(1 + c²)² f''(θ₀).  D > 1 gives a saddle and f'' = 0 a
    degenerate pair {0, −ρ₀cos ψ₀}.  For D < 1 the point is a sink on the
    outgoing sheet ψ₀ = 0 and a source on the incoming sheet ψ₀ = π (a
    focus when D < 0).
    """
    out = []
    c2 = 1.0 + geo.c**2
    for th in find_roots(lambda t: geo.g(t), n_grid):
        th = float(th)
        f0 = float(geo.f(th))
        f2 = float(geo.f.eval(th, 2))
        D = 1.0 - 2.0 * c2**2 * f2
        rho0 = math.sqrt(2.0 * E / c2 * math.exp(-f0))
        sq = complex(D) ** 0.5
        A = rho0 * c2
        for psi0, sgn in ((0.0, 1.0), (math.pi, -1.0)):
            pair = (-0.5 * sgn * rho0 * (1.0 + sq), -0.5 * sgn * rho0 * (1.0 - sq))
            mu = (pair[0] / A, pair[1] / A)
            if abs(f2) < DEGENERATE_TOL:
                cls = GEO_DEGENERATE
            elif D > 1.0:
                cls = GEO_SADDLE
            elif sgn > 0:
                cls = GEO_SINK
            else:
                cls = GEO_SOURCE
            out.append(GeoFixedPoint(th, psi0, rho0, pair, mu, D, cls, E))
    return out


def numeric_eigenvalues(geo: GeoConfig, fp: GeoFixedPoint, h: float = 1e-6) -> np.ndarray:
    """Eigenvalues of the central-difference Jacobian at ``fp``, scaled to physical time by A(θ₀)."""
    J = np.empty((2, 2))
    for j, (dt, dp) in enumerate(((h, 0.0), (0.0, h))):
        a = np.array(geo_rhs(geo, fp.theta0 + dt, fp.psi0 + dp), dtype=float)
        b = np.array(geo_rhs(geo, fp.theta0 - dt, fp.psi0 - dp), dtype=float)
        J[:, j] = (a - b) / (2.0 * h)
    A = fp.rho0 * (1.0 + geo.c**2)
    return np.sort_complex(A * np.linalg.eigvals(J).astype(complex))


def _hamiltonian(geo: GeoConfig, x, xi):
    r = math.hypot(x[0], x[1])
    th = math.atan2(x[1], x[0])
    return 0.5 * math.exp(float(geo.f(th - geo.c * math.log(r)))) * (xi[0] ** 2 + xi[1] ** 2)


def spiral_consistency(geo: GeoConfig, fp: GeoFixedPoint, h: float = 1e-6) -> dict:
    """Check ρ₀ against the geodesic flow at x = (r₀, 0), ξ = ±(ρ₀, cρ₀), θ₀ = −c ln r₀.

    Returns residuals for: the energy h = E; parallelism of the Hamiltonian
    field (finite differences) with the generator v of the spiral family;
    and the radial momentum recovered from the ψ chart, A cos ψ₀/(1 + c²).
    """
    if geo.c <= 0.0:
        raise ValueError("the spiral family needs c > 0")
    c = geo.c
    r0 = math.exp(-fp.theta0 / c)
    s = math.cos(fp.psi0)
    x = np.array([r0, 0.0])
    xi = s * fp.rho0 * np.array([1.0, c])
    E = _hamiltonian(geo, x, xi)
    dx = np.empty(2)
    dxi = np.empty(2)
    for j in range(2):
        e = np.zeros(2)
        e[j] = h * r0
        dx[j] = (_hamiltonian(geo, x + e, xi) - _hamiltonian(geo, x - e, xi)) / (2 * h * r0)
        e[j] = h * fp.rho0
        dxi[j] = (_hamiltonian(geo, x, xi + e) - _hamiltonian(geo, x, xi - e)) / (2 * h * fp.rho0)
    vh = np.concatenate([dxi, -dx])
    v = np.array([x[0] - c * x[1], c * x[0] + x[1], -c * xi[1], c * xi[0]])
    k = float(vh @ v) / float(v @ v)
    par = float(np.linalg.norm(vh - k * v) / np.linalg.norm(vh))
    A = float(geo.amplitude(fp.E, fp.theta0))
    p_r = A * s / (1.0 + c * c)
    return {"energy": abs(E - fp.E) / fp.E, "parallel": par,
            "radial_speed": abs(k * r0 - math.exp(float(geo.f(fp.theta0))) * s * fp.rho0) / abs(k * r0),
            "chart_momentum": abs(p_r - s * fp.rho0) / fp.rho0}


# -- orbits and observables ---------------------------------------------------------

def default_C(geo: GeoConfig, n_grid: int = 4096) -> float:
    """C = 2 + 2·(1 + c²)(¼ + max f''₊ + (1 + c²)⁻²).

    The bracket term bounds the coupling that must be absorbed for
    d/dτ a₂ ≥ ¼ e^{−G/2}(sin²ψ + g²); the margin is certified by
    :func:`certify_C`.
    """
    th = np.linspace(0.0, TWO_PI, n_grid, endpoint=False)
    c2 = 1.0 + geo.c**2
    fpp = max(float(np.max(geo.f.eval(th, 2))), 0.0)
    return 2.0 + 2.0 * c2 * (0.25 + fpp + 1.0 / c2**2)


def _da2_reduced(geo: GeoConfig, C: float, th, psi):
    """e^{G/2}·d/dτ a₂ and e^{G/2}·(lower bound)."""
    s, co = np.sin(psi), np.cos(psi)
    g = geo.g(th)
    d = geo.damping
    rate = C * d * s * s + 0.5 * g * g - geo.g(th, 1) * s * s + d * g * s * co
    return rate, 0.25 * (s * s + g * g)


def certify_C(geo: GeoConfig, C: float, n: int = 512) -> float:
    """min over an n × n (θ, ψ) grid of e^{G/2}(d/dτ a₂ − lower bound); ≥ 0 certifies C."""
    t = np.linspace(0.0, TWO_PI, n, endpoint=False)
    th, psi = np.meshgrid(t, t, indexing="ij")
    rate, low = _da2_reduced(geo, C, th, psi)
    return float(np.min(rate - low))


@dataclass
class GeoOrbit:
    tau: np.ndarray
    theta: np.ndarray
    psi: np.ndarray
    G_quad: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    da1: np.ndarray
    da2: np.ndarray
    lower: np.ndarray
    C: float
    G_closed: np.ndarray

    @property
    def quadrature_gap(self) -> float:
        """|G(θ(τ)) − G(θ₀) − ∫ g θ' dτ|, the closed form against the carried quadrature."""
        return float(np.max(np.abs(self.G_quad - (self.G_closed - self.G_closed[0]))))

    def csv_rows(self) -> List[Tuple[float, float, float, float]]:
        return [(float(a), float(b), float(c), float(d)) for a, b, c, d in
                zip(self.tau, self.theta, self.psi, self.a1)]

    def to_json(self) -> dict:
        return {"C": self.C, "n": int(self.tau.size), "tau_end": float(self.tau[-1]),
                "theta_end": float(self.theta[-1]), "psi_end": float(self.psi[-1]),
                "a1_start": float(self.a1[0]), "a1_end": float(self.a1[-1]),
                "quadrature_gap": self.quadrature_gap}


def _monotone_ok(a: np.ndarray, direction: float) -> bool:
    d = np.diff(a) * direction
    scale = np.maximum(1.0, np.maximum(np.abs(a[1:]), np.abs(a[:-1])))
    return bool(np.all(d >= -A1_TOL * scale))


def geo_integrate(geo: GeoConfig, E: float, start: Tuple[float, float], tau_span: Tuple[float, float],
                  n_out: Optional[int] = None, C: Optional[float] = None, rtol: float = 1e-11,
                  atol: float = 1e-12) -> GeoOrbit:
    """Integrate the reduced flow, carrying a₁ and a₂ = C a₁ − e^{−G/2} g sin ψ.

    ``E`` only fixes the physical scale and does not enter the reduced
    flow.  G is carried both in closed form and as the quadrature ∫ g θ' dτ.

    Raises
    ------
    StepFailure
        If the integrator fails, a₁ decreases by more than the per-step
        tolerance, or d/dτ a₂ drops below ¼e^{−G/2}(sin²ψ + g²).
    """
    if C is None:
        C = default_C(geo)

    def rhs(tau, y):
        s = math.sin(y[1])
        g = float(geo.g(y[0]))
        return [s, -0.5 * g * math.cos(y[1]) - geo.damping * s, g * s]

    t_eval = None if n_out is None else np.linspace(tau_span[0], tau_span[1], n_out)
    sol = solve_ivp(rhs, tau_span, [start[0], start[1], 0.0], method="DOP853", rtol=rtol, atol=atol,
                    t_eval=t_eval)
    if sol.status < 0:
        raise StepFailure(sol.message, sol.y[:, -1] if sol.y.size else None, sol.t[-1] if sol.t.size else None)
    th, psi, Gq = sol.y
    G = geo.G(th)
    w = np.exp(-0.5 * G)
    s, co = np.sin(psi), np.cos(psi)
    g = geo.g(th)
    a1 = w * co
    a2 = C * a1 - w * g * s
    da1 = w * s * s * geo.damping
    rate, low = _da2_reduced(geo, C, th, psi)
    orb = GeoOrbit(sol.t, th, psi, Gq, a1, a2, da1, w * rate, w * low, C, G)
    direction = 1.0 if tau_span[1] >= tau_span[0] else -1.0
    if not _monotone_ok(a1, direction):
        raise StepFailure("a1 decreased along the orbit", sol.y[:, -1], sol.t[-1])
    if np.any(rate < low - 1e-12):
        raise StepFailure("the a2 lower bound failed; C is too small", sol.y[:, -1], sol.t[-1])
    return orb


# -- periodic ψ(θ) solutions ---------------------------------------------------------

@dataclass
class PsiSolution:
    theta_grid: np.ndarray
    psi_values: np.ndarray
    kind: str
    monotone_sign: int
    iterations: int
    residual: float
    period_gap: float
    touch_points: List[float] = field(default_factory=list)
    _spline: Optional[CubicSpline] = field(default=None, repr=False, compare=False)

    @property
    def range_length(self) -> float:
        return float(np.max(self.psi_values) - np.min(self.psi_values))

    def psi_at(self, theta):
        """Periodic interpolation on the stored grid (cubic when regular, linear across touches)."""
        th = np.mod(np.asarray(theta, dtype=float) - self.theta_grid[0], TWO_PI) + self.theta_grid[0]
        grid = np.append(self.theta_grid, self.theta_grid[0] + TWO_PI)
        vals = np.append(self.psi_values, self.psi_values[0])
        if self.kind == SINGULAR:
            return np.interp(th, grid, vals)
        if self._spline is None:
            self._spline = CubicSpline(grid, vals, bc_type="periodic")
        return self._spline(th)

    def to_json(self) -> dict:
        return {"kind": self.kind, "monotone_sign": self.monotone_sign, "iterations": self.iterations,
                "residual": self.residual, "period_gap": self.period_gap,
                "range_length": self.range_length, "touch_points": list(self.touch_points),
                "theta": self.theta_grid.tolist(), "psi": self.psi_values.tolist()}


def _tau_rhs(geo, direction):
    d = geo.damping

    def rhs(tau, y):
        s = math.sin(y[1])
        return [direction * s, direction * (-0.5 * float(geo.g(y[0])) * math.cos(y[1]) - d * s)]

    return rhs


def _period_map(geo, th0, psi0, dth, direction, tau_max):
    """ψ after θ has advanced by ``dth`` (= ±2π) from (θ₀, ψ₀), or None if sin ψ changes sign first."""
    target = th0 + dth

    def hit(tau, y):
        return y[0] - target

    hit.terminal = True

    def flip(tau, y):
        return math.sin(y[1])

    flip.terminal = True
    sol = solve_ivp(_tau_rhs(geo, direction), (0.0, tau_max), [th0, psi0], method="DOP853", rtol=1e-12,
                    atol=1e-13, events=[hit, flip], dense_output=True)
    if sol.t_events[0].size:
        return float(sol.y_events[0][0][1]), sol
    return None, sol


def psi_periodic(geo: GeoConfig, seed: Tuple[float, float], direction: int = 1, n_grid: int = 512,
                 tol: float = 1e-11, max_iter: int = 300, transient: float = 100.0,
                 tau_period: float = 2000.0, touch_tol: float = 1e-4) -> Optional[PsiSolution]:
    """The periodic solution ψ_p approached by the orbit through ``seed``.

    The orbit is followed in the τ-direction ``direction``; once sin ψ has a
    single sign, θ advances monotonically and the period map
    ψ(θ) ↦ ψ(θ ± 2π) is iterated (with Steffensen steps once the iterates
    settle) to its fixed point.  Returns None when the orbit leaves the
    single-sign regime, i.e. when it is captured by a fixed point.

    ψ_p is singular when its period orbit passes within ``touch_tol`` of
    sin ψ = 0 (which can only happen at a zero of g); it is then the limit of
    the iterates rather than an exact fixed point of the map.
    """
    direction = 1 if direction >= 0 else -1
    sol = solve_ivp(_tau_rhs(geo, direction), (0.0, transient), list(seed), method="DOP853", rtol=1e-11,
                    atol=1e-12)
    s = np.sin(sol.y[1])
    tail = s[sol.t >= 0.5 * transient]
    if tail.size == 0 or not (np.all(tail > 0) or np.all(tail < 0)):
        return None
    if abs(sol.y[0, -1] - sol.y[0, sol.t >= 0.5 * transient][0]) < 0.5:
        return None
    sgn = 1 if tail[-1] > 0 else -1
    dth = sgn * direction * TWO_PI
    th0 = float(sol.y[0, -1])
    psi = float(sol.y[1, -1])
    hist = [psi]
    last = None
    it = 0
    for it in range(1, max_iter + 1):
        nxt, last = _period_map(geo, th0, psi, dth, direction, tau_period)
        if nxt is None:
            return None
        nxt = th_wrap(nxt, psi)
        hist.append(nxt)
        if abs(nxt - psi) < tol:
            psi = nxt
            break
        psi = nxt
        if len(hist) >= 3 and it % 3 == 0:
            p0, p1, p2 = hist[-3:]
            den = p2 - 2 * p1 + p0
            if den != 0.0 and abs(p2 - p1) < abs(p1 - p0):
                cand = p0 - (p1 - p0) ** 2 / den
                chk, _ = _period_map(geo, th0, cand, dth, direction, tau_period)
                if chk is not None and abs(th_wrap(chk, cand) - cand) < abs(p2 - p1):
                    psi = cand
                    hist.append(cand)
    psi_fix = psi
    nxt, orbit = _period_map(geo, th0, psi_fix, dth, direction, tau_period)
    if nxt is None:
        return None
    gap = abs(th_wrap(nxt, psi_fix) - psi_fix)
    # tabulate one period on a θ grid ascending from θ₀ mod 2π
    tt = np.linspace(0.0, orbit.t[-1], max(20 * n_grid, 4 * orbit.t.size))
    Y = orbit.sol(tt)
    th_line, ps_line = Y[0], Y[1]
    order = np.argsort(th_line)
    th_line, ps_line = th_line[order], ps_line[order]
    lo = float(np.min(th_line))
    grid = lo + TWO_PI * np.arange(n_grid) / n_grid
    vals = np.interp(grid, th_line, ps_line)
    sin_line = np.abs(np.sin(ps_line))
    touches = []
    kind = REGULAR
    if np.min(sin_line) < touch_tol:
        kind = SINGULAR
        zeros = find_roots(lambda t: geo.g(t))
        for j in np.nonzero(sin_line < touch_tol)[0]:
            t = float(np.mod(th_line[j], TWO_PI))
            if zeros.size and np.min(np.abs(np.remainder(zeros - t + math.pi, TWO_PI) - math.pi)) < 1e-2:
                z = float(zeros[np.argmin(np.abs(np.remainder(zeros - t + math.pi, TWO_PI) - math.pi))])
                if not any(abs(z - q) < 1e-9 for q in touches):
                    touches.append(z)
        if not touches:
            raise StepFailure("sin ψ_p vanishes away from the zeros of g")
    residual = _integral_residual(geo, orbit, grid, kind, direction)
    return PsiSolution(grid, vals, kind, sgn, it, residual, gap, touches)


def th_wrap(value: float, ref: float) -> float:
    """``value`` shifted by a multiple of 2π to lie nearest ``ref``."""
    return value - TWO_PI * round((value - ref) / TWO_PI)


def _integral_residual(geo, orbit, grid, kind, direction, n_gauss=16):
    """max over grid cells of |ψ(θ₂) − ψ(θ₁) + ∫ (½ g cot ψ + 1/(1 + c²)) dθ|.

    ψ along a cell comes from the dense τ-output, inverted in θ by Newton on
    θ(τ).  Cells containing a touch point are skipped (the integrand is only
    integrable there).
    """
    if kind == SINGULAR:
        return float("nan")
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    t_line = np.linspace(0.0, orbit.t[-1], max(4000, 10 * grid.size))
    th_t = orbit.sol(t_line)[0]
    inc = th_t[-1] > th_t[0]

    def psi_of(theta):
        # Newton on θ(τ) = theta from a table guess
        tg = np.interp(theta, th_t if inc else th_t[::-1], t_line if inc else t_line[::-1])
        for _ in range(8):
            y = orbit.sol(tg)
            tg = tg - (y[0] - theta) / (direction * np.sin(y[1]))
        return orbit.sol(tg)[1]

    worst = 0.0
    for a, b in zip(grid, np.append(grid[1:], grid[0] + TWO_PI)):
        q = 0.5 * (b - a) * x + 0.5 * (b + a)
        pq = psi_of(q)
        integrand = 0.5 * geo.g(q) * np.cos(pq) / np.sin(pq) + geo.damping
        val = psi_of(np.array([b]))[0] - psi_of(np.array([a]))[0] + 0.5 * (b - a) * float(w @ integrand)
        worst = max(worst, abs(val))
    return worst


# -- classification ---------------------------------------------------------------

@dataclass
class GeoControls:
    tau_max: float = 400.0
    block: float = 50.0
    tol_fp: float = 1e-10
    fp_window: float = 2.0
    fp_match: float = 1e-3
    tol_psi: float = 1e-6


@dataclass
class GeoOutcome:
    variant: str
    fixed_point: Optional[GeoFixedPoint] = None
    psi: Optional[PsiSolution] = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"variant": self.variant, "diagnostics": self.diagnostics}
        if self.fixed_point is not None:
            out["fixed_point"] = self.fixed_point.to_json()
        if self.psi is not None:
            out["psi_kind"] = self.psi.kind
        return out


def _nearest_fp(fps, th, psi):
    best, dist = None, math.inf
    for fp in fps:
        d = math.hypot(math.remainder(th - fp.theta0, TWO_PI), math.remainder(psi - fp.psi0, TWO_PI))
        if d < dist:
            best, dist = fp, d
    return best, dist


def geo_classify(geo: GeoConfig, E: float, start: Tuple[float, float],
                 controls: Optional[GeoControls] = None,
                 fixed_points: Optional[Sequence[GeoFixedPoint]] = None) -> GeoOutcome:
    """Asymptotic fate of the reduced orbit through ``start`` as τ → +∞.

    FixedPoint once sin²ψ + g² stays below ``tol_fp`` for ``fp_window`` near a
    fixed point; RegularPsi/SingularPsi once the orbit is single-signed in
    sin ψ and tracks ψ_p to ``tol_psi`` over a full revolution.

    Raises
    ------
    StepFailure
        From the integrator.
    """
    ctl = controls or GeoControls()
    fps = list(geo_fixed_points(geo, E)) if fixed_points is None else list(fixed_points)
    rhs = _tau_rhs(geo, 1)
    y = np.array(start, dtype=float)
    tau = 0.0
    below_since = None
    psi_sol = None
    while tau < ctl.tau_max:
        t1 = min(tau + ctl.block, ctl.tau_max)
        sol = solve_ivp(rhs, (tau, t1), y, method="DOP853", rtol=1e-11, atol=1e-12, dense_output=True)
        if sol.status < 0:
            raise StepFailure(sol.message, y, tau)
        tt = np.linspace(tau, t1, 2001)
        th, ps = sol.sol(tt)
        q = np.sin(ps) ** 2 + geo.g(th) ** 2
        for ti, qi in zip(tt, q):
            if qi < ctl.tol_fp:
                if below_since is None:
                    below_since = ti
                elif ti - below_since >= ctl.fp_window:
                    fp, d = _nearest_fp(fps, th[-1], ps[-1])
                    if fp is not None and d < ctl.fp_match:
                        return GeoOutcome(FIXED_POINT, fp, diagnostics={"q": float(qi), "distance": d,
                                                                        "tau": float(ti)})
            else:
                below_since = None
        s = np.sin(ps)
        if np.all(s > 0) or np.all(s < 0):
            if psi_sol is None:
                psi_sol = psi_periodic(geo, (float(th[-1]), float(ps[-1])), 1)
            if psi_sol is not None:
                # one revolution ahead of the current state
                dev, rev = _track(geo, psi_sol, sol.y[:, -1], t1)
                if dev < ctl.tol_psi:
                    variant = REGULAR_PSI if psi_sol.kind == REGULAR else SINGULAR_PSI
                    return GeoOutcome(variant, psi=psi_sol, diagnostics={"sup_deviation": dev, "tau": rev})
        y = sol.y[:, -1]
        tau = t1
    return GeoOutcome(UNDETERMINED, diagnostics={"tau": tau})


def _track(geo, psi_sol, y, tau, n=400):
    """sup |ψ(τ) − ψ_p(θ(τ))| (mod 2π) over the next revolution, and the τ reached."""
    target = y[0] + np.sign(math.sin(y[1])) * TWO_PI

    def hit(t, z):
        return z[0] - target

    hit.terminal = True
    sol = solve_ivp(_tau_rhs(geo, 1), (tau, tau + 1e4), y, method="DOP853", rtol=1e-11, atol=1e-12,
                    events=[hit], dense_output=True)
    tt = np.linspace(tau, sol.t[-1], n)
    th, ps = sol.sol(tt)
    d = np.remainder(ps - psi_sol.psi_at(th) + math.pi, TWO_PI) - math.pi
    return float(np.max(np.abs(d))), float(sol.t[-1])


# -- conjugation to the homogeneous model --------------------------------------------

def conjugation_map(c: float, x):
    """x ↦ (x₁g₁ + x₂g₂, x₂g₁ − x₁g₂) with g₁ + ig₂ = e^{ic ln|x|}; complex-step safe."""
    x = np.asarray(x)
    L = 0.5 * np.log(x[0] ** 2 + x[1] ** 2)
    g1, g2 = np.cos(c * L), np.sin(c * L)
    return np.array([x[0] * g1 + x[1] * g2, x[1] * g1 - x[0] * g2])


def _h_tilde(geo: GeoConfig, xt, xit):
    th = math.atan2(xt[1], xt[0])
    s, co = math.sin(th), math.cos(th)
    c = geo.c
    u = (c * s + co) * xit[0] + (s - c * co) * xit[1]
    v = -s * xit[0] + co * xit[1]
    return 0.5 * math.exp(float(geo.f(th))) * (u * u + v * v)


def verify_conjugation(geo: GeoConfig, samples) -> float:
    """max |h(x, ξ) − h̃(x̃, ξ̃)| / h over samples (x₁, x₂, ξ₁, ξ₂), ξ̃ = (Dx̃)^{−T} ξ.

    The Jacobian of the map is taken by complex-step differentiation.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    worst = 0.0
    hstep = 1e-30
    for x1, x2, p1, p2 in samples:
        x = np.array([x1, x2])
        J = np.empty((2, 2))
        for j in range(2):
            z = x.astype(complex)
            z[j] += 1j * hstep
            J[:, j] = conjugation_map(geo.c, z).imag / hstep
        xt = conjugation_map(geo.c, x)
        xit = np.linalg.solve(J.T, np.array([p1, p2]))
        h = _hamiltonian(geo, x, (p1, p2))
        worst = max(worst, abs(h - _h_tilde(geo, xt, xit)) / h)
    return worst


def scan_c(f: PeriodicFunction, c_values: Sequence[float], seed: Tuple[float, float] = (0.0, -0.5),
           direction: int = 1) -> List[dict]:
    """ψ_p kind and min |sin ψ_p| for each c; small minima flag candidate singular twists.

    Nothing is asserted about how many such c exist.
    """
    out = []
    for c in c_values:
        geo = GeoConfig(f, float(c))
        try:
            sol = psi_periodic(geo, seed, direction)
        except StepFailure:
            sol = None
        if sol is None:
            out.append({"c": float(c), "kind": None, "min_abs_sin": None})
        else:
            out.append({"c": float(c), "kind": sol.kind,
                        "min_abs_sin": float(np.min(np.abs(np.sin(sol.psi_values))))})
    return out
