"""Periodic solutions of ρ' = b + η over one revolution.

A spiral at energy E is a 2π-periodic solution of

    ρ'(θ) = b(θ) + η(θ),   η = √(2(E − V) − ρ²) > 0,

with winding ∫ρ/η dθ; positive winding means the configuration-space
trace spirals outward.  Shooting from ρ(0) = a gives the return map
f(a, E) = ρ(2π) − a whose derivatives are quadratures along the shot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .errors import BoundaryHit, EmptyWindow, NoSolution, NotDegenerate, NoTouch
from .fixedpoints import SADDLE_PLUS, locate
from .flow import FastField
from .periodic import TWO_PI, FieldConfig

RTOL = 1e-12
ATOL = 1e-13
N_GRID = 2049
N_SCAN = 512
ETA_GRAZE = 1e-4
OUTGOING = 1
INCOMING = -1


TAU_MAX = 1e4


def _tau_system(cfg: FieldConfig, E: float, theta_end: float, augmented: bool, graze: float = 0.0):
    """Right-hand side and events for shooting along the reduced flow in τ.

    In τ the shot is regular up to the shell boundary, which becomes the
    transversal crossing η = 0.  Quadratures carried when ``augmented``:
    W = ∫ρ dτ, I2 = ∫2(E−V)η⁻²e^{−W} dτ, I3 = ∫e^{W} dτ.
    """
    ff = FastField(cfg)

    def rhs(t, y):
        th, eta, rho = y[0], y[1], y[2]
        b, dv, v = ff.b_dv_v(th)
        eb = eta + b
        out = [eta, -eb * rho - dv, eb * eta]
        if augmented:
            W = y[3]
            out += [rho, 2.0 * (E - v) * math.exp(-W) / (eta * eta), math.exp(W)]
        return out

    def done(t, y):
        return y[0] - theta_end

    done.terminal = True
    done.direction = 1

    def hit(t, y):
        return y[1] - graze

    hit.terminal = True
    hit.direction = -1
    return rhs, [done, hit]


def _tau_shot(cfg, E, theta0, rho0, theta_end, augmented=False, dense=False, graze=0.0):
    w2 = 2.0 * (E - float(cfg.V(theta0))) - rho0 * rho0
    if w2 <= 0.0:
        raise ValueError(f"rho0={rho0} outside the shell at E={E}")
    rhs, events = _tau_system(cfg, E, theta_end, augmented, graze)
    y0 = [theta0, math.sqrt(w2), rho0] + ([0.0, 0.0, 0.0] if augmented else [])
    sol = solve_ivp(rhs, (0.0, TAU_MAX), y0, method="DOP853", rtol=RTOL, atol=ATOL, events=events,
                    dense_output=dense)
    if sol.status == 1 and sol.t_events[0].size:
        return sol
    if sol.status == 1:
        ye = sol.y_events[1][0]
        raise BoundaryHit(f"boundary reached at theta={ye[0]:.12g}", float(ye[0]), float(ye[2]))
    # τ budget exhausted: the shot is captured by an equilibrium on the boundary
    raise BoundaryHit("shot captured by a boundary equilibrium", float(sol.y[0, -1]), float(sol.y[2, -1]))


def _admissible(cfg: FieldConfig, E: float, a: float, theta0: float = 0.0) -> bool:
    return a * a < 2.0 * (E - float(cfg.V(theta0)))


def shoot(cfg: FieldConfig, E: float, a: float, theta0: float = 0.0, span: float = TWO_PI) -> float:
    """ρ(θ₀ + span) for the solution with ρ(θ₀) = a and η > 0.

    Raises
    ------
    BoundaryHit
        If η reaches 0 before the end of the span.
    ValueError
        If a lies outside the open shell at θ₀.
    """
    if not _admissible(cfg, E, a, theta0):
        raise ValueError(f"a={a} outside the shell at E={E}")
    sol = _tau_shot(cfg, E, theta0, a, theta0 + span)
    return float(sol.y_events[0][0][2])


@dataclass(frozen=True)
class ShotDerivatives:
    f: float
    fa: float
    faa: float
    fE: float
    winding: float


def shoot_derivatives(cfg: FieldConfig, E: float, a: float) -> ShotDerivatives:
    """f = ρ(2π) − a with ∂_a f, ∂²_a f, ∂_E f as quadratures along the shot.

    ∂_a f = e^{−W} − 1, ∂²_a f = −e^{−W} ∫2(E−V)η⁻³e^{−Φ} dθ and
    ∂_E f = e^{−W} ∫η⁻¹e^{Φ} dθ, with Φ(θ) = ∫₀^θ ρ/η and W = Φ(2π).
    """
    if not _admissible(cfg, E, a):
        raise ValueError(f"a={a} outside the shell at E={E}")
    sol = _tau_shot(cfg, E, 0.0, a, TWO_PI, augmented=True, graze=ETA_GRAZE)
    _, _, rho, W, I2, I3 = sol.y_events[0][0]
    eW = math.exp(-W)
    return ShotDerivatives(rho - a, eW - 1.0, -eW * I2, eW * I3, W)


def scan_profile(cfg: FieldConfig, E: float, n: int = N_SCAN, steps: int = 512) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized fixed-step shots over n admissible seeds; NaN marks a boundary hit.

    Only used to bracket roots; every root is re-solved by adaptive shooting.
    """
    amax = math.sqrt(2.0 * (E - float(cfg.V(0.0))))
    a = np.linspace(-amax, amax, n + 2)[1:-1]
    rho = a.copy()
    alive = np.ones(n, bool)
    h = TWO_PI / steps

    def F(th, r):
        s = 2.0 * (E - cfg.V(th)) - r * r
        return cfg.b(th) + np.sqrt(np.where(s > 0, s, np.nan))

    th = 0.0
    for _ in range(steps):
        k1 = F(th, rho)
        k2 = F(th + h / 2, rho + h / 2 * k1)
        k3 = F(th + h / 2, rho + h / 2 * k2)
        k4 = F(th + h, rho + h * k3)
        rho = rho + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        th += h
        alive &= np.isfinite(rho)
        rho = np.where(alive, rho, 0.0)
    f = np.where(alive, rho - a, np.nan)
    return a, f


@dataclass
class SpiralSolution:
    """Periodic solution sampled on a uniform grid of [0, 2π]."""

    E: float
    theta_grid: np.ndarray
    rho_values: np.ndarray
    eta_values: np.ndarray
    winding: float
    sense: int
    phi_values: np.ndarray = field(repr=False, default=None)
    cfg: Optional[FieldConfig] = field(repr=False, default=None)

    def __post_init__(self):
        self._rho = CubicSpline(self.theta_grid, self.rho_values, bc_type="periodic")
        self._eta = CubicSpline(self.theta_grid, self.eta_values, bc_type="periodic")

    @property
    def a(self) -> float:
        return float(self.rho_values[0])

    def rho_at(self, theta):
        return self._rho(np.mod(theta, TWO_PI))

    def eta_at(self, theta):
        return self._eta(np.mod(theta, TWO_PI))

    def residual(self) -> float:
        """max |ρ' − b − η| at the nodes, with ρ' from the field itself."""
        d = self._rho(self.theta_grid, 1)
        return float(np.max(np.abs(d - self.cfg.b(self.theta_grid) - self.eta_values)))

    def periodicity_gap(self) -> float:
        return float(abs(self.rho_values[-1] - self.rho_values[0]))

    def csv_rows(self):
        return zip(self.theta_grid, self.rho_values, self.eta_values)

    def summary(self) -> dict:
        return {"E": self.E, "a": self.a, "winding": self.winding, "sense": "+" if self.sense > 0 else "-",
                "min_eta": float(np.min(self.eta_values)), "max_rho": float(np.max(self.rho_values))}


def build_solution(cfg: FieldConfig, E: float, a: float, n: int = N_GRID) -> SpiralSolution:
    """Integrate the closed orbit through a and sample it on the uniform θ grid."""
    sol = _tau_shot(cfg, E, 0.0, a, TWO_PI, augmented=True, dense=True, graze=ETA_GRAZE)
    grid = np.linspace(0.0, TWO_PI, n)
    y = _sample_on_theta(sol, grid)
    rho = y[2].copy()
    rho[-1] = rho[0]
    eta = np.sqrt(np.maximum(2.0 * (E - cfg.V(grid)) - rho**2, 0.0))
    W = float(sol.y_events[0][0][3])
    phi = y[3].copy()
    phi[0], phi[-1] = 0.0, W
    return SpiralSolution(E, grid, rho, eta, W, 1 if W > 0 else -1, phi, cfg)


def _sample_on_theta(sol, grid):
    """Dense τ-solution evaluated at prescribed angles (θ' = η > 0 makes θ(τ) invertible)."""
    t_end = float(sol.t_events[0][0]) if sol.t_events[0].size else float(sol.t[-1])
    tk = np.interp(grid, sol.y[0], sol.t)
    for _ in range(8):
        y = sol.sol(tk)
        tk = np.clip(tk - (y[0] - grid) / np.maximum(y[1], 1e-300), 0.0, t_end)
    return sol.sol(tk)


def _newton(cfg, E, a, iters=30, tol=1e-13):
    for _ in range(iters):
        d = shoot_derivatives(cfg, E, a)
        if d.fa == 0.0:
            return None
        step = d.f / d.fa
        a_new = a - step
        if not _admissible(cfg, E, a_new):
            return None
        a = a_new
        if abs(step) < tol * (1.0 + abs(a)):
            return a
    return None


def periodic_roots(cfg: FieldConfig, E: float, n_scan: int = N_SCAN) -> Tuple[List[float], dict]:
    """All roots of the return map found by bracketing; profile is kept for diagnostics.

    Two roots closer than the scan spacing (just above a fold) are caught by
    refining the maximum of the oriented return map.
    """
    a, f = scan_profile(cfg, E, n_scan)
    roots = []
    ok = np.isfinite(f)

    def fx(x):
        try:
            return shoot(cfg, E, x) - x
        except BoundaryHit:
            return math.nan

    def solve(lo, hi):
        flo, fhi = fx(lo), fx(hi)
        if not (math.isfinite(flo) and math.isfinite(fhi)) or flo * fhi > 0:
            return
        if flo == 0.0 or fhi == 0.0:
            roots.append(lo if flo == 0.0 else hi)
        else:
            roots.append(brentq(fx, lo, hi, xtol=1e-14, rtol=1e-15))

    for i in range(n_scan - 1):
        if ok[i] and ok[i + 1] and f[i] * f[i + 1] <= 0.0:
            solve(a[i], a[i + 1])
    if not roots and ok.any():
        s = -_orientation(cfg)
        i = int(np.nanargmax(s * f))
        if 0 < i < n_scan - 1 and ok[i - 1] and ok[i + 1]:
            M, x = _refine_max(cfg, E, float(a[i]))
            if M > 0 and a[i - 1] < x < a[i + 1]:
                solve(a[i - 1], x)
                solve(x, a[i + 1])
    profile = {"a": a.tolist(), "f": [None if not math.isfinite(x) else float(x) for x in f]}
    return roots, profile


def find_periodic(cfg: FieldConfig, E: float, seed: Optional[float] = None, sense: int = OUTGOING,
                  n_scan: int = N_SCAN) -> SpiralSolution:
    """The spiral of the requested sense at E.

    Incoming spirals are found as outgoing spirals of the reflected field.
    Newton from ``seed`` (using ∂_a f) is tried first; on stagnation or a
    solution of the wrong sense, the return map is bracketed over the
    admissible range.

    Raises
    ------
    NoSolution
        After all brackets are exhausted; carries the scanned profile.
    """
    if E <= cfg.V.max():
        raise NoSolution({"reason": "E below max V"})
    if sense == INCOMING:
        # forward shooting is unstable at an incoming spiral; use the reflected field
        sol = find_periodic(cfg.reflect(), E, None if seed is None else -seed, OUTGOING, n_scan)
        return reflect_solution(sol, cfg)
    if seed is not None and _admissible(cfg, E, seed):
        try:
            a = _newton(cfg, E, seed)
        except BoundaryHit:
            a = None
        if a is not None:
            sol = build_solution(cfg, E, a)
            if sol.sense == sense and np.min(sol.eta_values) > 0:
                return sol
    roots, profile = periodic_roots(cfg, E, n_scan)
    for a in roots:
        try:
            a = _newton(cfg, E, a) or a
            sol = build_solution(cfg, E, a)
        except BoundaryHit:
            continue
        if sol.sense == sense and np.min(sol.eta_values) > 0:
            return sol
    raise NoSolution(profile)


def outgoing_spiral_or_none(cfg: FieldConfig, E: float) -> Optional[SpiralSolution]:
    try:
        return find_periodic(cfg, E)
    except NoSolution:
        return None


KERNEL_DECAYING = -1
KERNEL_GROWING = 1


def dE_rho(sol: SpiralSolution, theta, kernel: int = KERNEL_DECAYING):
    """∂_E ρ_E(θ) = ∫_{−∞}^{θ} η(θ')⁻¹ exp(k ∫_{θ'}^{θ} ρ/η) dθ' with k = ``kernel``.

    The past revolutions form a geometric series with ratio exp(k·winding),
    summed in closed form.  Only k = −1 converges for an outgoing spiral.

    Raises
    ------
    ArithmeticError
        If the series diverges for the chosen kernel sign.
    """
    k = kernel
    W = sol.winding
    if k * W >= 0.0:
        raise ArithmeticError("kernel series diverges for this winding sign")
    th = sol.theta_grid
    phi = sol.phi_values
    integrand = np.exp(-k * phi) / sol.eta_values
    G = CubicSpline(th, integrand).antiderivative()
    Phi = CubicSpline(th, phi)
    x = np.mod(np.asarray(theta, dtype=float), TWO_PI)
    Gx, G2 = G(x), G(TWO_PI)
    J = np.exp(k * Phi(x)) * (Gx + math.exp(k * W) * (G2 - Gx))
    out = J / (1.0 - math.exp(k * W))
    return float(out) if np.ndim(out) == 0 else out


def dE_rho_grid(sol: SpiralSolution, kernel: int = KERNEL_DECAYING) -> np.ndarray:
    return dE_rho(sol, sol.theta_grid, kernel)


# -- window and bifurcation ------------------------------------------------------------

def _orientation(cfg: FieldConfig) -> float:
    return -1.0 if cfg.flux < 0 else 1.0


def _refine_max(cfg, E, x):
    """Newton on ∂_a f = 0 from x; returns (s·f, a*)."""
    s = -_orientation(cfg)
    x0 = x
    for _ in range(40):
        try:
            d = shoot_derivatives(cfg, E, x)
        except (BoundaryHit, ValueError):
            x = x0
            break
        if d.faa == 0.0:
            break
        step = d.fa / d.faa
        xn = x - step
        if not _admissible(cfg, E, xn):
            break
        x = xn
        if abs(step) < 1e-14:
            break
    try:
        return s * (shoot(cfg, E, x) - x), x
    except (BoundaryHit, ValueError):
        return -math.inf, x


def max_return(cfg: FieldConfig, E: float, n_scan: int = 128) -> Tuple[float, float]:
    """(M, a*) with M = max_a s·f(a, E), s = −sign(flux); M < 0 means no closed orbit."""
    s = -_orientation(cfg)
    a, f = scan_profile(cfg, E, n_scan)
    sf = s * f
    if not np.any(np.isfinite(sf)):
        return -math.inf, math.nan
    i = int(np.nanargmax(sf))
    M, x = _refine_max(cfg, E, float(a[i]))
    if not math.isfinite(M):
        return float(sf[i]), float(a[i])
    return M, x


@dataclass
class SpiralWindow:
    E_d: float
    E_e: float
    branch: List[SpiralSolution]
    endpoint_diagnostics: dict
    sense: int = OUTGOING
    a_d: Optional[float] = None
    intervals: List[Tuple[float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"E_d": self.E_d, "E_e": "inf" if math.isinf(self.E_e) else self.E_e,
                "sense": "+" if self.sense > 0 else "-",
                "branch": [s.summary() for s in self.branch],
                "endpoint_diagnostics": self.endpoint_diagnostics,
                "intervals": [[lo, "inf" if math.isinf(hi) else hi] for lo, hi in self.intervals]}

    def contains(self, E: float) -> bool:
        return self.E_d < E < self.E_e


def _exists(cfg, E, sense, seed=None):
    try:
        return find_periodic(cfg, E, seed=seed, sense=sense)
    except NoSolution:
        return None


def _locate_E_d(cfg, lo, hi, tol=1e-11):
    """Root of E ↦ max_a s·f in (lo, hi); lo has M < 0, hi has M ≥ 0.

    Energies without admissible shots count as M < 0, so the root is also
    found when the admissible range opens up inside the bracket.
    """
    def M(E):
        m = max_return(cfg, E)[0]
        return m if math.isfinite(m) else -1.0
    if M(lo) >= 0:
        return lo
    return brentq(M, lo, hi, xtol=tol, rtol=1e-15)


def window(cfg: FieldConfig, bracket: Tuple[float, float], n_coarse: int = 24, sense: int = OUTGOING,
           n_branch: int = 12) -> SpiralWindow:
    """Energy window of spirals of the given sense inside the bracket.

    A coarse existence scan finds maximal runs; the lower end of each run is
    refined on the return-map maximum (the degeneracy signal) and the upper
    end by bisection on existence.  The upper end is the +∞ sentinel if the
    run reaches the ceiling.

    Raises
    ------
    EmptyWindow
        If no spiral of this sense is found in the bracket.
    """
    lo, hi = bracket
    lo = max(lo, float(cfg.V.max()) + 1e-12)
    Es = np.geomspace(lo, hi, n_coarse) if lo > 0 else np.linspace(lo, hi, n_coarse)
    found = []
    seed = None
    for E in Es:
        sol = _exists(cfg, float(E), sense, seed)
        found.append(sol)
        seed = sol.a if sol is not None else None
    runs = []
    i = 0
    while i < len(Es):
        if found[i] is not None:
            j = i
            while j + 1 < len(Es) and found[j + 1] is not None:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    if not runs:
        raise EmptyWindow(f"no spiral of sense {sense} in {bracket}")
    intervals = []
    for (i, j) in runs:
        if i == 0:
            E_d = float(Es[0])
        else:
            E_d = _locate_E_d(cfg, float(Es[i - 1]), float(Es[i]))
            # the degenerate point belongs to both senses; existence of this sense just above it
            if _exists(cfg, E_d + 1e-6 * max(1.0, E_d), sense) is None:
                a, b_ = float(Es[i - 1]), float(Es[i])
                while b_ - a > 1e-10 * max(1.0, b_):
                    m = 0.5 * (a + b_)
                    if _exists(cfg, m, sense) is None:
                        a = m
                    else:
                        b_ = m
                E_d = b_
        if j == len(Es) - 1:
            E_e = math.inf
        else:
            a, b_ = float(Es[j]), float(Es[j + 1])
            seed = found[j].a
            while b_ - a > 1e-9 * max(1.0, b_):
                m = 0.5 * (a + b_)
                s = _exists(cfg, m, sense, seed)
                if s is None:
                    b_ = m
                else:
                    a, seed = m, s.a
            E_e = 0.5 * (a + b_)
        intervals.append((E_d, E_e))
    E_d, E_e = intervals[0]
    top = E_e if math.isfinite(E_e) else hi
    branch = []
    seed = None
    for E in np.linspace(E_d, top, n_branch + 2)[1:-1]:
        s = _exists(cfg, float(E), sense, seed)
        if s is not None:
            branch.append(s)
            seed = s.a
    diag = {"dEr_blowup_at_E_d": None, "winding_blowup_at_E_e": None, "dEr_bound_active": None}
    if branch:
        near = _exists(cfg, E_d + 1e-6 * max(1.0, E_d), sense)
        if near is not None:
            diag["dEr_blowup_at_E_d"] = bool(np.max(dE_rho_grid(near, -sense)) > 10 * np.max(dE_rho_grid(branch[-1], -sense)))
            diag["winding_near_E_d"] = near.winding
        if math.isfinite(E_e):
            near = _exists(cfg, E_e - 1e-7 * max(1.0, E_e), sense, branch[-1].a)
            if near is not None:
                diag["winding_blowup_at_E_e"] = bool(abs(near.winding) > 3 * abs(branch[len(branch) // 2].winding))
                diag["winding_near_E_e"] = near.winding
        else:
            Et = 2.0 * (hi - cfg.V.max()) - cfg.b.max_abs() ** 2
            diag["dEr_bound_active"] = bool(Et > 0)
    return SpiralWindow(E_d, E_e, branch, diag, sense, intervals=intervals)


@dataclass
class Bifurcation:
    E_d: float
    a_d: float
    fa_d: float
    fE_d: float
    faa_d: float
    C_closed_form: float
    energies: np.ndarray
    a_plus: np.ndarray
    a_minus: np.ndarray
    winding_plus: np.ndarray
    winding_minus: np.ndarray
    fit_exponent: Tuple[float, float]
    fit_coefficient: Tuple[float, float]

    def to_json(self) -> dict:
        return {"E_d": self.E_d, "a_d": self.a_d, "d_a_f": self.fa_d, "d_E_f": self.fE_d,
                "d2_a_f": self.faa_d, "C": self.C_closed_form,
                "fit_exponent": list(self.fit_exponent), "fit_coefficient": list(self.fit_coefficient),
                "energies": self.energies.tolist(), "a_plus": self.a_plus.tolist(), "a_minus": self.a_minus.tolist()}


def bifurcate(cfg: FieldConfig, win: SpiralWindow, deltas: Optional[Sequence[float]] = None,
              tol_degenerate: float = 1e-6) -> Bifurcation:
    """Two root branches a_±(E) of f(·, E) near the degenerate point (a_d, E_d).

    The closed-form coefficient is C = √(−2∂_E f / ∂²_a f); the fit is a
    log-log regression of |a_± − a_d| against E − E_d.
    """
    E_d = win.E_d
    _, a_d = max_return(cfg, E_d)
    d0 = shoot_derivatives(cfg, E_d, a_d)
    if abs(d0.fa) > tol_degenerate:
        raise NotDegenerate(f"d_a f = {d0.fa} at E_d")
    C = math.sqrt(-2.0 * d0.fE / d0.faa)
    if deltas is None:
        deltas = np.geomspace(1e-6, 1e-4, 7)
    deltas = np.asarray(deltas, float)
    ap, am, wp, wm = [], [], [], []
    for dl in deltas:
        E = E_d + dl
        r = C * math.sqrt(dl)

        def fx(x):
            return shoot(cfg, E, x) - x
        out = []
        for side in (1.0, -1.0):
            x0 = a_d
            x1 = a_d + side * r
            while fx(x1) * fx(x0) > 0:
                x1 = a_d + side * (abs(x1 - a_d) * 1.5)
            out.append(brentq(fx, min(x0, x1), max(x0, x1), xtol=1e-15, rtol=1e-15))
        ap.append(out[0])
        am.append(out[1])
        wp.append(shoot_derivatives(cfg, E, out[0]).winding)
        wm.append(shoot_derivatives(cfg, E, out[1]).winding)
    ap, am = np.array(ap), np.array(am)
    fits = []
    for arr in (ap, am):
        slope, icpt = np.polyfit(np.log(deltas), np.log(np.abs(arr - a_d)), 1)
        fits.append((slope, math.exp(icpt)))
    # the coefficient at exponent 1/2, fitted with the leading-order model
    coef = tuple(float(np.mean(np.abs(arr - a_d) / np.sqrt(deltas))) for arr in (ap, am))
    return Bifurcation(E_d, a_d, d0.fa, d0.fE, d0.faa, C, E_d + deltas, ap, am, np.array(wp), np.array(wm),
                       (fits[0][0], fits[1][0]), coef)


# -- incoming spirals and reflection ------------------------------------------------

def reflect_solution(sol: SpiralSolution, cfg: FieldConfig) -> SpiralSolution:
    """ρ(θ) ↦ −ρ(−θ), mapping solutions of (b, V) to those of the reflected field."""
    th = sol.theta_grid
    rho = -sol.rho_values[::-1].copy()
    eta = sol.eta_values[::-1].copy()
    # Φ(θ) for the image: ∫₀^θ (−ρ(−s))/η(−s) ds = Φ_old(2π−θ) − W
    phi = sol.phi_values[::-1] - sol.winding
    return SpiralSolution(sol.E, th, rho, eta, -sol.winding, -sol.sense, phi, cfg)


def incoming_set(cfg: FieldConfig, bracket: Tuple[float, float], **kw) -> SpiralWindow:
    """Window of incoming spirals via the reflected field."""
    rcfg = cfg.reflect()
    w = window(rcfg, bracket, sense=OUTGOING, **kw)
    branch = [reflect_solution(s, cfg) for s in w.branch]
    return SpiralWindow(w.E_d, w.E_e, branch, w.endpoint_diagnostics, INCOMING, intervals=w.intervals)


def ordering_gap(outgoing: SpiralSolution, incoming: SpiralSolution) -> float:
    """min over θ of ρ⁺ − ρ⁻ (nonnegative under the ordering)."""
    th = outgoing.theta_grid
    return float(np.min(outgoing.rho_at(th) - incoming.rho_at(th)))


def arcsine_bound(E: float, rho1: float, rho2: float) -> float:
    """Upper bound on the length of an interval where b ≥ 0, V = 0."""
    s = math.sqrt(2.0 * E)
    return math.asin(max(-1.0, min(1.0, rho1 / s))) - math.asin(max(-1.0, min(1.0, rho2 / s)))


def nonnegative_intervals(b, n: int = 4096) -> List[Tuple[float, float]]:
    """Maximal arcs where b ≥ 0, as (start, end) with end possibly > 2π."""
    th = np.linspace(0.0, TWO_PI, n, endpoint=False)
    pos = b(th) >= 0
    if pos.all():
        return [(0.0, TWO_PI)]
    if not pos.any():
        return []
    k = int(np.argmin(pos))  # start scanning from a negative node
    out = []
    i = 0
    while i < n:
        j = (k + i) % n
        if pos[j]:
            start = i
            while i < n and pos[(k + i) % n]:
                i += 1
            t0 = th[(k + start) % n]
            out.append((float(t0), float(t0 + (i - start - 1) * TWO_PI / n)))
        i += 1
    return out


# -- singular cycles -------------------------------------------------------------------

@dataclass
class SingularCycle:
    E: float
    theta_grid: np.ndarray
    rho_values: np.ndarray
    eta_values: np.ndarray
    side: str
    touch_set: List[float]
    kappa_at_touch: List[float]
    expansion_check: dict

    def __post_init__(self):
        self._rho = CubicSpline(self.theta_grid, self.rho_values)
        self._eta = CubicSpline(self.theta_grid, self.eta_values)

    def _wrap(self, theta):
        g0 = self.theta_grid[0]
        return np.mod(np.asarray(theta, dtype=float) - g0, TWO_PI) + g0

    def rho_at(self, theta):
        return self._rho(self._wrap(theta))

    def eta_at(self, theta):
        return self._eta(self._wrap(theta))


def _shoot_from(cfg, E, th0, rho0, th1, dense=False):
    """τ-shot from (θ₀, ρ₀) towards θ₁; returns (θ reached, ρ there, solver result, hit flag)."""
    try:
        sol = _tau_shot(cfg, E, th0, rho0, th1, dense=dense)
        return float(sol.y_events[0][0][0]), float(sol.y_events[0][0][2]), sol, False
    except BoundaryHit as e:
        return e.theta, e.rho, None, True


def _touch_expansion(cfg, rec, x):
    """ρ at θ₀ + x on the branch leaving (x > 0) or entering (x < 0) the saddle."""
    lam = rec.lambda_pair[0].real if x > 0 else rec.lambda_pair[1].real
    w0 = rec.rho
    c = -lam * lam / w0
    wx = math.sqrt(2.0 * (rec.energy - float(cfg.V(rec.theta + x))))
    return wx + 0.5 * c * x * x


def _upper_saddles(cfg, E):
    return [r for r in locate(cfg, E) if r.cls == SADDLE_PLUS]


def _cycle_predicate(cfg, E, theta0, delta):
    """+1 if the unstable branch from the saddle near θ₀ overshoots within one revolution, else −1."""
    recs = _upper_saddles(cfg, E)
    if not recs:
        return None, None
    rec = min(recs, key=lambda r: abs((r.theta - theta0 + math.pi) % TWO_PI - math.pi))
    _, rho_end, _, hit = _shoot_from(cfg, E, rec.theta + delta, _touch_expansion(cfg, rec, delta),
                                     rec.theta + TWO_PI - delta)
    if hit:
        return 1, rec
    return (1 if rho_end > _touch_expansion(cfg, rec, -delta) else -1), rec


def singular_cycle(cfg: FieldConfig, side: str = "upper", E_hint: Optional[float] = None,
                   win: Optional[SpiralWindow] = None, bracket: Tuple[float, float] = (0.05, 20.0),
                   delta: float = 1e-3) -> Optional[SingularCycle]:
    """The singular cycle bounding the spiral window from above.

    The energy is bracketed around the window's upper end (or ``E_hint``)
    and bisected on whether the unstable branch leaving the touch saddle
    overshoots the stable branch entering it one revolution later.  The
    lower cycle is the image of the upper cycle of the reflected field.
    Returns None when the window is unbounded or no overshoot change is
    found.
    """
    if side == "lower":
        up = singular_cycle(cfg.reflect(), "upper", E_hint, None, bracket, delta)
        if up is None:
            return None
        th = TWO_PI - up.theta_grid[::-1]
        rho = -up.rho_values[::-1]
        eta = up.eta_values[::-1]
        touches = sorted((TWO_PI - t) % TWO_PI for t in up.touch_set)
        return SingularCycle(up.E, th, rho, eta, "lower", touches, up.kappa_at_touch, up.expansion_check)
    if E_hint is None:
        if win is None:
            try:
                win = window(cfg, bracket)
            except EmptyWindow:
                return None
        if math.isinf(win.E_e):
            return None
        E_hint = win.E_e
        ref = win.branch[-1] if win.branch else None
        near = _exists(cfg, E_hint - 1e-6 * max(1.0, E_hint), OUTGOING, ref.a if ref else None) or ref
        if near is None:
            return None
        theta0 = float(near.theta_grid[int(np.argmin(near.eta_values))])
    else:
        recs = _upper_saddles(cfg, E_hint)
        if not recs:
            return None
        theta0 = recs[0].theta
    span = 1e-2 * max(1.0, E_hint)
    lo, hi = E_hint - span, E_hint + span
    plo, _ = _cycle_predicate(cfg, lo, theta0, delta)
    phi_, _ = _cycle_predicate(cfg, hi, theta0, delta)
    if plo is None or phi_ is None or plo == phi_:
        return None
    while hi - lo > 1e-13 * max(1.0, hi):
        m = 0.5 * (lo + hi)
        p, _ = _cycle_predicate(cfg, m, theta0, delta)
        if p == plo:
            lo = m
        else:
            hi = m
    E = 0.5 * (lo + hi)
    # the non-overshooting side gives an orbit that stays inside the shell
    E_s = lo if plo < 0 else hi
    _, rec = _cycle_predicate(cfg, E_s, theta0, delta)
    th_end, _, sol, hit = _shoot_from(cfg, E_s, rec.theta + delta, _touch_expansion(cfg, rec, delta),
                                      rec.theta + TWO_PI - delta, dense=True)
    if hit:
        return None
    grid = np.linspace(0.0, TWO_PI, N_GRID)
    th_abs = rec.theta + grid
    inner = (grid > delta) & (grid < TWO_PI - delta)
    rho = np.empty_like(grid)
    rho[inner] = _sample_on_theta(sol, th_abs[inner])[2]
    for i in np.flatnonzero(~inner):
        x = grid[i] if grid[i] <= delta else grid[i] - TWO_PI
        rho[i] = _touch_expansion(cfg, rec, x) if x != 0.0 else rec.rho
    om2 = 2.0 * (E_s - cfg.V(th_abs))
    rho = np.minimum(rho, np.sqrt(om2))
    eta = np.sqrt(np.maximum(om2 - rho**2, 0.0))
    # rotate to the canonical [0, 2π] grid
    thm = np.mod(th_abs[:-1], TWO_PI)
    order = np.argsort(thm)
    th_c = np.append(thm[order], TWO_PI + thm[order][0])
    rho_c = np.append(rho[:-1][order], rho[:-1][order][0])
    eta_c = np.append(eta[:-1][order], eta[:-1][order][0])
    # touch set: saddles of the upper family where the cycle comes within the graze threshold
    recs = _upper_saddles(cfg, E_s)
    touch_set, kappas = [], []
    for r in recs:
        dist = float(np.min(np.abs(sol_rho_gap(cfg, E_s, th_c, rho_c, r.theta))))
        if dist < 1e-3 * max(1.0, r.rho) or r is rec or abs(r.theta - rec.theta) < 1e-9:
            touch_set.append(r.theta % TWO_PI)
            kappas.append(r.kappa)

    def rho_fn(t):
        return float(_sample_on_theta(sol, np.array([t]))[2][0])

    check = expansion_coefficients(cfg, E_s, rec, rho_fn, th_end)
    check["energy_bracket"] = [lo, hi]
    return SingularCycle(E, th_c, rho_c, eta_c, "upper", touch_set, kappas, check)


def sol_rho_gap(cfg, E, th, rho, theta0):
    """η of the sampled cycle at the grid point nearest θ₀."""
    i = int(np.argmin(np.abs((th - theta0 + math.pi) % TWO_PI - math.pi)))
    return np.array([math.sqrt(max(2.0 * (E - float(cfg.V(th[i]))) - rho[i] ** 2, 0.0))])


def _cluster(xs, tol=1e-2):
    xs = sorted(xs)
    out = []
    for x in xs:
        if not out or min(abs(x - out[-1]), TWO_PI - abs(x - out[-1])) > tol:
            out.append(x)
    if len(out) > 1 and TWO_PI - (out[-1] - out[0]) < tol:
        out.pop()
    return out


def expansion_coefficients(cfg, E, rec, rho_fn, t_end, xs=None) -> dict:
    """Fitted vs predicted (θ−θ₀)² coefficients of σ = ρ − √(2(E−V)) on both sides.

    Prediction: σ''(θ₀) = −λ²/ω₀ with λ the unstable exponent on the right
    and the stable exponent on the left.
    """
    if xs is None:
        xs = np.linspace(2e-3, 2e-2, 10)
    w0 = rec.rho
    pred_r = -rec.lambda_pair[0].real ** 2 / w0
    pred_l = -rec.lambda_pair[1].real ** 2 / w0
    sig_r = np.array([rho_fn(rec.theta + x) - math.sqrt(2 * (E - float(cfg.V(rec.theta + x)))) for x in xs])
    # left branch: integrate backward from the left expansion is unstable; use the stored forward solution
    xl = -xs
    sig_l = []
    for x in xl:
        t = rec.theta + TWO_PI + x
        if t > t_end:
            sig_l.append(math.nan)
        else:
            sig_l.append(rho_fn(t) - math.sqrt(2 * (E - float(cfg.V(t)))))
    sig_l = np.array(sig_l)
    fit_r = np.polyfit(xs, sig_r, 3)[1] * 2.0
    ok = np.isfinite(sig_l)
    fit_l = np.polyfit(xl[ok], sig_l[ok], 3)[1] * 2.0 if ok.sum() >= 5 else math.nan
    return {"right_fit": float(fit_r), "right_pred": pred_r, "left_fit": float(fit_l), "left_pred": pred_l}


def quadratic_coefficients_v0(bprime: float, E: float) -> Tuple[float, float]:
    """Closed-form right/left (θ−θ₀)² coefficients for V = 0 (twice the bracket factor)."""
    s = math.sqrt(2.0 * E)
    root = math.sqrt(1.0 - 4.0 * bprime / s)
    return bprime + 0.5 * s * (-1.0 + root), bprime - 0.5 * s * (1.0 + root)


# -- critical energy -------------------------------------------------------------------

@dataclass
class CriticalData:
    E: float
    E_crt: float
    T_crt: List[float]
    eps1: float
    eps1_alt: float
    kappa: float
    neighborhood_max: float

    def to_json(self) -> dict:
        return {"E": self.E, "E_crt": self.E_crt, "T_crt": self.T_crt, "eps1": self.eps1,
                "eps1_alt": self.eps1_alt, "kappa": self.kappa, "neighborhood_max": self.neighborhood_max}


def critical_energy(cfg: FieldConfig, E: float, win: Optional[SpiralWindow] = None,
                    step: float = 0.25, tol: float = 1e-11) -> CriticalData:
    """Smallest E' > E at which ρ_{E'} touches √(2(E − V)).

    Raises
    ------
    NoTouch
        If the branch ends before touching.
    """
    th = np.linspace(0.0, TWO_PI, 4096, endpoint=False)
    wE = np.sqrt(2.0 * (E - cfg.V(th)))
    cache = {}

    def D(Ep, seed=None):
        s = _exists(cfg, Ep, OUTGOING, seed if seed is not None else seed0[0])
        if s is None:
            raise NoTouch(f"no spiral at E'={Ep}")
        cache[Ep] = s
        return float(np.max(s.rho_at(th) - wE)), s

    seed0 = [None]
    d0, s0 = D(E)
    seed0[0] = s0.a
    if d0 >= 0:
        raise ValueError("E is not strictly inside the spiral window")
    lo, hi = E, E + step
    seed = s0.a
    while True:
        if win is not None and hi >= win.E_e:
            hi = 0.5 * (lo + win.E_e)
        d, s = D(hi, seed)
        if d > 0:
            break
        lo, seed = hi, s.a
        hi = lo + step
        step *= 1.5
        if hi > 1e6:
            raise NoTouch("no touch below 1e6")
    E_crt = brentq(lambda x: D(x, seed)[0], lo, hi, xtol=tol, rtol=1e-15)
    _, sol = D(E_crt)
    diff = sol.rho_at(th) - wE
    i = int(np.argmax(diff))
    from scipy.optimize import minimize_scalar

    r = minimize_scalar(lambda t: -(float(sol.rho_at(t)) - math.sqrt(2 * (E - float(cfg.V(t))))),
                        bounds=(th[i] - 0.01, th[i] + 0.01), method="bounded", options={"xatol": 1e-12})
    T = _cluster([float(r.x % TWO_PI)] + [float(th[j]) for j in np.flatnonzero(diff > diff[i] - 1e-7)], 0.05)
    eps1 = min(float(sol.eta_at(t)) for t in T)
    eps1_alt = -max(float(cfg.b(t)) + float(cfg.V(t, 1)) / float(sol.rho_at(t)) for t in T)
    kappa = 0.5
    while True:
        mask = sol.rho_at(th) > wE - kappa
        lhs = cfg.b(th) + cfg.V(th, 1) / wE
        m = float(np.max(lhs[mask])) if mask.any() else -math.inf
        if m <= -eps1 / 2 or kappa < 1e-8:
            break
        kappa *= 0.5
    return CriticalData(E, float(E_crt), T, eps1, eps1_alt, kappa, m)
