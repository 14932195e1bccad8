"""Fixed points of the reduced flow on an energy shell.

At energy E the reduced system has equilibria with η = 0 and
ρ = ±ω(θ), ω = √(2(E − V)), at the zeros of

    g±(θ) = ±b(θ)ω(θ) + V'(θ).

The slope κ± = g±'(θ_j) fixes the on-shell linearization

    A = [[0, 1], [−κ, −ρ_j]],

whose eigenvalues λ, λ̃ solve λ² + ρ_j λ + κ = 0.  Dividing by ρ_j gives the
exponents β, β̃ with β + β̃ = −1 and ββ̃ = κ/ρ_j².
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from .errors import BranchCollision, DegenerateRoot, NotApplicable
from .periodic import TWO_PI, FieldConfig, check_noncritical, find_roots

TOL_KAPPA = 1e-8
TOL_LAMBDA = 1e-8

SINK = "SinkStable"
SADDLE_PLUS = "SaddlePlus"
SOURCE = "Source"
SADDLE_MINUS = "SaddleMinus"
CLASSES = (SINK, SADDLE_PLUS, SOURCE, SADDLE_MINUS)


@dataclass(frozen=True)
class FixedPointRecord:
    """One equilibrium (θ_j, η = 0, ρ_j) of the reduced flow at energy E."""

    theta: float
    sign: int
    rho: float
    kappa: float
    lam: complex
    lam_t: complex
    beta: complex
    beta_t: complex
    cls: str
    energy: float

    @property
    def lambda_pair(self) -> Tuple[complex, complex]:
        return self.lam, self.lam_t

    @property
    def is_saddle(self) -> bool:
        return self.cls in (SADDLE_PLUS, SADDLE_MINUS)

    @property
    def state(self) -> Tuple[float, float, float]:
        return (self.theta, 0.0, self.rho)

    def matrix(self) -> np.ndarray:
        """On-shell linearization in the (θ, η) coordinates."""
        return np.array([[0.0, 1.0], [-self.kappa, -self.rho]])

    def to_json(self) -> dict:
        return {
            "sign": "+" if self.sign > 0 else "-",
            "theta": self.theta,
            "rho": self.rho,
            "kappa": self.kappa,
            "lambda": [[self.lam.real, self.lam.imag], [self.lam_t.real, self.lam_t.imag]],
            "beta": [self.beta.real, self.beta.imag],
            "beta_tilde": [self.beta_t.real, self.beta_t.imag],
            "class": self.cls,
            "energy": self.energy,
        }

    def csv_row(self) -> list:
        return ["+" if self.sign > 0 else "-", self.theta, self.rho, self.kappa, self.lam.real, self.lam.imag,
                self.lam_t.real, self.lam_t.imag, self.beta.real, self.beta.imag, self.cls]


CSV_COLUMNS = ["sign", "theta", "rho", "kappa", "re_lambda1", "im_lambda1", "re_lambda2", "im_lambda2",
               "re_beta", "im_beta", "class"]


# -- building blocks ----------------------------------------------------------

def omega(cfg: FieldConfig, theta, E: float):
    """√(2(E − V(θ))), NaN outside the allowed region."""
    s = 2.0 * (E - cfg.V(theta))
    with np.errstate(invalid="ignore"):
        return np.sqrt(np.where(s >= 0.0, s, np.nan))


def defining_function(cfg: FieldConfig, E: float, sign: int):
    """θ ↦ sign·b(θ)ω(θ) + V'(θ) (vectorized)."""

    def g(theta):
        return sign * cfg.b(theta) * omega(cfg, theta, E) + cfg.V(theta, 1)

    return g


def kappa_at(cfg: FieldConfig, theta: float, E: float, sign: int) -> float:
    """Slope of the defining function: sign·(b'ω + bω') + V'', ω' = −V'/ω."""
    b, db = cfg.b.derivs(theta, 1)
    _, dV, d2V = cfg.V.derivs(theta, 2)
    w = math.sqrt(2.0 * (E - cfg.V(theta)))
    dw = -dV / w
    return sign * (db * w + b * dw) + d2V


def ordered_pair(z1: complex, z2: complex) -> Tuple[complex, complex]:
    """Larger real part first; ties broken by larger imaginary part."""
    if (z1.real, z1.imag) >= (z2.real, z2.imag):
        return z1, z2
    return z2, z1


def closed_form_eigenvalues(w: float, kappa: float, sign: int) -> Tuple[complex, complex]:
    """Roots of λ² + sign·w·λ + κ = 0 written as ∓w/2 ± ½√(w² − 4κ)."""
    disc = np.sqrt(complex(w * w - 4.0 * kappa))
    centre = -0.5 * sign * w
    return ordered_pair(complex(centre + 0.5 * disc), complex(centre - 0.5 * disc))


def classify_point(sign: int, kappa: float) -> str:
    if sign > 0:
        return SADDLE_PLUS if kappa < 0 else SINK
    return SADDLE_MINUS if kappa < 0 else SOURCE


def make_record(cfg: FieldConfig, theta: float, E: float, sign: int) -> FixedPointRecord:
    theta = float(theta) % TWO_PI
    w = math.sqrt(2.0 * (E - cfg.V(theta)))
    kap = kappa_at(cfg, theta, E, sign)
    lam, lam_t = closed_form_eigenvalues(w, kap, sign)
    rho = sign * w
    return FixedPointRecord(theta, sign, rho, kap, lam, lam_t, lam / rho, lam_t / rho,
                            classify_point(sign, kap), float(E))


def _energy_admissible(cfg: FieldConfig, E: float):
    vmin = cfg.V.min()
    if E <= vmin:
        raise ValueError(f"energy {E} not above min V = {vmin}")
    if not cfg.V.is_constant and E <= cfg.V.max():
        ok, _ = check_noncritical(cfg.V, (E - 1e-9, E + 1e-9))
        if not ok:
            raise ValueError(f"energy {E} is a critical value of V")


def locate(cfg: FieldConfig, E: float, n_grid: int = 2048, tol_kappa: float = TOL_KAPPA) -> List[FixedPointRecord]:
    """All fixed points at energy E, sorted by (sign + before −, θ).

    Raises
    ------
    DegenerateRoot
        If a root has |κ| < tol_kappa, or the defining function touches zero
        without changing sign.
    """
    _energy_admissible(cfg, E)
    out = []
    for sign in (1, -1):
        g = defining_function(cfg, E, sign)
        roots = find_roots(g, n_grid)
        for th in roots:
            th = _newton_polish(cfg, E, sign, th)
            rec = make_record(cfg, th, E, sign)
            if abs(rec.kappa) < tol_kappa:
                raise DegenerateRoot(f"|kappa| < {tol_kappa} at theta={rec.theta:.12g}", rec.theta, sign, rec.kappa)
            out.append(rec)
        _check_tangencies(g, n_grid, sign)
    out.sort(key=lambda r: (-r.sign, r.theta))
    return _dedupe(out)


def _dedupe(recs: List[FixedPointRecord]) -> List[FixedPointRecord]:
    out = []
    for r in recs:
        if out and out[-1].sign == r.sign and abs(out[-1].theta - r.theta) < 1e-9:
            continue
        out.append(r)
    if len(out) > 1 and out[-1].sign == out[0].sign and abs(out[-1].theta - TWO_PI - out[0].theta) < 1e-9:
        out.pop()
    return out


def _newton_polish(cfg, E, sign, th, iters=3):
    g = defining_function(cfg, E, sign)
    for _ in range(iters):
        val = float(g(th))
        if val == 0.0:
            break
        step = val / kappa_at(cfg, th, E, sign)
        if abs(step) > 1e-6:
            break
        th -= step
        if abs(step) < 1e-15:
            break
    return th


def _check_tangencies(g, n_grid, sign, rel=1e-10):
    """Raise on a zero of g without sign change (a double root)."""
    from scipy.optimize import minimize_scalar

    th = np.linspace(0.0, TWO_PI, n_grid, endpoint=False)
    gv = g(th)
    v = np.abs(gv)
    if not np.any(np.isfinite(v)):
        return
    scale = max(np.nanmax(v), 1.0)
    vl, vr = np.roll(v, 1), np.roll(v, -1)
    sl, sr = np.roll(np.sign(gv), 1), np.roll(np.sign(gv), -1)
    cand = np.where(np.isfinite(v) & (v <= vl) & (v <= vr) & (v < 1e-3 * scale)
                    & (sl == np.sign(gv)) & (sr == np.sign(gv)))[0]
    h = TWO_PI / n_grid
    for j in cand:
        res = minimize_scalar(lambda x: abs(float(g(x))), bounds=(th[j] - h, th[j] + h), method="bounded",
                              options={"xatol": 1e-14})
        if res.fun < rel * scale:
            raise DegenerateRoot(f"double root near theta={res.x:.12g}", float(res.x) % TWO_PI, sign, 0.0)


# -- numerical linearization (independent of the closed forms) ----------------

def shell_field_2d(cfg: FieldConfig, E: float, sign: int):
    """The reduced field restricted to one sheet of the shell, as (θ, η) ↦ (θ', η')."""

    def F(th, eta):
        s = 2.0 * (E - cfg.V(th)) - eta * eta
        rho = sign * np.sqrt(s)
        return np.array([eta, -(eta + cfg.b(th)) * rho - cfg.V(th, 1)])

    return F


def numeric_jacobian(cfg: FieldConfig, rec: FixedPointRecord, h: float = 1e-3) -> np.ndarray:
    """Fourth-order central differences of the on-shell field at the fixed point."""
    F = shell_field_2d(cfg, rec.energy, rec.sign)
    x0 = np.array([rec.theta, 0.0])
    J = np.empty((2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fp1, fm1 = F(*(x0 + e)), F(*(x0 - e))
        fp2, fm2 = F(*(x0 + 2 * e)), F(*(x0 - 2 * e))
        J[:, k] = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * h)
    return J


def numeric_eigenvalues(cfg: FieldConfig, rec: FixedPointRecord, h: float = 1e-3) -> Tuple[complex, complex]:
    ev = np.linalg.eigvals(numeric_jacobian(cfg, rec, h))
    return ordered_pair(complex(ev[0]), complex(ev[1]))


# -- regime thresholds ----------------------------------------------------------

def regime_thresholds(cfg: FieldConfig, rec: FixedPointRecord, tol: float = 1e-10) -> Tuple[float, float]:
    """(E_high, E_low) for a sink branch whose angle does not move with E.

    E_high is the infimum of energies with 0 < 4κ < ρ² and E_low the supremum
    of energies with ℜβ < −1/3.  With b(θ_j) = V'(θ_j) = 0 one has
    κ = b'ω + V'' and both conditions are quadratic in ω.
    """
    th = rec.theta
    b, db = cfg.b.derivs(th, 1)
    V0, dV, d2V = cfg.V.derivs(th, 2)
    if abs(b) > tol or abs(dV) > tol or rec.cls != SINK or db <= 0.0:
        raise NotApplicable("branch angle depends on E or branch is not a b'>0 sink")
    # 4(b'w + V'') < w²  <=>  w > 2b' + 2√(b'² + V'')
    disc_h = db * db + d2V
    disc_l = db * db + 8.0 * d2V / 9.0
    if disc_h < 0.0 or disc_l < 0.0:
        raise NotApplicable("thresholds are not given by a single algebraic root")
    w_high = 2.0 * db + 2.0 * math.sqrt(disc_h)
    if d2V < 0.0:
        w_high = max(w_high, -d2V / db)
    # Re β < −1/3 <=> (2/9)w² − b'w − V'' < 0 (or complex β)
    w_low = 2.25 * (db + math.sqrt(disc_l))
    E_high = V0 + 0.5 * w_high**2
    E_low = V0 + 0.5 * w_low**2
    assert E_high < E_low, "high-energy and small-beta regimes do not overlap"
    return E_high, E_low


def scan_regime_thresholds(cfg: FieldConfig, rec: FixedPointRecord, E_values: Sequence[float]) -> Tuple[float, float]:
    """Grid version of :func:`regime_thresholds` along a continued branch."""
    br = continue_branch(cfg, rec, E_values)
    high = (br.kappa > 0) & (4.0 * br.kappa < br.rho**2)
    low = br.beta.real < -1.0 / 3.0
    E_high = float(br.energy[high][0]) if np.any(high) else math.inf
    E_low = float(br.energy[low][-1]) if np.any(low) else -math.inf
    return E_high, E_low


# -- Liapunov form ----------------------------------------------------------------

@dataclass(frozen=True)
class LiapunovForm:
    """l(z̄) = |T⁻¹ z̄|² with T = [[1, 1], [λ, λ̃]], z̄ = (θ − θ_j, η)."""

    center: Tuple[float, float]
    T: np.ndarray
    well_defined: bool
    lam: Tuple[complex, complex] = (0j, 0j)

    def l(self, zbar) -> float:
        if not self.well_defined:
            raise ValueError("degenerate eigenvalues: quadratic form not defined")
        zeta = np.linalg.solve(self.T, np.asarray(zbar, dtype=complex))
        return float(np.sum(np.abs(zeta) ** 2))

    def dl_linear(self, zbar) -> float:
        """d/dτ l along the linearized flow z̄' = A z̄."""
        zeta = np.linalg.solve(self.T, np.asarray(zbar, dtype=complex))
        return float(2.0 * np.sum(np.array([self.lam[0].real, self.lam[1].real]) * np.abs(zeta) ** 2))


def liapunov(rec: FixedPointRecord, tol: float = TOL_LAMBDA) -> LiapunovForm:
    ok = abs(rec.lam - rec.lam_t) >= tol
    T = np.array([[1.0, 1.0], [rec.lam, rec.lam_t]], dtype=complex)
    return LiapunovForm((rec.theta, 0.0), T, bool(ok), (rec.lam, rec.lam_t))


# -- continuation ---------------------------------------------------------------

@dataclass
class Branch:
    """A fixed-point branch sampled on an energy grid."""

    energy: np.ndarray
    theta: np.ndarray
    rho: np.ndarray
    kappa: np.ndarray
    beta: np.ndarray
    beta_t: np.ndarray
    records: List[FixedPointRecord] = field(default_factory=list)

    def record_at(self, i: int) -> FixedPointRecord:
        return self.records[i]


def branch_slope(cfg: FieldConfig, rec: FixedPointRecord) -> float:
    """dθ_j/dE = −∂_E g / κ with ∂_E g = sign·b/ω."""
    w = abs(rec.rho)
    return -(rec.sign * cfg.b(rec.theta) / w) / rec.kappa


def track_root(cfg: FieldConfig, sign: int, theta0: float, E: float, kappa_ref: float,
               tol_kappa: float = 1e-6) -> float:
    """Root of the defining function at E near θ0 (Newton, bracketed fallback)."""
    g = defining_function(cfg, E, sign)
    th = theta0
    for _ in range(50):
        val = float(g(th))
        k = kappa_at(cfg, th, E, sign)
        if not np.isfinite(val) or abs(k) < tol_kappa or np.sign(k) != np.sign(kappa_ref):
            raise BranchCollision(f"kappa vanishes near E={E}", E)
        step = val / k
        th -= step
        if abs(step) < 1e-14:
            break
    else:
        raise BranchCollision(f"Newton failed near E={E}", E)
    if abs(th - theta0) > 0.5:
        raise BranchCollision(f"root jumped at E={E}", E)
    return th


def continue_branch(cfg: FieldConfig, rec: FixedPointRecord, E_values: Sequence[float],
                    max_step: float = 0.02, tol_kappa: float = 1e-6) -> Branch:
    """Follow θ_j(E) from ``rec`` over a monotone energy grid with warm starts.

    Raises BranchCollision when κ approaches 0 (two roots merging) on the way.
    """
    E_values = np.asarray(E_values, dtype=float)
    if np.any(np.diff(E_values) <= 0) and np.any(np.diff(E_values) >= 0):
        raise ValueError("energy grid must be monotone")
    th = rec.theta
    E_cur = rec.energy
    kref = rec.kappa
    recs = []
    for E in E_values:
        n_sub = max(1, int(math.ceil(abs(E - E_cur) / max_step)))
        E_prev = E_cur
        for Es in np.linspace(E_cur, E, n_sub + 1)[1:]:
            # Euler predictor from the implicit-function slope, then Newton
            th = th + branch_slope(cfg, make_record(cfg, th, E_prev, rec.sign)) * (Es - E_prev)
            th = track_root(cfg, rec.sign, th, Es, kref, tol_kappa)
            E_prev = Es
        E_cur = E
        r = make_record(cfg, th, E, rec.sign)
        if abs(r.kappa) < tol_kappa:
            raise BranchCollision(f"kappa vanishes near E={E}", E)
        recs.append(r)
    return Branch(E_values, np.array([r.theta for r in recs]), np.array([r.rho for r in recs]),
                  np.array([r.kappa for r in recs]), np.array([r.beta for r in recs]),
                  np.array([r.beta_t for r in recs]), recs)


# -- resonances -----------------------------------------------------------------

@dataclass(frozen=True)
class ResonanceReport:
    energy: float
    order: int
    relation: Tuple[int, int, str]


@dataclass
class ResonanceScan:
    reports: List[ResonanceReport]
    condition_certified: bool
    derivative_sign_changes: int
    m_max: int


def _relations(m_max: int):
    for m in range(2, m_max + 1):
        for m1 in range(m + 1):
            for target in ("beta", "beta_tilde"):
                yield m, m1, m - m1, target


def resonances(cfg: FieldConfig, rec: FixedPointRecord, E_interval: Tuple[float, float], m_max: int = 5,
               n_grid: int = 400) -> ResonanceScan:
    """Energies in the interval where β♮ = m₁β + m₂β̃ for some order 2 ≤ m ≤ m_max.

    Real relations are bracketed on the grid and polished with Brent's
    method; on complex stretches ℜβ = ℜβ̃ = −1/2 and no relation of order
    ≥ 2 can hold.  The scan also counts sign changes of d/dE(κ/ρ²) as a
    certificate that this derivative vanishes only at finitely many points.
    """
    lo, hi = E_interval
    grid = np.linspace(lo, hi, n_grid)
    br = _branch_through(cfg, rec, grid)

    def exps(E):
        i = int(np.argmin(np.abs(br.energy - E)))
        th = track_root(cfg, rec.sign, br.theta[i], E, br.kappa[i])
        r = make_record(cfg, th, E, rec.sign)
        return r.beta, r.beta_t

    reports = []
    real = np.abs(br.beta.imag) < 1e-14
    for m, m1, m2, target in _relations(m_max):
        tv = br.beta if target == "beta" else br.beta_t
        R = (tv - m1 * br.beta - m2 * br.beta_t).real
        for i in range(n_grid - 1):
            if not (real[i] and real[i + 1]):
                continue
            if R[i] == 0.0 or R[i] * R[i + 1] < 0.0:
                def resid(E, m1=m1, m2=m2, target=target):
                    b1, b2 = exps(E)
                    t = b1 if target == "beta" else b2
                    return float((t - m1 * b1 - m2 * b2).real)

                Er = grid[i] if R[i] == 0.0 else brentq(resid, grid[i], grid[i + 1], xtol=1e-13, rtol=1e-14)
                reports.append(ResonanceReport(float(Er), m, (m1, m2, target)))
    # certificate: d/dE (kappa / rho^2) vanishes at isolated points only
    ratio = br.kappa / br.rho**2
    d = np.gradient(ratio, grid)
    scale = np.max(np.abs(d)) if np.any(d) else 0.0
    flat = np.abs(d) <= 1e-12 * max(scale, 1e-300)
    flat_runs = np.any(flat[:-1] & flat[1:]) or scale == 0.0
    changes = int(np.sum(np.sign(d[:-1]) * np.sign(d[1:]) < 0))
    reports.sort(key=lambda r: (r.energy, r.order, r.relation))
    return ResonanceScan(reports, not flat_runs, changes, m_max)


def _branch_through(cfg, rec, grid):
    """Continue from rec to both ends of the grid and return samples on the grid."""
    E0 = rec.energy
    below = grid[grid < E0][::-1]
    above = grid[grid >= E0]
    parts = {}
    if above.size:
        b = continue_branch(cfg, rec, above)
        for j, E in enumerate(above):
            parts[E] = b.records[j]
    if below.size:
        b = continue_branch(cfg, rec, below)
        for j, E in enumerate(below):
            parts[E] = b.records[j]
    recs = [parts[E] for E in grid]
    return Branch(np.asarray(grid), np.array([r.theta for r in recs]), np.array([r.rho for r in recs]),
                  np.array([r.kappa for r in recs]), np.array([r.beta for r in recs]),
                  np.array([r.beta_t for r in recs]), recs)


def reflect_record(rec: FixedPointRecord) -> Tuple[float, int]:
    """Angle and sign of the partner point under θ ↦ −θ, ρ ↦ −ρ."""
    return (-rec.theta) % TWO_PI, -rec.sign
