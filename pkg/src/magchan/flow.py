"""Reduced flow in logarithmic time and orbit classification.

With τ = ∫ r⁻¹ dt the equations of motion close on (θ, η, ρ):

    θ' = η,   η' = −(η + b)ρ − V',   ρ' = (η + b)η,

and log r = ∫ ρ dτ, t = ∫ r dτ are carried along as quadratures.  The
energy ½(ρ² + η²) + V(θ) is conserved; the integrator restores it after
every accepted step by a radial rescaling of (η, ρ).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NonPositiveEpsilon, StepFailure
from .fixedpoints import FixedPointRecord, locate
from .periodic import TWO_PI, FieldConfig, antiderivative, find_roots

LOG_R_CAP = 700.0


@dataclass(frozen=True)
class ReducedState:
    theta: float
    eta: float
    rho: float

    def energy(self, cfg: FieldConfig) -> float:
        return 0.5 * (self.rho**2 + self.eta**2) + float(cfg.V(self.theta))

    def as_tuple(self):
        return (self.theta, self.eta, self.rho)


def shell_state(cfg: FieldConfig, E: float, theta: float, psi: float) -> ReducedState:
    """The point (η, ρ) = ω(cos ψ, sin ψ) on the energy shell above θ."""
    w = math.sqrt(2.0 * (E - float(cfg.V(theta))))
    return ReducedState(theta, w * math.cos(psi), w * math.sin(psi))


class FastField:
    """b(θ), V'(θ) evaluation tuned for scalar calls inside the stepper."""

    def __init__(self, cfg: FieldConfig):
        self.cfg = cfg
        bf, vf = cfg.b, cfg.V
        n = max(bf.n_modes, vf.n_modes)
        self.n = n
        self.b0 = bf.constant_term
        ab = np.zeros(n)
        sb = np.zeros(n)
        av = np.zeros(n)
        sv = np.zeros(n)
        ab[: bf.n_modes] = bf._a
        sb[: bf.n_modes] = bf._s
        av[: vf.n_modes] = vf._a
        sv[: vf.n_modes] = vf._s
        k = np.arange(1, n + 1, dtype=float)
        # V' = Σ k(s cos kθ − a sin kθ)
        self.coef = [(float(k[i]), float(ab[i]), float(sb[i]), float(k[i] * sv[i]), float(-k[i] * av[i]))
                     for i in range(n)]
        self.k = k
        self.cb, self.sb = ab, sb
        self.cv, self.sv = k * sv, -k * av
        self.V = vf
        self.small = n <= 8

    def bv(self, th: float) -> Tuple[float, float]:
        if self.small:
            b = self.b0
            dv = 0.0
            if self.n:
                c1, s1 = math.cos(th), math.sin(th)
                c, s = c1, s1
                for (_, ab, sb, cv, sv) in self.coef:
                    b += ab * c + sb * s
                    dv += cv * c + sv * s
                    c, s = c * c1 - s * s1, s * c1 + c * s1
            return b, dv
        kt = self.k * th
        c = np.cos(kt)
        s = np.sin(kt)
        return self.b0 + float(c @ self.cb + s @ self.sb), float(c @ self.cv + s @ self.sv)

    def V_at(self, th: float) -> float:
        return float(self.V(th))

    def b_dv_v(self, th: float) -> Tuple[float, float, float]:
        b, dv = self.bv(th)
        return b, dv, float(self.V(th))


def vector_field(s, cfg: FieldConfig) -> Tuple[float, float, float]:
    """(θ', η', ρ') at the state s = (θ, η, ρ)."""
    th, eta, rho = (s.theta, s.eta, s.rho) if isinstance(s, ReducedState) else s
    b = float(cfg.b(th))
    dV = float(cfg.V(th, 1))
    return (eta, -(eta + b) * rho - dV, (eta + b) * eta)


@dataclass
class OrbitSample:
    """Accepted-step nodes of an integrated orbit."""

    tau: np.ndarray
    theta: np.ndarray
    eta: np.ndarray
    rho: np.ndarray
    log_r: np.ndarray
    t_phys: np.ndarray
    energy: float

    @property
    def states(self) -> List[ReducedState]:
        return [ReducedState(a, b, c) for a, b, c in zip(self.theta, self.eta, self.rho)]

    def energy_drift(self, cfg: FieldConfig) -> float:
        h = 0.5 * (self.rho**2 + self.eta**2) + cfg.V(self.theta)
        return float(np.max(np.abs(h - self.energy)))

    def final(self) -> ReducedState:
        return ReducedState(float(self.theta[-1]), float(self.eta[-1]), float(self.rho[-1]))

    def csv_rows(self):
        return zip(self.tau, self.theta, self.eta, self.rho, self.log_r, self.t_phys)


ORBIT_COLUMNS = ["tau", "theta", "eta", "rho", "log_r", "t_phys"]

# Dormand–Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)


class ReducedIntegrator:
    """Adaptive Dormand–Prince stepping of the reduced flow with shell projection.

    The state vector is (θ, η, ρ, log r, t); all five components enter the
    error norm, so t is resolved to relative accuracy.
    """

    def __init__(self, cfg: FieldConfig, tol: float = 1e-10, h0: float = 1e-2, h_min: float = 1e-12,
                 h_max: float = 0.5, project: bool = True):
        self.cfg = cfg
        self.ff = FastField(cfg)
        self.tol = tol
        self.h0 = h0
        self.h_min = h_min
        self.h_max = h_max
        self.project = project

    def rhs(self, y):
        th, eta, rho, lr, _ = y
        b, dv = self.ff.bv(th)
        eb = eta + b
        return (eta, -eb * rho - dv, eb * eta, rho, math.exp(lr if lr < LOG_R_CAP else LOG_R_CAP))

    def _project(self, y, E):
        th, eta, rho = y[0], y[1], y[2]
        s = 2.0 * (E - self.ff.V_at(th))
        if s <= 0.0:
            return (th, 0.0, 0.0, y[3], y[4])
        n2 = eta * eta + rho * rho
        if n2 == 0.0:
            return y
        f = math.sqrt(s / n2)
        return (th, eta * f, rho * f, y[3], y[4])

    def run(self, s0: ReducedState, tau_span: Tuple[float, float], E: Optional[float] = None,
            log_r0: float = 0.0, t0: float = 0.0, callback: Optional[Callable] = None,
            store: bool = True) -> OrbitSample:
        """Integrate from ``tau_span[0]`` to ``tau_span[1]`` (either direction).

        ``callback(tau, y)`` is called after each accepted step; a truthy
        return value stops the integration.
        """
        cfg = self.cfg
        if E is None:
            E = s0.energy(cfg)
        tau, tau_end = float(tau_span[0]), float(tau_span[1])
        direction = 1.0 if tau_end >= tau else -1.0
        y = (float(s0.theta), float(s0.eta), float(s0.rho), float(log_r0), float(t0))
        if self.project:
            y = self._project(y, E)
        T, Y = [tau], [y]
        h = direction * min(self.h0, abs(tau_end - tau)) if tau_end != tau else 0.0
        tol = self.tol
        k1 = self.rhs(y)
        while direction * (tau_end - tau) > 1e-15 * max(1.0, abs(tau)):
            if abs(h) < self.h_min:
                raise StepFailure("step size underflow", ReducedState(*y[:3]), tau)
            if direction * (tau + h - tau_end) > 0:
                h = tau_end - tau
            ks = [k1]
            for i in range(1, 7):
                a = _A[i]
                yi = tuple(y[j] + h * sum(a[m] * ks[m][j] for m in range(i)) for j in range(5))
                ks.append(self.rhs(yi))
            y_new = yi  # stage 7 argument is the 5th-order solution
            err = 0.0
            for j in range(5):
                ej = h * sum(_E[m] * ks[m][j] for m in range(7))
                sc = tol + tol * max(abs(y[j]), abs(y_new[j])) if j != 0 else tol + tol * 10.0
                err += (ej / sc) ** 2
            err = math.sqrt(err / 5.0)
            if not math.isfinite(err):
                h *= 0.25
                continue
            if err <= 1.0:
                tau = tau + h
                if self.project:
                    y_new = self._project(y_new, E)
                y = y_new
                k1 = ks[6]
                if store:
                    T.append(tau)
                    Y.append(y)
                fac = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
                h = direction * min(abs(h) * fac, self.h_max)
                if callback is not None and callback(tau, y):
                    break
            else:
                h *= max(0.2, 0.9 * err ** -0.2)
        if not store:
            T, Y = [T[0], tau], [Y[0], y]
        arr = np.array(Y)
        return OrbitSample(np.array(T), arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], float(E))


def integrate(cfg: FieldConfig, s0: ReducedState, tau_span: Tuple[float, float], tol: float = 1e-10,
              **kwargs) -> OrbitSample:
    """Adaptive integration of the reduced flow with per-step energy projection."""
    return ReducedIntegrator(cfg, tol).run(s0, tau_span, **kwargs)


# -- observables -------------------------------------------------------------------

@dataclass(frozen=True)
class Observables:
    a1: float
    a2: float
    y: Tuple[float, float]
    q: float


def observables(s: ReducedState, cfg: FieldConfig, C: float) -> Observables:
    """a₁ = ρ − b̃(θ), y = (bρ + V', η), q = |y|², a₂ = C a₁ − 2y₁y₂."""
    bt = antiderivative(cfg.b)
    b = float(cfg.b(s.theta))
    y1 = b * s.rho + float(cfg.V(s.theta, 1))
    y2 = s.eta
    a1 = s.rho - float(bt(s.theta))
    return Observables(a1, C * a1 - 2.0 * y1 * y2, (y1, y2), y1 * y1 + y2 * y2)


def a1_along(orbit: OrbitSample, cfg: FieldConfig) -> np.ndarray:
    return orbit.rho - antiderivative(cfg.b)(orbit.theta)


def _shell_grid(cfg, E, n_theta=256, n_psi=256):
    th = np.linspace(0.0, TWO_PI, n_theta, endpoint=False)[:, None]
    psi = np.linspace(0.0, TWO_PI, n_psi, endpoint=False)[None, :]
    w = np.sqrt(2.0 * (E - cfg.V(th)))
    return th, w * np.cos(psi), w * np.sin(psi)


def eta2_coefficient(cfg: FieldConfig, th, eta, rho):
    """K with (a₂ − C a₁)' ≥ q − K η²: K = 1 + ρ² + 2(b'ρ + V'' + b² + bη)."""
    b = cfg.b(th)
    return 1.0 + rho**2 + 2.0 * (cfg.b(th, 1) * rho + cfg.V(th, 2) + b * b + b * eta)


def a2_derivative(cfg: FieldConfig, C: float, th, eta, rho):
    """Exact d/dτ a₂ = Cη² + 2y₁² + 2ηρy₁ − 2η²(b'ρ + bη + b² + V'')."""
    b = cfg.b(th)
    y1 = b * rho + cfg.V(th, 1)
    M = cfg.b(th, 1) * rho + b * eta + b * b + cfg.V(th, 2)
    return C * eta**2 + 2.0 * y1**2 + 2.0 * eta * rho * y1 - 2.0 * eta**2 * M


def a2_constant(cfg: FieldConfig, E: float, n: int = 256) -> float:
    """C = 2·max_shell |K| + 2, which gives d/dτ a₂ ≥ q on the shell."""
    th, eta, rho = _shell_grid(cfg, E, n, n)
    return 2.0 * float(np.max(np.abs(eta2_coefficient(cfg, th, eta, rho)))) + 2.0


@dataclass
class HighEnergyBound:
    E_star: float
    energies: np.ndarray
    epsilon: np.ndarray
    C: np.ndarray
    sup_bracket: float
    vacuous: bool


def bracket_sup(cfg: FieldConfig, n: int = 4096) -> float:
    """sup over angle pairs with |θ₂ − θ₁| ≤ 2π of |∫_{θ₁}^{θ₂} b|."""
    bt = antiderivative(cfg.b)
    th = np.linspace(0.0, 2 * TWO_PI, 2 * n + 1)
    v = bt(th)
    best = 0.0
    for i in range(0, n + 1, 1):
        seg = v[i : i + n + 1]
        best = max(best, float(np.max(seg) - v[i]), float(v[i] - np.min(seg)))
    return best


def high_energy_threshold(cfg: FieldConfig, E_grid: Sequence[float], n: int = 192) -> HighEnergyBound:
    """Smallest grid energy satisfying E > (1/8)((1 − ε/C)·sup[b̃])².

    ε(E) is the shell minimum of d/dτ a₂ / ((η² + b²)/2) with the module's
    C(E); the condition is vacuous when b has no zeros.
    """
    if not (cfg.V.is_constant and cfg.V.constant_term == 0.0):
        raise ValueError("high_energy_threshold requires V = 0")
    E_grid = np.asarray(E_grid, dtype=float)
    zeros = cfg.b.zeros() if not cfg.b.is_constant else np.array([])
    if cfg.b.is_constant and cfg.b.constant_term != 0.0 or (not cfg.b.is_constant and zeros.size == 0):
        return HighEnergyBound(float(E_grid[0]), E_grid, np.full(E_grid.size, np.nan),
                               np.full(E_grid.size, np.nan), 0.0, True)
    sup_b = bracket_sup(cfg)
    eps = np.empty(E_grid.size)
    Cs = np.empty(E_grid.size)
    E_star = math.inf
    for i, E in enumerate(E_grid):
        C = a2_constant(cfg, E)
        th, eta, rho = _shell_grid(cfg, E, n, n)
        num = a2_derivative(cfg, C, th, eta, rho)
        den = 0.5 * (eta**2 + cfg.b(th) ** 2)
        mask = den > 1e-12
        e = float(np.min(num[mask] / den[mask]))
        if e <= 0.0:
            raise NonPositiveEpsilon(f"shell minimum {e} at E={E}")
        eps[i] = e
        Cs[i] = C
        CE = C / e
        if E > 0.125 * ((1.0 - 1.0 / CE) * sup_b) ** 2 and not math.isfinite(E_star):
            E_star = float(E)
    return HighEnergyBound(E_star, E_grid, eps, Cs, sup_b, False)


# -- global conditions along sampled orbits ----------------------------------------

def no_large_oscillation_margin(orbit: OrbitSample, cfg: FieldConfig) -> float:
    """inf over τ₂ > τ₁ of A(τ₂) + B(τ₁), A = ω + ρ, B = ω − ρ."""
    w = np.sqrt(np.maximum(2.0 * (orbit.energy - cfg.V(orbit.theta)), 0.0))
    A = w + orbit.rho
    B = w - orbit.rho
    if A.size < 2:
        return math.inf
    suffix = np.minimum.accumulate(A[::-1])[::-1]  # min_{j ≥ i} A_j
    return float(np.min(B[:-1] + suffix[1:]))


condition_13_1 = no_large_oscillation_margin


def mourre_check(orbit: OrbitSample, cfg: FieldConfig, spiral) -> float:
    """min along the orbit of d/dt[r(ρ − ρ_{E'}(θ))] = ρB + (η − η_{E'})η."""
    rho_s = spiral.rho_at(orbit.theta)
    eta_s = spiral.eta_at(orbit.theta)
    B = orbit.rho - rho_s
    return float(np.min(orbit.rho * B + (orbit.eta - eta_s) * orbit.eta))


# -- classification ------------------------------------------------------------------

FIXED_POINT = "FixedPoint"
REGULAR_SPIRAL = "RegularSpiral"
SINGULAR_CYCLE = "SingularCycle"
FULL_OSCILLATION = "FullOscillation"
COLLAPSING = "Collapsing"
UNDETERMINED = "Undetermined"


@dataclass
class Controls:
    tau_max: float = 500.0
    tol: float = 1e-10
    tol_fp: float = 1e-10
    fp_window: float = 2.0
    fp_match: float = 1e-3
    tol_sp: float = 1e-6
    tol_sc: float = 1e-4
    collapse_log_r: float = -30.0
    min_alternations: int = 3


@dataclass
class ChannelOutcome:
    variant: str
    record: Optional[FixedPointRecord] = None
    sense: Optional[int] = None
    energy: Optional[float] = None
    side: Optional[str] = None
    budget: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"variant": self.variant, "diagnostics": self.diagnostics}
        if self.record is not None:
            out["record"] = self.record.to_json()
        if self.sense is not None:
            out["sense"] = "+" if self.sense > 0 else "-"
        if self.energy is not None:
            out["energy"] = self.energy
        if self.side is not None:
            out["side"] = self.side
        if self.budget is not None:
            out["budget"] = self.budget
        return out


class _Tracker:
    """Per-step bookkeeping for :func:`classify`."""

    def __init__(self, cfg, E, ctl, records, spiral, cycles):
        self.cfg, self.E, self.ctl = cfg, E, ctl
        self.ff = FastField(cfg)
        self.records = records
        self.spiral = spiral
        self.cycles = cycles or []
        self.q_since = None
        self.outcome = None
        self.events = []  # sign of ρ at η sign changes
        self.prev_eta = None
        self.rev_start = None
        self.rev_dev = 0.0
        self.rev_dev_c = [0.0] * len(self.cycles)
        self.last_dev = math.nan

    def __call__(self, tau, y):
        th, eta, rho, lr, _ = y
        ctl = self.ctl
        if lr < ctl.collapse_log_r:
            self.outcome = ChannelOutcome(COLLAPSING, diagnostics={"log_r": lr, "tau": tau})
            return True
        b, dv = self.ff.bv(th)
        y1 = b * rho + dv
        q = y1 * y1 + eta * eta
        if q < ctl.tol_fp:
            if self.q_since is None:
                self.q_since = tau
            elif tau - self.q_since >= ctl.fp_window:
                rec, dist = self._nearest(th, eta, rho)
                if rec is not None and dist < ctl.fp_match:
                    self.outcome = ChannelOutcome(FIXED_POINT, record=rec, energy=self.E,
                                                  diagnostics={"q": q, "distance": dist, "tau": tau})
                    return True
        else:
            self.q_since = None
        if self.prev_eta is not None and eta * self.prev_eta < 0.0:
            s = 1 if rho > 0 else -1
            if not self.events or self.events[-1] != s:
                self.events.append(s)
        self.prev_eta = eta
        if self.spiral is not None or self.cycles:
            if self.rev_start is None:
                self.rev_start = th
            if self.spiral is not None:
                d = abs(rho - self.spiral.rho_at(th)) + abs(eta - self.spiral.eta_at(th))
                self.rev_dev = max(self.rev_dev, d)
            for i, cyc in enumerate(self.cycles):
                d = abs(rho - cyc.rho_at(th)) + abs(eta - cyc.eta_at(th))
                self.rev_dev_c[i] = max(self.rev_dev_c[i], d)
            if abs(th - self.rev_start) >= TWO_PI:
                self.last_dev = self.rev_dev
                if self.spiral is not None and self.rev_dev < ctl.tol_sp and eta > 0:
                    self.outcome = ChannelOutcome(REGULAR_SPIRAL, sense=self.spiral.sense, energy=self.E,
                                                  diagnostics={"sup_deviation": self.rev_dev, "tau": tau,
                                                               "winding_count": th / TWO_PI})
                    return True
                for i, cyc in enumerate(self.cycles):
                    if self.rev_dev_c[i] < ctl.tol_sc:
                        self.outcome = ChannelOutcome(SINGULAR_CYCLE, side=cyc.side, energy=self.E,
                                                      diagnostics={"sup_deviation": self.rev_dev_c[i],
                                                                   "tau": tau})
                        return True
                self.rev_start = th
                self.rev_dev = 0.0
                self.rev_dev_c = [0.0] * len(self.cycles)
        return False

    def _nearest(self, th, eta, rho):
        best, dist = None, math.inf
        for r in self.records:
            dth = (th - r.theta + math.pi) % TWO_PI - math.pi
            d = math.sqrt(dth * dth + eta * eta + (rho - r.rho) ** 2)
            if d < dist:
                best, dist = r, d
        return best, dist


def classify(cfg: FieldConfig, E: float, s0: ReducedState, controls: Optional[Controls] = None,
             spiral=None, cycles=None, records: Optional[List[FixedPointRecord]] = None,
             find_spiral: bool = True) -> ChannelOutcome:
    """Asymptotic channel of the orbit through s0 as τ → +∞.

    Parameters
    ----------
    spiral : SpiralSolution, optional
        Outgoing periodic solution at E.  When omitted and the flux is
        nonzero, it is searched for once (``find_spiral``).
    cycles : list of SingularCycle, optional
        Stored singular cycles to track.
    records : list of FixedPointRecord, optional
        Precomputed fixed points at E (computed if omitted).
    """
    ctl = controls or Controls()
    e0 = s0.energy(cfg)
    if abs(e0 - E) > 1e-8 * (1.0 + abs(E)):
        raise ValueError(f"initial state has energy {e0}, expected {E}")
    if records is None:
        records = locate(cfg, E)
    if spiral is None and find_spiral and cfg.flux != 0.0:
        from .spiral import outgoing_spiral_or_none

        spiral = outgoing_spiral_or_none(cfg, E)
    tr = _Tracker(cfg, E, ctl, records, spiral, cycles)
    tr(0.0, (s0.theta, s0.eta, s0.rho, 0.0, 0.0))
    integ = ReducedIntegrator(cfg, ctl.tol)
    orbit = integ.run(s0, (0.0, ctl.tau_max), E=E, callback=tr, store=False)
    if tr.outcome is not None:
        tr.outcome.diagnostics.setdefault("energy_drift", abs(orbit.final().energy(cfg) - E))
        return tr.outcome
    ev = tr.events
    n_plus = sum(1 for s in ev if s > 0)
    n_minus = len(ev) - n_plus
    diag = {"tau": float(orbit.tau[-1]), "crossings_plus": n_plus, "crossings_minus": n_minus,
            "last_revolution_deviation": tr.last_dev, "log_r": float(orbit.log_r[-1])}
    if n_plus >= ctl.min_alternations and n_minus >= ctl.min_alternations:
        return ChannelOutcome(FULL_OSCILLATION, energy=E, diagnostics=diag)
    return ChannelOutcome(UNDETERMINED, budget=ctl.tau_max, energy=E, diagnostics=diag)


def random_shell_states(cfg: FieldConfig, E: float, n: int, rng: np.random.Generator) -> List[ReducedState]:
    """Uniform (θ, ψ) samples on the shell (E above max V assumed)."""
    out = []
    for _ in range(n):
        th = float(rng.uniform(0.0, TWO_PI))
        psi = float(rng.uniform(0.0, TWO_PI))
        out.append(shell_state(cfg, E, th, psi))
    return out
