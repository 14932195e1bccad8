"""Finite Fourier series on the circle.

The magnetic field ``b`` and the potential ``V`` (and the conformal factor
``f`` of the geometric model) are 2π-periodic and are represented exactly by
finitely many harmonics.  Derivatives, flux and antiderivative are then exact
up to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, minimize_scalar

MAX_ORDER = 4
TWO_PI = 2.0 * np.pi


def _as_tuple(values: Optional[Iterable[float]]) -> Tuple[float, ...]:
    if values is None:
        return ()
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class PeriodicFunction:
    """f(θ) = c0 + Σ_k (a_k cos kθ + s_k sin kθ), k ≥ 1.

    Parameters
    ----------
    constant_term : float
        The mean value c0.
    cosine_coeffs, sine_coeffs : sequence of float
        Coefficients of cos kθ and sin kθ for k = 1, 2, ...  The two lists
        may have different lengths; missing entries are zero.
    """

    constant_term: float = 0.0
    cosine_coeffs: Tuple[float, ...] = ()
    sine_coeffs: Tuple[float, ...] = ()
    _a: np.ndarray = field(init=False, repr=False, compare=False)
    _s: np.ndarray = field(init=False, repr=False, compare=False)
    _k: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cos_c = _as_tuple(self.cosine_coeffs)
        sin_c = _as_tuple(self.sine_coeffs)
        object.__setattr__(self, "constant_term", float(self.constant_term))
        object.__setattr__(self, "cosine_coeffs", cos_c)
        object.__setattr__(self, "sine_coeffs", sin_c)
        n = max(len(cos_c), len(sin_c))
        a = np.zeros(n)
        s = np.zeros(n)
        a[: len(cos_c)] = cos_c
        s[: len(sin_c)] = sin_c
        object.__setattr__(self, "_a", a)
        object.__setattr__(self, "_s", s)
        object.__setattr__(self, "_k", np.arange(1, n + 1, dtype=float))

    # -- construction -----------------------------------------------------

    @classmethod
    def constant(cls, c0: float) -> "PeriodicFunction":
        return cls(c0, (), ())

    @classmethod
    def from_json(cls, desc: dict) -> "PeriodicFunction":
        """Build from ``{"const": c0, "cos": [...], "sin": [...]}`` (all optional)."""
        return cls(float(desc.get("const", 0.0)), desc.get("cos", ()), desc.get("sin", ()))

    def to_json(self) -> dict:
        return {"const": self.constant_term, "cos": list(self.cosine_coeffs), "sin": list(self.sine_coeffs)}

    @classmethod
    def from_samples(cls, values: np.ndarray, modes: int) -> "PeriodicFunction":
        """Truncated Fourier series of equispaced samples on [0, 2π).

        ``values[j]`` is the function at 2πj/N.  Modes above ``modes`` are
        discarded.
        """
        values = np.asarray(values, dtype=float)
        n = values.size
        if modes >= n // 2:
            raise ValueError("need more samples than 2*modes")
        coef = np.fft.rfft(values) / n
        c0 = coef[0].real
        a = 2.0 * coef[1 : modes + 1].real
        s = -2.0 * coef[1 : modes + 1].imag
        return cls(c0, a, s)

    # -- basic properties -------------------------------------------------

    @property
    def n_modes(self) -> int:
        return int(self._k.size)

    @property
    def is_constant(self) -> bool:
        return not (np.any(self._a) or np.any(self._s))

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return PeriodicFunction(self.constant_term + other, self.cosine_coeffs, self.sine_coeffs)
        n = max(self.n_modes, other.n_modes)
        a = np.zeros(n)
        s = np.zeros(n)
        a[: self.n_modes] += self._a
        s[: self.n_modes] += self._s
        a[: other.n_modes] += other._a
        s[: other.n_modes] += other._s
        return PeriodicFunction(self.constant_term + other.constant_term, a, s)

    def scale(self, factor: float) -> "PeriodicFunction":
        return PeriodicFunction(factor * self.constant_term, factor * self._a, factor * self._s)

    def reflect(self) -> "PeriodicFunction":
        """θ ↦ f(−θ): cosine part unchanged, sine part negated."""
        return PeriodicFunction(self.constant_term, self._a, -self._s)

    # -- evaluation -------------------------------------------------------

    def __call__(self, theta, order: int = 0):
        return self.eval(theta, order)

    def eval(self, theta, order: int = 0):
        """Derivative of the given order at ``theta`` (scalar or array, real or complex).

        Orders above ``MAX_ORDER`` are rejected; use :meth:`taylor` for
        local jets of arbitrary order.
        """
        if order < 0 or order > MAX_ORDER:
            raise ValueError(f"derivative order must lie in [0, {MAX_ORDER}]")
        return self._eval_any(theta, order)

    def _eval_any(self, theta, order):
        th = np.asarray(theta)
        const = self.constant_term if order == 0 else 0.0
        if self.n_modes == 0:
            out = np.zeros_like(th, dtype=np.result_type(th, float)) + const
            return out if out.ndim else out[()]
        kt = np.multiply.outer(th, self._k)
        c = np.cos(kt)
        s = np.sin(kt)
        # d^m/dθ^m of (a cos kθ + s sin kθ) = k^m [a cos(kθ + mπ/2) + s sin(kθ + mπ/2)]
        m = order % 4
        if m == 0:
            cc, ss = c, s
        elif m == 1:
            cc, ss = -s, c
        elif m == 2:
            cc, ss = -c, -s
        else:
            cc, ss = s, -c
        w = self._k**order
        out = cc @ (w * self._a) + ss @ (w * self._s) + const
        return out if np.ndim(out) else out[()]

    def derivs(self, theta: float, max_order: int = 2) -> Tuple[float, ...]:
        """Scalar fast path: (f, f', ..., f^(max_order)) at a real angle."""
        if self.n_modes == 0:
            return (self.constant_term,) + (0.0,) * max_order
        kt = self._k * theta
        c = np.cos(kt)
        s = np.sin(kt)
        ca = c * self._a
        ss = s * self._s
        sa = s * self._a
        cs = c * self._s
        out = [self.constant_term + float(np.sum(ca + ss))]
        p0 = ca + ss  # cos-phase combination
        p1 = cs - sa  # first-derivative combination (without k)
        kp = self._k
        for m in range(1, max_order + 1):
            if m % 2 == 1:
                val = float(np.dot(kp, p1))
                if m % 4 == 3:
                    val = -val
            else:
                val = float(np.dot(kp, p0))
                if m % 4 == 2:
                    val = -val
            out.append(val)
            kp = kp * self._k
        return tuple(out)

    def taylor(self, theta0: float, n: int) -> np.ndarray:
        """Taylor coefficients f^(m)(θ0)/m! for m = 0..n."""
        out = np.empty(n + 1)
        for m in range(n + 1):
            out[m] = float(np.real(self._eval_any(theta0, m))) / math.factorial(m)
        return out

    # -- grid helpers -----------------------------------------------------

    def extremum(self, kind: str = "max", n_grid: int = 4096) -> Tuple[float, float]:
        """Global max or min as (value, angle), grid search plus Brent polish."""
        if self.is_constant:
            return self.constant_term, 0.0
        sgn = -1.0 if kind == "max" else 1.0
        th = np.linspace(0.0, TWO_PI, n_grid, endpoint=False)
        vals = sgn * self.eval(th)
        j = int(np.argmin(vals))
        h = TWO_PI / n_grid
        res = minimize_scalar(lambda x: sgn * float(self.eval(x)), bracket=(th[j] - h, th[j], th[j] + h),
                              tol=1e-14)
        x = float(res.x) % TWO_PI
        return sgn * float(res.fun), x

    def max(self) -> float:
        return self.extremum("max")[0]

    def min(self) -> float:
        return self.extremum("min")[0]

    def max_abs(self) -> float:
        return max(abs(self.max()), abs(self.min()))

    def zeros(self, n_grid: int = 2048) -> np.ndarray:
        """Simple zeros on [0, 2π), bracketed on a grid and polished."""
        return find_roots(lambda th: self.eval(th), n_grid)


def find_roots(func, n_grid: int = 2048, lo: float = 0.0, hi: float = TWO_PI, xtol: float = 1e-13) -> np.ndarray:
    """All sign changes of a vectorized periodic function on [lo, hi).

    The grid is closed periodically, so a root between the last node and
    ``hi`` is found as well.  Exact zeros at grid nodes are returned as is.
    """
    th = np.linspace(lo, hi, n_grid + 1)
    vals = np.asarray(func(th), dtype=float)
    roots = []
    for i in range(n_grid):
        a, b = vals[i], vals[i + 1]
        if not (np.isfinite(a) and np.isfinite(b)):
            continue
        if a == 0.0:
            roots.append(th[i])
        elif a * b < 0.0:
            roots.append(brentq(lambda x: float(func(x)), th[i], th[i + 1], xtol=xtol, rtol=1e-15, maxiter=200))
    return np.array(sorted(roots))


@dataclass(frozen=True)
class Antiderivative:
    """b̃(θ) = ∫₀^θ b = slope·θ + periodic_part(θ), with b̃(0) = 0."""

    slope: float
    periodic_part: PeriodicFunction
    base_point_value: float = 0.0

    def value(self, theta):
        return self.slope * np.asarray(theta) + self.periodic_part(theta) + self.base_point_value

    __call__ = value

    def oscillation(self, n_grid: int = 4096) -> float:
        """max − min of the periodic part over one period."""
        th = np.linspace(0.0, TWO_PI, n_grid, endpoint=False)
        v = self.value(th)
        return float(np.max(v) - np.min(v))


def flux(b: PeriodicFunction) -> float:
    """∫₀^{2π} b dθ."""
    return TWO_PI * b.constant_term


def antiderivative(b: PeriodicFunction) -> Antiderivative:
    k = b._k
    if k.size == 0:
        return Antiderivative(b.constant_term, PeriodicFunction())
    a = b._s / k * (-1.0)  # ∫ s sin kθ = −(s/k) cos kθ
    s = b._a / k  # ∫ a cos kθ = (a/k) sin kθ
    offset = -float(np.sum(a))  # make the periodic part vanish at 0
    return Antiderivative(b.constant_term, PeriodicFunction(offset, a, s))


def check_noncritical(V: PeriodicFunction, interval: Tuple[float, float], n_grid: int = 4096,
                      tol: float = 1e-8) -> Tuple[bool, float]:
    """Certify that V(θ) in the open ``interval`` forces |V'(θ)| ≥ 2ε₀.

    Returns (True, ε₀) with ε₀ the infimum of |V'|/2 over the level set
    (grid points plus the exact crossings of the interval endpoints), or
    (False, 0.0) when that infimum is below ``tol``.  If V never takes values
    in the interval the condition holds vacuously and ε₀ = +inf.
    """
    lo, hi = float(interval[0]), float(interval[1])
    if not lo < hi:
        raise ValueError("empty interval")
    if V.is_constant:
        return (False, 0.0) if lo <= V.constant_term <= hi else (True, math.inf)
    th = np.linspace(0.0, TWO_PI, n_grid, endpoint=False)
    v = V.eval(th)
    dv = np.abs(V.eval(th, 1))
    inside = (v > lo) & (v < hi)
    cands = list(dv[inside])
    # a critical value in the closed interval makes the infimum vanish
    for crit in find_roots(lambda x: V.eval(x, 1), n_grid):
        if lo - tol <= float(V.eval(crit)) <= hi + tol:
            return False, 0.0
    for level in (lo, hi):
        for x in find_roots(lambda x: V.eval(x) - level, n_grid):
            cands.append(abs(float(V.eval(x, 1))))
    if not cands:
        return True, math.inf
    eps0 = 0.5 * min(cands)
    if eps0 < tol:
        return False, 0.0
    return True, eps0


@dataclass(frozen=True)
class FieldConfig:
    """The pair (b, V) defining the model.

    ``truncation`` records the Fourier order used when the field was built
    from a non-Fourier profile (None for exact input).
    """

    b: PeriodicFunction
    V: PeriodicFunction = PeriodicFunction()
    label: str = ""
    truncation: Optional[int] = None

    @property
    def flux(self) -> float:
        return flux(self.b)

    def reflect(self) -> "FieldConfig":
        """(b(−θ), V(−θ)); pairs with ρ(θ) ↦ −ρ(−θ)."""
        return FieldConfig(self.b.reflect(), self.V.reflect(), self.label + "[reflected]", self.truncation)

    def with_b(self, b: PeriodicFunction, label: Optional[str] = None) -> "FieldConfig":
        return FieldConfig(b, self.V, self.label if label is None else label, self.truncation)

    def to_json(self) -> dict:
        out = {"b": self.b.to_json(), "V": self.V.to_json()}
        if self.label:
            out["label"] = self.label
        if self.truncation is not None:
            out["truncation"] = self.truncation
        return out

    @classmethod
    def from_json(cls, desc: dict) -> "FieldConfig":
        return cls(PeriodicFunction.from_json(desc.get("b", {})), PeriodicFunction.from_json(desc.get("V", {})),
                   desc.get("label", ""), desc.get("truncation"))


def smooth_bump(x: np.ndarray) -> np.ndarray:
    """C^∞ bump exp(1 − 1/(1 − x²)) on |x| < 1, peak value 1."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    m = np.abs(x) < 1.0
    out[m] = np.exp(1.0 - 1.0 / (1.0 - x[m] ** 2))
    return out


def bump_field(c: float = 1.0, width: float = 0.1, center: float = np.pi, modes: int = 64,
               n_samples: int = 1 << 14) -> FieldConfig:
    """b = −c away from a smooth bump of the given width where b rises to +c; V = 0.

    The profile −c + 2c·φ((θ − center)/(width/2)) with the C^∞ bump φ is
    sampled and truncated to ``modes`` harmonics.
    """
    th = np.arange(n_samples) * TWO_PI / n_samples
    d = (th - center + np.pi) % TWO_PI - np.pi
    prof = -c + 2.0 * c * smooth_bump(d / (0.5 * width))
    b = PeriodicFunction.from_samples(prof, modes)
    return FieldConfig(b, PeriodicFunction(), f"bump(c={c},width={width},modes={modes})", modes)
