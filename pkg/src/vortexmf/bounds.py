"""Osgood machinery, the convergence envelope, and the regularization schedule.

``M(x) = ln ln(1/x)`` is the Osgood integral of ``r ln(1/r)`` and
``M^{-1}(y) = exp(-e^y)``.  An inequality ``G(t) <= c + A int_0^t G ln(1/G)``
closes to ``G(t) <= M^{-1}(M(c) - A t) = c^{exp(-A t)}``; with
``c = F0 + A t (ln N)^2 / N`` this is the envelope.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import optimize

from .io import write_csv

FloatArray = NDArray[np.float64]

E_INV = float(np.exp(-1.0))


def osgood_M(x: ArrayLike) -> FloatArray:
    """``ln ln(1/x)`` on ``(0, 1/e]``."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0.0)) or np.any(x > E_INV * (1.0 + 1e-15)):
        raise ValueError("osgood_M is defined on (0, 1/e]")
    return np.log(-np.log(np.minimum(x, E_INV)))


def osgood_Minv(y: ArrayLike) -> FloatArray:
    """``exp(-e^y)`` on ``[0, inf)``."""
    y = np.asarray(y, dtype=float)
    if np.any(~(y >= 0.0)):
        raise ValueError("osgood_Minv is defined on [0, inf)")
    return np.exp(-np.exp(y))


def default_eps(N: int) -> float:
    return float(np.log(N) / N)


def regularizer(r: ArrayLike, eps: Optional[float] = None, N: Optional[int] = None) -> FloatArray:
    """``<r>_eps = (eps^2 + r^2)^{1/2}``; ``eps`` defaults to ``ln N / N``."""
    if eps is None:
        if N is None:
            raise ValueError("give eps or N")
        eps = default_eps(N)
    if not eps > 0.0:
        raise ValueError("eps must be positive")
    r = np.asarray(r, dtype=float)
    return np.hypot(eps, r)


def _check_N(N: int, xi_inf: float) -> None:
    if N < 3:
        raise ValueError("N must be at least 3")
    if default_eps(N) > min(E_INV, 1.0 / xi_inf if xi_inf > 0 else np.inf):
        raise ValueError(f"ln N / N = {default_eps(N):.3g} exceeds min(1/e, 1/||xi||_inf)")


def solve_eps2(eps3: float) -> float:
    """The root of ``r ln(1/r) = eps3^2`` in ``(0, 1/e)``."""
    target = eps3 * eps3
    if not 0.0 < target <= E_INV:
        raise ValueError("no root in (0, 1/e)")
    f = lambda r: r * -np.log(r) - target
    if f(E_INV) == 0.0:
        return E_INV
    lo = target / (1.0 + abs(np.log(target)))
    lo = min(lo, 0.5 * target)
    while f(lo) > 0.0:
        lo *= 0.5
    root = optimize.brentq(f, lo, E_INV, xtol=1e-300, rtol=1e-15, maxiter=500)
    return float(root)


def epsilon_schedule(G: float, N: int, xi_inf: float) -> tuple[float, float, float]:
    """``(eps1, eps2, eps3)`` with ``eps3 = min(G, 1/e, 1/||xi||_inf)``, ``eps2 ln(1/eps2) = eps3^2``, ``eps1 = eps2^2``."""
    if not G > 0.0:
        raise ValueError("G must be positive")
    _check_N(N, xi_inf)
    eps3 = min(G, E_INV, 1.0 / xi_inf if xi_inf > 0 else np.inf)
    eps2 = solve_eps2(eps3)
    return eps2 * eps2, eps2, eps3


@dataclass(frozen=True)
class EnvelopeParams:
    xi_inf: float
    sigma_grad: float
    C: float
    F0: float
    N: int
    t: float

    def __post_init__(self):
        for name in ("xi_inf", "sigma_grad", "C", "F0", "t"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if self.N < 2:
            raise ValueError("N must be at least 2")

    @property
    def rate(self) -> float:
        return self.C * (self.xi_inf + self.sigma_grad)

    def log_factor(self, form: str = "theorem") -> float:
        """``(ln N)^2`` for the published envelope, ``(ln(N / ln N))^2`` for the closure."""
        if form == "theorem":
            return float(np.log(self.N) ** 2)
        if form == "closure":
            return float(np.log(self.N / np.log(self.N)) ** 2)
        raise ValueError(f"unknown log form {form!r}")

    def base(self, form: str = "theorem") -> float:
        return self.F0 + self.rate * self.t * self.log_factor(form) / self.N

    def with_t(self, t: float) -> "EnvelopeParams":
        return EnvelopeParams(self.xi_inf, self.sigma_grad, self.C, self.F0, self.N, t)


def admissible(params: EnvelopeParams) -> bool:
    """Large-N condition and ``rate * t < ln ln(1 / base)``."""
    N = params.N
    if N < 3 or default_eps(N) > min(E_INV, 1.0 / params.xi_inf if params.xi_inf > 0 else np.inf):
        return False
    b = params.base()
    if b <= 0.0:
        return True
    if b >= 1.0:
        return False
    return bool(params.rate * params.t < np.log(-np.log(b)))


def envelope(params: EnvelopeParams, form: str = "theorem") -> float:
    """``base^{exp(-rate t)}``."""
    if not admissible(params):
        raise ValueError("envelope parameters are not admissible")
    b = params.base(form)
    return float(b ** np.exp(-params.rate * params.t))


def admissibility_threshold(params: EnvelopeParams, t_max: float, tol: float = 1e-12) -> Optional[float]:
    """First time in ``[0, t_max]`` at which the parameters stop being admissible."""
    if not admissible(params.with_t(0.0)):
        return 0.0
    if admissible(params.with_t(t_max)):
        return None
    lo, hi = 0.0, t_max
    while hi - lo > tol * max(1.0, t_max):
        mid = 0.5 * (lo + hi)
        if admissible(params.with_t(mid)):
            lo = mid
        else:
            hi = mid
    return hi


@dataclass(frozen=True, eq=False)
class MaximalSeries:
    """Running maximum of a sampled nonnegative series on a time grid."""

    t: FloatArray
    values: FloatArray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.shape != v.shape or t.ndim != 1 or t.size == 0:
            raise ValueError("t and values must be matching 1-d arrays")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("time grid must be increasing")
        if np.any(np.diff(v) < 0.0):
            raise ValueError("maximal series must be nondecreasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_samples(cls, t: ArrayLike, samples: ArrayLike, N: Optional[int] = None) -> "MaximalSeries":
        """``sup_{s <= t} <samples(s)>_{ln N/N}`` (raw running max when ``N`` is None)."""
        s = np.asarray(samples, dtype=float)
        if N is not None:
            s = regularizer(s, N=N)
        return cls(np.asarray(t, dtype=float), np.maximum.accumulate(s))


@dataclass
class ClosureResult:
    t: FloatArray
    integral_bound: FloatArray
    osgood_bound: FloatArray
    exit_time: Optional[float]


def osgood_closure(series: MaximalSeries, A: float, B: float) -> ClosureResult:
    """Evaluate ``G(0) + A int G ln(1/G) + B t`` by the trapezoid rule and its Osgood-closed bound.

    ``osgood_bound(t) = M^{-1}(M(G(0) + B t) - A t)``.  Entries after the
    series (or the constant ``G(0) + B t``) leaves ``(0, 1/e)`` are NaN and
    the first such time is reported as ``exit_time``.
    """
    if A < 0.0 or B < 0.0:
        raise ValueError("A and B must be nonnegative")
    t, G = series.t, series.values
    c = G[0] + B * (t - t[0])
    inside = (G > 0.0) & (G < E_INV) & (c < E_INV)
    exit_idx = np.argmin(inside) if not np.all(inside) else None
    ok = np.ones_like(inside) if exit_idx is None else np.arange(t.size) < exit_idx
    phi = np.where(ok, G * -np.log(np.where(ok, G, 0.5)), 0.0)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (phi[1:] + phi[:-1]) * np.diff(t))])
    integral_bound = np.where(ok, c + A * integral, np.nan)
    osg = np.full_like(t, np.nan)
    if np.any(ok):
        osg[ok] = c[ok] ** np.exp(-A * (t[ok] - t[0]))
    return ClosureResult(t, integral_bound, osg, None if exit_idx is None else float(t[exit_idx]))


def closure_from_params(series: MaximalSeries, params: EnvelopeParams, form: str = "closure") -> ClosureResult:
    """:func:`osgood_closure` with ``A = rate`` and ``B = rate * log_factor / N``."""
    A = params.rate
    return osgood_closure(series, A, A * params.log_factor(form) / params.N)


def envelope_table(path: str | Path, t: ArrayLike, G_hat: ArrayLike, params: EnvelopeParams) -> list[tuple]:
    """Write ``t, G_hat, envelope, admissible`` rows; the envelope is NaN where inadmissible."""
    rows = []
    for ti, gi in zip(np.asarray(t, dtype=float), np.asarray(G_hat, dtype=float)):
        p = params.with_t(float(ti))
        ok = admissible(p)
        rows.append((float(ti), float(gi), envelope(p) if ok else float("nan"), int(ok)))
    write_csv(path, ["t", "G_hat", "envelope", "admissible"], rows)
    return rows
