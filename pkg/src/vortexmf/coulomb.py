"""Planar Coulomb potential, its truncation at a scale, and smeared point masses.

The potential is ``g(x) = -ln|x| / (2 pi)``.  Truncating at radius ``eta``
caps it at ``g~(eta) = -ln(eta) / (2 pi)``; the truncated potential is the
potential of the uniform probability measure on the circle of radius ``eta``.

All functions accept a single point of shape ``(2,)`` or a stack of points of
shape ``(..., 2)`` and broadcast accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

FloatArray = NDArray[np.float64]

TWO_PI = 2.0 * np.pi


class SingularInputError(ValueError):
    """Raised when a kernel is evaluated at its singular point."""


def _points(x: ArrayLike) -> FloatArray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (2,):
        raise ValueError(f"expected points with trailing dimension 2, got shape {x.shape}")
    return x


def _norm(x: FloatArray) -> FloatArray:
    return np.hypot(x[..., 0], x[..., 1])


def g_radial(r: ArrayLike) -> FloatArray:
    """Radial profile ``-ln(r) / (2 pi)``; equals ``g~(r)``."""
    return -np.log(np.asarray(r, dtype=float)) / TWO_PI


def g(x: ArrayLike) -> FloatArray:
    """Coulomb potential ``-ln|x| / (2 pi)``."""
    r = _norm(_points(x))
    if np.any(r == 0.0):
        raise SingularInputError("g is singular at x = 0")
    return g_radial(r)


def g_trunc(x: ArrayLike, eta: float) -> FloatArray:
    """Potential truncated at distance ``eta``.

    Returns ``g(x)`` for ``|x| >= eta`` (the seam belongs to the outer branch)
    and the constant ``g~(eta)`` inside.
    """
    eta = float(eta)
    if not eta > 0.0:
        raise ValueError(f"truncation radius must be positive, got {eta}")
    r = _norm(_points(x))
    return g_radial(np.maximum(r, eta))


def grad_g_trunc(x: ArrayLike, eta: float) -> FloatArray:
    """Gradient of the truncated potential, ``-x / (2 pi |x|^2)`` outside ``eta``.

    ``eta = 0`` gives the untruncated gradient, which is singular at the origin.
    """
    x = _points(x)
    eta = float(eta)
    if eta < 0.0:
        raise ValueError(f"truncation radius must be nonnegative, got {eta}")
    r2 = x[..., 0] ** 2 + x[..., 1] ** 2
    if eta == 0.0:
        if np.any(r2 == 0.0):
            raise SingularInputError("grad g is singular at x = 0")
        outside = np.ones_like(r2, dtype=bool)
    else:
        outside = r2 >= eta * eta
    safe = np.where(outside, r2, 1.0)
    scale = np.where(outside, -1.0 / (TWO_PI * safe), 0.0)
    return x * scale[..., None]


def hess_g(x: ArrayLike) -> FloatArray:
    """Hessian ``-(I/|x|^2 - 2 x x^T / |x|^4) / (2 pi)``, shape ``(..., 2, 2)``."""
    x = _points(x)
    r2 = x[..., 0] ** 2 + x[..., 1] ** 2
    if np.any(r2 == 0.0):
        raise SingularInputError("hess g is singular at x = 0")
    outer = x[..., :, None] * x[..., None, :]
    eye = np.eye(2)
    return -(eye / r2[..., None, None] - 2.0 * outer / (r2**2)[..., None, None]) / TWO_PI


# --- uniform discs -------------------------------------------------------------
# A grid cell of side h is replaced by the disc of equal area when a kernel
# is evaluated inside it.  Outside the disc the cell acts as a point mass.


def disc_radius(h: float) -> float:
    """Radius of the disc whose area equals a square cell of side ``h``."""
    return h / np.sqrt(np.pi)


def disc_potential(r: ArrayLike, rho: float) -> FloatArray:
    """``int_{B(0,rho)} g(x - y) dy`` at ``|x| = r`` (unit density)."""
    r = np.asarray(r, dtype=float)
    area = np.pi * rho * rho
    inner = -0.5 * rho * rho * np.log(rho) + 0.25 * (rho * rho - r * r)
    outer = area * g_radial(np.where(r > 0.0, r, 1.0))
    return np.where(r < rho, inner, outer)


def disc_gradient(d: ArrayLike, rho: float) -> FloatArray:
    """``grad_x int_{B(0,rho)} g(x - y) dy`` at displacement ``d`` (unit density)."""
    d = _points(d)
    r2 = d[..., 0] ** 2 + d[..., 1] ** 2
    inside = r2 < rho * rho
    area = np.pi * rho * rho
    scale = np.where(inside, -0.5, -area / (TWO_PI * np.where(inside, 1.0, r2)))
    return d * scale[..., None]


# --- smeared point masses ------------------------------------------------------


@dataclass(frozen=True)
class SmearedDelta:
    """Uniform probability measure on the circle ``|x - center| = eta``, discretized."""

    center: FloatArray
    eta: float
    nodes: FloatArray
    weights: FloatArray

    @property
    def node_count(self) -> int:
        return int(self.weights.size)

    def integrate(self, f) -> FloatArray:
        """Integrate a callable of points against the measure."""
        values = np.asarray(f(self.nodes))
        return np.tensordot(self.weights, values, axes=(0, 0))


def smeared_delta(center: ArrayLike, eta: float, M: int = 256) -> SmearedDelta:
    """Trapezoid-rule discretization with ``M`` equispaced nodes on the circle."""
    if M < 8:
        raise ValueError(f"need at least 8 circle nodes, got {M}")
    eta = float(eta)
    if not eta > 0.0:
        raise ValueError(f"smearing radius must be positive, got {eta}")
    center = np.asarray(center, dtype=float).reshape(2)
    theta = TWO_PI * np.arange(M) / M
    nodes = center + eta * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    weights = np.full(M, 1.0 / M)
    return SmearedDelta(center=center, eta=eta, nodes=nodes, weights=weights)


# --- smeared field -------------------------------------------------------------


class HFieldEvaluation(NamedTuple):
    """Gradient of the smeared field at the requested points.

    ``inside`` flags points that fall inside (or on) some smearing circle, where
    the caller's precondition is violated; values are returned regardless.
    """

    grad: FloatArray
    inside: NDArray[np.bool_]


def grid_gradient_potential(
    values: FloatArray, L: float, points: FloatArray, max_pairs: int = 4_000_000
) -> FloatArray:
    """``grad (g * mu)`` at arbitrary points for a grid density ``mu``.

    Midpoint rule over cells, with each cell treated as a disc of equal area
    so that points inside a cell see the bounded field of a uniform disc.
    """
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    h = 2.0 * L / n
    rho = disc_radius(h)
    axis = -L + h * np.arange(n)
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    mask = values != 0.0
    cells = np.stack([X[mask], Y[mask]], axis=-1)
    density = values[mask]
    points = _points(points).reshape(-1, 2)
    out = np.zeros_like(points)
    if cells.size == 0:
        return out
    chunk = max(1, max_pairs // cells.shape[0])
    for start in range(0, points.shape[0], chunk):
        p = points[start : start + chunk]
        d = p[:, None, :] - cells[None, :, :]
        grad = disc_gradient(d, rho)
        out[start : start + chunk] = np.einsum("pcj,c->pj", grad, density)
    return out


def field_grad_H(
    positions: ArrayLike,
    etas: ArrayLike,
    mu,
    points: ArrayLike,
) -> HFieldEvaluation:
    """Gradient of ``H = g * (sum_i delta_{x_i}^{(eta_i)} - N mu)`` at ``points``.

    ``mu`` is a grid density with attributes ``values`` and ``L`` (a
    ``VorticityGrid``) or ``None`` for the zero field.
    """
    x = _points(positions).reshape(-1, 2)
    etas = np.broadcast_to(np.asarray(etas, dtype=float), (x.shape[0],))
    if np.any(~(etas > 0.0)) or not np.all(np.isfinite(etas)):
        raise ValueError("truncation radii must be positive and finite")
    pts = _points(points)
    shape = pts.shape
    pts = pts.reshape(-1, 2)
    d = pts[:, None, :] - x[None, :, :]
    r2 = d[..., 0] ** 2 + d[..., 1] ** 2
    inside = np.any(r2 <= etas[None, :] ** 2, axis=1)
    outside = r2 >= etas[None, :] ** 2
    safe = np.where(outside, r2, 1.0)
    grad = np.where(outside[..., None], -d / (TWO_PI * safe[..., None]), 0.0).sum(axis=1)
    if mu is not None:
        grad = grad - x.shape[0] * grid_gradient_potential(mu.values, mu.L, pts)
    return HFieldEvaluation(grad=grad.reshape(shape), inside=inside.reshape(shape[:-1]))
