"""Commutator bilinear forms, mollification, and the second-order singular integrals.

For a vector field ``v`` the two commutator kernels are

    K1(x, y) = grad g(x - y) . (v(x) - v(y)),
    K2(x, y) = hess g(x - y) : (v(x) - v(y)) (x) (v(x) - v(y)),

both bounded on the diagonal, where their limits depend on the direction of
approach.  The forms integrate them against ``m (x) m`` for a signed measure
``m`` made of point masses and a grid density.

Off the diagonal every pair is summed exactly (points against points and
points against cell centres) and the grid-grid part is assembled from FFT
convolutions with the free-space kernels.  A grid cell paired with itself
(or with a point at its centre) receives the value that makes the midpoint
rule exact for the leading, direction-dependent part of the kernel: the
circle average of the limit plus a square-lattice constant times its
``cos 4 theta`` coefficient.

``T_{1,v} f = int K1(., y) f(y) dy`` and ``T_{2,v}`` likewise.  The operators
``d_a T d_b`` are bounded on ``L^2``; :func:`sio_apply` evaluates them either
spectrally on the periodic box or through the principal-value identity with
explicit boundary constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import integrate, ndimage, optimize

from .coulomb import TWO_PI
from .euler_pde import (VorticityGrid, _smooth_step, biot_savart, free_convolve, log_kernel_samples,
                        offset_lattice)
from .noise import NoiseModel, grad_sigma_eval, norms, sigma_eval

FloatArray = NDArray[np.float64]

_EYE = np.eye(2)


# --- lattice constants ------------------------------------------------------------


def _square_shell_sums(M: int) -> tuple[float, float]:
    m = np.arange(-M, M + 1, dtype=float)
    X, Y = np.meshgrid(m, m, indexing="ij")
    r2 = X * X + Y * Y
    r2[M, M] = 1.0
    c4 = (X**4 - 6.0 * X * X * Y * Y + Y**4) / (r2 * r2)
    c4[M, M] = 0.0
    R = M + 0.5
    area = 8.0 * integrate.quad(lambda t: np.cos(4 * t) * (R / np.cos(t)) ** 2 / 2, 0, np.pi / 4,
                                epsabs=1e-13)[0]
    logint = 8.0 * integrate.quad(lambda t: np.cos(4 * t) * np.log(R / np.cos(t)), 0, np.pi / 4,
                                  epsabs=1e-13)[0]
    return area - float(c4.sum()), float((c4 / r2).sum()) - logint


@lru_cache(maxsize=1)
def lattice_constants() -> tuple[float, float]:
    """``(kappa4, lambda4)`` for the unit square lattice.

    ``kappa4 = lim [int_{Q_M} cos 4t - sum_{0<|m|_inf<=M} cos 4t_m]`` corrects
    the midpoint rule for a bounded kernel homogeneous of degree 0;
    ``lambda4 = lim [sum_{0<|m|_inf<=M} cos 4t_m / |m|^2 - pv int_{Q_M} cos 4t / r^2]``
    is the square-lattice principal value offset for degree ``-2``.  Both
    converge like ``M^-2``; one Richardson step from ``M = 200, 400``.
    """
    a1, b1 = _square_shell_sums(200)
    a2, b2 = _square_shell_sums(400)
    return a2 + (a2 - a1) / 3.0, b2 + (b2 - b1) / 3.0


def _angular_modes(values: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Mean and ``cos 4 theta`` coefficient of samples on 16 equispaced angles (last axis)."""
    n = values.shape[-1]
    theta = TWO_PI * np.arange(n) / n
    return values.mean(axis=-1), 2.0 * np.mean(values * np.cos(4.0 * theta), axis=-1)


_ANGLES = TWO_PI * np.arange(16) / 16
_UNIT = np.stack([np.cos(_ANGLES), np.sin(_ANGLES)], axis=-1)


# --- velocity field models ----------------------------------------------------------


@dataclass(frozen=True)
class VelocityFieldModel:
    """A vector field with its Jacobian ``J[..., a, c] = d v^a / d x_c`` and seminorms.

    ``lip`` bounds ``sup |grad v|`` (operator norm), ``ll`` bounds the
    log-Lipschitz seminorm ``sup_{0<|x-y|<=1/e} |v(x)-v(y)| / (|x-y| |ln|x-y||)``
    and ``sup`` bounds ``|v|``; ``None`` marks an infinite or unknown value.
    """

    kind: str
    value: Callable[[FloatArray], FloatArray]
    jacobian: Callable[[FloatArray], FloatArray]
    lip: Optional[float]
    ll: Optional[float]
    sup: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("noise-mode", "biot-savart-grid", "analytic-test"):
            raise ValueError(f"unknown velocity field kind {self.kind!r}")

    def __call__(self, x: ArrayLike) -> FloatArray:
        return self.value(np.asarray(x, dtype=float))

    def jac(self, x: ArrayLike) -> FloatArray:
        return self.jacobian(np.asarray(x, dtype=float))


def noise_field(model: NoiseModel, k: int) -> VelocityFieldModel:
    """The ``k``-th noise field ``sigma_k``."""
    mode = model._mode(k)
    sig, grad = norms(NoiseModel((mode,)))
    return VelocityFieldModel(
        "noise-mode",
        lambda x: sigma_eval(model, k, x),
        lambda x: grad_sigma_eval(model, k, x),
        lip=grad,
        ll=grad,
        sup=sig,
        label=f"sigma_{k}",
    )


def noise_drift_field(model: NoiseModel, k: int) -> VelocityFieldModel:
    """``(sigma_k . grad) sigma_k``, the field entering the Ito correction."""
    mode = model._mode(k)

    def value(x):
        return np.einsum("...ij,...j->...i", grad_sigma_eval(model, k, x), sigma_eval(model, k, x))

    def jac(x, eps=1e-6):
        out = np.zeros(x.shape + (2,))
        for c in range(2):
            e = np.zeros(2)
            e[c] = eps
            out[..., :, c] = (value(x + e) - value(x - e)) / (2 * eps)
        return out

    kk = float(np.hypot(*mode.k)) if mode.kind == "fourier" else 0.0
    c = abs(mode.c)
    return VelocityFieldModel("noise-mode", value, jac, lip=c * c * kk * kk, ll=c * c * kk * kk,
                              sup=c * c * kk, label=f"(sigma_{k}.grad)sigma_{k}")


def linear_field(A: ArrayLike, b: ArrayLike = (0.0, 0.0)) -> VelocityFieldModel:
    """``v(x) = A x + b``."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    lip = float(np.linalg.norm(A, 2))
    return VelocityFieldModel(
        "analytic-test",
        lambda x: x @ A.T + b,
        lambda x: np.broadcast_to(A, x.shape[:-1] + (2, 2)).copy(),
        lip=lip,
        ll=lip,
        sup=None if lip > 0 else float(np.hypot(*b)),
        label="linear",
    )


def constant_field(b: ArrayLike) -> VelocityFieldModel:
    return linear_field(np.zeros((2, 2)), b)


def _ll_profile(s: FloatArray) -> FloatArray:
    """``s ln(1/|s|)`` for ``|s| <= 1/e``, constant ``sign(s)/e`` beyond (C^1 at the seam)."""
    a = np.abs(s)
    inner = np.where(a > 0.0, s * -np.log(np.where(a > 0.0, a, 1.0)), 0.0)
    return np.where(a <= np.exp(-1.0), inner, np.sign(s) * np.exp(-1.0))


def _ll_profile_slope(s: FloatArray) -> FloatArray:
    a = np.abs(s)
    with np.errstate(divide="ignore"):
        inner = -np.log(a) - 1.0
    return np.where(a <= np.exp(-1.0), inner, 0.0)


LL_SHEAR_SEMINORM = 1.0 + np.log(2.0)


def ll_shear_field(amplitude: float = 1.0, normal=(0.0, 1.0), center=(0.0, 0.0)) -> VelocityFieldModel:
    """Log-Lipschitz, non-Lipschitz shear ``a l(n.(x - c)) n_perp`` with ``l(s) = s ln(1/|s|)``.

    Divergence-free (the field is constant along its direction).  The
    seminorm is ``a (1 + ln 2)``, attained by the pair ``s = +-1/(2e)``.
    """
    n = np.asarray(normal, dtype=float)
    n = n / np.hypot(*n)
    t = np.array([-n[1], n[0]])
    c = np.asarray(center, dtype=float)
    a = float(amplitude)

    def value(x):
        return a * _ll_profile((x - c) @ n)[..., None] * t

    def jac(x):
        return a * _ll_profile_slope((x - c) @ n)[..., None, None] * np.outer(t, n)

    return VelocityFieldModel("analytic-test", value, jac, lip=None, ll=abs(a) * LL_SHEAR_SEMINORM,
                              sup=abs(a) * np.exp(-1.0), label="ll-shear")


def grid_velocity_field(grid: VorticityGrid, gauge: str = "free") -> VelocityFieldModel:
    """Biot-Savart velocity of a grid density, cubic-spline interpolated.

    The Jacobian comes from spectral derivatives of the periodic part plus
    the constant Jacobian of the gauge rotation.  ``lip`` is the maximum
    Jacobian norm over the nodes and cell midpoints, inflated by 2% to cover
    the interpolant between samples.
    """
    u = biot_savart(grid, gauge=gauge)
    kx, ky = grid.wavenumbers
    J = np.empty((grid.n, grid.n, 2, 2))
    for a in range(2):
        uh = np.fft.fft2(u[a])
        J[..., a, 0] = np.real(np.fft.ifft2(1j * kx * uh))
        J[..., a, 1] = np.real(np.fft.ifft2(1j * ky * uh))
    if gauge == "free":
        # the rotation term is linear and was not seen by the spectral derivative
        rot = grid.mass / (2.0 * (2.0 * grid.L) ** 2)
        J[..., 0, 1] += rot
        J[..., 1, 0] -= rot
    coeffs_u = [ndimage.spline_filter(u[a], order=3, mode="grid-wrap") for a in range(2)]
    coeffs_J = [[ndimage.spline_filter(J[..., a, c], order=3, mode="grid-wrap") for c in range(2)]
                for a in range(2)]

    def _interp(coef, x):
        idx = ((x.reshape(-1, 2) + grid.L) / grid.h).T
        return ndimage.map_coordinates(coef, idx, order=3, mode="grid-wrap", prefilter=False)

    def value(x):
        out = np.stack([_interp(coeffs_u[a], x) for a in range(2)], axis=-1)
        return out.reshape(x.shape)

    def jac(x):
        out = np.empty((x.reshape(-1, 2).shape[0], 2, 2))
        for a in range(2):
            for c in range(2):
                out[:, a, c] = _interp(coeffs_J[a][c], x)
        return out.reshape(x.shape[:-1] + (2, 2))

    mid = grid.coords + 0.5 * grid.h
    lip = 1.02 * max(float(np.max(np.linalg.norm(J, 2, axis=(-2, -1)))),
                     float(np.max(np.linalg.norm(jac(mid), 2, axis=(-2, -1)))))
    sup = float(np.max(np.hypot(u[0], u[1])))
    return VelocityFieldModel("biot-savart-grid", value, jac, lip=lip, ll=lip, sup=sup,
                              label="biot-savart")


def sampled_quotients(v: VelocityFieldModel, points: FloatArray, partners: FloatArray
                      ) -> tuple[float, float]:
    """Largest Lipschitz and log-Lipschitz difference quotients over the given pairs."""
    d = np.hypot(*(points - partners).T)
    diff = np.hypot(*(v(points) - v(partners)).T)
    lip = float(np.max(diff / d))
    near = (d > 0.0) & (d <= np.exp(-1.0))
    ll = float(np.max(diff[near] / (d[near] * -np.log(d[near])))) if np.any(near) else 0.0
    return lip, ll


# --- mollification ---------------------------------------------------------------


def _chi_raw(r: FloatArray, r1: float) -> FloatArray:
    return 1.0 - _smooth_step((np.asarray(r) - 0.25) / (r1 - 0.25))


def _chi_raw_slope(r: FloatArray, r1: float, eps: float = 1e-7) -> FloatArray:
    return (_chi_raw(r + eps, r1) - _chi_raw(r - eps, r1)) / (2 * eps)


@lru_cache(maxsize=1)
def bump_support_radius() -> float:
    """Outer radius ``r1`` of the bump: ``chi = 1`` on ``r <= 1/4``, smooth decay to 0 at ``r1``, mass 1."""

    def mass(r1):
        inner = np.pi * 0.25**2
        outer = integrate.quad(lambda r: TWO_PI * r * _chi_raw(r, r1), 0.25, r1, epsabs=1e-14)[0]
        return inner + outer - 1.0

    return float(optimize.brentq(mass, 0.3, 1.0, xtol=1e-15))


def chi(x: ArrayLike) -> FloatArray:
    """Radial nonincreasing bump with ``int chi = 1``, ``0 <= chi <= 1``, support in the unit disc."""
    x = np.asarray(x, dtype=float)
    r = np.hypot(x[..., 0], x[..., 1])
    return _chi_raw(r, bump_support_radius())


@lru_cache(maxsize=8)
def _bump_stencil(nr: int = 24, nt: int = 32) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Nodes on the unit-scale bump support with weights for ``chi`` and ``grad chi``."""
    r1 = bump_support_radius()
    tg, wg = np.polynomial.legendre.leggauss(nr)
    radii, wr = [], []
    for a, b in ((0.0, 0.25), (0.25, r1)):
        radii.append(a + 0.5 * (b - a) * (tg + 1.0))
        wr.append(0.5 * (b - a) * wg)
    r = np.concatenate(radii)
    w = np.concatenate(wr) * r * TWO_PI / nt
    theta = TWO_PI * (np.arange(nt) + 0.5) / nt
    dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    nodes = (r[:, None, None] * dirs[None, :, :]).reshape(-1, 2)
    wchi = np.repeat(w * _chi_raw(r, r1), nt)
    wchi = wchi / wchi.sum()
    slope = _chi_raw_slope(r, r1)
    wgrad = (np.repeat(w * slope, nt)[:, None] * np.tile(dirs, (r.size, 1)))
    return nodes, wchi, wgrad


def mollify(v: VelocityFieldModel, eps2: float, *, nr: int = 24, nt: int = 32,
            lip_samples: Optional[FloatArray] = None) -> VelocityFieldModel:
    """``v_eps = chi_eps * v`` by a fixed polar stencil of radius ``eps2 * r1``.

    The stencil weights are normalized to unit mass and symmetric under
    ``z -> -z``, so affine fields are reproduced exactly.  The Jacobian is
    ``int grad chi_eps(z) v(x - z) dz`` (no derivatives of ``v`` needed).
    ``lip`` is the maximum Jacobian norm over ``lip_samples`` when given and
    otherwise the bound ``C ||v||_LL |ln eps|`` with ``C = int |grad chi|``.
    """
    if not 0.0 < eps2 < np.exp(-1.0):
        raise ValueError("mollification scale must lie in (0, 1/e)")
    nodes, wchi, wgrad = _bump_stencil(nr, nt)
    z = eps2 * nodes

    def value(x):
        pts = x[..., None, :] - z
        return np.einsum("...mi,m->...i", v(pts), wchi)

    def jac(x):
        pts = x[..., None, :] - z
        # d/dx_c int chi_eps(z) v(x - z) dz = int (d_c chi_eps)(z) v(x - z) dz
        return np.einsum("...ma,mc->...ac", v(pts), wgrad) / eps2

    if lip_samples is not None:
        lip = float(np.max(np.linalg.norm(jac(np.asarray(lip_samples, dtype=float)), 2, axis=(-2, -1))))
    elif v.ll is not None:
        lip = float(np.sum(np.hypot(*wgrad.T))) * v.ll * abs(np.log(eps2)) * 2.0
    else:
        lip = None
    return VelocityFieldModel("analytic-test" if v.kind == "analytic-test" else v.kind, value, jac,
                              lip=lip, ll=v.ll, sup=v.sup, label=f"{v.label}_eps")


# --- signed measures ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SignedMeasurePair:
    """``particle_weight * sum_i delta_{x_i} + field_weight * xi``.

    The default weights ``1/N`` and ``-1`` give ``xi_N - xi``.
    """

    positions: Optional[FloatArray]
    grid: Optional[VorticityGrid]
    particle_weight: Optional[float] = None
    field_weight: float = -1.0

    def __post_init__(self):
        if self.positions is not None:
            x = np.array(getattr(self.positions, "positions", self.positions), dtype=float).reshape(-1, 2)
            object.__setattr__(self, "positions", x)
            if self.particle_weight is None:
                object.__setattr__(self, "particle_weight", 1.0 / max(x.shape[0], 1))
        elif self.particle_weight is None:
            object.__setattr__(self, "particle_weight", 0.0)

    @property
    def N(self) -> int:
        return 0 if self.positions is None else self.positions.shape[0]

    @property
    def total_mass(self) -> float:
        m = self.N * self.particle_weight
        if self.grid is not None:
            m += self.field_weight * self.grid.mass
        return float(m)


def empirical_minus_field(positions, grid: VorticityGrid) -> SignedMeasurePair:
    x = getattr(positions, "positions", positions)
    return SignedMeasurePair(np.asarray(x, dtype=float), grid)


# --- kernels ---------------------------------------------------------------------


def kernel_K1(v: VelocityFieldModel, x: FloatArray, y: FloatArray) -> FloatArray:
    """``grad g(x - y) . (v(x) - v(y))`` for ``x != y`` (broadcasting)."""
    z = x - y
    r2 = np.sum(z * z, axis=-1)
    d = v(x) - v(y)
    return -np.sum(z * d, axis=-1) / (TWO_PI * r2)


def kernel_K2(v: VelocityFieldModel, x: FloatArray, y: FloatArray) -> FloatArray:
    """``hess g(x - y) : (v(x) - v(y))^{(x)2}`` for ``x != y``."""
    z = x - y
    r2 = np.sum(z * z, axis=-1)
    d = v(x) - v(y)
    zd = np.sum(z * d, axis=-1)
    dd = np.sum(d * d, axis=-1)
    return -(dd / r2 - 2.0 * zd * zd / (r2 * r2)) / TWO_PI


def _limit_samples(order: int, J: FloatArray) -> FloatArray:
    """Directional diagonal limits on 16 angles, shape ``J.shape[:-2] + (16,)``."""
    Az = np.einsum("...ac,mc->...ma", J, _UNIT)
    if order == 1:
        return -np.einsum("ma,...ma->...m", _UNIT, Az) / TWO_PI
    zAz = np.einsum("ma,...ma->...m", _UNIT, Az)
    return -(np.sum(Az * Az, axis=-1) - 2.0 * zAz * zAz) / TWO_PI


def diagonal_value(order: int, J: FloatArray, lattice: bool = True) -> FloatArray:
    """Value assigned to a coincident pair with Jacobian ``J`` of ``v`` there.

    ``lattice=False`` gives the circle average of the directional limits (a
    point paired with itself); ``lattice=True`` adds the square-lattice
    correction of the ``cos 4 theta`` mode (a grid cell paired with itself).
    For ``order=1`` this is ``-div v / (4 pi)`` either way.
    """
    mean, c4 = _angular_modes(_limit_samples(order, np.asarray(J, dtype=float)))
    if not lattice:
        return mean
    return mean + lattice_constants()[0] * c4


# --- forms -------------------------------------------------------------------------


def _kernel(order: int):
    if order == 1:
        return kernel_K1
    if order == 2:
        return kernel_K2
    raise ValueError("order must be 1 or 2")


class CoincidentParticlesError(ValueError):
    """Two distinct particles of one measure sit at the same point."""


def _check_distinct(x: FloatArray, chunk: int = 512) -> None:
    for s in range(0, x.shape[0], chunk):
        d = np.sum((x[s : s + chunk, None, :] - x[None, :, :]) ** 2, axis=-1)
        d[np.arange(d.shape[0]), s + np.arange(d.shape[0])] = 1.0
        if np.any(d == 0.0):
            i, j = np.argwhere(d == 0.0)[0]
            raise CoincidentParticlesError(f"particles {s + i} and {j} coincide")


def _pair_block(order, v, x, wx, y, wy, same: bool, diagonal: str, chunk: int = 256) -> float:
    """``sum_{i,j} wx_i wy_j K(x_i, y_j)`` over point sets; coincident pairs per ``diagonal``."""
    K = _kernel(order)
    total = 0.0
    for s in range(0, x.shape[0], chunk):
        xs = x[s : s + chunk]
        z = xs[:, None, :] - y[None, :, :]
        coincide = np.all(z == 0.0, axis=-1)
        yy = np.where(coincide[..., None], y[None, :, :] + 1.0, y[None, :, :])
        vals = K(v, np.broadcast_to(xs[:, None, :], yy.shape), yy)
        vals = np.where(coincide, 0.0, vals)
        total += float(np.einsum("i,ij,j->", wx[s : s + chunk], vals, wy))
        if np.any(coincide) and diagonal == "extend":
            ii, jj = np.nonzero(coincide)
            Kbar = diagonal_value(order, v.jac(xs[ii]), lattice=not same)
            total += float(np.sum(wx[s + ii] * wy[jj] * Kbar))
    return total


def _point_grid_block(order, v, x, wx, grid: VorticityGrid, density: FloatArray,
                      max_pairs: int = 2_000_000) -> float:
    """``sum_i wx_i sum_c K(x_i, c) density_c h^2``; a point at a node gets the cell value."""
    mask = density != 0.0
    cells = grid.coords[mask]
    dens = density[mask] * grid.cell_area
    if cells.size == 0 or x.size == 0:
        return 0.0
    K = _kernel(order)
    vc = v(cells)
    total = 0.0
    chunk = max(1, max_pairs // cells.shape[0])
    for s in range(0, x.shape[0], chunk):
        xs = x[s : s + chunk]
        vx = v(xs)
        z = xs[:, None, :] - cells[None, :, :]
        r2 = np.sum(z * z, axis=-1)
        coincide = r2 == 0.0
        r2 = np.where(coincide, 1.0, r2)
        d = vx[:, None, :] - vc[None, :, :]
        zd = np.sum(z * d, axis=-1)
        if order == 1:
            vals = -zd / (TWO_PI * r2)
        else:
            vals = -(np.sum(d * d, axis=-1) / r2 - 2.0 * zd * zd / (r2 * r2)) / TWO_PI
        if np.any(coincide):
            ii, jj = np.nonzero(coincide)
            vals[ii, jj] = diagonal_value(order, v.jac(xs[ii]), lattice=True)
        total += float(np.einsum("i,ij,j->", wx[s : s + chunk], vals, dens))
    return total


def _point_grid_spectral(order, v, x, wx, grid: VorticityGrid, density: FloatArray) -> float:
    """Point-grid block through potentials of differentiated densities.

    With ``P[f] = g * f`` the block equals
    ``sum_i wx_i [v_a P[d_a rho] - P[d_a (v_a rho)]](x_i)`` for ``K1`` and
    ``sum_i wx_i [v_a v_b P[d_ab rho] - 2 v_a P[d_ab (v_b rho)] + P[d_ab (v_a v_b rho)]](x_i)``
    for ``K2`` (the point part of ``hess g`` cancels in the symmetric
    combination).  Derivatives are spectral, potentials are free-space FFT
    convolutions and values at ``x_i`` come from cubic splines, so the
    result is smooth in the particle positions.  ``density`` must vanish
    near the box edge.
    """
    if x.size == 0 or not np.any(density):
        return 0.0
    kern = log_kernel_samples(grid.n, grid.h)
    k = grid.wavenumbers
    vn = v(grid.coords)
    vx = v(x)
    idx = ((x + grid.L) / grid.h).T

    def deriv(f, *axes):
        F = np.fft.fft2(f)
        for a in axes:
            F = F * (1j * k[a])
        return np.fft.ifft2(F).real

    def pot_at(f):
        return ndimage.map_coordinates(free_convolve(f, kern), idx, order=3, mode="grid-wrap")

    if order == 1:
        vals = -pot_at(sum(deriv(vn[..., a] * density, a) for a in range(2)))
        for a in range(2):
            vals += vx[:, a] * pot_at(deriv(density, a))
    else:
        vals = pot_at(sum(deriv(vn[..., a] * vn[..., b] * density, a, b) for a in range(2) for b in range(2)))
        for a in range(2):
            for b in range(2):
                vals += vx[:, a] * vx[:, b] * pot_at(deriv(density, a, b))
                vals -= 2.0 * vx[:, a] * pot_at(deriv(vn[..., b] * density, a, b))
    return float(np.dot(wx, vals))


@lru_cache(maxsize=8)
def _grid_kernels(n: int, h: float):
    """``h^2 grad g`` and ``h^2 hess g`` on the offset lattice, zero at the origin."""
    Z = offset_lattice(n, h)
    r2 = Z[..., 0] ** 2 + Z[..., 1] ** 2
    r2[0, 0] = 1.0
    G = -h * h * Z / (TWO_PI * r2[..., None])
    G[0, 0] = 0.0
    H = np.empty((2, 2) + r2.shape)
    for a in range(2):
        for b in range(2):
            H[a, b] = -h * h * (_EYE[a, b] / r2 - 2.0 * Z[..., a] * Z[..., b] / (r2 * r2)) / TWO_PI
    H[:, :, 0, 0] = 0.0
    return np.moveaxis(G, -1, 0), H


def _grid_grid_block(order, v, grid: VorticityGrid, rho1: FloatArray, rho2: FloatArray,
                     vnodes: FloatArray, Kbar: FloatArray) -> float:
    """``sum_{c, c'} K(c, c') rho1_c rho2_c' h^4`` by FFT convolutions plus the diagonal."""
    G, H = _grid_kernels(grid.n, grid.h)
    A = grid.cell_area
    total = 0.0
    if order == 1:
        conv2 = [free_convolve(rho2, G[a]) for a in range(2)]
        for a in range(2):
            total += np.sum(vnodes[..., a] * rho1 * conv2[a])
            total -= np.sum(rho1 * free_convolve(vnodes[..., a] * rho2, G[a]))
    else:
        conv2 = {}
        for a in range(2):
            for b in range(a, 2):
                conv2[a, b] = free_convolve(rho2, H[a, b])
        c = lambda a, b: conv2[min(a, b), max(a, b)]
        vr2 = [vnodes[..., b] * rho2 for b in range(2)]
        for a in range(2):
            for b in range(2):
                total += np.sum(vnodes[..., a] * vnodes[..., b] * rho1 * c(a, b))
                total -= 2.0 * np.sum(vnodes[..., a] * rho1 * free_convolve(vr2[b], H[a, b]))
                total += np.sum(rho1 * free_convolve(vnodes[..., a] * vnodes[..., b] * rho2, H[a, b]))
    total *= A
    total += float(np.sum(rho1 * rho2 * Kbar)) * A * A
    return float(total)


def bilinear_form(order: int, v: VelocityFieldModel, m1: SignedMeasurePair, m2: SignedMeasurePair,
                  *, diagonal: str = "exclude", point_grid: str = "lattice") -> float:
    """``int int K(x, y) dm1(x) dm2(y)`` for ``K = K1`` (``order=1``) or ``K2``.

    ``diagonal="exclude"`` drops coincident point pairs (integration off the
    diagonal); ``"extend"`` gives them the circle-averaged limit.  Grid cells
    always use the lattice-corrected diagonal value.  Both measures must share
    the same grid geometry.  ``point_grid="lattice"`` sums point-cell pairs
    directly; ``"spectral"`` uses :func:`_point_grid_spectral`.
    """
    if diagonal not in ("exclude", "extend"):
        raise ValueError(f"unknown diagonal convention {diagonal!r}")
    if point_grid not in ("lattice", "spectral"):
        raise ValueError(f"unknown point-grid route {point_grid!r}")
    pg = _point_grid_block if point_grid == "lattice" else _point_grid_spectral
    _kernel(order)
    total = 0.0
    p1 = m1.positions if m1.N else None
    p2 = m2.positions if m2.N else None
    if p1 is not None and p2 is not None:
        same = m1 is m2 or (p1.shape == p2.shape and np.array_equal(p1, p2))
        if same:
            _check_distinct(p1)
        total += _pair_block(order, v, p1, np.full(m1.N, m1.particle_weight),
                             p2, np.full(m2.N, m2.particle_weight), same, diagonal)
    g1 = m1.grid if m1.field_weight != 0.0 else None
    g2 = m2.grid if m2.field_weight != 0.0 else None
    if g2 is not None and p1 is not None:
        total += pg(order, v, p1, np.full(m1.N, m1.particle_weight), g2, m2.field_weight * g2.values)
    if g1 is not None and p2 is not None:
        total += pg(order, v, p2, np.full(m2.N, m2.particle_weight), g1, m1.field_weight * g1.values)
    if g1 is not None and g2 is not None:
        if g1.n != g2.n or g1.L != g2.L:
            raise ValueError("grid parts must share the same geometry")
        nodes = g1.coords
        vnodes = v(nodes)
        Kbar = diagonal_value(order, v.jac(nodes), lattice=True)
        total += _grid_grid_block(order, v, g1, m1.field_weight * g1.values,
                                  m2.field_weight * g2.values, vnodes, Kbar)
    return float(total)


def form_K1(v: VelocityFieldModel, m: SignedMeasurePair, *, diagonal: str = "exclude",
            point_grid: str = "lattice") -> float:
    """``int int_{off-diagonal} K1 dm dm``."""
    return bilinear_form(1, v, m, m, diagonal=diagonal, point_grid=point_grid)


def form_K2(v: VelocityFieldModel, m: SignedMeasurePair, *, diagonal: str = "exclude",
            point_grid: str = "lattice") -> float:
    """``int int_{off-diagonal} K2 dm dm``."""
    return bilinear_form(2, v, m, m, diagonal=diagonal, point_grid=point_grid)


def linear_field_offdiagonal_value(order: int, N: int, particle_weight: float | None = None) -> float:
    """Exact form of ``v(x) = x`` on a zero-mass measure with ``N`` equal point masses.

    The kernels are the constants ``-1/(2 pi)`` and ``1/(2 pi)``, so only the
    removed diagonal ``sum_i w^2`` survives.
    """
    w = 1.0 / N if particle_weight is None else particle_weight
    const = -1.0 / TWO_PI if order == 1 else 1.0 / TWO_PI
    return -const * N * w * w


# --- ratio right-hand sides -------------------------------------------------------


def _mu_power(mu_norm: float, p: float) -> float:
    return mu_norm ** (0.5 if np.isinf(p) else p / (2.0 * (p - 1.0)))


def _eps_power(eps: float, p: float) -> float:
    return eps ** (2.0 if np.isinf(p) else 2.0 * (p - 1.0) / p)


def rhs_lipschitz(F_avg: float, N: int, lip: float, mu_norm: float, eps1: float, eps3: float,
                  p: float = np.inf, C_p: float = 1.0) -> float:
    """First-order estimate for Lipschitz ``v`` (constant set to one)."""
    bracket = (F_avg + abs(np.log(eps3)) / N + C_p * mu_norm * _eps_power(eps3, p)
               + eps1 * (C_p * _mu_power(mu_norm, p) + 1.0 / eps3))
    return lip * bracket


def rhs_log_lipschitz(F_avg: float, N: int, ll: float, mu_norm: float, eps2: float, eps3: float,
                      p: float = np.inf, C_p: float = 1.0) -> float:
    """First-order estimate for log-Lipschitz ``v`` with mollification scale ``eps2``."""
    l3 = abs(np.log(eps3))
    first = l3 * ll * (F_avg + l3 / N + C_p * mu_norm * _eps_power(eps3, p))
    second = ll * eps2 * abs(np.log(eps2)) * (1.0 / eps3 + C_p * _mu_power(mu_norm, p))
    return first + second


def rhs_second_order(F_avg: float, N: int, lip: float, mu_norm: float, eps1: float, eps3: float,
                     p: float = np.inf, C_p: float = 1.0) -> float:
    """Second-order estimate: the first-order bracket times ``||grad v||^2``."""
    return rhs_lipschitz(F_avg, N, lip * lip, mu_norm, eps1, eps3, p, C_p)


# --- component kernels and boundary constants ---------------------------------------


def component_kernels(z: ArrayLike, family: str, indices: Sequence[int]) -> FloatArray:
    """Homogeneous degree ``-2`` kernels of the second-order operators.

    ``family`` and ``indices`` (0-based):

    * ``"K0"`` ``(a, b)``: ``(-d_ab/|z|^2 + 2 z_a z_b/|z|^4) / (2 pi)``
    * ``"K1"`` ``(a, b, r, nu)``: ``(2(d_ab z_r + d_ar z_b + d_rb z_a)/|z|^4 - 8 z_a z_b z_r/|z|^6) z_nu / (2 pi)``
    * ``"K2"`` ``(a, b, a', b', g, g')``: the fourth-derivative pattern times ``z_g z_g' / (2 pi)``
    * ``"T1a"`` ``(a', b', g')``: ``d_a'g'/|z|^2 - 2 z_a' z_g'/|z|^4``
    * ``"T1b"`` ``(a, b, g, r)``: ``-2 z_r ((d_ag z_b + d_ab z_g + d_gb z_a)/|z|^4 - 4 z_a z_b z_g/|z|^6)``
    """
    z = np.asarray(z, dtype=float)
    r2 = z[..., 0] ** 2 + z[..., 1] ** 2
    if np.any(r2 == 0.0):
        raise ValueError("component kernels are singular at z = 0")
    d = _EYE
    Z = lambda i: z[..., i]
    idx = tuple(int(i) for i in indices)
    if any(i not in (0, 1) for i in idx):
        raise ValueError("indices must be 0 or 1")
    if family == "K0":
        a, b = idx
        return (-d[a, b] / r2 + 2 * Z(a) * Z(b) / r2**2) / TWO_PI
    if family == "K1":
        a, b, r, nu = idx
        core = 2 * (d[a, b] * Z(r) + d[a, r] * Z(b) + d[r, b] * Z(a)) / r2**2 - 8 * Z(a) * Z(b) * Z(r) / r2**3
        return core * Z(nu) / TWO_PI
    if family == "K2":
        a, b, a1, b1, g1, g2 = idx
        core = (2 * (d[a, b] * d[a1, b1] + d[a, a1] * d[b, b1] + d[a1, b] * d[a, b1]) / r2**2
                - 8 * (d[a, b] * Z(a1) * Z(b1) + d[a, a1] * Z(b) * Z(b1) + d[a1, b] * Z(a) * Z(b1)) / r2**3
                - 8 * (d[a, b1] * Z(b) * Z(a1) + d[b, b1] * Z(a) * Z(a1) + d[a1, b1] * Z(a) * Z(b)) / r2**3
                + 48 * Z(a) * Z(b) * Z(a1) * Z(b1) / r2**4)
        return core * Z(g1) * Z(g2) / TWO_PI
    if family == "T1a":
        a1, _b1, g1 = idx
        return d[a1, g1] / r2 - 2 * Z(a1) * Z(g1) / r2**2
    if family == "T1b":
        a, b, g, r = idx
        return -2 * Z(r) * ((d[a, g] * Z(b) + d[a, b] * Z(g) + d[g, b] * Z(a)) / r2**2
                            - 4 * Z(a) * Z(b) * Z(g) / r2**3)
    raise ValueError(f"unknown kernel family {family!r}")


def component_index_sets(family: str):
    sizes = {"K0": 2, "K1": 4, "K2": 6, "T1a": 3, "T1b": 4}
    if family not in sizes:
        raise ValueError(f"unknown kernel family {family!r}")
    return list(np.ndindex(*(2,) * sizes[family]))


def circle_average(func, nodes: int = 4096) -> float:
    """Average of ``func(z)`` over the unit circle by the trapezoid rule."""
    t = TWO_PI * np.arange(nodes) / nodes
    z = np.stack([np.cos(t), np.sin(t)], axis=-1)
    return float(np.mean(func(z)))


def boundary_constants(name: str, indices: Sequence[int], nodes: int = 4096) -> float:
    """Circle integrals (arc length ``2 pi``) in the principal-value identities.

    ``name`` and ``indices`` (0-based):

    * ``"C"`` ``(b, g)``: ``-(1/2pi) int z_b z_g``
    * ``"C1"`` ``(a, r, b, g)``: ``-(1/2pi) int z_b (d_ag - 2 z_a z_g) z_r``
    * ``"C2"`` ``(a, b, a', g, g', b')``: ``(1/2pi) int (2(d_ab z_a' + d_aa' z_b + d_a'b z_a) - 8 z_a z_b z_a') z_g z_g' z_b'``
    * ``"C3"`` ``(a, b, g, b')``: ``(1/2pi) int (-d_ab + 2 z_a z_b) z_b' z_g``
    """
    idx = tuple(int(i) for i in indices)
    if any(i not in (0, 1) for i in idx):
        raise ValueError("indices must be 0 or 1")
    d = _EYE
    if name == "C":
        b, g = idx
        f = lambda z: -z[:, b] * z[:, g]
    elif name == "C1":
        a, r, b, g = idx
        f = lambda z: -z[:, b] * (d[a, g] - 2 * z[:, a] * z[:, g]) * z[:, r]
    elif name == "C2":
        a, b, a1, g1, g2, b1 = idx
        f = lambda z: ((2 * (d[a, b] * z[:, a1] + d[a, a1] * z[:, b] + d[a1, b] * z[:, a])
                        - 8 * z[:, a] * z[:, b] * z[:, a1]) * z[:, g1] * z[:, g2] * z[:, b1])
    elif name == "C3":
        a, b, g, b1 = idx
        f = lambda z: (-d[a, b] + 2 * z[:, a] * z[:, b]) * z[:, b1] * z[:, g]
    else:
        raise ValueError(f"unknown boundary constant {name!r}")
    # (1/2pi) * int over arc length 2 pi = circle average
    return circle_average(f, nodes)


@lru_cache(maxsize=1)
def _constant_tables():
    C = np.zeros((2, 2))
    C1 = np.zeros((2, 2, 2, 2))
    C2 = np.zeros((2,) * 6)
    C3 = np.zeros((2,) * 4)
    for i in np.ndindex(2, 2):
        C[i] = boundary_constants("C", i)
    for i in np.ndindex(*(2,) * 4):
        C1[i] = boundary_constants("C1", i)
        C3[i] = boundary_constants("C3", i)
    for i in np.ndindex(*(2,) * 6):
        C2[i] = boundary_constants("C2", i)
    return C, C1, C2, C3


# --- singular integral operators ------------------------------------------------------


def _second_derivative_kernel(order: int, x: FloatArray, y: FloatArray, vx, vy, Jx, Jy) -> FloatArray:
    """``d_{x_a} d_{y_b} K(x, y)`` for ``x != y``, shape ``(..., 2, 2)`` indexed ``[a, b]``."""
    z = x - y
    r = np.sum(z * z, axis=-1)
    r2 = r[..., None, None]
    d = vx - vy
    zz = z[..., :, None] * z[..., None, :]
    Q = _EYE / r2 - 2.0 * zz / (r2 * r2)                       # Q[a, c]
    if order == 1:
        r4 = r * r
        r6 = r4 * r
        # P[a, b, c] = -2(d_ac z_b + d_ab z_c + d_cb z_a)/|z|^4 + 8 z_a z_c z_b/|z|^6
        P = -2.0 * (np.einsum("ac,...b->...abc", _EYE, z) + np.einsum("ab,...c->...abc", _EYE, z)
                    + np.einsum("cb,...a->...abc", _EYE, z)) / r4[..., None, None, None]
        P += 8.0 * np.einsum("...a,...b,...c->...abc", z, z, z) / r6[..., None, None, None]
        out = np.einsum("...abc,...c->...ab", P, d)
        out += np.einsum("...ac,...cb->...ab", Q, Jy)
        out += np.einsum("...bc,...ca->...ab", Q, Jx)
        return out / TWO_PI
    # second order, through 2 pi hess g = -Q and its z-derivatives
    Hh = -Q                                                     # Hh[a, b] = 2 pi hess g
    # G3[a, b, a'] = d_{z_a'} Hh[a, b]
    G3 = (2.0 * (np.einsum("ab,...c->...abc", _EYE, z) + np.einsum("ac,...b->...abc", _EYE, z)
                 + np.einsum("cb,...a->...abc", _EYE, z)) / (r * r)[..., None, None, None]
          - 8.0 * np.einsum("...a,...b,...c->...abc", z, z, z) / (r**3)[..., None, None, None])
    E = _EYE
    G4 = 2.0 * (np.einsum("ab,cd->abcd", E, E) + np.einsum("ac,bd->abcd", E, E)
                + np.einsum("cb,ad->abcd", E, E)) / (r * r)[..., None, None, None, None]
    t1 = (np.einsum("ab,...c,...d->...abcd", E, z, z) + np.einsum("ac,...b,...d->...abcd", E, z, z)
          + np.einsum("cb,...a,...d->...abcd", E, z, z) + np.einsum("ad,...b,...c->...abcd", E, z, z)
          + np.einsum("bd,...a,...c->...abcd", E, z, z) + np.einsum("cd,...a,...b->...abcd", E, z, z))
    G4 = G4 - 8.0 * t1 / (r**3)[..., None, None, None, None]
    G4 = G4 + 48.0 * np.einsum("...a,...b,...c,...d->...abcd", z, z, z, z) / (r**4)[..., None, None, None, None]
    # -2 pi d_{x_a'} d_{y_b'} K2, indices [a', b']
    out = np.einsum("...abcd,...a,...b->...cd", G4, d, d)
    out += np.einsum("...abc,...ad,...b->...cd", G3, Jy, d)
    out += np.einsum("...abc,...a,...bd->...cd", G3, d, Jy)
    out += np.einsum("...abd,...ac,...b->...cd", G3, Jx, d)
    out += np.einsum("...abd,...a,...bc->...cd", G3, d, Jx)
    out += np.einsum("...ab,...ac,...bd->...cd", Hh, Jx, Jy)
    out += np.einsum("...ab,...bc,...ad->...cd", Hh, Jx, Jy)
    return -out / TWO_PI


def second_derivative_kernel(order: int, v: VelocityFieldModel, x: ArrayLike, y: ArrayLike) -> FloatArray:
    """``d_{x_a} d_{y_b} K(x, y)`` as a ``(..., 2, 2)`` array (pointwise, ``x != y``)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    x, y = np.broadcast_arrays(x, y)
    return _second_derivative_kernel(order, x, y, v(x), v(y), v.jac(x), v.jac(y))


def _local_coefficient(order: int, J: FloatArray) -> FloatArray:
    """Multiplier of ``f(x)`` from the boundary constants, shape ``(..., 2, 2)`` indexed ``[a, b]``."""
    C, C1, C2, C3 = _constant_tables()
    if order == 1:
        # C_{b g} d_a v^g + C^{a r}_{b g} d_r v^g ;  J[g, c] = d_c v^g
        out = np.einsum("bg,...ga->...ab", C, J)
        out += np.einsum("arbg,...gr->...ab", C1, J)
        return out
    # C^{g g' b'}_{a b a'} d_g v^a d_g' v^b + C^{g b'}_{a b} (d_a' v^a d_g v^b + d_a' v^b d_g v^a)
    out = np.einsum("abcghd,...ag,...bh->...cd", C2, J, J)
    out += np.einsum("abgd,...ac,...bg->...cd", C3, J, J)
    out += np.einsum("abgd,...bc,...ag->...cd", C3, J, J)
    return out


def _as_values(f, grid: VorticityGrid | None):
    if isinstance(f, VorticityGrid):
        return f.values, f
    if grid is None:
        raise ValueError("need a grid for raw arrays")
    values = np.asarray(f, dtype=float)
    return values, grid.with_values(values)


def _spectral_ops(grid: VorticityGrid):
    kx, ky = grid.wavenumbers
    k2 = kx * kx + ky * ky
    k2[0, 0] = 1.0
    ik = (1j * kx, 1j * ky)
    grad_g = [1j * kx / k2, 1j * ky / k2]
    for gg in grad_g:
        gg[0, 0] = 0.0
    kk = (kx, ky)
    hess = [[-kk[a] * kk[b] / k2 for b in range(2)] for a in range(2)]
    for a in range(2):
        for b in range(2):
            hess[a][b][0, 0] = 0.0
    return ik, grad_g, hess


def _apply_T(order: int, vnodes: FloatArray, f: FloatArray, ops) -> FloatArray:
    _, grad_g, hess = ops
    conv = lambda mult, u: np.real(np.fft.ifft2(mult * np.fft.fft2(u)))
    if order == 1:
        out = np.zeros_like(f)
        for a in range(2):
            out += vnodes[..., a] * conv(grad_g[a], f) - conv(grad_g[a], vnodes[..., a] * f)
        return out
    out = np.zeros_like(f)
    for a in range(2):
        for b in range(2):
            va, vb = vnodes[..., a], vnodes[..., b]
            out += va * vb * conv(hess[a][b], f)
            out -= 2.0 * va * conv(hess[a][b], vb * f)
            out += conv(hess[a][b], va * vb * f)
    return out


def sio_apply(v: VelocityFieldModel, f, order: int, *, grid: VorticityGrid | None = None,
              method: str = "spectral", points: ArrayLike | None = None,
              dealias: bool = True) -> FloatArray:
    """``(d_a T_{order,v} d_b f)`` for ``a, b`` in ``{0, 1}``.

    ``method="spectral"``: periodic pseudo-spectral evaluation on the whole
    grid, returning shape ``(2, 2, n, n)``; ``f`` is 2/3-dealiased first.
    ``method="pv"``: the principal-value identity at ``points`` (grid
    nodes; default all of them), returning ``(2, 2, P)``: boundary-constant multiple of
    ``f(x)`` minus the lattice sum of ``d_{x_a} d_{y_b} K`` over the other
    cells, with the square-lattice offset of the ``cos 4 theta`` mode removed.
    """
    values, grid = _as_values(f, grid)
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if method == "spectral":
        ops = _spectral_ops(grid)
        ik = ops[0]
        fh = np.fft.fft2(values)
        if dealias:
            k = np.fft.fftfreq(grid.n, d=1.0 / grid.n)
            keep = np.abs(k) < grid.n / 3.0
            fh = fh * (keep[:, None] & keep[None, :])
        vnodes = v(grid.coords)
        out = np.empty((2, 2, grid.n, grid.n))
        for b in range(2):
            db = np.real(np.fft.ifft2(ik[b] * fh))
            Tdb = _apply_T(order, vnodes, db, ops)
            Th = np.fft.fft2(Tdb)
            for a in range(2):
                out[a, b] = np.real(np.fft.ifft2(ik[a] * Th))
        return out
    if method != "pv":
        raise ValueError(f"unknown method {method!r}")
    nodes = grid.coords.reshape(-1, 2)
    fv = values.reshape(-1)
    keep = fv != 0.0
    ys, fy = nodes[keep], fv[keep] * grid.cell_area
    vy, Jy = v(ys), v.jac(ys)
    pts = nodes if points is None else np.asarray(points, dtype=float).reshape(-1, 2)
    off = (pts + grid.L) / grid.h
    if np.max(np.abs(off - np.rint(off)), initial=0.0) > 1e-9:
        raise ValueError("the principal-value route needs points on grid nodes")
    f_at = grid.interpolate(pts) if points is not None else fv
    vx, Jx = v(pts), v.jac(pts)
    kappa4, lambda4 = lattice_constants()
    out = np.empty((2, 2, pts.shape[0]))
    for p in range(pts.shape[0]):
        z = pts[p] - ys
        far = np.sum(z * z, axis=-1) > (1e-12 * grid.h) ** 2
        ker = _second_derivative_kernel(order, np.broadcast_to(pts[p], ys[far].shape), ys[far],
                                        np.broadcast_to(vx[p], vy[far].shape), vy[far],
                                        np.broadcast_to(Jx[p], Jy[far].shape), Jy[far])
        lattice_sum = np.einsum("mab,m->ab", ker, fy[far])
        # homogeneous part at x: linear v with gradient J(x), unit-distance samples
        u = _UNIT
        xs = np.zeros((16, 2))
        ys_u = -u
        lin_vx = np.zeros((16, 2))
        lin_vy = ys_u @ Jx[p].T
        Jp = np.broadcast_to(Jx[p], (16, 2, 2))
        omega = _second_derivative_kernel(order, xs, ys_u, lin_vx, lin_vy, Jp, Jp)
        _, c4 = _angular_modes(np.moveaxis(omega, 0, -1))
        pv = lattice_sum - lambda4 * c4 * f_at[p]
        local = _local_coefficient(order, Jx[p]) * f_at[p]
        out[:, :, p] = local - pv
    return out


def sio_adjoint_apply(v: VelocityFieldModel, G: FloatArray, order: int, grid: VorticityGrid) -> FloatArray:
    """``sum_{a,b} (d_a T d_b)^* G_ab = sum_{a,b} d_b T d_a G_ab`` (spectral, ``T`` self-adjoint)."""
    ops = _spectral_ops(grid)
    ik = ops[0]
    vnodes = v(grid.coords)
    out = np.zeros((grid.n, grid.n))
    for a in range(2):
        for b in range(2):
            da = np.real(np.fft.ifft2(ik[a] * np.fft.fft2(G[a, b])))
            T = _apply_T(order, vnodes, da, ops)
            out += np.real(np.fft.ifft2(ik[b] * np.fft.fft2(T)))
    return out


def smooth_test_function(grid: VorticityGrid, rng: np.random.Generator, bumps: int = 6,
                         width: float = 0.4, extent: float = 0.35) -> FloatArray:
    """Random sum of Gaussian bumps in the inner part of the box, unit ``L^2`` norm."""
    c = grid.coords
    f = np.zeros((grid.n, grid.n))
    for _ in range(bumps):
        x0 = rng.uniform(-extent * grid.L, extent * grid.L, size=2)
        w = width * rng.uniform(0.6, 1.4)
        f += rng.normal() * np.exp(-0.5 * np.sum((c - x0) ** 2, axis=-1) / w**2)
    return f / np.sqrt(np.sum(f * f) * grid.cell_area)


@dataclass
class ProbeReport:
    order: int
    grid_n: int
    norm_estimate: float
    fitted_C: float
    refinement_ratio: Optional[float] = None

    def to_record(self) -> dict:
        return {"order": self.order, "grid_n": self.grid_n, "norm_estimate": self.norm_estimate,
                "fitted_C": self.fitted_C, "refinement_ratio": self.refinement_ratio}


def operator_norm_probe(v: VelocityFieldModel, order: int, grid: VorticityGrid, *, seed: int = 0,
                        tests: int = 20, iterations: int = 10, lip: float | None = None) -> ProbeReport:
    """Estimate ``||grad T grad||_{L^2 -> L^2}`` from random smooth tests and power iteration.

    The best of ``tests`` random unit functions seeds ``iterations`` steps
    of power iteration on ``A^* A``.  ``fitted_C`` divides by ``lip^order``.
    """
    rng = np.random.default_rng(seed)
    A = grid.cell_area

    def norm_of(G):
        return float(np.sqrt(np.sum(G * G) * A))

    best, best_f = -1.0, None
    for _ in range(tests):
        f = smooth_test_function(grid, rng)
        val = norm_of(sio_apply(v, f, order, grid=grid))
        if val > best:
            best, best_f = val, f
    f = best_f
    est = best
    for _ in range(iterations):
        g = sio_adjoint_apply(v, sio_apply(v, f, order, grid=grid), order, grid)
        nrm = float(np.sqrt(np.sum(g * g) * A))
        if nrm == 0.0:
            break
        f = g / nrm
        est = max(est, norm_of(sio_apply(v, f, order, grid=grid)))
    lip = v.lip if lip is None else lip
    scale = lip**order if lip else 1.0
    return ProbeReport(order, grid.n, est, est / scale if scale else float("nan"))


def refinement_study(v: VelocityFieldModel, order: int, L: float, sizes=(128, 256, 512), *,
                     seed: int = 0, tests: int = 20, iterations: int = 10) -> list[ProbeReport]:
    """Probe reports on successively refined grids of the box ``[-L, L)^2``.

    The random test functions depend only on the seed and the physical
    geometry, so every resolution probes the same family.
    """
    reports = []
    prev = None
    for n in sizes:
        grid = VorticityGrid(L, np.zeros((n, n)))
        rep = operator_norm_probe(v, order, grid, seed=seed, tests=tests, iterations=iterations)
        if prev is not None:
            rep.refinement_ratio = rep.fitted_C / prev.fitted_C
        reports.append(rep)
        prev = rep
    return reports
