"""Modulated energy of an empirical measure against a grid density.

For positions ``x_1..x_N`` (weights ``a = 1/N``) and a probability density
``xi`` the renormalized energy with the diagonal removed is

    F_avg = term_pp - 2 term_px + term_xx,
    term_pp = sum_{i != j} a^2 g(x_i - x_j),
    term_px = sum_i a int g(x_i - y) xi(y) dy,
    term_xx = int int g(x - y) xi(x) xi(y) dx dy,

and ``F_N = N^2 F_avg``.  Integrals against ``xi`` use the midpoint rule on
the grid with each cell replaced by an equal-area disc where the kernel is
singular (see :mod:`vortexmf.coulomb`).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .coulomb import (
    TWO_PI,
    disc_gradient,
    disc_potential,
    disc_radius,
    g_radial,
)
from .euler_pde import VorticityGrid, free_convolve, log_kernel_samples, offset_lattice

FloatArray = NDArray[np.float64]


class BoxSupportError(ValueError):
    """The density reaches the outer half of its box."""


def _positions(x) -> FloatArray:
    x = getattr(x, "positions", x)
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"positions must have shape (N, 2), got {x.shape}")
    return x


def _pair_distances(x: FloatArray) -> FloatArray:
    d = x[:, None, :] - x[None, :, :]
    return np.hypot(d[..., 0], d[..., 1])


def min_distance(positions) -> float:
    x = _positions(positions)
    if x.shape[0] < 2:
        return np.inf
    r = _pair_distances(x)
    np.fill_diagonal(r, np.inf)
    return float(r.min())


def _offdiag_log_sum(x: FloatArray) -> float:
    """``sum_{i != j} g(x_i - x_j)``; raises on coincident points."""
    N = x.shape[0]
    if N < 2:
        return 0.0
    r = _pair_distances(x)
    iu = np.triu_indices(N, 1)
    ru = r[iu]
    if np.any(ru == 0.0):
        k = int(np.argmin(ru))
        raise ValueError(f"vortices {iu[0][k]} and {iu[1][k]} coincide")
    return float(2.0 * np.sum(g_radial(ru)))


def potential_at(grid: VorticityGrid, points: ArrayLike, max_pairs: int = 4_000_000) -> FloatArray:
    """``(g * xi)(p)`` at arbitrary points, corrected midpoint rule."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    mask = grid.values != 0.0
    cells = grid.coords[mask]
    dens = grid.values[mask]
    rho = disc_radius(grid.h)
    out = np.zeros(p.shape[0])
    if cells.size == 0:
        return out
    chunk = max(1, max_pairs // cells.shape[0])
    for s in range(0, p.shape[0], chunk):
        d = p[s : s + chunk, None, :] - cells[None, :, :]
        r = np.hypot(d[..., 0], d[..., 1])
        out[s : s + chunk] = disc_potential(r, rho) @ dens
    return out


def check_support(grid: VorticityGrid, tol: float = 1e-3) -> None:
    if grid.outer_peak_ratio() > tol:
        raise BoxSupportError("density reaches the outer half of the box; enlarge L")


@dataclass
class EnergyReport:
    """Modulated energy and its diagnostics at one time."""

    F_avg: float
    term_pp: float
    term_px: float
    term_xx: float
    min_dist: float
    t: float = 0.0
    smeared: Optional[float] = None
    r_vec: Optional[FloatArray] = None
    close_pairs: Optional[int] = None
    hs_distance: Optional[float] = None

    def recomputed(self) -> float:
        return self.term_pp - 2.0 * self.term_px + self.term_xx

    def to_record(self) -> dict:
        return {
            "t": float(self.t),
            "F_avg": float(self.F_avg),
            "term_pp": float(self.term_pp),
            "term_px": float(self.term_px),
            "term_xx": float(self.term_xx),
            "smeared": None if self.smeared is None else float(self.smeared),
            "close_pairs": None if self.close_pairs is None else int(self.close_pairs),
            "hs": None if self.hs_distance is None else float(self.hs_distance),
            "min_dist": float(self.min_dist),
        }


def energy_terms(positions, grid: VorticityGrid | None, xi_weight: float = 1.0,
                 cross: str = "quadrature") -> tuple[float, float, float]:
    """``(term_pp, term_px, term_xx)``.

    ``xi_weight`` scales the density (``0`` gives the particle-only
    diagnostic in which ``F_avg = term_pp``).  ``cross="quadrature"`` sums
    the corrected midpoint rule at each particle; ``cross="interpolated"``
    evaluates a cubic spline of the grid potential instead, which is twice
    continuously differentiable in the particle positions (the midpoint rule
    is only accurate in value: its Hessian in ``x_i`` oscillates on the cell
    scale).
    """
    if cross not in ("quadrature", "interpolated"):
        raise ValueError(f"unknown cross-term method {cross!r}")
    x = _positions(positions)
    N = x.shape[0]
    a = 1.0 / N
    pp = a * a * _offdiag_log_sum(x)
    if grid is None or xi_weight == 0.0:
        return pp, 0.0, 0.0
    phi = log_potential_grid(grid)
    if cross == "quadrature":
        px = xi_weight * a * float(np.sum(potential_at(grid, x)))
    else:
        px = xi_weight * a * float(np.sum(_spline(phi, grid, x)))
    xx = xi_weight**2 * float(np.sum(grid.values * phi) * grid.cell_area)
    return pp, px, xx


def log_potential_grid(grid: VorticityGrid) -> FloatArray:
    return free_convolve(grid.values, log_kernel_samples(grid.n, grid.h))


def modulated_energy(
    positions,
    grid: VorticityGrid | None,
    *,
    xi_weight: float = 1.0,
    t: float | None = None,
    eps3: float | None = None,
    s: float | None = None,
    support_tol: float | None = 1e-3,
    cross: str = "quadrature",
) -> EnergyReport:
    """``F_avg`` and its three terms; optional close-pair count and ``H^s`` distance."""
    x = _positions(positions)
    if grid is not None and support_tol is not None and xi_weight != 0.0:
        check_support(grid, support_tol)
    pp, px, xx = energy_terms(x, grid, xi_weight, cross)
    rep = EnergyReport(
        F_avg=pp - 2.0 * px + xx,
        term_pp=pp,
        term_px=px,
        term_xx=xx,
        min_dist=min_distance(x),
        t=float(t if t is not None else (grid.t if grid is not None else 0.0)),
    )
    if eps3 is not None:
        rep.close_pairs = close_pairs(x, eps3)
    if s is not None and grid is not None:
        rep.hs_distance = sobolev_distance(x, grid, s)
    return rep


def modulated_energy_N(positions, grid: VorticityGrid | None) -> float:
    """``F_N`` assembled from unweighted sums (``N^2 F_avg`` by a separate route)."""
    x = _positions(positions)
    N = x.shape[0]
    total = _offdiag_log_sum(x)
    if grid is not None:
        total -= 2.0 * N * float(np.sum(potential_at(grid, x)))
        total += N * N * float(np.sum(grid.values * log_potential_grid(grid)) * grid.cell_area)
    return total


# --- truncation radii and close pairs -------------------------------------------


def r_vec(positions, eps1: float) -> FloatArray:
    """``r_i = min(min_{j != i} |x_i - x_j| / 4, eps1)``."""
    if not 0.0 < eps1 < 1.0:
        raise ValueError("eps1 must lie in (0, 1)")
    x = _positions(positions)
    if x.shape[0] < 2:
        return np.full(x.shape[0], float(eps1))
    r = _pair_distances(x)
    np.fill_diagonal(r, np.inf)
    return np.minimum(0.25 * r.min(axis=1), eps1)


def close_pairs(positions, eps3: float) -> int:
    """Number of ordered pairs ``(i, j)``, ``i != j``, with ``|x_i - x_j| <= eps3``."""
    if not eps3 > 0.0:
        raise ValueError("eps3 must be positive")
    x = _positions(positions)
    r = _pair_distances(x)
    np.fill_diagonal(r, np.inf)
    return int(np.count_nonzero(r <= eps3))


# --- smeared energy ----------------------------------------------------------------


def _circle_pair_energy(xi, ei, xj, ej, M: int = 512) -> float:
    """``int int g d delta_i^(ei) d delta_j^(ej)`` for two smeared masses."""
    d = np.linalg.norm(np.asarray(xi) - np.asarray(xj))
    if d >= ei + ej:
        return float(g_radial(d))
    theta = TWO_PI * np.arange(M) / M
    nodes = np.asarray(xj) + ej * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    r = np.hypot(*(nodes - np.asarray(xi)).T)
    return float(np.mean(g_radial(np.maximum(r, ei))))


def _local_truncation_integral(grid: VorticityGrid, center, eta: float,
                               nr: int = 24, nt: int = 32) -> float:
    """``int_{B(center, eta)} (g~(eta) - g(center - y)) xi(y) dy`` by polar quadrature."""
    t, w = np.polynomial.legendre.leggauss(nr)
    r = 0.5 * eta * (t + 1.0)
    wr = 0.5 * eta * w
    theta = TWO_PI * np.arange(nt) / nt
    pts = np.asarray(center)[None, None, :] + r[:, None, None] * np.stack(
        [np.cos(theta), np.sin(theta)], axis=-1
    )[None, :, :]
    vals = grid.interpolate(pts.reshape(-1, 2)).reshape(nr, nt)
    kernel = np.log(r / eta) / TWO_PI
    return float(np.sum(wr * r * kernel * vals.mean(axis=1)) * TWO_PI)


@dataclass
class SmearedResult:
    value: float
    overlapping: bool
    inside_flags: int = 0


def smeared_energy(
    positions,
    etas: ArrayLike,
    grid: VorticityGrid | None,
    *,
    method: str = "pairs",
    return_details: bool = False,
    **kwargs,
):
    """``int |grad H_{N,eta}|^2 = int int g d(N xi - sum_i delta_i^(eta_i))^2``.

    ``method="pairs"`` expands the square: smeared self-energies ``g~(eta_i)``,
    circle-circle interactions (exactly ``g(x_i - x_j)`` for disjoint circles),
    the cross term with ``int g_{eta_i}(x_i - y) xi(y) dy`` and the grid
    self-energy.  ``method="field"`` integrates ``|grad H|^2`` over the box
    directly (see :func:`field_energy`).  ``grid=None`` means ``xi = 0``.
    """
    x = _positions(positions)
    N = x.shape[0]
    etas = np.broadcast_to(np.asarray(etas, dtype=float), (N,)).copy()
    if np.any(~(etas > 0.0)):
        raise ValueError("truncation radii must be positive")
    r = _pair_distances(x)
    overlapping = bool(np.any((r < etas[:, None] + etas[None, :]) & ~np.eye(N, dtype=bool)))
    if method == "field":
        value = field_energy(x, etas, grid, **kwargs)
    elif method == "pairs":
        value = float(np.sum(g_radial(etas)))
        for i in range(N):
            for j in range(i + 1, N):
                if r[i, j] >= etas[i] + etas[j]:
                    value += 2.0 * float(g_radial(r[i, j]))
                else:
                    value += 2.0 * _circle_pair_energy(x[i], etas[i], x[j], etas[j])
        if grid is not None:
            cross = float(np.sum(potential_at(grid, x)))
            cross += sum(_local_truncation_integral(grid, x[i], etas[i]) for i in range(N))
            value += -2.0 * N * cross
            value += N * N * float(np.sum(grid.values * log_potential_grid(grid)) * grid.cell_area)
    else:
        raise ValueError(f"unknown method {method!r}")
    if return_details:
        return SmearedResult(value, overlapping)
    return value


def _grad_kernel_samples(n: int, h: float) -> FloatArray:
    """``h^2 grad g`` on the offset lattice (zero at the origin), shape ``(2, 2n, 2n)``."""
    Z = offset_lattice(n, h)
    r2 = Z[..., 0] ** 2 + Z[..., 1] ** 2
    r2[0, 0] = 1.0
    K = -h * h * Z / (TWO_PI * r2[..., None])
    K[0, 0] = 0.0
    return np.moveaxis(K, -1, 0)


def grid_field_gradient(grid: VorticityGrid) -> FloatArray:
    """``grad (g * xi)`` at the nodes by the corrected midpoint rule, shape ``(n, n, 2)``."""
    K = _grad_kernel_samples(grid.n, grid.h)
    return np.stack([free_convolve(grid.values, K[c]) for c in range(2)], axis=-1)


def _spline(values: FloatArray, grid: VorticityGrid, points: FloatArray) -> FloatArray:
    from scipy import ndimage

    idx = ((points + grid.L) / grid.h).T
    return ndimage.map_coordinates(values, idx, order=3, mode="grid-wrap")


def _bump(r: FloatArray, r0: float, r1: float) -> FloatArray:
    """Smooth radial weight: 1 for ``r <= r0``, 0 for ``r >= r1``."""
    from .euler_pde import _smooth_step

    return 1.0 - _smooth_step((r - r0) / (r1 - r0))


def field_energy(
    positions,
    etas: ArrayLike,
    grid: VorticityGrid | None,
    *,
    L: float | None = None,
    n: int | None = None,
    patch_cells: float = 12.0,
    nr: int = 48,
    nt: int = 64,
    refine: float = 16.0,
    max_sub: int = 64,
    tail: bool = True,
) -> float:
    """``int_box |grad H|^2`` by direct quadrature of the field.

    A smooth partition of unity splits the box into polar patches around the
    vortices (Gauss-Legendre in ``log r`` outside each circle, in ``r``
    inside, trapezoid in angle) and a remainder that vanishes near the
    vortices and is integrated by the midpoint rule on the grid nodes.
    Patches must not overlap: their outer radius is at most half the distance
    to the nearest other vortex.  Grid cells are subdivided according to their
    distance from the nearest vortex.  ``tail`` adds the dipole far field
    outside the box.
    """
    x = _positions(positions)
    N = x.shape[0]
    etas = np.broadcast_to(np.asarray(etas, dtype=float), (N,))
    if grid is None:
        if L is None or n is None:
            raise ValueError("need L and n when xi = 0")
        grid = VorticityGrid(L, np.zeros((n, n)))
        has_xi = False
    else:
        has_xi = True
    h = grid.h
    if N > 1:
        rr = _pair_distances(x)
        np.fill_diagonal(rr, np.inf)
        nearest = rr.min(axis=1)
    else:
        nearest = np.full(N, np.inf)
    r1 = np.minimum(etas + patch_cells * h, 0.5 * nearest)
    r0 = np.maximum(etas + 0.25 * (r1 - etas), r1 - 0.6 * patch_cells * h)
    if np.any(r0 <= etas) or np.any(r1 <= r0):
        raise ValueError("vortices too close for non-overlapping quadrature patches")

    def grad_H(p: FloatArray, mu_grad: FloatArray | None) -> FloatArray:
        d = p[:, None, :] - x[None, :, :]
        r2 = d[..., 0] ** 2 + d[..., 1] ** 2
        outside = r2 >= etas[None, :] ** 2
        safe = np.where(outside, r2, 1.0)
        out = np.where(outside[..., None], -d / (TWO_PI * safe[..., None]), 0.0).sum(axis=1)
        if mu_grad is not None:
            out = out - N * mu_grad
        return out

    def remainder_density(p: FloatArray, mu_grad: FloatArray | None) -> FloatArray:
        weight = np.ones(p.shape[0])
        for i in range(N):
            weight -= _bump(np.hypot(*(p - x[i]).T), r0[i], r1[i])
        gh = grad_H(p, mu_grad)
        return weight * np.sum(gh * gh, axis=1)

    # remainder on the grid nodes; cells near a vortex are subdivided so that
    # the sub-cell spacing resolves the smallest patch
    c = grid.coords.reshape(-1, 2)
    mu_field = grid_field_gradient(grid) if has_xi else None
    dens = remainder_density(c, mu_field.reshape(-1, 2) if has_xi else None)
    # local length scale of the integrand at each cell: distance to the
    # nearest vortex, but never below that vortex's patch width
    dist = np.full(c.shape[0], np.inf)
    width = np.full(c.shape[0], np.inf)
    for i in range(N):
        di = np.hypot(*(c - x[i]).T)
        closer = di < dist
        dist = np.where(closer, di, dist)
        width = np.where(closer, r1[i] - etas[i], width)
    scale = np.maximum(dist - 0.75 * h, width)
    msub = np.clip(np.ceil(refine * h / scale), 1, max_sub).astype(int)
    for m in np.unique(msub):
        if m == 1:
            continue
        off = (np.arange(m) + 0.5) / m - 0.5
        OX, OY = np.meshgrid(off * h, off * h, indexing="ij")
        sub = np.stack([OX.ravel(), OY.ravel()], axis=-1)
        idx = np.flatnonzero(msub == m)
        chunk = max(1, 200_000 // (m * m))
        for s in range(0, idx.size, chunk):
            cells = idx[s : s + chunk]
            pts = (c[cells, None, :] + sub[None, :, :]).reshape(-1, 2)
            mu = None
            if has_xi:
                mu = np.stack([_spline(mu_field[..., k], grid, pts) for k in range(2)], axis=-1)
            dens[cells] = remainder_density(pts, mu).reshape(cells.size, m * m).mean(axis=1)
    total = float(np.sum(dens) * grid.cell_area)
    if tail:
        # outside the box the field is that of the net dipole p, with
        # |grad H|^2 = |p|^2 / (2 pi r^2)^2 and int_{outside} r^-4 = (pi + 2) / (2 L^2)
        dip = x.sum(axis=0)
        if has_xi:
            dip = dip - N * grid.center_of_vorticity() * grid.mass
        total += float(dip @ dip) * (np.pi + 2.0) / (8.0 * np.pi**2 * grid.L**2)

    # polar patches
    tg, wg = np.polynomial.legendre.leggauss(nr)
    theta = TWO_PI * np.arange(nt) / nt
    circ = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    from .coulomb import grid_gradient_potential

    for i in range(N):
        # inner disc [0, eta]
        rin = 0.5 * etas[i] * (tg + 1.0)
        win = 0.5 * etas[i] * wg * rin
        # outer annulus [eta, r1] in log r
        s0, s1 = np.log(etas[i]), np.log(r1[i])
        rout = np.exp(s0 + 0.5 * (s1 - s0) * (tg + 1.0))
        wout = 0.5 * (s1 - s0) * wg * rout * rout
        for radii, wts in ((rin, win), (rout, wout)):
            pts = x[i] + radii[:, None, None] * circ[None, :, :]
            flat = pts.reshape(-1, 2)
            mu = grid_gradient_potential(grid.values, grid.L, flat) if has_xi else None
            gh = grad_H(flat, mu).reshape(nr, nt, 2)
            dens = np.sum(gh * gh, axis=-1) * _bump(radii, r0[i], r1[i])[:, None]
            total += float(np.sum(wts * dens.mean(axis=1)) * TWO_PI)
    return total


# --- Sobolev distance ---------------------------------------------------------------


def _weight(k2: FloatArray, s: float) -> FloatArray:
    return (1.0 + k2) ** s


def sobolev_distance(positions, grid: VorticityGrid, s: float = -2.0, *, pad: int = 2,
                     tail: bool = True) -> float:
    """``|| (1/N) sum_i delta_{x_i} - xi ||_{H^s}`` for ``s < -1``.

    The grid is zero-padded to a box ``pad`` times larger; modes up to the
    grid Nyquist radius ``pi/h`` are summed (lattice spacing ``pi/(pad L)``),
    particles contributing exact phases ``e^{-ik.x_i}/N``.  Beyond the Nyquist
    radius the mean of ``|mu_hat|^2`` over the outermost shell is continued
    against the exact tail of ``<k>^{2s}``.
    """
    if not s < -1.0:
        raise ValueError("need s < -1 for the particle part to be summable")
    x = _positions(positions)
    N = x.shape[0]
    n, L, h = grid.n, grid.L, grid.h
    m = pad * n
    dk = TWO_PI / (2.0 * pad * L)
    k = dk * np.fft.fftfreq(m, d=1.0 / m)
    padded = np.zeros((m, m))
    padded[:n, :n] = grid.values
    phase = np.exp(1j * k * L)
    xh = h * h * np.fft.fft2(padded) * phase[:, None] * phase[None, :]
    A = np.exp(-1j * np.outer(x[:, 0], k))
    B = np.exp(-1j * np.outer(x[:, 1], k))
    ph = (A.T @ B) / N
    KX, KY = np.meshgrid(k, k, indexing="ij")
    k2 = KX * KX + KY * KY
    K = np.pi / h
    inside = k2 <= K * K
    diff2 = np.abs(ph - xh) ** 2
    total = float(np.sum(_weight(k2[inside], s) * diff2[inside]) * dk * dk)
    if tail:
        shell = inside & (k2 > (0.8 * K) ** 2)
        mean_shell = float(diff2[shell].mean()) if np.any(shell) else 0.0
        total += mean_shell * np.pi * (1.0 + K * K) ** (s + 1.0) / (-s - 1.0)
    return float(np.sqrt(total))


# --- bound chains ---------------------------------------------------------------------


def lower_bound_chain(positions, etas, grid: VorticityGrid | None, p: float = np.inf,
                      smeared: float | None = None) -> dict:
    """Both sides of the truncated-interaction lower bound (constant left free).

    Returns ``lhs = sum_{i != j} (g(x_i - x_j) - g~(eta_i))_+`` and the pieces
    of ``F_N - int|grad H|^2 + sum g~(eta_i) + C N ||xi||_p sum eta_i^{2(p-1)/p}``.
    """
    x = _positions(positions)
    N = x.shape[0]
    etas = np.broadcast_to(np.asarray(etas, dtype=float), (N,))
    r = _pair_distances(x)
    np.fill_diagonal(r, np.inf)
    lhs = float(np.sum(np.maximum(g_radial(r) - g_radial(etas)[:, None], 0.0)))
    F_N = modulated_energy_N(x, grid)
    if smeared is None:
        smeared = smeared_energy(x, etas, grid)
    expo = 2.0 if np.isinf(p) else 2.0 * (p - 1.0) / p
    norm = 0.0 if grid is None else _lp(grid, p)
    return {
        "lhs": lhs,
        "energy_part": F_N - smeared + float(np.sum(g_radial(etas))),
        "error_scale": N * norm * float(np.sum(etas**expo)),
        "F_N": F_N,
        "smeared": smeared,
    }


def _lp(grid: VorticityGrid, p: float) -> float:
    v = np.abs(grid.values)
    if np.isinf(p):
        return float(v.max())
    return float((np.sum(v**p) * grid.cell_area) ** (1.0 / p))
