"""Stochastic point-vortex dynamics with transport noise.

Vortices carry identical intensities ``a = 1/N`` and move by

    dx_i = sum_{j != i} a grad_perp g(x_i - x_j) dt + sum_k sigma_k(x_i) o dW^k,

where ``o`` is the Stratonovich product and ``grad_perp = (-d2, d1)``.  The
additive-noise comparison system replaces the transport term with independent
planar Brownian motions of intensity ``sqrt(2 nu)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .coulomb import TWO_PI
from .noise import BrownianPath, NoiseModel, sigma_all

FloatArray = NDArray[np.float64]

COLLISION_FLOOR = 1e-10


class SingularConfigurationError(ValueError):
    """Two vortices occupy the same position."""

    def __init__(self, i: int, j: int):
        super().__init__(f"vortices {i} and {j} coincide")
        self.pair = (i, j)


class CollisionError(RuntimeError):
    """Minimum pair distance fell below the hard floor."""

    def __init__(self, distance: float, t: float | None = None, pair=None):
        where = "" if t is None else f" at t={t:.6g}"
        super().__init__(f"vortex collision{where}: min pair distance {distance:.3e}")
        self.distance = distance
        self.t = t
        self.pair = pair


@dataclass(frozen=True, eq=False)
class VortexEnsemble:
    """``N`` vortex positions with uniform weights ``1/N``."""

    positions: FloatArray

    def __post_init__(self):
        x = np.array(self.positions, dtype=float)
        if x.ndim != 2 or x.shape[1] != 2 or x.shape[0] < 1:
            raise ValueError(f"positions must have shape (N, 2), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("positions must be finite")
        x.setflags(write=False)
        object.__setattr__(self, "positions", x)

    @property
    def N(self) -> int:
        return self.positions.shape[0]

    @property
    def a(self) -> float:
        return 1.0 / self.N

    def moved(self, positions: ArrayLike) -> "VortexEnsemble":
        return VortexEnsemble(np.asarray(positions, dtype=float))


@dataclass(frozen=True)
class StepStats:
    dt: float
    min_distance: float
    max_drift: float
    noise_norm: float


def _pair_sums(x: FloatArray, blob: float = 0.0, chunk: int = 512):
    """Point-vortex velocities (without the weight) and the closest pair.

    Returns ``(sum_{j != i} grad_perp g(x_i - x_j), min distance, (i, j))``.
    """
    N = x.shape[0]
    if N < 2:
        return np.zeros_like(x), np.inf, None
    v = np.zeros_like(x)
    dmin2 = np.inf
    pair = None
    for s in range(0, N, chunk):
        xi = x[s : s + chunk]
        d = xi[:, None, :] - x[None, :, :]
        r2 = d[..., 0] ** 2 + d[..., 1] ** 2
        rows = np.arange(xi.shape[0])
        r2[rows, s + rows] = np.inf
        k = int(np.argmin(r2))
        i, j = divmod(k, N)
        if r2[i, j] < dmin2:
            dmin2 = float(r2[i, j])
            pair = (s + i, j)
        # coincident pairs give 0 * inf here; callers reject them via the min distance
        with np.errstate(divide="ignore", invalid="ignore"):
            denom = 1.0 / (TWO_PI * (r2 + blob * blob))
            v[s : s + chunk, 0] = np.sum(d[..., 1] * denom, axis=1)
            v[s : s + chunk, 1] = np.sum(-d[..., 0] * denom, axis=1)
    return v, float(np.sqrt(dmin2)), pair


def _velocity(ensemble: "VortexEnsemble", blob: float = 0.0):
    """``(a * pair sums, min distance, closest pair)``, cached on the ensemble."""
    cache = ensemble.__dict__.get("_velocity_cache")
    if cache is not None and cache[0] == blob:
        return cache[1]
    v, dmin, pair = _pair_sums(ensemble.positions, blob)
    result = (ensemble.a * v, dmin, pair)
    object.__setattr__(ensemble, "_velocity_cache", (blob, result))
    return result


def _check_distinct(dmin: float, pair) -> None:
    if pair is not None and dmin == 0.0:
        raise SingularConfigurationError(*pair)


def drift(ensemble: VortexEnsemble, blob: float = 0.0) -> FloatArray:
    """Velocities ``v_i = sum_{j != i} a grad_perp g(x_i - x_j)``.

    ``blob > 0`` replaces ``|x|^2`` by ``|x|^2 + blob^2`` in the kernel.  This
    regularization is not part of the exact system and is off by default.
    """
    v, dmin, pair = _velocity(ensemble, blob)
    if blob == 0.0:
        _check_distinct(dmin, pair)
    return v.copy()


def min_pair_distance(positions: ArrayLike) -> float:
    x = np.asarray(positions, dtype=float)
    if x.shape[0] < 2:
        return np.inf
    return _pair_sums(x)[1]


def interaction_energy(ensemble: VortexEnsemble) -> float:
    """``sum_{i != j} a^2 g(x_i - x_j)``, conserved by the deterministic flow."""
    x = ensemble.positions
    d = x[:, None, :] - x[None, :, :]
    r = np.hypot(d[..., 0], d[..., 1])
    iu = np.triu_indices(ensemble.N, 1)
    return float(2.0 * ensemble.a**2 * np.sum(-np.log(r[iu])) / TWO_PI)


def center_of_vorticity(ensemble: VortexEnsemble) -> FloatArray:
    return ensemble.a * ensemble.positions.sum(axis=0)


def _noise_displacement(noise: NoiseModel, x: FloatArray, dW: FloatArray) -> FloatArray:
    if noise.K == 0:
        return np.zeros_like(x)
    return np.einsum("k,kij->ij", dW, sigma_all(noise, x))


def step_stratonovich(
    ensemble: VortexEnsemble,
    noise: NoiseModel,
    path: BrownianPath | None,
    n: int,
    dt: float,
    *,
    dW: ArrayLike | None = None,
    blob: float = 0.0,
    floor: float = COLLISION_FLOOR,
) -> tuple[VortexEnsemble, StepStats]:
    """One stochastic Heun step, consistent with the Stratonovich integral.

    The predictor uses drift and noise at the start point; the corrector
    averages both at the start and predicted points.  Increments come from
    ``path`` at step ``n`` unless given explicitly in ``dW``.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    if dW is None:
        dW = path.step_increments(noise.K, n, dt) if noise.K else np.zeros(0)
    dW = np.asarray(dW, dtype=float)
    x = ensemble.positions
    a = ensemble.a
    v0, d0, pair0 = _velocity(ensemble, blob)
    if blob == 0.0:
        _check_distinct(d0, pair0)
    if d0 < floor:
        raise CollisionError(d0, pair=pair0)
    s0 = _noise_displacement(noise, x, dW)
    xp = x + v0 * dt + s0
    vp = a * _pair_sums(xp, blob)[0]
    sp = _noise_displacement(noise, xp, dW)
    x1 = x + 0.5 * (v0 + vp) * dt + 0.5 * (s0 + sp)
    new = VortexEnsemble(x1)
    _, dmin, pair = _velocity(new, blob)
    if dmin < floor:
        raise CollisionError(dmin, pair=pair)
    stats = StepStats(
        dt=dt,
        min_distance=dmin,
        max_drift=float(np.max(np.hypot(v0[:, 0], v0[:, 1]))),
        noise_norm=float(np.linalg.norm(dW)),
    )
    return new, stats


def step_additive(
    ensemble: VortexEnsemble,
    nu: float,
    path2d: BrownianPath | None,
    n: int,
    dt: float,
    *,
    dB: ArrayLike | None = None,
    floor: float = COLLISION_FLOOR,
) -> VortexEnsemble:
    """Euler-Maruyama step of the additive-noise system ``dx_i = v_i dt + sqrt(2 nu) dB_i``."""
    if nu < 0.0:
        raise ValueError("viscosity must be nonnegative")
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    x = ensemble.positions
    x1 = x + drift(ensemble) * dt
    if nu > 0.0:
        if dB is None:
            dB = path2d.vector_increments(ensemble.N, n, dt)
        x1 = x1 + np.sqrt(2.0 * nu) * np.asarray(dB, dtype=float)
    new = VortexEnsemble(x1)
    _, dmin, pair = _velocity(new)
    if dmin < floor:
        raise CollisionError(dmin, pair=pair)
    return new


@dataclass(frozen=True)
class DtController:
    """``dt = min(dt_max, c_cfl * d_min / V_max)``."""

    dt_max: float = 1e-2
    c_cfl: float = 0.1
    dt_min: float = 1e-12

    def __call__(self, d_min: float, v_max: float) -> float:
        dt = self.dt_max
        if v_max > 0.0 and np.isfinite(d_min):
            dt = min(dt, self.c_cfl * d_min / v_max)
        return max(dt, self.dt_min)


@dataclass
class Trajectory:
    times: list[float] = field(default_factory=list)
    frames: list[FloatArray] = field(default_factory=list)
    stats: list[StepStats] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        """Write ``t, i, x, y`` rows for every stored frame."""
        from .io import atomic_open

        with atomic_open(path) as fh:
            w = csv.writer(fh)
            w.writerow(["t", "i", "x", "y"])
            for t, frame in zip(self.times, self.frames):
                for i, (px, py) in enumerate(frame):
                    w.writerow([repr(float(t)), i, repr(float(px)), repr(float(py))])


def next_dt(ensemble: VortexEnsemble, controller: DtController, blob: float = 0.0) -> float:
    if ensemble.N < 2:
        return controller.dt_max
    v, dmin, _ = _velocity(ensemble, blob)
    return controller(dmin, float(np.max(np.hypot(v[:, 0], v[:, 1]))))


def run(
    ensemble: VortexEnsemble,
    noise: NoiseModel,
    path: BrownianPath | None,
    T: float,
    controller: DtController | None = None,
    *,
    stride: int = 1,
    blob: float = 0.0,
    floor: float = COLLISION_FLOOR,
    fixed_dt: float | None = None,
) -> tuple[VortexEnsemble, Trajectory]:
    """Integrate to time ``T`` with adaptive steps; frames stored every ``stride`` steps.

    ``fixed_dt`` bypasses the controller (the last step is shortened to land on ``T``).
    """
    controller = controller or DtController()
    traj = Trajectory(times=[0.0], frames=[ensemble.positions.copy()])
    t = 0.0
    n = 0
    while t < T * (1.0 - 1e-14):
        dt = fixed_dt if fixed_dt is not None else next_dt(ensemble, controller, blob)
        dt = min(dt, T - t)
        try:
            ensemble, stats = step_stratonovich(ensemble, noise, path, n, dt, blob=blob, floor=floor)
        except CollisionError as err:
            raise CollisionError(err.distance, t=t + dt, pair=err.pair) from err
        t += dt
        n += 1
        traj.stats.append(stats)
        if n % stride == 0 or t >= T * (1.0 - 1e-14):
            traj.times.append(t)
            traj.frames.append(ensemble.positions.copy())
    return ensemble, traj
