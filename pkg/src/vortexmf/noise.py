"""Transport-noise fields and the shared Brownian driver.

Each noise mode is a smooth divergence-free field, either a constant vector
``c * d`` or a single Fourier shear ``c * (k_perp/|k|) * cos(k.x + theta)``
with ``k_perp = (-k2, k1)``.  The Brownian increments are a pure function of
``(seed, mode, step)``, so any number of solvers can replay the same path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

FloatArray = NDArray[np.float64]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseMode:
    """One noise field.  ``kind`` is ``"constant"`` or ``"fourier"``."""

    kind: str
    c: float
    k: tuple[float, float] = (1.0, 0.0)
    theta: float = 0.0
    direction: tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("constant", "fourier"):
            raise ValueError(f"unknown noise mode kind {self.kind!r}")
        if not np.isfinite(self.c):
            raise ValueError("noise amplitude must be finite")
        if self.kind == "fourier":
            if np.hypot(*self.k) == 0.0:
                raise ValueError("fourier mode needs a nonzero wavevector")
        else:
            norm = float(np.hypot(*self.direction))
            if norm == 0.0:
                raise ValueError("constant mode needs a nonzero direction")
            object.__setattr__(
                self, "direction", (self.direction[0] / norm, self.direction[1] / norm)
            )

    @property
    def unit(self) -> FloatArray:
        """Direction of the field (constant over space)."""
        if self.kind == "constant":
            return np.asarray(self.direction, dtype=float)
        k1, k2 = self.k
        return np.array([-k2, k1]) / np.hypot(k1, k2)

    def to_record(self) -> dict:
        kx, ky = self.k
        dx, dy = self.direction
        return {"kind": self.kind, "c": self.c, "kx": kx, "ky": ky,
                "theta": self.theta, "dx": dx, "dy": dy}

    @classmethod
    def from_record(cls, rec: dict) -> "NoiseMode":
        kind = rec["kind"]
        return cls(
            kind=kind,
            c=float(rec["c"]),
            k=(float(rec.get("kx", 1.0)), float(rec.get("ky", 0.0))),
            theta=float(rec.get("theta", 0.0)),
            direction=(float(rec.get("dx", 1.0)), float(rec.get("dy", 0.0))),
        )


@dataclass(frozen=True)
class NoiseModel:
    """Finite family of noise fields."""

    modes: tuple[NoiseMode, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))

    @property
    def K(self) -> int:
        return len(self.modes)

    def _mode(self, k: int) -> NoiseMode:
        if not 0 <= k < len(self.modes):
            raise IndexError(f"noise mode index {k} out of range for {len(self.modes)} modes")
        return self.modes[k]

    def to_records(self) -> list[dict]:
        return [m.to_record() for m in self.modes]

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "NoiseModel":
        return cls(tuple(NoiseMode.from_record(r) for r in records))

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls(())


def constant_mode(c: float, direction=(1.0, 0.0)) -> NoiseMode:
    return NoiseMode("constant", float(c), direction=tuple(direction))


def fourier_mode(c: float, k, theta: float = 0.0) -> NoiseMode:
    return NoiseMode("fourier", float(c), k=(float(k[0]), float(k[1])), theta=float(theta))


def sigma_eval(model: NoiseModel, k: int, x: ArrayLike) -> FloatArray:
    """Value of the ``k``-th field at points ``x`` (shape ``(..., 2)``)."""
    mode = model._mode(k)
    x = np.asarray(x, dtype=float)
    if mode.kind == "constant":
        return np.broadcast_to(mode.c * mode.unit, x.shape).copy()
    phase = x @ np.asarray(mode.k) + mode.theta
    return mode.c * np.cos(phase)[..., None] * mode.unit


def grad_sigma_eval(model: NoiseModel, k: int, x: ArrayLike) -> FloatArray:
    """Jacobian ``J[..., i, j] = d sigma^i / d x_j`` of the ``k``-th field."""
    mode = model._mode(k)
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (2, 2))
    if mode.kind == "constant":
        return out
    kv = np.asarray(mode.k)
    phase = x @ kv + mode.theta
    s = -mode.c * np.sin(phase)
    return s[..., None, None] * np.outer(mode.unit, kv)


def sigma_all(model: NoiseModel, x: ArrayLike) -> FloatArray:
    """All fields at once, shape ``(K, ..., 2)``."""
    x = np.asarray(x, dtype=float)
    if model.K == 0:
        return np.zeros((0,) + x.shape)
    return np.stack([sigma_eval(model, k, x) for k in range(model.K)])


def grad_sigma_all(model: NoiseModel, x: ArrayLike) -> FloatArray:
    """All Jacobians at once, shape ``(K, ..., 2, 2)``."""
    x = np.asarray(x, dtype=float)
    if model.K == 0:
        return np.zeros((0,) + x.shape[:-1] + (2, 2))
    return np.stack([grad_sigma_eval(model, k, x) for k in range(model.K)])


def combined_field(model: NoiseModel, x: ArrayLike, weights: Sequence[float]) -> FloatArray:
    """``sum_k weights[k] * sigma_k(x)``, e.g. the frozen field of one step."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape)
    for k, w in enumerate(weights):
        if w != 0.0:
            out += w * sigma_eval(model, k, x)
    return out


def ito_correction(model: NoiseModel, x: ArrayLike) -> FloatArray:
    """``(1/2) sum_k (sigma_k . grad) sigma_k`` at ``x``."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape)
    for k in range(model.K):
        s = sigma_eval(model, k, x)
        J = grad_sigma_eval(model, k, x)
        out += 0.5 * np.einsum("...ij,...j->...i", J, s)
    return out


def norms(model: NoiseModel) -> tuple[float, float]:
    """``(l2_k Linf of sigma, l2_k Linf of grad sigma)``, in closed form."""
    sig = 0.0
    grad = 0.0
    for m in model.modes:
        sig += m.c * m.c
        if m.kind == "fourier":
            grad += (m.c * np.hypot(*m.k)) ** 2
    return float(np.sqrt(sig)), float(np.sqrt(grad))


# --- Brownian driver -----------------------------------------------------------


def _uniform_pairs(seed: int, stream: int, n0: int, count: int) -> tuple[FloatArray, FloatArray]:
    bitgen = np.random.Philox(key=[seed & _MASK64, stream & _MASK64], counter=[n0, 0, 0, 0])
    raw = bitgen.random_raw(4 * count).reshape(count, 4)
    scale = 2.0**-53
    u1 = (raw[:, 0] >> np.uint64(11)).astype(float) * scale
    u2 = (raw[:, 1] >> np.uint64(11)).astype(float) * scale
    return u1, u2


def keyed_normals(seed: int, stream: int, n0: int, count: int) -> FloatArray:
    """Standard normals indexed ``n0 .. n0+count-1`` of the keyed stream.

    Entry ``n`` depends only on ``(seed, stream, n)``: one Philox block per
    index, converted with the Box-Muller transform.
    """
    if n0 < 0:
        raise ValueError("step index must be nonnegative")
    if count <= 0:
        return np.zeros(0)
    u1, u2 = _uniform_pairs(seed, stream, n0, count)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def derive_seed(seed: int, *keys: int) -> int:
    """64-bit sub-seed for e.g. a realization index."""
    ss = np.random.SeedSequence([seed & _MASK64, *[int(k) & _MASK64 for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class BrownianPath:
    """Reproducible increments ``dW^k_n ~ N(0, dt)`` keyed by ``(seed, k, n)``.

    Increments are ``sqrt(dt)`` times a keyed standard normal, so paths with
    different ``dt`` share the underlying normals.  ``dt`` may be overridden
    per call for adaptive stepping.
    """

    seed: int
    dt: float = 1.0
    stream_offset: int = 0

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")

    def normals(self, k: int, n0: int, count: int = 1) -> FloatArray:
        return keyed_normals(self.seed, self.stream_offset + k, n0, count)

    def increment(self, k: int, n: int, dt: float | None = None) -> float:
        dt = self.dt if dt is None else dt
        return float(np.sqrt(dt) * self.normals(k, n, 1)[0])

    def increments(self, k: int, n0: int, count: int, dt: float | None = None) -> FloatArray:
        dt = self.dt if dt is None else dt
        return np.sqrt(dt) * self.normals(k, n0, count)

    def step_increments(self, K: int, n: int, dt: float | None = None) -> FloatArray:
        """Vector ``(dW^0_n, ..., dW^{K-1}_n)`` for one step."""
        dt = self.dt if dt is None else dt
        return np.array([self.increment(k, n, dt) for k in range(K)])

    def vector_increments(self, N: int, n: int, dt: float | None = None) -> FloatArray:
        """Independent 2D increments for ``N`` particles at step ``n``, shape ``(N, 2)``.

        One stream per step, disjoint from the mode streams; entry
        ``(i, c)`` is counter ``2 i + c`` of that stream.
        """
        dt = self.dt if dt is None else dt
        z = keyed_normals(self.seed, self.stream_offset + (1 << 40) + n, 0, 2 * N)
        return np.sqrt(dt) * z.reshape(N, 2)
