"""Coupled experiments, N-sweeps, the Ito residual study and the verification suites.

One realization draws its particles from the initial density, then advances
the particle SDE and the vorticity PDE with the same Brownian increments
(keyed by seed and realization index) and records the modulated energy at a
fixed cadence.  Failed realizations are logged and excluded.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import bounds
from . import coulomb
from . import euler_pde as pde
from . import forms_sio as fs
from . import modulated_energy as me
from . import vortex_sde as sde
from .io import write_csv, write_json
from .noise import BrownianPath, NoiseModel, derive_seed, fourier_mode, norms

log = logging.getLogger("vortexmf")

MODES = ("coupled", "particles-only", "pde-only", "additive-noise", "verify")
SAMPLERS = ("stratified", "iid")


def default_noise(c: float = 0.2) -> list[dict]:
    """Four divergence-free Fourier modes with unit wavevectors."""
    ks = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -1.0)]
    return [fourier_mode(c, k, theta=0.5 * i).to_record() for i, k in enumerate(ks)]


@dataclass
class ExperimentConfig:
    seed: int = 0
    N: list = field(default_factory=lambda: [64])
    grid_n: int = 128
    L: Optional[float] = None
    T: float = 0.25
    dt_max: float = 1e-2
    c_cfl: float = 0.5
    particle_cfl: float = 0.1
    noise: list = field(default_factory=default_noise)
    initial: dict = field(default_factory=lambda: {"profile": "smoothed-disc", "radius": 1.0, "edge": 0.5})
    R: int = 64
    out: Optional[str] = None
    cadence: float = 0.05
    mode: str = "coupled"
    sampling: str = "stratified"
    step_policy: str = "fixed"
    nu: float = 0.0
    hs: float = -2.0
    C: float = 1.0
    frames: bool = False

    def __post_init__(self):
        self.N = [int(n) for n in np.atleast_1d(self.N)]
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.sampling not in SAMPLERS:
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.step_policy not in ("fixed", "adaptive"):
            raise ValueError(f"unknown step policy {self.step_policy!r}")
        for name in ("grid_n", "T", "dt_max", "c_cfl", "particle_cfl", "R", "cadence", "C"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.L is not None and not self.L > 0:
            raise ValueError("L must be positive")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")
        if not self.N or min(self.N) < 2:
            raise ValueError("N entries must be at least 2")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if "profile" not in self.initial:
            raise ValueError("initial datum needs a profile name")
        pde.support_radius(self.initial["profile"], self._profile_params())
        NoiseModel.from_records(self.noise)

    def _profile_params(self) -> dict:
        return {k: v for k, v in self.initial.items() if k != "profile"}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def noise_model(self) -> NoiseModel:
        return NoiseModel.from_records(self.noise)

    def initial_grid(self) -> pde.VorticityGrid:
        grid = pde.from_profile(self.initial["profile"], self.grid_n, self.L, **self._profile_params())
        mass = grid.mass
        if abs(mass - 1.0) > 1e-8:
            raise ValueError(f"initial datum integrates to {mass!r}, not 1")
        return grid


# --- sampling ----------------------------------------------------------------------


def sample_initial(grid: pde.VorticityGrid, N: int, rng: np.random.Generator,
                   method: str = "stratified") -> np.ndarray:
    """Draw ``N`` points from the cellwise-constant density.

    ``"stratified"``: ``u_i = (i + U_i)/N`` through the inverse CDF of the
    cells in row-major order, the position along the second axis inside the
    cell following the fractional CDF and the first coordinate uniform.
    ``"iid"``: independent cells by probability, uniform inside the cell.
    """
    p = np.clip(grid.values, 0.0, None).reshape(-1) * grid.cell_area
    total = p.sum()
    if not total > 0:
        raise ValueError("density has no positive mass")
    cdf = np.cumsum(p) / total
    nodes = grid.coords.reshape(-1, 2)
    h = grid.h
    if method == "iid":
        idx = rng.choice(p.size, size=N, p=p / total)
        return nodes[idx] + rng.uniform(-0.5 * h, 0.5 * h, size=(N, 2))
    if method != "stratified":
        raise ValueError(f"unknown sampling method {method!r}")
    u = (np.arange(N) + rng.uniform(size=N)) / N
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), p.size - 1)
    lo = np.where(idx > 0, cdf[idx - 1], 0.0)
    frac = np.clip((u - lo) / np.maximum(cdf[idx] - lo, 1e-300), 0.0, 1.0)
    x = nodes[idx].copy()
    x[:, 0] += rng.uniform(-0.5 * h, 0.5 * h, size=N)
    x[:, 1] += (frac - 0.5) * h
    return x


# --- one realization -----------------------------------------------------------------


RECOVERABLE = (sde.CollisionError, sde.SingularConfigurationError, pde.CFLError, pde.SupportError,
               me.BoxSupportError, FloatingPointError)


def diagnostic_times(T: float, cadence: float) -> np.ndarray:
    k = int(np.floor(T / cadence + 1e-9))
    t = cadence * np.arange(k + 1)
    if T - t[-1] > 1e-12 * T:
        t = np.append(t, T)
    return t


def _energy(x, grid, N, t, hs):
    rep = me.modulated_energy(x, grid, t=t, eps3=bounds.default_eps(N), s=hs, support_tol=None)
    return rep.to_record()


@dataclass
class RealizationResult:
    index: int
    series: list
    error: Optional[str] = None
    frames: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.error is not None


def run_realization(config: ExperimentConfig, N: int, r: int, grid0: pde.VorticityGrid | None = None,
                    keep_frames: bool = False) -> RealizationResult:
    """Advance realization ``r`` on its keyed path and record diagnostics."""
    grid0 = grid0 if grid0 is not None else config.initial_grid()
    noise = config.noise_model()
    path = BrownianPath(derive_seed(config.seed, r))
    rng = np.random.default_rng(derive_seed(config.seed, r, N, 1))
    times = diagnostic_times(config.T, config.cadence)
    series, frames = [], []
    mode = config.mode
    ens = None
    if mode != "pde-only":
        ens = sde.VortexEnsemble(sample_initial(grid0, N, rng, config.sampling))
    grid = grid0
    controller = sde.DtController(config.dt_max, config.particle_cfl)
    t, n = 0.0, 0
    try:
        for target in times:
            while t < target - 1e-12:
                dt = min(config.dt_max, target - t)
                if config.step_policy == "adaptive":
                    if ens is not None:
                        dt = min(dt, sde.next_dt(ens, controller))
                    if mode in ("coupled", "pde-only"):
                        dt = min(dt, pde.cfl_dt(grid, config.c_cfl))
                if mode == "additive-noise":
                    ens = sde.step_additive(ens, config.nu, path, n, dt)
                else:
                    dW = path.step_increments(noise.K, n, dt) if noise.K else np.zeros(0)
                    if ens is not None:
                        ens, _ = sde.step_stratonovich(ens, noise, None, n, dt, dW=dW)
                    if mode in ("coupled", "pde-only"):
                        grid = pde.step(grid, noise, None, n, dt, dW=dW, cfl_limit=2.0 * config.c_cfl)
                t += dt
                n += 1
            if mode == "pde-only":
                series.append({"t": float(target), "mass": grid.mass, "L2": pde.lp_norm(grid, 2),
                               "Linf": pde.lp_norm(grid, np.inf)})
            else:
                ref = grid if mode == "coupled" else grid0
                series.append(_energy(ens.positions, ref, N, float(target), config.hs))
            if keep_frames and mode in ("coupled", "pde-only"):
                frames.append(grid.with_values(grid.values, t=float(target)))
    except RECOVERABLE as err:
        log.warning("realization %d (N=%d) failed: %s", r, N, err)
        return RealizationResult(r, series, f"{type(err).__name__}: {err}")
    return RealizationResult(r, series, None, frames)


def _worker_count() -> int:
    cap = os.environ.get("VORTEXMF_THREADS")
    cpus = os.cpu_count() or 1
    if cap is None:
        return 1
    try:
        return max(1, min(int(cap), cpus))
    except ValueError:
        return 1


def _run_many(config, N, indices, grid0, keep_first_frames):
    workers = _worker_count()
    if workers <= 1 or len(indices) < 2:
        return [run_realization(config, N, r, grid0, keep_first_frames and r == indices[0]) for r in indices]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(run_realization, config, N, r, grid0, keep_first_frames and r == indices[0])
                for r in indices]
        return [f.result() for f in futs]


# --- records ----------------------------------------------------------------------


def _stats(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return float("nan"), float("nan")
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else float("nan")
    return float(values.mean()), se


@dataclass
class RunRecord:
    config_hash: str
    config: dict
    N: int
    times: list
    realizations: list
    stats: list
    envelope: list
    excluded: int
    flagged_failed: bool
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def energy_rows(self) -> list[tuple]:
        rows = []
        for rec in self.realizations:
            for s in rec["series"]:
                if "F_avg" not in s:
                    continue
                rows.append((s["t"], rec["index"], s["F_avg"], s["term_pp"], s["term_px"], s["term_xx"],
                             s["hs"], s["close_pairs"], s["min_dist"]))
        return rows

    def stat_at(self, t: float, key: str = "reg_F_mean") -> float:
        i = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return self.stats[i][key]


ENERGY_HEADER = ["t", "realization", "F_avg", "term_pp", "term_px", "term_xx", "hs", "close_pairs", "min_dist"]


def _summarize(config: ExperimentConfig, N: int, results: list[RealizationResult], grid0) -> RunRecord:
    times = diagnostic_times(config.T, config.cadence)
    ok = [r for r in results if not r.failed]
    stats = []
    for i, t in enumerate(times):
        row = {"t": float(t), "count": len(ok)}
        if config.mode != "pde-only" and ok:
            F = np.array([r.series[i]["F_avg"] for r in ok])
            row["abs_F_mean"], row["abs_F_se"] = _stats(np.abs(F))
            row["reg_F_mean"], row["reg_F_se"] = _stats(bounds.regularizer(F, N=N))
            row["F_mean"], row["F_se"] = _stats(F)
            row["hs_mean"], row["hs_se"] = _stats([r.series[i]["hs"] for r in ok])
        elif ok:
            for key in ("mass", "L2", "Linf"):
                row[key + "_mean"], _ = _stats([r.series[i][key] for r in ok])
        stats.append(row)
    env = []
    if config.mode != "pde-only" and ok:
        xi_inf = pde.lp_norm(grid0, np.inf)
        sg = norms(config.noise_model())[1] ** 2
        F0 = stats[0]["abs_F_mean"]
        for row in stats:
            try:
                p = bounds.EnvelopeParams(xi_inf, sg, config.C, F0, N, row["t"])
                adm = bounds.admissible(p)
                env.append({"t": row["t"], "admissible": adm, "envelope": bounds.envelope(p) if adm else None})
            except ValueError:
                env.append({"t": row["t"], "admissible": False, "envelope": None})
    excluded = len(results) - len(ok)
    return RunRecord(
        config_hash=config.config_hash(),
        config=config.to_dict(),
        N=N,
        times=[float(t) for t in times],
        realizations=[{"index": r.index, "error": r.error, "series": r.series} for r in results],
        stats=stats,
        envelope=env,
        excluded=excluded,
        flagged_failed=excluded > 0.05 * len(results),
    )


def run_coupled(config: ExperimentConfig, N: Optional[int] = None, out: Optional[str | Path] = None) -> RunRecord:
    """Run ``config.R`` realizations at ``N`` (default ``config.N[0]``) and collect statistics."""
    if config.mode == "verify":
        raise ValueError("verify mode is run through verify()")
    start = time.perf_counter()
    N = int(N if N is not None else config.N[0])
    grid0 = config.initial_grid()
    keep = bool(config.frames and (out or config.out))
    results = _run_many(config, N, list(range(config.R)), grid0, keep)
    record = _summarize(config, N, results, grid0)
    record.wall_clock = time.perf_counter() - start
    out = out if out is not None else config.out
    if out is not None:
        out = Path(out)
        write_json(out / "record.json", record.to_dict())
        write_csv(out / "energy.csv", ENERGY_HEADER, record.energy_rows())
        if keep:
            for i, frame in enumerate(results[0].frames):
                pde.dump_grid(frame, out / f"grid_{i:04d}.bin")
    return record


SWEEP_HEADER = ["N", "t", "E_reg_F", "E_reg_F_se", "E_abs_F", "hs", "envelope", "admissible"]


@dataclass
class SweepResult:
    rows: list
    records: list

    def column(self, name: str, t: Optional[float] = None) -> list:
        j = SWEEP_HEADER.index(name)
        return [r[j] for r in self.rows if t is None or abs(r[1] - t) < 1e-12]


def sweep(config: ExperimentConfig, out: Optional[str | Path] = None) -> SweepResult:
    """``run_coupled`` for every ``N`` in the config; one table row per ``(N, t)``."""
    out = out if out is not None else config.out
    rows, records = [], []
    for N in config.N:
        rec = run_coupled(config, N, out=None if out is None else Path(out) / f"N{N}")
        records.append(rec)
        for row, env in zip(rec.stats, rec.envelope or [{}] * len(rec.stats)):
            rows.append((N, row["t"], row.get("reg_F_mean"), row.get("reg_F_se"), row.get("abs_F_mean"),
                         row.get("hs_mean"), env.get("envelope"), int(bool(env.get("admissible")))))
    if out is not None:
        write_csv(Path(out) / "sweep.csv", SWEEP_HEADER,
                  [tuple("" if v is None else v for v in r) for r in rows])
    return SweepResult(rows, records)


def sobolev_ratio(hs: float, reg_F: float, N: int) -> float:
    """``H^{-2}`` distance over ``(E<F>)^{1/2} + (ln N / N)^{1/2}``."""
    return hs / (np.sqrt(max(reg_F, 0.0)) + np.sqrt(np.log(N) / N))


# --- Ito identity -----------------------------------------------------------------


@dataclass
class DriftTerms:
    F: float
    reg_F: float
    eps: float
    q_u: float
    q_drift: list
    q_sigma: list
    q2_sigma: list

    @property
    def factor(self) -> float:
        return self.F / self.reg_F

    @property
    def terms(self) -> dict:
        """Rates of the four non-martingale contributions."""
        f = self.factor
        return {
            "K1_u": f * self.q_u,
            "K1_drift": 0.5 * f * float(np.sum(self.q_drift)),
            "K2_sigma": 0.5 * f * float(np.sum(self.q2_sigma)),
            "quadratic": 0.5 * self.eps**2 / self.reg_F**3 * float(np.sum(np.square(self.q_sigma))),
        }

    @property
    def rate(self) -> float:
        return float(sum(self.terms.values()))

    @property
    def martingale_coefficients(self) -> np.ndarray:
        return self.factor * np.asarray(self.q_sigma, dtype=float)


def drift_terms(positions, grid: pde.VorticityGrid, noise: NoiseModel, eps: float,
                point_grid: str = "spectral") -> DriftTerms:
    """Integrands of the Ito equation of ``<F_avg>_eps`` at one state.

    The point-grid parts of the forms default to the spectral route, which
    is the exact derivative of the interpolated cross term of the energy.
    """
    x = np.asarray(positions, dtype=float)
    F = me.modulated_energy(x, grid, support_tol=None, cross="interpolated").F_avg
    m = fs.SignedMeasurePair(x, grid)
    u = fs.grid_velocity_field(grid)
    q_u = fs.form_K1(u, m, point_grid=point_grid)
    q_drift, q_sigma, q2 = [], [], []
    for k in range(noise.K):
        s = fs.noise_field(noise, k)
        q_sigma.append(fs.form_K1(s, m, point_grid=point_grid))
        q2.append(fs.form_K2(s, m, point_grid=point_grid))
        q_drift.append(fs.form_K1(fs.noise_drift_field(noise, k), m, point_grid=point_grid))
    return DriftTerms(F, float(bounds.regularizer(F, eps)), eps, q_u, q_drift, q_sigma, q2)


def _quadratic_features(dW: np.ndarray, dt: float) -> np.ndarray:
    R, K = dW.shape
    cols = [dW[:, k] for k in range(K)]
    for j in range(K):
        for k in range(j, K):
            cols.append(dW[:, j] * dW[:, k] - (dt if j == k else 0.0))
    return np.stack(cols, axis=1) if cols else np.zeros((R, 0))


def _cv_mean(y: np.ndarray, Z: np.ndarray) -> tuple[float, float]:
    """Control-variate mean of ``y`` with zero-mean features ``Z`` (least squares with intercept)."""
    A = np.column_stack([np.ones(y.size), Z])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    dof = max(y.size - A.shape[1], 1)
    return float(coef[0]), float(np.sqrt(np.sum(resid**2) / dof / y.size))


@dataclass
class ItoReport:
    deltas: list
    increments: list
    rate_residuals: list
    raw_residuals: list
    stderr: list
    drift: dict
    order: float
    orders: list
    rate_order: float
    rate_orders: list

    def to_dict(self) -> dict:
        return asdict(self)


def ito_residual_check(*, N: int = 32, R: int = 2000, deltas=(4e-3, 2e-3, 1e-3), grid_n: int = 128,
                       L: float = 4.0, seed: int = 0, noise: Optional[NoiseModel] = None,
                       initial: Optional[dict] = None, use_noise: bool = True, interp_order: int = 5,
                       progress: Optional[Callable[[str], None]] = None) -> ItoReport:
    """Weak check of the Ito equation of ``<F_avg>_eps`` with ``eps = ln N / N``.

    All realizations start from one state.  For each step ``Delta`` every
    realization takes one coupled step on its keyed path; the mean of
    ``<F>(Delta) - <F>(0) - M_Delta`` (``M_Delta`` the martingale increment,
    further variance reduced by regression on the zero-mean Wiener
    monomials) is compared with ``Delta`` times the drift at time 0.
    ``raw_residuals`` are ``|mean - Delta * drift|`` and ``order`` is their
    fitted slope in ``Delta``.  The stricter ``rate_residuals`` are
    ``|mean / Delta - drift|``, which vanish as ``Delta -> 0`` only if the
    drift is right; ``rate_order`` is their slope.  The energy uses the
    interpolated cross term so that it is smooth in the particle positions
    on scales below the grid spacing.
    """
    noise = noise if noise is not None else NoiseModel.from_records(default_noise(1.0))
    if not use_noise:
        noise = NoiseModel.zero()
    initial = initial or {"profile": "gaussian", "width": 0.7}
    params = {k: v for k, v in initial.items() if k != "profile"}
    grid0 = pde.from_profile(initial["profile"], grid_n, L, **params)
    rng = np.random.default_rng(derive_seed(seed, 0, N, 1))
    x0 = sample_initial(grid0, N, rng)
    eps = bounds.default_eps(N)
    terms = drift_terms(x0, grid0, noise, eps)
    D = terms.rate
    a = terms.martingale_coefficients
    reg0 = terms.reg_F
    incs, rres, raw, ses = [], [], [], []
    for delta in deltas:
        y = np.empty(R)
        dWs = np.empty((R, noise.K))
        for r in range(R):
            path = BrownianPath(derive_seed(seed, r))
            dW = path.step_increments(noise.K, 0, delta) if noise.K else np.zeros(0)
            ens, _ = sde.step_stratonovich(sde.VortexEnsemble(x0), noise, None, 0, delta, dW=dW)
            grid = pde.step(grid0, noise, None, 0, delta, dW=dW, cfl_limit=10.0, support_tol=1.0,
                            interp_order=interp_order)
            F1 = me.modulated_energy(ens.positions, grid, support_tol=None, cross="interpolated").F_avg
            y[r] = float(bounds.regularizer(F1, eps)) - reg0 - float(a @ dW)
            dWs[r] = dW
        mean, se = _cv_mean(y, _quadratic_features(dWs, delta))
        incs.append(mean)
        raw.append(abs(mean - delta * D))
        rres.append(abs(mean / delta - D))
        ses.append(se / delta)
        if progress:
            progress(f"delta={delta:.1e} mean increment {mean:.3e} rate residual {rres[-1]:.3e}")
    ld = np.log(np.asarray(deltas))

    def fit(res):
        lr = np.log(np.asarray(res))
        slope = float(np.polyfit(ld, lr, 1)[0]) if len(deltas) > 1 else float("nan")
        return slope, [float(o) for o in np.diff(lr) / np.diff(ld)]

    raw_slope, raw_orders = fit(raw)
    rate_slope, rate_orders = fit(rres)
    drift = dict(terms.terms)
    drift["total"] = D
    drift["F"] = terms.F
    return ItoReport(list(deltas), incs, rres, raw, ses, drift, raw_slope, raw_orders, rate_slope, rate_orders)


# --- ratio stability ---------------------------------------------------------------


@dataclass
class RatioInstance:
    N: int
    prop: str
    lhs: float
    rhs: float
    ratio: float
    F_avg: float


def _random_fourier_field(rng) -> fs.VelocityFieldModel:
    c = rng.uniform(0.2, 1.0)
    kk = rng.uniform(0.5, 3.0)
    ang = rng.uniform(0, 2 * np.pi)
    model = NoiseModel((fourier_mode(c, (kk * np.cos(ang), kk * np.sin(ang)), rng.uniform(0, 2 * np.pi)),))
    return fs.noise_field(model, 0)


def _random_instance_measure(rng, N: int, n: int = 64, L: float = 4.0):
    kind = rng.integers(3)
    if kind == 0:
        grid = pde.from_profile("smoothed-disc", n, L, radius=rng.uniform(0.7, 1.2), edge=0.3)
    elif kind == 1:
        grid = pde.from_profile("two-blob", n, L, separation=rng.uniform(1.0, 1.6), radius=0.45, edge=0.2)
    else:
        grid = pde.from_profile("smoothed-disc", n, L, radius=rng.uniform(0.4, 0.8), edge=0.2)
    method = "stratified" if rng.uniform() < 0.5 else "iid"
    x = sample_initial(grid, N, rng, method)
    jitter = rng.uniform(0.0, 0.3) / np.sqrt(N)
    x = x + jitter * rng.normal(size=x.shape)
    return grid, x


def prop_ratio_study(N_list=(64, 256, 1024), instances: int = 200, seed: int = 0,
                     grid_n: int = 64, L: float = 4.0) -> dict:
    """Ratios ``|form| / RHS`` for the three first/second-order estimates over random instances.

    Returns ``{"instances": [...], "max": {prop: {N: max ratio}}, "nonpositive_rhs": count}``.
    """
    out = []
    bad = 0
    for N in N_list:
        rng = np.random.default_rng(derive_seed(seed, N, 7))
        for i in range(instances):
            grid, x = _random_instance_measure(rng, N, grid_n, L)
            F = me.modulated_energy(x, grid, support_tol=None).F_avg
            G = float(bounds.regularizer(F, N=N))
            mu = float(grid.values.max())
            e1, e2, e3 = bounds.epsilon_schedule(G, N, mu)
            m = fs.SignedMeasurePair(x, grid)
            v1 = _random_fourier_field(rng)
            if i % 2 == 0:
                n = rng.normal(size=2)
                v2 = fs.ll_shear_field(rng.uniform(0.5, 2.0), n, rng.uniform(-1.0, 1.0, size=2))
            else:
                v2 = fs.grid_velocity_field(grid)
            v3 = _random_fourier_field(rng)
            cases = [
                ("lipschitz", abs(fs.form_K1(v1, m)), fs.rhs_lipschitz(F, N, v1.lip, mu, e1, e3)),
                ("log-lipschitz", abs(fs.form_K1(v2, m)), fs.rhs_log_lipschitz(F, N, v2.ll, mu, e2, e3)),
                ("second-order", abs(fs.form_K2(v3, m)), fs.rhs_second_order(F, N, v3.lip, mu, e1, e3)),
            ]
            for prop, lhs, rhs in cases:
                if not rhs > 0:
                    bad += 1
                ratio = lhs / rhs if rhs > 0 else float("inf")
                out.append(RatioInstance(N, prop, lhs, rhs, ratio, F))
    mx = {}
    for inst in out:
        d = mx.setdefault(inst.prop, {})
        d[inst.N] = max(d.get(inst.N, 0.0), inst.ratio)
    return {"instances": [asdict(i) for i in out], "max": mx, "nonpositive_rhs": bad}


def ratio_spread(maxima: dict) -> float:
    """Half-range of the per-N maxima relative to their mid-range.

    A value below ``0.5`` means every maximum lies within ``+-50%`` of one
    common centre.
    """
    vals = np.asarray(list(maxima.values()), dtype=float)
    lo, hi = float(vals.min()), float(vals.max())
    return (hi - lo) / (hi + lo)


# --- verification suites -------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""
    value: float | None = None


def suite_coulomb_identities() -> list[Check]:
    """Smearing identity and finite-difference derivative checks."""
    rng = np.random.default_rng(0)
    checks = []
    worst = 0.0
    for _ in range(20):
        eta = rng.uniform(0.05, 2.0)
        x = rng.normal(size=2) * 2.0
        c = rng.normal(size=2)
        sm = coulomb.smeared_delta(c, eta, 256)
        lhs = float(sm.integrate(lambda y: coulomb.g(x - y)))
        worst = max(worst, abs(lhs - float(coulomb.g_trunc(x - c, eta))))
    checks.append(Check("smearing identity g*delta^(eta) = g_eta", worst < 1e-8, f"max abs err {worst:.2e}", worst))
    h = 1e-5
    gw, hw = 0.0, 0.0
    for _ in range(50):
        x = rng.normal(size=2)
        eta = 0.1
        if np.hypot(*x) < 1.5 * eta:
            x *= 3.0
        grad = coulomb.grad_g_trunc(x, eta)
        fd = np.array([(coulomb.g_trunc(x + e, eta) - coulomb.g_trunc(x - e, eta)) / (2 * h)
                       for e in np.eye(2) * h]).reshape(2)
        gw = max(gw, float(np.max(np.abs(fd - grad)) / np.max(np.abs(grad))))
        H = coulomb.hess_g(x)
        fdH = np.stack([(coulomb.grad_g_trunc(x + e, 0.0) - coulomb.grad_g_trunc(x - e, 0.0)) / (2 * h)
                        for e in np.eye(2) * h], axis=-1)
        hw = max(hw, float(np.max(np.abs(fdH - H)) / np.max(np.abs(H))))
    checks.append(Check("grad g_trunc vs finite differences", gw < 1e-5, f"max rel err {gw:.2e}", gw))
    checks.append(Check("hess g vs finite differences", hw < 1e-5, f"max rel err {hw:.2e}", hw))
    return checks


def renormalization_table(configs: int = 5, N: int = 32, factors=(1e-2, 1e-3, 1e-4), seed: int = 0,
                          grid_n: int = 64) -> list[dict]:
    """Gap ``[smeared(eta) - sum g~(eta_i)] - F_N`` along ``eta = factor * d_min``."""
    rng = np.random.default_rng(seed)
    grid = pde.from_profile("smoothed-disc", grid_n, 4.0, radius=1.0, edge=0.5)
    rows = []
    for c in range(configs):
        x = sample_initial(grid, N, rng, "iid")
        dmin = me.min_distance(x)
        FN = me.modulated_energy_N(x, grid)
        gaps = []
        for f in factors:
            eta = f * dmin
            val = me.smeared_energy(x, eta, grid) - N * float(coulomb.g_radial(eta))
            gaps.append(abs(val - FN))
        rows.append({"config": c, "F_N": FN, "d_min": dmin, "gaps": gaps})
    return rows


def suite_renormalization_limit(printer: Callable[[str], None] | None = None) -> list[Check]:
    rows = renormalization_table()
    checks = []
    for row in rows:
        gaps = row["gaps"]
        mono = all(b < a for a, b in zip(gaps, gaps[1:]))
        final = gaps[-1] < 1e-3 * (abs(row["F_N"]) + 1.0)
        if printer:
            printer(f"  config {row['config']}: F_N={row['F_N']:+.6f} gaps " + " ".join(f"{g:.3e}" for g in gaps))
        checks.append(Check(f"renormalization config {row['config']}", mono and final,
                            f"gaps {['%.2e' % g for g in gaps]}", gaps[-1]))
    return checks


def suite_prop_ratios(instances: int = 200, N_list=(64, 256, 1024)) -> list[Check]:
    res = prop_ratio_study(N_list, instances)
    checks = [Check("all right-hand sides positive", res["nonpositive_rhs"] == 0,
                    f"{res['nonpositive_rhs']} nonpositive")]
    for prop, mx in res["max"].items():
        spread = ratio_spread(mx)
        finite = all(np.isfinite(v) for v in mx.values())
        detail = ", ".join(f"N={N}: {v:.3g}" for N, v in mx.items()) + f"; spread {spread:.2f}"
        checks.append(Check(f"{prop} ratio stability", finite and spread < 0.5, detail, spread))
    return checks


def probe_field() -> fs.VelocityFieldModel:
    """Smooth noise field periodic on the box ``[-pi, pi)^2`` used by the operator probes."""
    return fs.noise_field(NoiseModel((fourier_mode(0.8, (1.0, 2.0), 0.3),)), 0)


def suite_sio_probes(sizes=(128, 256, 512)) -> list[Check]:
    checks = []
    v = probe_field()
    for order in (1, 2):
        reps = fs.refinement_study(v, order, np.pi, sizes)
        C = [r.fitted_C for r in reps]
        dev = max(abs(c / C[0] - 1.0) for c in C)
        checks.append(Check(f"order {order} fitted constant stable", dev < 0.2,
                            "C = " + ", ".join(f"{c:.4f}" for c in C), dev))
    worst = 0.0
    for fam in ("K0", "K1", "K2"):
        for idx in fs.component_index_sets(fam):
            worst = max(worst, abs(fs.circle_average(lambda z: fs.component_kernels(z, fam, idx))))
    checks.append(Check("component kernels have zero circle average", worst < 1e-12, f"max {worst:.1e}", worst))
    return checks


def suite_osgood() -> list[Check]:
    checks = []
    checks.append(Check("M(e^-e) = 1", abs(float(bounds.osgood_M(np.exp(-np.e))) - 1.0) < 1e-12))
    rng = np.random.default_rng(0)
    x = np.exp(rng.uniform(np.log(1e-6), -1.0, size=100))
    err = float(np.max(np.abs(bounds.osgood_Minv(bounds.osgood_M(x)) - x) / x))
    checks.append(Check("M^-1(M(x)) = x", err < 1e-12, f"max rel err {err:.1e}", err))
    worst = 0.0
    for e3 in np.linspace(1e-4, bounds.E_INV, 400):
        e2 = bounds.solve_eps2(e3)
        worst = max(worst, abs(e2 * np.log(1 / e2) - e3 * e3))
    checks.append(Check("eps2 ln(1/eps2) = eps3^2", worst < 1e-12, f"max residual {worst:.1e}", worst))
    mono = True
    p0 = bounds.EnvelopeParams(1.0, 1.0, 1.0, 1e-3, 10**6, 0.0)
    ts = np.linspace(0.0, 0.5, 50)
    vals = [bounds.envelope(p0.with_t(t)) for t in ts if bounds.admissible(p0.with_t(t))]
    mono &= bool(np.all(np.diff(vals) > 0))
    Ns = [2**k for k in range(12, 24)]
    vals = [bounds.envelope(bounds.EnvelopeParams(1.0, 1.0, 1.0, 0.0, N, 0.1)) for N in Ns]
    mono &= bool(np.all(np.diff(vals) < 0))
    checks.append(Check("envelope monotone in t and N", mono))
    return checks


def suite_pde_conservation(n: int = 256, T: float = 1.0, cfl: float = 0.5) -> list[Check]:
    grid = pde.from_profile("smoothed-disc", n, 12.0, radius=1.0, edge=0.5)
    noise = NoiseModel.from_records(default_noise(0.2))
    path = BrownianPath(derive_seed(0, 0))
    norms0 = [pde.lp_norm(grid, p) for p in (1, 2, np.inf)]
    t, k = 0.0, 0
    while t < T - 1e-12:
        dt = min(pde.cfl_dt(grid, cfl), T - t)
        grid = pde.step(grid, noise, path, k, dt)
        t += dt
        k += 1
    norms1 = [pde.lp_norm(grid, p) for p in (1, 2, np.inf)]
    checks = []
    for name, a, b in zip(("L1", "L2", "Linf"), norms0, norms1):
        drift = abs(b - a) / a
        checks.append(Check(f"{name} drift", drift < 0.01, f"{drift:.2e} over {k} steps", drift))
    return checks


SUITES = {
    "coulomb-identities": suite_coulomb_identities,
    "renormalization-limit": suite_renormalization_limit,
    "prop-ratios": suite_prop_ratios,
    "sio-probes": suite_sio_probes,
    "osgood": suite_osgood,
    "pde-conservation": suite_pde_conservation,
}


@dataclass
class VerifyReport:
    suite: str
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        return [f"{'PASS' if c.passed else 'FAIL'} {c.name}" + (f" ({c.detail})" if c.detail else "")
                for c in self.checks]


def verify(suite: str, printer: Callable[[str], None] | None = None) -> VerifyReport:
    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    fn = SUITES[suite]
    checks = fn(printer) if suite == "renormalization-limit" else fn()
    return VerifyReport(suite, checks)
