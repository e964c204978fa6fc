"""
Training-data synthesis: Gaussian random fields, reference PDE solvers,
supervised pair assembly, noise injection and deterministic splits.

All randomness flows from per-trajectory seeds, so serial and parallel
generation produce identical bundles.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from ditto.errors import ConfigError, NumericalError
from ditto.schema import (
    BURGERS_GRF, NAVIER_STOKES_GRF, DatasetBundle, GrfSpec, NoiseConfig, PdeConfig, Trajectory,
)

logger = logging.getLogger(__name__)

MAX_SUBSTEPS = 1_000_000
DEFAULT_NS_MAX_DT = 1e-2


# ============================================================================
# SEEDS
# ============================================================================

def spawn_seeds(seed: int, count: int) -> List[int]:
    """Independent per-item seeds derived from one base seed."""
    if count < 0:
        raise ConfigError(f"count must be >= 0, got {count}")
    if count == 0:
        return []
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32)]


# ============================================================================
# GAUSSIAN RANDOM FIELDS
# ============================================================================

def _wavenumber_norm(n: int, dimension: int) -> np.ndarray:
    k = np.fft.fftfreq(n, d=1.0 / n)
    mesh = np.meshgrid(*([k] * dimension), indexing="ij")
    return np.sqrt(sum(axis ** 2 for axis in mesh))


def _color_white_noise(spec: GrfSpec, white: np.ndarray) -> np.ndarray:
    """Shape white noise into a GRF draw.

    fftn of real white noise is Hermitian with E|w_k|^2 = N^d, so scaling by the
    mode standard deviation and transforming back yields u(x) = sum_k xi_k e^{2 pi i k x}
    with E|xi_k|^2 equal to the target variance and a real field.
    """
    d = spec.dimension
    axes = tuple(range(-d, 0))
    std = np.sqrt(spec.mode_variance(_wavenumber_norm(spec.grid_points, d)))
    if spec.zero_mean:
        std[(0,) * d] = 0.0
    coeff = np.fft.fftn(white, axes=axes) * std
    return np.fft.ifftn(coeff, axes=axes).real * math.sqrt(spec.grid_points ** d)


def sample_grf(spec: GrfSpec, seed: int) -> np.ndarray:
    """One GRF draw on the periodic grid of ``spec``; bit-identical for a given seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((spec.grid_points,) * spec.dimension)
    return _color_white_noise(spec, white)


def sample_grf_batch(spec: GrfSpec, seed: int, count: int) -> np.ndarray:
    """``count`` draws, identical to sample_grf called with spawn_seeds(seed, count)."""
    spec.validate()
    shape = (spec.grid_points,) * spec.dimension
    white = np.stack([np.random.default_rng(s).standard_normal(shape) for s in spawn_seeds(seed, count)])
    return _color_white_noise(spec, white)


def fourier_coefficients(field: np.ndarray, dimension: int) -> np.ndarray:
    """xi_k such that field(x) = sum_k xi_k exp(2 pi i k.x) on the unit box."""
    axes = tuple(range(-dimension, 0))
    n_points = np.prod(field.shape[-dimension:])
    return np.fft.fftn(field, axes=axes) / n_points


def periodic_grid(n: int, length: float = 1.0) -> np.ndarray:
    return np.arange(n) * (length / n)


def dirichlet_grid(n: int, length: float = math.pi) -> np.ndarray:
    return np.linspace(0.0, length, n)


# ============================================================================
# BURGERS
# ============================================================================

def _check_finite(values: np.ndarray, what: str, step: int, time: float) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{what} produced non-finite values", step=step, time=time)


def _substeps(interval: float, dt_limit: float) -> int:
    n_sub = max(1, math.ceil(interval / dt_limit - 1e-12))
    if n_sub > MAX_SUBSTEPS:
        raise NumericalError(f"stability needs {n_sub} substeps per snapshot interval (limit {MAX_SUBSTEPS})")
    return n_sub


def solve_burgers(config: PdeConfig, u0: np.ndarray) -> Trajectory:
    """Viscous Burgers u_t + (u^2/2)_x = nu u_xx on the periodic unit interval.

    Pseudospectral in space with 2/3 dealiasing of the flux, integrating-factor
    RK4 in time. Substeps are re-chosen every snapshot interval from the
    advective CFL limit, so large velocities refine the step instead of failing.
    """
    config.validate()
    if config.kind != "burgers":
        raise ConfigError(f"solve_burgers got a {config.kind} config")
    n = config.grid[0]
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.shape != (n,):
        raise ConfigError(f"initial condition shape {u0.shape} does not match grid ({n},)")

    dx = 1.0 / n
    k_int = np.fft.rfftfreq(n, d=1.0 / n)
    k = 2.0 * np.pi * k_int
    dealias = k_int < n / 3.0
    linear = -config.viscosity * k ** 2

    def flux(v_hat):
        u = np.fft.irfft(v_hat, n=n)
        return -0.5j * k * np.fft.rfft(u * u) * dealias

    times = config.snapshot_times()
    interval = times[1] - times[0]
    snapshots = np.empty((config.n_steps + 1, n))
    snapshots[0] = u0
    v_hat = np.fft.rfft(u0)
    u = u0
    total_substeps = 0
    for step in range(1, config.n_steps + 1):
        umax = max(float(np.max(np.abs(u))), 1e-12)
        dt_limit = config.cfl_safety * dx / umax
        if config.max_dt is not None:
            dt_limit = min(dt_limit, config.max_dt)
        n_sub = _substeps(interval, dt_limit)
        dt = interval / n_sub
        e_full = np.exp(linear * dt)
        e_half = np.exp(linear * dt / 2.0)
        for _ in range(n_sub):
            k1 = flux(v_hat)
            k2 = flux(e_half * (v_hat + 0.5 * dt * k1))
            k3 = flux(e_half * v_hat + 0.5 * dt * k2)
            k4 = flux(e_full * v_hat + dt * e_half * k3)
            v_hat = e_full * v_hat + (dt / 6.0) * (e_full * k1 + 2.0 * e_half * (k2 + k3) + k4)
        total_substeps += n_sub
        u = np.fft.irfft(v_hat, n=n)
        _check_finite(u, "burgers solver", step, times[step])
        snapshots[step] = u

    logger.debug("burgers: %d substeps for %d snapshots", total_substeps, config.n_steps)
    return Trajectory(grid=[periodic_grid(n)], times=times, fields=snapshots,
                      metadata={"substeps": total_substeps})


# ============================================================================
# NAVIER-STOKES (VORTICITY FORM)
# ============================================================================

def navier_stokes_forcing(forcing_id: str, nx: int, ny: int) -> np.ndarray:
    x = periodic_grid(nx)[:, None]
    y = periodic_grid(ny)[None, :]
    if forcing_id == "none":
        return np.zeros((nx, ny))
    if forcing_id == "diagonal_sincos":
        phase = 2.0 * np.pi * (x + y)
        return 0.1 * (np.sin(phase) + np.cos(phase))
    raise ConfigError(f"unknown forcing_id {forcing_id!r}")


def solve_navier_stokes(config: PdeConfig, w0: np.ndarray) -> Trajectory:
    """2D incompressible Navier-Stokes in vorticity form on the periodic unit square.

    The streamfunction solves -lap(psi) = w in Fourier space, velocity is
    (psi_y, -psi_x). Advection is Heun-stepped and dealiased, viscosity is
    Crank-Nicolson. The mean advection mode is pinned to zero, so mean vorticity
    changes only through the forcing mean.
    """
    config.validate()
    if config.kind != "navier_stokes":
        raise ConfigError(f"solve_navier_stokes got a {config.kind} config")
    nx, ny = config.grid
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.shape != (nx, ny):
        raise ConfigError(f"initial vorticity shape {w0.shape} does not match grid {(nx, ny)}")

    kx_int = np.fft.fftfreq(nx, d=1.0 / nx)[:, None]
    ky_int = np.fft.rfftfreq(ny, d=1.0 / ny)[None, :]
    kx = 2.0 * np.pi * kx_int
    ky = 2.0 * np.pi * ky_int
    k2 = kx ** 2 + ky ** 2
    k2_inv = np.zeros_like(k2)
    k2_inv[k2 > 0] = 1.0 / k2[k2 > 0]
    dealias = (np.abs(kx_int) < nx / 3.0) & (np.abs(ky_int) < ny / 3.0)
    f_hat = np.fft.rfft2(navier_stokes_forcing(config.forcing_id, nx, ny))
    shape = (nx, ny)
    speed = {"max": 0.0}

    def rhs(w_hat):
        psi_hat = w_hat * k2_inv
        u = np.fft.irfft2(1j * ky * psi_hat, s=shape)
        v = np.fft.irfft2(-1j * kx * psi_hat, s=shape)
        wx = np.fft.irfft2(1j * kx * w_hat, s=shape)
        wy = np.fft.irfft2(1j * ky * w_hat, s=shape)
        speed["max"] = max(float(np.max(np.abs(u))), float(np.max(np.abs(v))))
        advection = np.fft.rfft2(u * wx + v * wy) * dealias
        advection[0, 0] = 0.0
        return f_hat - advection

    times = config.snapshot_times()
    interval = times[1] - times[0]
    dx = min(1.0 / nx, 1.0 / ny)
    max_dt = config.max_dt if config.max_dt is not None else DEFAULT_NS_MAX_DT
    snapshots = np.empty((config.n_steps + 1, nx, ny))
    snapshots[0] = w0
    w_hat = np.fft.rfft2(w0)
    rhs(w_hat)
    total_substeps = 0
    for step in range(1, config.n_steps + 1):
        dt_limit = min(max_dt, config.cfl_safety * dx / max(speed["max"], 1e-12))
        n_sub = _substeps(interval, dt_limit)
        dt = interval / n_sub
        a = 0.5 * dt * config.viscosity * k2
        for _ in range(n_sub):
            f1 = rhs(w_hat)
            w_star = ((1.0 - a) * w_hat + dt * f1) / (1.0 + a)
            f2 = rhs(w_star)
            w_hat = ((1.0 - a) * w_hat + 0.5 * dt * (f1 + f2)) / (1.0 + a)
        total_substeps += n_sub
        w = np.fft.irfft2(w_hat, s=shape)
        _check_finite(w, "navier-stokes solver", step, times[step])
        snapshots[step] = w

    logger.debug("navier-stokes: %d substeps for %d snapshots", total_substeps, config.n_steps)
    return Trajectory(grid=[periodic_grid(nx), periodic_grid(ny)], times=times, fields=snapshots,
                      metadata={"substeps": total_substeps})


# ============================================================================
# ACOUSTIC WAVE
# ============================================================================

def wave_speed(wave_speed_id: str, grid: Sequence[np.ndarray]) -> np.ndarray:
    mesh = np.meshgrid(*grid, indexing="ij")
    if wave_speed_id == "unit":
        return np.ones(mesh[0].shape)
    if wave_speed_id == "sin_product":
        if len(grid) != 2:
            raise ConfigError("wave speed 'sin_product' is the 2D profile 1 + sin(x) sin(y)")
        return 1.0 + np.sin(mesh[0]) * np.sin(mesh[1])
    if wave_speed_id == "sin_product_3d":
        if len(grid) != 3:
            raise ConfigError("wave speed 'sin_product_3d' is the 3D profile 1 + sin(2x) sin(y) sin(z)")
        return 1.0 + np.sin(2.0 * mesh[0]) * np.sin(mesh[1]) * np.sin(mesh[2])
    raise ConfigError(f"unknown wave_speed_id {wave_speed_id!r}")


def _laplacian_dirichlet(u: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Second-order 2d+1 point Laplacian on interior nodes, zero on the boundary."""
    lap = np.zeros_like(u)
    interior = tuple(slice(1, -1) for _ in range(u.ndim))
    for axis, h in enumerate(spacing):
        plus = list(interior)
        minus = list(interior)
        plus[axis] = slice(2, None)
        minus[axis] = slice(None, -2)
        lap[interior] += (u[tuple(plus)] - 2.0 * u[interior] + u[tuple(minus)]) / h ** 2
    return lap


def wave_energy(u_now: np.ndarray, u_next: np.ndarray, dt: float, speed: np.ndarray,
                spacing: Sequence[float]) -> float:
    """Leapfrog energy between two consecutive time levels.

    Kinetic part uses the 1/c^2-weighted discrete velocity, elastic part the
    product of forward differences at both levels; this pairing is exactly
    invariant under the scheme.
    """
    cell = float(np.prod(spacing))
    velocity = (u_next - u_now) / dt
    kinetic = 0.5 * np.sum(velocity ** 2 / speed ** 2) * cell
    elastic = 0.0
    for axis, h in enumerate(spacing):
        elastic += np.sum(np.diff(u_now, axis=axis) * np.diff(u_next, axis=axis)) / h ** 2
    return float(kinetic + 0.5 * elastic * cell)


def solve_wave(config: PdeConfig, u0: np.ndarray, max_substeps: int = MAX_SUBSTEPS) -> Trajectory:
    """u_tt = c^2 lap(u) on [0, pi]^d with homogeneous Dirichlet data and u_t(x, 0) = 0.

    Central differences in space, leapfrog in time with one CFL-bounded
    substep size for the whole run. Snapshot energies are kept in metadata.
    """
    config.validate()
    if config.kind not in ("wave2d", "wave3d"):
        raise ConfigError(f"solve_wave got a {config.kind} config")
    grid = [dirichlet_grid(n) for n in config.grid]
    spacing = [axis[1] - axis[0] for axis in grid]
    u0 = np.asarray(u0, dtype=np.float64)
    if u0.shape != tuple(config.grid):
        raise ConfigError(f"initial condition shape {u0.shape} does not match grid {tuple(config.grid)}")
    speed = wave_speed(config.wave_speed_id, grid)
    c2 = speed ** 2

    times = config.snapshot_times()
    interval = times[1] - times[0]
    dt_limit = config.cfl_safety * min(spacing) / (float(np.max(speed)) * math.sqrt(config.dimension))
    if config.max_dt is not None:
        dt_limit = min(dt_limit, config.max_dt)
    n_sub = max(1, math.ceil(interval / dt_limit - 1e-12))
    if n_sub > max_substeps:
        raise NumericalError(
            f"grid {tuple(config.grid)} with cfl_safety={config.cfl_safety} needs {n_sub} substeps "
            f"per snapshot interval, above the limit of {max_substeps}"
        )
    dt = interval / n_sub

    u_now = u0.copy()
    boundary = np.ones(u_now.shape, dtype=bool)
    boundary[tuple(slice(1, -1) for _ in range(u_now.ndim))] = False
    if np.any(u_now[boundary] != 0.0):
        logger.debug("wave: clamping %d boundary nodes of the initial condition to 0", int(boundary.sum()))
        u_now[boundary] = 0.0
    u_next = u_now + 0.5 * dt ** 2 * c2 * _laplacian_dirichlet(u_now, spacing)

    snapshots = np.empty((config.n_steps + 1,) + u_now.shape)
    snapshots[0] = u_now
    energies = [wave_energy(u_now, u_next, dt, speed, spacing)]
    for step in range(1, config.n_steps + 1):
        for _ in range(n_sub):
            u_prev, u_now = u_now, u_next
            u_next = 2.0 * u_now - u_prev + dt ** 2 * c2 * _laplacian_dirichlet(u_now, spacing)
        _check_finite(u_now, "wave solver", step, times[step])
        snapshots[step] = u_now
        energies.append(wave_energy(u_now, u_next, dt, speed, spacing))

    return Trajectory(grid=grid, times=times, fields=snapshots,
                      metadata={"substeps": n_sub * config.n_steps, "dt": dt, "energy": energies})


def gaussian_source(center: Sequence[float], grid: Sequence[np.ndarray], width: float = 10.0) -> np.ndarray:
    """exp(-||x - x_c||^2 / width), distances measured in grid-index units.

    ``center`` must coincide with a grid node.
    """
    if len(center) != len(grid):
        raise ConfigError(f"center has {len(center)} coordinates for a {len(grid)}D grid")
    index_center = []
    for coord, axis in zip(center, grid):
        spacing = axis[1] - axis[0]
        position = (coord - axis[0]) / spacing
        nearest = round(position)
        if not 0 <= nearest < len(axis) or abs(position - nearest) > 1e-9:
            raise ConfigError(f"source center coordinate {coord} is not a grid node")
        index_center.append(nearest)
    mesh = np.meshgrid(*[np.arange(len(axis)) for axis in grid], indexing="ij")
    dist2 = sum((m - c) ** 2 for m, c in zip(mesh, index_center))
    return np.exp(-dist2 / width)


def random_source_center(grid: Sequence[np.ndarray], seed: int) -> Tuple[float, ...]:
    """Uniform draw over interior node indices; boundary nodes are pinned to 0 by the Dirichlet data."""
    rng = np.random.default_rng(seed)
    return tuple(float(axis[rng.integers(1, len(axis) - 1)]) for axis in grid)


# ============================================================================
# DATASET ASSEMBLY
# ============================================================================

def default_grf(config: PdeConfig) -> GrfSpec:
    if config.kind == "burgers":
        return replace(BURGERS_GRF, grid_points=config.grid[0])
    if config.kind == "navier_stokes":
        if config.grid[0] != config.grid[1]:
            raise ConfigError(f"GRF initial vorticity needs a square grid, got {tuple(config.grid)}")
        return replace(NAVIER_STOKES_GRF, grid_points=config.grid[0])
    raise ConfigError(f"{config.kind} does not use GRF initial conditions")


def generate_trajectory(config: PdeConfig, seed: int, grf: Optional[GrfSpec] = None) -> Trajectory:
    """Sample an initial condition from ``seed`` and run the matching solver."""
    if config.kind == "burgers":
        return solve_burgers(config, sample_grf(grf or default_grf(config), seed))
    if config.kind == "navier_stokes":
        return solve_navier_stokes(config, sample_grf(grf or default_grf(config), seed))
    grid = [dirichlet_grid(n) for n in config.grid]
    return solve_wave(config, gaussian_source(random_source_center(grid, seed), grid))


def _generation_job(job):
    config, grf, seed = job
    return generate_trajectory(config, seed, grf)


def generate_bundle(config: PdeConfig, count: int, seed: int, grf: Optional[GrfSpec] = None,
                    ratios: Sequence[float] = (0.8, 0.1, 0.1), workers: int = 1,
                    progress: bool = True) -> DatasetBundle:
    """Generate ``count`` trajectories and split them trajectory-wise.

    Jobs are independent; results are merged in seed order so any worker
    count yields the same bundle.
    """
    config.validate()
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    seeds = spawn_seeds(seed, count)
    jobs = [(config, grf, s) for s in seeds]
    desc = f"gen {config.kind}"
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            trajectories = list(tqdm(pool.map(_generation_job, jobs), total=count, desc=desc, disable=not progress))
    else:
        trajectories = [_generation_job(job) for job in tqdm(jobs, desc=desc, disable=not progress)]
    bundle = DatasetBundle.from_trajectories(config.kind, trajectories, seeds,
                                             pde=config.to_manifest_properties())
    return split_dataset(bundle, ratios, seed)


@dataclass
class PairSet:
    """Supervised pairs ((x_0^m, t_n), x_n^m) held as indices into a bundle.

    Pairs reference trajectory ``m`` and target step ``n``; nothing is copied
    until ``inputs``/``targets`` are materialized.
    """
    bundle: DatasetBundle
    trajectory_index: np.ndarray
    step_index: np.ndarray

    def __len__(self) -> int:
        return len(self.step_index)

    @property
    def scalars(self) -> np.ndarray:
        return np.asarray(self.bundle.times)[self.step_index]

    def inputs(self) -> np.ndarray:
        return self.bundle.fields[self.trajectory_index, 0]

    def targets(self) -> np.ndarray:
        return self.bundle.fields[self.trajectory_index, self.step_index]

    def regroup(self) -> np.ndarray:
        """Rebuild the (M, T+1, *grid) tensor from the pairs and their shared initial states."""
        fields = np.empty_like(self.bundle.fields)
        fields[self.trajectory_index, self.step_index] = self.targets()
        fields[self.trajectory_index, 0] = self.inputs()
        return fields


def assemble_pairs(bundle: Union[DatasetBundle, Sequence[Trajectory]]) -> PairSet:
    """X = {(x_0^m, t_n)}, Y = {x_n^m} for n = 1..T, m = 1..M; t_0 is never a target."""
    if not isinstance(bundle, DatasetBundle):
        trajectories = list(bundle)
        for traj in trajectories[1:]:
            if not np.array_equal(traj.times, trajectories[0].times):
                raise ConfigError("assemble_pairs needs trajectories on one shared time grid")
        bundle = DatasetBundle.from_trajectories("custom", trajectories, seeds=range(len(trajectories)))
    m_index, n_index = np.meshgrid(np.arange(bundle.M), np.arange(1, bundle.T + 1), indexing="ij")
    return PairSet(bundle=bundle, trajectory_index=m_index.ravel(), step_index=n_index.ravel())


# ============================================================================
# NOISE AND SPLITS
# ============================================================================

def dataset_std(bundle: DatasetBundle, split: Optional[str] = "train") -> float:
    """sigma_D reduced over every element of the split (all splits when ``split`` is None)."""
    fields = bundle.fields if split is None else bundle.fields[bundle.indices(split)]
    if fields.size == 0:
        raise ConfigError(f"split {split!r} is empty")
    return float(np.std(fields, dtype=np.float64))


def inject_noise(fields: np.ndarray, cfg: NoiseConfig, seeds: Optional[Sequence[int]] = None) -> np.ndarray:
    """x + gamma * sigma_D * N(0, 1), elementwise.

    With ``seeds`` each leading slice draws from its own stream, so noising a
    concatenation equals concatenating noised parts.
    """
    cfg.validate()
    fields = np.asarray(fields)
    if cfg.gamma == 0:
        return fields.copy()
    scale = cfg.gamma * cfg.sigma_D
    if seeds is None:
        noise = np.random.default_rng(cfg.seed).standard_normal(fields.shape)
    else:
        if len(seeds) != fields.shape[0]:
            raise ConfigError(f"{len(seeds)} seeds for {fields.shape[0]} slices")
        noise = np.stack([np.random.default_rng([cfg.seed, int(s)]).standard_normal(fields.shape[1:])
                          for s in seeds])
    return (fields + scale * noise).astype(fields.dtype, copy=False)


def _largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    raw = [r * total for r in ratios]
    counts = [int(math.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    for i, r in enumerate(ratios):
        if r > 0 and counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def _check_ratios(ratios: Sequence[float], n_items: int, what: str) -> None:
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"split ratios must be three non-negative numbers, got {list(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    buckets = sum(1 for r in ratios if r > 0)
    if n_items < buckets:
        raise ConfigError(f"{n_items} {what} cannot fill {buckets} non-empty splits")


def split_dataset(bundle: DatasetBundle, ratios: Sequence[float], seed: int) -> DatasetBundle:
    """Random trajectory-level train/val/test partition, deterministic under ``seed``."""
    _check_ratios(ratios, bundle.M, "trajectories")
    counts = _largest_remainder(bundle.M, ratios)
    order = np.random.default_rng(seed).permutation(bundle.M)
    tags = [""] * bundle.M
    start = 0
    for tag, count in zip(("train", "val", "test"), counts):
        for m in order[start:start + count]:
            tags[m] = tag
        start += count
    return replace(bundle, splits=tags)


def split_chronological(trajectory: Trajectory, ratios: Sequence[float]) -> List[Trajectory]:
    """Cut one long series into contiguous train/val/test segments, each re-based to t=0."""
    n_snapshots = len(trajectory.times)
    _check_ratios(ratios, n_snapshots, "snapshots")
    counts = _largest_remainder(n_snapshots, ratios)
    segments = []
    start = 0
    for tag, count in zip(("train", "val", "test"), counts):
        times = np.asarray(trajectory.times[start:start + count])
        segments.append(Trajectory(grid=trajectory.grid, times=times - times[0] if count else times,
                                   fields=trajectory.fields[start:start + count],
                                   metadata={"split": tag, "offset": start}))
        start += count
    return segments


def subsample_times(bundle: DatasetBundle, steps: int) -> DatasetBundle:
    """Keep every (T/steps)-th snapshot; ``steps`` must divide the stored T."""
    if steps < 1 or steps > bundle.T or bundle.T % steps:
        raise ConfigError(f"cannot resample {bundle.T} stored steps to {steps}; steps must divide {bundle.T}")
    stride = bundle.T // steps
    return replace(bundle, times=np.asarray(bundle.times)[::stride], fields=bundle.fields[:, ::stride])


def truncate_times(bundle: DatasetBundle, steps: int) -> DatasetBundle:
    """First ``steps`` steps (steps + 1 snapshots) of every trajectory."""
    if not 1 <= steps <= bundle.T:
        raise ConfigError(f"cannot truncate {bundle.T} stored steps to {steps}")
    return replace(bundle, times=np.asarray(bundle.times)[: steps + 1], fields=bundle.fields[:, : steps + 1])
