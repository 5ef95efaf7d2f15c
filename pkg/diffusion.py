"""
Reference diffusion models and discretized path ensembles
"""
import csv
import logging
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from constants import PATH_CHUNK

log = logging.getLogger(__name__)

SeedRecord = namedtuple("SeedRecord", ["master_seed", "index"])

FORWARD = "forward"
REVERSED = "reversed"


class InvalidGridError(Exception):
    """
    Time grid is not a strictly increasing discretization of [0, T]
    """


class NonFiniteStateError(Exception):
    """
    A simulated coordinate became NaN or infinite
    """


class NonFiniteIntegralError(Exception):
    """
    A time integral along a path is +inf or NaN
    """


class DegenerateDiffusionError(Exception):
    """
    Diffusion matrix violates its positivity requirements
    """


class NegativeBoundaryDataError(Exception):
    """
    Boundary data of a Feynman-Kac problem takes negative values
    """


class DiracLaw:
    """
    Point mass initial law
    """

    truncated = False

    def __init__(self, point):
        self.point = np.atleast_1d(np.asarray(point, dtype=float))

    @property
    def dim(self) -> int:
        return self.point.shape[0]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        # no draw is consumed, the stream stays aligned with the noise
        return np.tile(self.point, (size, 1))

    def log_density(self, x: np.ndarray) -> np.ndarray:
        at_point = np.all(np.asarray(x) == self.point, axis=-1)
        return np.where(at_point, 0.0, -np.inf)


class GaussianLaw:
    """
    Gaussian initial law N(mean, covariance)
    """

    truncated = False

    def __init__(self, mean, covariance):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        covariance = np.asarray(covariance, dtype=float)
        if covariance.ndim == 0:
            covariance = covariance * np.eye(self.mean.shape[0])
        self.covariance = covariance
        self._chol = np.linalg.cholesky(covariance)
        self._precision = np.linalg.inv(covariance)
        _, logdet = np.linalg.slogdet(covariance)
        self._log_norm = -0.5 * (self.mean.shape[0] * np.log(2 * np.pi) + logdet)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        draws = rng.standard_normal((size, self.dim))
        return self.mean + draws @ self._chol.T

    def log_density(self, x: np.ndarray) -> np.ndarray:
        centered = np.asarray(x, dtype=float) - self.mean
        quad = np.einsum("pi,ij,pj->p", centered, self._precision, centered)
        return self._log_norm - 0.5 * quad


class UniformLaw:
    """
    Uniform law on a box; stands in for sigma-finite references such as Lebesgue measure
    """

    truncated = True

    def __init__(self, lo, hi):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if np.any(self.hi <= self.lo):
            raise ValueError("Uniform law needs hi > lo on every axis.")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((size, self.dim))

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = np.all((x >= self.lo) & (x <= self.hi), axis=-1)
        return np.where(inside, -np.sum(np.log(self.hi - self.lo)), -np.inf)


class TimeGrid:
    """
    Discretization t_0 = 0 < t_1 < ... < t_M = T of the time interval
    """

    def __init__(self, times: Sequence[float]):
        times = np.array(times, dtype=float)
        if times.ndim != 1 or times.shape[0] < 2:
            raise InvalidGridError("A time grid needs at least two knots.")
        if not np.all(np.isfinite(times)):
            raise InvalidGridError("Time knots must be finite.")
        if times[0] != 0.0:
            raise InvalidGridError(f"First knot must be 0, got {times[0]}.")
        if np.any(np.diff(times) <= 0):
            raise InvalidGridError("Time knots must be strictly increasing.")
        times.setflags(write=False)
        self.times = times

    @classmethod
    def uniform(cls, horizon: float, steps: int) -> "TimeGrid":
        if steps < 1 or horizon <= 0:
            raise InvalidGridError(f"Bad uniform grid: horizon={horizon}, steps={steps}.")
        return cls(np.linspace(0.0, horizon, steps + 1))

    @property
    def steps(self) -> int:
        return self.times.shape[0] - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def is_uniform(self) -> bool:
        steps = self.dt
        return bool(np.allclose(steps, steps[0], rtol=1e-9, atol=0.0))

    def index_of(self, t: float) -> int:
        """
        Returns the knot index of time t; t must sit on the grid
        """
        idx = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[idx] - t) > 1e-9 * max(1.0, self.horizon):
            raise InvalidGridError(f"Time {t} is not a grid knot.")
        return idx

    def thin(self, factor: int) -> "TimeGrid":
        """
        Every factor-th knot; the step count must be a multiple of factor
        """
        if factor < 1 or self.steps % factor:
            raise InvalidGridError(f"Cannot keep every {factor}-th knot of {self.steps} steps.")
        return TimeGrid(self.times[::factor])

    def trapezoid_weights(self) -> np.ndarray:
        steps = self.dt
        weights = np.zeros_like(self.times)
        weights[:-1] += 0.5 * steps
        weights[1:] += 0.5 * steps
        return weights

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    def __hash__(self):
        return hash(self.times.tobytes())


def constant_sigma(matrix) -> Callable:
    """
    Wraps a constant diffusion factor as a field of (t, x)
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def sigma(_, x):
        return np.broadcast_to(matrix, (x.shape[0],) + matrix.shape)

    return sigma


@dataclass(eq=False)
class DiffusionSpec:
    """
    Reference model MP(a, b; R_0) with a = sigma sigma^T
    """

    dim: int
    horizon: float
    drift: Callable
    sigma: Callable
    initial_law: object
    invertible: bool = False
    lambda_min: float = 0.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"Dimension must be positive, got {self.dim}.")
        if self.horizon <= 0:
            raise ValueError(f"Horizon must be positive, got {self.horizon}.")
        if self.invertible and self.lambda_min <= 0:
            raise ValueError("An invertible spec needs lambda_min > 0.")

    def drift_at(self, t: float, x: np.ndarray) -> np.ndarray:
        values = np.asarray(self.drift(t, x), dtype=float)
        return np.broadcast_to(values, x.shape)

    def sigma_at(self, t: float, x: np.ndarray) -> np.ndarray:
        values = np.asarray(self.sigma(t, x), dtype=float)
        return np.broadcast_to(values, (x.shape[0], self.dim, self.dim))

    def diffusion_matrix(self, t: float, x: np.ndarray) -> np.ndarray:
        """
        Returns a(t, x) = sigma sigma^T, checking the eigenvalue floor when flagged invertible
        """
        sigma = self.sigma_at(t, x)
        matrix = sigma @ np.swapaxes(sigma, -1, -2)
        if not np.all(np.isfinite(matrix)):
            raise DegenerateDiffusionError(f"Non-finite diffusion matrix at t={t}.")
        if self.invertible:
            smallest = np.linalg.eigvalsh(matrix)[..., 0]
            if np.any(smallest < self.lambda_min):
                raise DegenerateDiffusionError(
                    f"Smallest eigenvalue {smallest.min():.3e} below floor {self.lambda_min} at t={t}.")
        return matrix


def brownian(dim: int = 1, epsilon: float = 1.0, initial_law=None, horizon: float = 1.0) -> DiffusionSpec:
    """
    Brownian motion with diffusion matrix epsilon * Id
    """
    law = initial_law if initial_law is not None else DiracLaw(np.zeros(dim))
    return DiffusionSpec(dim=dim, horizon=horizon,
                         drift=lambda t, x: np.zeros_like(x),
                         sigma=constant_sigma(np.sqrt(epsilon) * np.eye(dim)),
                         initial_law=law, invertible=True, lambda_min=0.5 * epsilon)


def ornstein_uhlenbeck(dim: int = 1, k: float = 1.0, epsilon: float = 2.0, initial_law=None,
                       horizon: float = 1.0) -> DiffusionSpec:
    """
    Ornstein-Uhlenbeck process with drift -k x and diffusion matrix epsilon * Id,
    started by default from its stationary law N(0, epsilon / (2k))
    """
    law = initial_law if initial_law is not None else GaussianLaw(np.zeros(dim), epsilon / (2 * k))
    return DiffusionSpec(dim=dim, horizon=horizon,
                         drift=lambda t, x: -k * x,
                         sigma=constant_sigma(np.sqrt(epsilon) * np.eye(dim)),
                         initial_law=law, invertible=True, lambda_min=0.5 * epsilon)


def polynomial_drift(coefficients: Sequence[float], dim: int = 1, epsilon: float = 1.0, initial_law=None,
                     horizon: float = 1.0) -> DiffusionSpec:
    """
    Componentwise polynomial drift b_i(x) = sum_j c_j x_i^j
    """
    coefficients = np.asarray(coefficients, dtype=float)

    def drift(_, x):
        return np.polynomial.polynomial.polyval(x, coefficients)

    law = initial_law if initial_law is not None else DiracLaw(np.zeros(dim))
    return DiffusionSpec(dim=dim, horizon=horizon, drift=drift,
                         sigma=constant_sigma(np.sqrt(epsilon) * np.eye(dim)),
                         initial_law=law, invertible=True, lambda_min=0.5 * epsilon)


def zero_potential(_, x: np.ndarray) -> np.ndarray:
    return np.zeros(x.shape[0])


def unit_function(x: np.ndarray) -> np.ndarray:
    return np.ones(x.shape[0])


@dataclass(eq=False)
class FKProblem:
    """
    Feynman-Kac data: reference model, potential V, terminal g_T, initial weight f_0
    """

    spec: DiffusionSpec
    potential: Callable = zero_potential
    terminal: Callable = unit_function
    initial_weight: Callable = unit_function

    def potential_at(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.potential(t, x), dtype=float), (x.shape[0],))

    def terminal_at(self, x: np.ndarray) -> np.ndarray:
        return self._nonnegative(self.terminal(x), x, "terminal")

    def initial_weight_at(self, x: np.ndarray) -> np.ndarray:
        return self._nonnegative(self.initial_weight(x), x, "initial_weight")

    @staticmethod
    def _nonnegative(values, x: np.ndarray, name: str) -> np.ndarray:
        values = np.broadcast_to(np.asarray(values, dtype=float), (x.shape[0],))
        if np.any(values < 0):
            raise NegativeBoundaryDataError(f"{name} takes negative values.")
        return values


class PathEnsemble:
    """
    N trajectories sharing one time grid
    """

    def __init__(self, grid: TimeGrid, paths: np.ndarray, seeds: Optional[Sequence[SeedRecord]] = None,
                 direction: str = FORWARD):
        paths = np.asarray(paths, dtype=float)
        if paths.ndim != 3 or paths.shape[1] != grid.steps + 1:
            raise InvalidGridError(f"Paths of shape {paths.shape} do not match a grid of {grid.steps + 1} knots.")
        if direction not in (FORWARD, REVERSED):
            raise ValueError(f"Unknown direction {direction}.")
        paths.setflags(write=False)
        self.grid = grid
        self.paths = paths
        self.seeds = tuple(seeds) if seeds is not None else ()
        self.direction = direction

    @property
    def count(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]

    def states(self, k: int) -> np.ndarray:
        return self.paths[:, k, :]

    def save_binary(self, path: str) -> None:
        """
        Header n, M+1, N and the knots as 64-bit floats, then row-major path data
        """
        header = np.array([self.dim, self.grid.steps + 1, self.count], dtype="<f8")
        body = np.concatenate([header, self.grid.times, self.paths.ravel()])
        body.astype("<f8").tofile(path)

    @classmethod
    def load_binary(cls, path: str) -> "PathEnsemble":
        raw = np.fromfile(path, dtype="<f8")
        dim, knots, count = (int(value) for value in raw[:3])
        times = raw[3:3 + knots]
        paths = raw[3 + knots:].reshape(count, knots, dim)
        return cls(TimeGrid(times), paths.copy())

    def save_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as file:
            writer = csv.writer(file)
            writer.writerow(["path", "knot", "t"] + [f"x{axis + 1}" for axis in range(self.dim)])
            for index in range(self.count):
                for knot, t in enumerate(self.grid.times):
                    writer.writerow([index, knot, repr(float(t))] +
                                    [repr(float(value)) for value in self.paths[index, knot]])


def path_generator(master_seed: int, index: int) -> np.random.Generator:
    """
    Counter-based stream for one path, keyed by the master seed and the path index
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(master_seed, spawn_key=(index,))))


def _euler_chunk(spec: DiffusionSpec, grid: TimeGrid, master_seed: int, indices: Iterable[int],
                 refinement: int = 1) -> np.ndarray:
    indices = list(indices)
    size, steps, dim = len(indices), grid.steps, spec.dim

    start = np.empty((size, dim))
    noise = np.empty((size, steps, dim))
    for row, index in enumerate(indices):
        rng = path_generator(master_seed, index)
        start[row] = spec.initial_law.sample(rng, 1)[0]
        if refinement == 1:
            noise[row] = rng.standard_normal((steps, dim))
        else:
            # one coarse normal per block of fine ones
            fine = rng.standard_normal((steps * refinement, dim))
            noise[row] = fine.reshape(steps, refinement, dim).sum(axis=1) / np.sqrt(refinement)

    states = np.empty((size, steps + 1, dim))
    states[:, 0] = start
    dt = grid.dt
    sqrt_dt = np.sqrt(dt)
    for k in range(steps):
        x = states[:, k]
        drift = spec.drift_at(grid.times[k], x)
        shock = np.sum(spec.sigma_at(grid.times[k], x) * noise[:, k, None, :], axis=-1)
        states[:, k + 1] = x + drift * dt[k] + shock * sqrt_dt[k]

        broken = ~np.all(np.isfinite(states[:, k + 1]), axis=1)
        if np.any(broken):
            raise NonFiniteStateError(
                f"Path {indices[int(np.argmax(broken))]} became non-finite at step {k + 1}.")
    return states


def simulate(spec: DiffusionSpec, grid: TimeGrid, count: int, master_seed: int, workers: int = 1,
             refinement: int = 1) -> PathEnsemble:
    """
    Euler-Maruyama ensemble of MP(a, b; R_0).
    With refinement r > 1 every step is driven by the summed Gaussian increments of r steps of a grid
    r times finer, so ensembles of one seed at different resolutions share their Brownian paths.
    """
    if count < 1:
        raise ValueError(f"Path count must be positive, got {count}.")
    if master_seed < 0:
        raise ValueError(f"Master seed must be nonnegative, got {master_seed}.")
    if refinement < 1:
        raise ValueError(f"Refinement must be a positive integer, got {refinement}.")
    if abs(grid.horizon - spec.horizon) > 1e-12 * spec.horizon:
        raise InvalidGridError(f"Grid ends at {grid.horizon}, model horizon is {spec.horizon}.")
    if not np.all(np.isfinite(spec.initial_law.sample(path_generator(master_seed, 0), 1))):
        raise NonFiniteStateError("Initial law produced a non-finite state for path 0.")

    paths = np.empty((count, grid.steps + 1, spec.dim))
    chunks = [(start, min(start + PATH_CHUNK, count)) for start in range(0, count, PATH_CHUNK)]

    def fill(chunk: Tuple[int, int]) -> None:
        start, stop = chunk
        paths[start:stop] = _euler_chunk(spec, grid, master_seed, range(start, stop), refinement)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(fill, chunks))

    log.info("Ensemble of %s paths on %s steps simulated (seed %s).", count, grid.steps, master_seed)
    seeds = [SeedRecord(master_seed, index) for index in range(count)]
    return PathEnsemble(grid, paths, seeds)


def regenerate_path(spec: DiffusionSpec, grid: TimeGrid, seed: SeedRecord) -> np.ndarray:
    """
    Rebuilds a single path from its seed record
    """
    return _euler_chunk(spec, grid, seed.master_seed, [seed.index])[0]


def thin(ensemble: PathEnsemble, factor: int) -> PathEnsemble:
    """
    The same paths observed on every factor-th knot
    """
    grid = ensemble.grid.thin(factor)
    return PathEnsemble(grid, ensemble.paths[:, ::factor, :].copy(), ensemble.seeds, ensemble.direction)


def reverse(ensemble: PathEnsemble) -> PathEnsemble:
    """
    Time reversal X*_t = X_{T-t} as an index map on the shared grid
    """
    direction = REVERSED if ensemble.direction == FORWARD else FORWARD
    return PathEnsemble(ensemble.grid, ensemble.paths[:, ::-1, :].copy(), ensemble.seeds, direction)


def path_values(ensemble: PathEnsemble, func: Callable) -> np.ndarray:
    """
    Evaluates func(t_k, X_k) along every path, shape (N, M+1)
    """
    values = np.empty((ensemble.count, ensemble.grid.steps + 1))
    for k, t in enumerate(ensemble.grid.times):
        values[:, k] = func(t, ensemble.states(k))
    return values


def _trapezoid_pieces(values: np.ndarray, steps: np.ndarray) -> np.ndarray:
    if np.any(np.isnan(values)) or np.any(values == np.inf):
        raise NonFiniteIntegralError("Integrand takes +inf or NaN values along a path.")
    # -inf is the killing sentinel and propagates
    return 0.5 * (values[:, :-1] + values[:, 1:]) * steps


def head_integrals(values: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """
    Per-path integrals over [0, t_k] for every knot, shape (N, M+1)
    """
    pieces = _trapezoid_pieces(values, grid.dt)
    result = np.zeros_like(values)
    result[:, 1:] = np.cumsum(pieces, axis=1)
    return result


def tail_integrals(values: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """
    Per-path integrals over [t_k, T] for every knot, shape (N, M+1)
    """
    pieces = _trapezoid_pieces(values, grid.dt)
    result = np.zeros_like(values)
    result[:, :-1] = np.cumsum(pieces[:, ::-1], axis=1)[:, ::-1]
    return result


def window_integrals(values: np.ndarray, grid: TimeGrid, start: int, stop: int) -> np.ndarray:
    """
    Per-path integrals over [t_start, t_stop]
    """
    if stop <= start:
        return np.zeros(values.shape[0])
    pieces = _trapezoid_pieces(values[:, start:stop + 1], grid.dt[start:stop])
    return np.sum(pieces, axis=1)


def integrate_along(ensemble: PathEnsemble, func: Callable) -> np.ndarray:
    """
    Trapezoidal integral of s -> W(s, X_s) over [0, T] for every path
    """
    values = path_values(ensemble, func)
    return np.sum(_trapezoid_pieces(values, ensemble.grid.dt), axis=1)
