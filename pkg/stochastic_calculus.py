"""
Stochastic derivatives, carre du champ and Nelson velocities estimated from path ensembles
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from constants import MIN_SAMPLES
from diffusion import DiffusionSpec, PathEnsemble, TimeGrid, path_values, reverse
from field import MaskCoverageError, ScalarField, SpaceBox, VectorFieldEstimate, conditional_mean

log = logging.getLogger(__name__)

LEFT = "left"
RIGHT = "right"
RENORMALIZE = "renormalize"
TRUNCATE = "truncate"


class BandwidthTooSmallError(Exception):
    """
    Bandwidth is shorter than one time step
    """


@dataclass(frozen=True)
class KernelSpec:
    """
    Box kernel: left k^h = (1/h) 1_[-h,0] averages [t, t+h], right k^-h = (1/h) 1_[0,h] averages [t-h, t]
    """

    shape: str
    h: float

    def __post_init__(self):
        if self.shape not in (LEFT, RIGHT):
            raise ValueError(f"Unknown kernel shape {self.shape}.")
        if self.h <= 0:
            raise ValueError(f"Bandwidth must be positive, got {self.h}.")


def window_steps(grid: TimeGrid, h: float) -> int:
    """
    Number of grid steps spanned by the bandwidth h on a uniform grid
    """
    if not grid.is_uniform:
        raise ValueError("Bandwidth windows need a uniform time grid.")
    step = grid.dt[0]
    if h < step * (1 - 1e-9):
        raise BandwidthTooSmallError(f"Bandwidth {h} is below the time step {step}.")
    width = int(round(h / step))
    if abs(width * step - h) > 1e-9 * h:
        raise ValueError(f"Bandwidth {h} is not a multiple of the time step {step}.")
    return width


def convolve_time(values: np.ndarray, kernel: KernelSpec, grid: TimeGrid, boundary: str = RENORMALIZE) -> np.ndarray:
    """
    Box average of per-path series over the kernel window with trapezoid quadrature.
    renormalize: partial windows at the ends are averaged over their actual length.
    truncate: the integral over [0, T] divided by h, partial windows lose mass.
    """
    if boundary not in (RENORMALIZE, TRUNCATE):
        raise ValueError(f"Unknown boundary mode {boundary}.")
    width = window_steps(grid, kernel.h)
    series = np.atleast_2d(np.asarray(values, dtype=float))
    steps = grid.steps
    pieces = 0.5 * (series[:, :-1] + series[:, 1:]) * grid.dt
    cumulative = np.zeros_like(series)
    cumulative[:, 1:] = np.cumsum(pieces, axis=1)

    knots = np.arange(steps + 1)
    if kernel.shape == LEFT:
        start, stop = knots, np.minimum(knots + width, steps)
    else:
        start, stop = np.maximum(knots - width, 0), knots
    mass = cumulative[:, stop] - cumulative[:, start]
    if boundary == TRUNCATE:
        result = mass / kernel.h
    else:
        span = grid.times[stop] - grid.times[start]
        edge = span == 0
        result = np.where(edge, series, mass / np.where(edge, 1.0, span))
    return result.reshape(np.shape(values))


def series_norm(values: np.ndarray, grid: TimeGrid, p: float = 2.0) -> np.ndarray:
    """
    Discrete L^p norm over time with the uniform step as weight
    """
    series = np.atleast_2d(np.asarray(values, dtype=float))
    return (grid.dt[0] * np.sum(np.abs(series) ** p, axis=1)) ** (1.0 / p)


@dataclass
class BandwidthLadder:
    """
    Estimates at bandwidths h, h/2, h/4 with the extrapolation 2 D(h/2) - D(h)
    """

    bandwidths: List[float]
    rungs: List[ScalarField]
    extrapolated: ScalarField
    meta: dict = field(default_factory=dict)

    @property
    def raw(self) -> ScalarField:
        return self.rungs[0]


def _weights_of(ensemble, weights: Optional[np.ndarray]) -> Tuple[PathEnsemble, Optional[np.ndarray]]:
    if hasattr(ensemble, "base"):
        return ensemble.base, ensemble.weights if weights is None else weights
    return ensemble, weights


def _increments(values: np.ndarray, grid: TimeGrid, width: int) -> np.ndarray:
    """
    (values[k + w] - values[k]) / elapsed with windows clipped at T; last knot undefined
    """
    steps = grid.steps
    knots = np.arange(steps + 1)
    stop = np.minimum(knots + width, steps)
    elapsed = grid.times[stop] - grid.times[knots]
    with np.errstate(invalid="ignore", divide="ignore"):
        result = (values[:, stop] - values[:, knots]) / np.where(elapsed > 0, elapsed, np.nan)
    return result


def _bin_series(ensemble: PathEnsemble, series: np.ndarray, box: SpaceBox, weights: Optional[np.ndarray],
                min_samples: int):
    knots = ensemble.grid.steps + 1
    shape = (knots, box.n_cells)
    mean, stderr = np.full(shape, np.nan), np.zeros(shape)
    samples, mask = np.zeros(shape, dtype=int), np.zeros(shape, dtype=bool)
    for k in range(knots):
        cells = box.cell_index(ensemble.states(k))
        mean[k], stderr[k], samples[k], mask[k] = conditional_mean(cells, series[:, k], box.n_cells, weights,
                                                                   min_samples)
    return mean, stderr, samples, mask


def _ladder(ensemble: PathEnsemble, build: Callable[[int], np.ndarray], h: float, box: SpaceBox,
            weights: Optional[np.ndarray], min_samples: int, name: str) -> BandwidthLadder:
    grid = ensemble.grid
    width = window_steps(grid, h)
    widths = [width]
    for divisor in (2, 4):
        if width % divisor == 0:
            widths.append(width // divisor)

    rungs = []
    for current in widths:
        mean, stderr, samples, mask = _bin_series(ensemble, build(current), box, weights, min_samples)
        rungs.append(ScalarField(grid, box, mean, mask, samples, stderr,
                                 {"field": name, "h": current * grid.dt[0], "window_steps": current}))
    if not np.any(rungs[0].mask):
        raise MaskCoverageError(f"No valid cell for {name} at h={h}.")

    if len(rungs) > 1:
        coarse, fine = rungs[0], rungs[1]
        values = 2 * fine.values - coarse.values
        stderr = np.sqrt(4 * fine.stderr ** 2 + coarse.stderr ** 2)
        extrapolated = ScalarField(grid, box, values, coarse.mask & fine.mask, coarse.samples, stderr,
                                   {"field": f"{name} extrapolated", "h": h})
    else:
        extrapolated = rungs[0]
    return BandwidthLadder([rung.meta["h"] for rung in rungs], rungs, extrapolated, {"field": name})


def _secant_gradient(u: Callable, t: float, x: np.ndarray, step: np.ndarray) -> np.ndarray:
    slopes = []
    for axis in range(x.shape[1]):
        shift = np.zeros(x.shape[1])
        shift[axis] = step[axis]
        slopes.append((np.asarray(u(t, x + shift), dtype=float) - np.asarray(u(t, x - shift), dtype=float))
                      / (2 * step[axis]))
    return np.stack(slopes, axis=-1)


def martingale_part(ensemble: PathEnsemble, u: Callable, spec: DiffusionSpec, step: np.ndarray) -> np.ndarray:
    """
    Running sum of grad u(t_j, X_j) . (X_{j+1} - X_j - b(t_j, X_j) dt_j) along every path, zero at knot 0.
    Each term has conditional mean zero given the path up to t_j, whatever the gradient's accuracy;
    the gradient is a central secant of u with half-width `step` and counts as zero where u is undefined.
    """
    grid = ensemble.grid
    running = np.zeros((ensemble.count, grid.steps + 1))
    for j in range(grid.steps):
        t = grid.times[j]
        state = ensemble.states(j)
        shock = ensemble.states(j + 1) - state - spec.drift_at(t, state) * grid.dt[j]
        with np.errstate(invalid="ignore"):
            slope = np.nan_to_num(_secant_gradient(u, t, state, step), nan=0.0, posinf=0.0, neginf=0.0)
        running[:, j + 1] = running[:, j] + np.einsum("pi,pi->p", slope, shock)
    return running


def forward_derivative(ensemble, u: Callable, h: float, box: SpaceBox, weights: Optional[np.ndarray] = None,
                       min_samples: int = MIN_SAMPLES, spec: Optional[DiffusionSpec] = None) -> BandwidthLadder:
    """
    Conditional increment quotient E[(u(t+h, X_{t+h}) - u(t, X_t)) / h | X_t in cell].
    Optional weights give the weighted conditional mean.
    With the reference spec, the martingale part of the increments is subtracted path by path:
    the conditional mean is unchanged and the variance drops to what the time drift and curvature leave.
    """
    ensemble, weights = _weights_of(ensemble, weights)
    if spec is not None and weights is not None:
        raise ValueError("Martingale compensation holds under the reference law only, not under weights.")
    values = path_values(ensemble, u)
    if spec is not None:
        values = values - martingale_part(ensemble, u, spec, box.widths / 4)
    return _ladder(ensemble, lambda width: _increments(values, ensemble.grid, width), h, box, weights,
                   min_samples, "forward derivative")


def _flip(ladder: BandwidthLadder, sign: float) -> BandwidthLadder:
    def turn(estimate: ScalarField) -> ScalarField:
        return ScalarField(estimate.grid, estimate.box, sign * estimate.values[::-1], estimate.mask[::-1],
                           estimate.samples[::-1], estimate.stderr[::-1], estimate.meta)

    return BandwidthLadder(ladder.bandwidths, [turn(rung) for rung in ladder.rungs], turn(ladder.extrapolated),
                           ladder.meta)


def backward_derivative(ensemble, u: Callable, h: float, box: SpaceBox, weights: Optional[np.ndarray] = None,
                        min_samples: int = MIN_SAMPLES, convention: str = "reversed") -> BandwidthLadder:
    """
    Forward derivative of the reversed ensemble with u*(t*, x) = u(T - t*, x), reported on original knots.
    reversed: E[(u(t-h, X_{t-h}) - u(t, X_t)) / h | X_t].
    original: E[(u(t, X_t) - u(t-h, X_{t-h})) / h | X_t].
    """
    if convention not in ("reversed", "original"):
        raise ValueError(f"Unknown convention {convention}.")
    ensemble, weights = _weights_of(ensemble, weights)
    if not ensemble.grid.is_uniform:
        raise ValueError("Backward derivatives need a uniform time grid.")
    # u* on knot k* is u on knot M - k*
    values = path_values(ensemble, u)[:, ::-1]
    reversed_paths = reverse(ensemble)
    ladder = _ladder(reversed_paths, lambda width: _increments(values, ensemble.grid, width), h, box, weights,
                     min_samples, "backward derivative")
    return _flip(ladder, 1.0 if convention == "reversed" else -1.0)


def carre_du_champ(ensemble, u: Callable, v: Callable, h: float, box: SpaceBox,
                   weights: Optional[np.ndarray] = None, min_samples: int = MIN_SAMPLES) -> BandwidthLadder:
    """
    Gamma(u, v) as the conditional mean of the product of increments per unit time
    """
    ensemble, weights = _weights_of(ensemble, weights)
    first = path_values(ensemble, u)
    second = path_values(ensemble, v)
    grid = ensemble.grid

    def build(width: int) -> np.ndarray:
        knots = np.arange(grid.steps + 1)
        elapsed = grid.times[np.minimum(knots + width, grid.steps)] - grid.times
        return _increments(first, grid, width) * _increments(second, grid, width) * elapsed

    return _ladder(ensemble, build, h, box, weights, min_samples, "carre du champ")


def _drift_integrals(spec: DiffusionSpec, ensemble: PathEnsemble) -> np.ndarray:
    grid = ensemble.grid
    drift = np.stack([spec.drift_at(t, ensemble.states(k)) for k, t in enumerate(grid.times)], axis=1)
    pieces = 0.5 * (drift[:, :-1] + drift[:, 1:]) * grid.dt[None, :, None]
    cumulative = np.zeros_like(drift)
    cumulative[:, 1:] = np.cumsum(pieces, axis=1)
    return cumulative


def nelson_velocity(ensemble, h: float, box: SpaceBox, weights: Optional[np.ndarray] = None,
                    relative: bool = False, spec: Optional[DiffusionSpec] = None, extrapolate: bool = False,
                    min_samples: int = MIN_SAMPLES) -> VectorFieldEstimate:
    """
    Conditional mean displacement per unit time; with relative=True the reference drift
    integrated over the window is subtracted, leaving the Girsanov velocity.
    """
    ensemble, weights = _weights_of(ensemble, weights)
    if relative and spec is None:
        raise ValueError("Relative velocity needs the reference spec.")
    grid = ensemble.grid
    compensator = _drift_integrals(spec, ensemble) if relative else None

    components = []
    for axis in range(ensemble.dim):
        coordinate = ensemble.paths[:, :, axis]
        if compensator is not None:
            coordinate = coordinate - compensator[:, :, axis]
        ladder = _ladder(ensemble, lambda width, series=coordinate: _increments(series, grid, width), h, box,
                         weights, min_samples, f"velocity {axis + 1}")
        components.append(ladder.extrapolated if extrapolate else ladder.raw)

    values = np.stack([part.values for part in components], axis=-1)
    stderr = np.stack([part.stderr for part in components], axis=-1)
    mask = np.logical_and.reduce([part.mask for part in components])
    return VectorFieldEstimate(grid, box, values, stderr, components[0].samples, mask,
                               {"field": "relative velocity" if relative else "velocity", "h": h})


def exit_time_truncate(ensemble: PathEnsemble, radius: float) -> Tuple[PathEnsemble, np.ndarray]:
    """
    Freezes every path at its first knot with |X| >= radius.
    Exit knots are -1 for paths that never exit.
    """
    if radius <= 0:
        raise ValueError(f"Radius must be positive, got {radius}.")
    if np.isinf(radius):
        return ensemble, np.full(ensemble.count, -1, dtype=int)

    outside = np.linalg.norm(ensemble.paths, axis=2) >= radius
    exited = np.any(outside, axis=1)
    exit_knots = np.where(exited, np.argmax(outside, axis=1), -1)
    if not np.any(exited):
        return ensemble, exit_knots

    paths = ensemble.paths.copy()
    knots = np.arange(ensemble.grid.steps + 1)
    for index in np.flatnonzero(exited):
        stop = exit_knots[index]
        paths[index, knots > stop] = paths[index, stop]
    log.info("%s of %s paths exited radius %s.", int(np.sum(exited)), ensemble.count, radius)
    return PathEnsemble(ensemble.grid, paths, ensemble.seeds, ensemble.direction), exit_knots
