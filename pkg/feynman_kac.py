"""
Monte Carlo Feynman-Kac fields: backward g, forward f, the semigroup action and the log transform
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from constants import LOG_FLOOR_FRACTION, MIN_SAMPLES
from diffusion import FKProblem, FORWARD, PathEnsemble, head_integrals, path_values, tail_integrals, \
    window_integrals
from field import EmptyFieldError, FieldSlice, ScalarField, SpaceBox, conditional_mean

log = logging.getLogger(__name__)


class NonFiniteWeightError(Exception):
    """
    A Feynman-Kac functional is +inf or NaN
    """


class InterpolationOutOfRangeError(Exception):
    """
    Every path left the valid region of the interpolated field
    """


def _check_forward(ensemble: PathEnsemble) -> None:
    if ensemble.direction != FORWARD:
        raise ValueError("Feynman-Kac estimators need a forward-time ensemble.")


def _check_functional(values: np.ndarray, what: str) -> None:
    if np.any(np.isnan(values)) or np.any(values == np.inf):
        raise NonFiniteWeightError(f"{what} functional is +inf or NaN on {int(np.sum(~np.isfinite(values)))} paths.")


def _bin_knots(ensemble: PathEnsemble, box: SpaceBox, functional: np.ndarray, min_samples: int,
               name: str) -> ScalarField:
    knots = ensemble.grid.steps + 1
    shape = (knots, box.n_cells)
    values, stderr = np.full(shape, np.nan), np.zeros(shape)
    samples, mask = np.zeros(shape, dtype=int), np.zeros(shape, dtype=bool)
    for k in range(knots):
        cells = box.cell_index(ensemble.states(k))
        values[k], stderr[k], samples[k], mask[k] = conditional_mean(cells, functional[:, k], box.n_cells,
                                                                     min_samples=min_samples)
    if not np.any(mask):
        raise EmptyFieldError(f"No cell of {name} reached {min_samples} samples.")
    result = ScalarField(ensemble.grid, box, values, mask, samples, stderr, {"field": name})
    log.info("Field %s estimated, %.1f%% of cells valid.", name, 100 * result.valid_fraction)
    return result


def fk_solve_backward(problem: FKProblem, ensemble: PathEnsemble, box: SpaceBox,
                      min_samples: int = MIN_SAMPLES) -> ScalarField:
    """
    g(t_k, x_c) = E_R[exp(int_{t_k}^T V) g_T(X_T) | X_{t_k} in c] by binning at every knot
    """
    _check_forward(ensemble)
    potential = path_values(ensemble, problem.potential_at)
    terminal = problem.terminal_at(ensemble.states(ensemble.grid.steps))
    with np.errstate(over="ignore"):
        functional = np.exp(tail_integrals(potential, ensemble.grid)) * terminal[:, None]
    _check_functional(functional, "Backward")
    return _bin_knots(ensemble, box, functional, min_samples, "g")


def fk_solve_forward(problem: FKProblem, ensemble: PathEnsemble, box: SpaceBox,
                     min_samples: int = MIN_SAMPLES) -> ScalarField:
    """
    f(t_k, x_c) = E_R[f_0(X_0) exp(int_0^{t_k} V) | X_{t_k} in c]
    """
    _check_forward(ensemble)
    potential = path_values(ensemble, problem.potential_at)
    initial = problem.initial_weight_at(ensemble.states(0))
    with np.errstate(over="ignore"):
        functional = initial[:, None] * np.exp(head_integrals(potential, ensemble.grid))
    _check_functional(functional, "Forward")
    return _bin_knots(ensemble, box, functional, min_samples, "f")


def fk_semigroup_apply(problem: FKProblem, ensemble: PathEnsemble, r: int, t: int, u: FieldSlice,
                       min_samples: int = MIN_SAMPLES) -> FieldSlice:
    """
    (S_t^r u)(x) = E_R[exp(int_r^t V) u(X_t) | X_r = x] on the cells of u's box.
    Paths reaching time t outside the valid region of u are dropped and counted.
    """
    _check_forward(ensemble)
    if r > t:
        raise ValueError(f"Semigroup needs r <= t, got r={r}, t={t}.")
    box = u.box
    times = ensemble.grid.times
    if r == t:
        values, ok = u.interpolate(box.centers())
        return FieldSlice(box, values, ok & u.mask, float(times[r]), u.stderr, u.samples, {"dropped": 0})

    potential = path_values(ensemble, problem.potential_at)
    with np.errstate(over="ignore"):
        tilt = np.exp(window_integrals(potential, ensemble.grid, r, t))
    end_values, ok = u.interpolate(ensemble.states(t))
    dropped = int(np.sum(~ok))
    if dropped == ensemble.count:
        raise InterpolationOutOfRangeError(f"All {dropped} paths left the valid region of u at t={times[t]}.")
    if dropped:
        log.warning("%s of %s paths left the valid region of u at t=%s and were dropped.",
                    dropped, ensemble.count, times[t])

    functional = np.where(ok, tilt * np.where(ok, end_values, 0.0), np.nan)
    _check_functional(functional[ok], "Semigroup")
    cells = np.where(ok, box.cell_index(ensemble.states(r)), -1)
    values, stderr, samples, mask = conditional_mean(cells, functional, box.n_cells, min_samples=min_samples)
    if not np.any(mask):
        raise EmptyFieldError(f"No cell of S_t^r u reached {min_samples} samples.")
    return FieldSlice(box, values, mask, float(times[r]), stderr, samples, {"dropped": dropped})


def log_transform(values: ScalarField, floor: Optional[float] = None) -> ScalarField:
    """
    psi = log g on cells where g >= floor; cells below the floor are masked, not floored.
    The default floor is a fixed fraction of the largest valid value.
    """
    valid = values.mask
    if floor is None:
        peak = np.max(values.values[valid]) if np.any(valid) else 0.0
        floor = LOG_FLOOR_FRACTION * peak
    keep = valid & (values.values >= floor) & (values.values > 0)
    below = int(np.sum(valid & ~keep))
    if below:
        log.warning("%s cells fell below the log floor %.3e and were masked.", below, floor)

    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(keep, np.log(np.where(keep, values.values, 1.0)), np.nan)
        stderr = np.where(keep, values.stderr / np.where(keep, values.values, 1.0), np.nan)
    name = values.meta.get("field", "g")
    return values.replace(values=psi, mask=keep, stderr=stderr,
                          meta={"field": f"log {name}", "log_floor": floor, "below_floor_cells": below})


@dataclass
class SemigroupReport:
    """
    Agreement of g(r, .) with S_t^r g(t, .) per knot pair
    """

    pairs: List[Tuple[int, int]]
    agreement: List[float]
    joint_cells: List[int]
    threshold: float = 0.95
    dropped: List[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(share >= self.threshold for share in self.agreement)

    def to_json(self) -> dict:
        return {"pairs": [list(pair) for pair in self.pairs], "agreement": self.agreement,
                "joint_cells": self.joint_cells, "dropped": self.dropped,
                "threshold": self.threshold, "passed": self.passed}


def semigroup_consistency(problem: FKProblem, ensemble: PathEnsemble, g: ScalarField,
                          pairs: Optional[Sequence[Tuple[int, int]]] = None, sigmas: float = 2.0,
                          min_samples: int = MIN_SAMPLES) -> SemigroupReport:
    """
    Share of jointly valid cells where g(r, .) and S_t^r g(t, .) agree within `sigmas` pooled standard errors
    """
    steps = ensemble.grid.steps
    if pairs is None:
        pairs = [(0, steps // 2), (steps // 2, steps), (0, steps)]
    agreement, joint_cells, dropped = [], [], []
    for r, t in pairs:
        applied = fk_semigroup_apply(problem, ensemble, r, t, g.slice(t), min_samples)
        joint = applied.mask & g.mask[r]
        pooled = np.sqrt(applied.stderr[joint] ** 2 + g.stderr[r, joint] ** 2)
        gap = np.abs(applied.values[joint] - g.values[r, joint])
        close = gap <= sigmas * pooled + 1e-12 * np.abs(g.values[r, joint])
        agreement.append(float(np.mean(close)) if np.any(joint) else 0.0)
        joint_cells.append(int(np.sum(joint)))
        dropped.append(applied.meta["dropped"])
    return SemigroupReport(list(pairs), agreement, joint_cells, dropped=dropped)
