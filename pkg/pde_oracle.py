"""
One-dimensional Crank-Nicolson solver for the backward Feynman-Kac equation and its forward analogue
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, solve_banded

from constants import PDE_LOG_FLOOR
from diffusion import FKProblem, TimeGrid
from field import ScalarField, SpaceBox, multilinear

log = logging.getLogger(__name__)

NEUMANN = "neumann"
DIRICHLET = "dirichlet"


class LinearSolveFailureError(Exception):
    """
    The tridiagonal system of a time step is singular
    """


class NonFiniteSolutionError(Exception):
    """
    The discrete solution left the reals
    """


class MaximumPrincipleError(Exception):
    """
    A potential-free Neumann solve left the range of its data
    """


@dataclass
class PdeGrid:
    """
    Cell-centred grid on [x_lo, x_hi] with a boundary policy per edge.
    Dirichlet edges take their values from `boundary(t, x)`; `band` cells next to
    each edge are excluded from oracle comparisons.
    """

    x_lo: float
    x_hi: float
    cells: int
    grid: TimeGrid
    left: str = NEUMANN
    right: str = NEUMANN
    boundary: Optional[Callable] = None
    band: Optional[int] = None

    def __post_init__(self):
        if self.cells < 16:
            raise ValueError(f"PDE grid needs at least 16 cells, got {self.cells}.")
        if self.x_hi <= self.x_lo:
            raise ValueError("PDE interval is empty.")
        for policy in (self.left, self.right):
            if policy not in (NEUMANN, DIRICHLET):
                raise ValueError(f"Unknown boundary policy {policy}.")
        if DIRICHLET in (self.left, self.right) and self.boundary is None:
            raise ValueError("Dirichlet edges need a boundary closed form.")
        if self.band is None:
            self.band = max(1, self.cells // 20)

    @property
    def box(self) -> SpaceBox:
        return SpaceBox([self.x_lo], [self.x_hi], [self.cells])

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.cells

    @property
    def nodes(self) -> np.ndarray:
        return self.box.centers()


def _operator(pde: PdeGrid, drift: np.ndarray, diffusion: np.ndarray, potential: np.ndarray):
    """
    Tridiagonal rows of b d_x + (a/2) d_xx + V, with the ghost cells folded in
    """
    dx = pde.dx
    lower = diffusion / (2 * dx ** 2) - drift / (2 * dx)
    upper = diffusion / (2 * dx ** 2) + drift / (2 * dx)
    diagonal = -diffusion / dx ** 2 + potential
    constant = np.zeros_like(diagonal)
    return lower, diagonal, upper, constant


def _with_edges(pde: PdeGrid, rows, t: float):
    lower, diagonal, upper, constant = (part.copy() for part in rows)
    for edge, policy, position, ghost_coefficient in ((0, pde.left, pde.x_lo, lower), (-1, pde.right, pde.x_hi, upper)):
        if policy == NEUMANN:
            diagonal[edge] += ghost_coefficient[edge]
        else:
            # edge value sits halfway between the ghost and the first cell
            value = float(np.asarray(pde.boundary(t, np.array([[position]])), dtype=float).ravel()[0])
            diagonal[edge] -= ghost_coefficient[edge]
            constant[edge] += 2 * ghost_coefficient[edge] * value
    return lower, diagonal, upper, constant


def _coefficients(problem: FKProblem, drift: Callable, t: float, nodes: np.ndarray):
    matrix = problem.spec.diffusion_matrix(t, nodes)[:, 0, 0]
    return (np.asarray(drift(t, nodes), dtype=float).reshape(-1) * np.ones(nodes.shape[0]),
            matrix, problem.potential_at(t, nodes))


def _apply(rows, values: np.ndarray) -> np.ndarray:
    lower, diagonal, upper, constant = rows
    result = diagonal * values + constant
    result[1:] += lower[1:] * values[:-1]
    result[:-1] += upper[:-1] * values[1:]
    return result


def _march(problem: FKProblem, pde: PdeGrid, drift: Callable, start: np.ndarray, order) -> np.ndarray:
    """
    Crank-Nicolson steps along `order`, a sequence of (from_knot, to_knot) pairs
    """
    nodes = pde.nodes
    knots = pde.grid.steps + 1
    solution = np.empty((knots, pde.cells))
    first = order[0][0]
    solution[first] = start
    for source, target in order:
        step = abs(pde.grid.times[target] - pde.grid.times[source])
        known = _with_edges(pde, _operator(pde, *_coefficients(problem, drift, pde.grid.times[source], nodes)),
                            pde.grid.times[source])
        unknown = _with_edges(pde, _operator(pde, *_coefficients(problem, drift, pde.grid.times[target], nodes)),
                              pde.grid.times[target])
        rhs = solution[source] + 0.5 * step * _apply(known, solution[source]) + 0.5 * step * unknown[3]
        lower, diagonal, upper, _ = unknown
        banded = np.zeros((3, pde.cells))
        banded[0, 1:] = -0.5 * step * upper[:-1]
        banded[1] = 1 - 0.5 * step * diagonal
        banded[2, :-1] = -0.5 * step * lower[1:]
        try:
            solution[target] = solve_banded((1, 1), banded, rhs)
        except (LinAlgError, ValueError) as exc:
            raise LinearSolveFailureError(f"Tridiagonal solve failed at t={pde.grid.times[target]}.") from exc
        if not np.all(np.isfinite(solution[target])):
            raise NonFiniteSolutionError(f"Non-finite solution at t={pde.grid.times[target]}.")
    return solution


def _check_maximum_principle(problem: FKProblem, pde: PdeGrid, solution: np.ndarray, data: np.ndarray) -> None:
    if pde.left != NEUMANN or pde.right != NEUMANN:
        return
    nodes = pde.nodes
    if any(np.any(problem.potential_at(t, nodes) != 0) for t in pde.grid.times):
        return
    slack = 1e-9 * (1 + np.max(np.abs(data)))
    if np.min(solution) < np.min(data) - slack or np.max(solution) > np.max(data) + slack:
        raise MaximumPrincipleError(
            f"Solution range [{np.min(solution):.6g}, {np.max(solution):.6g}] leaves data range "
            f"[{np.min(data):.6g}, {np.max(data):.6g}].")


def _to_field(pde: PdeGrid, solution: np.ndarray, name: str) -> ScalarField:
    return ScalarField(pde.grid, pde.box, solution, np.ones_like(solution, dtype=bool),
                       meta={"field": name, "source": "pde", "boundary_band": pde.band,
                             "boundary": [pde.left, pde.right]})


def _check_one_dimensional(problem: FKProblem) -> None:
    if problem.spec.dim != 1:
        raise ValueError(f"The PDE oracle is one-dimensional, got dimension {problem.spec.dim}.")


def solve_fk_backward(problem: FKProblem, pde: PdeGrid) -> ScalarField:
    """
    (d_t + b d_x + (a/2) d_xx + V) g = 0 with g(T, .) = g_T, marched back from T
    """
    _check_one_dimensional(problem)
    terminal = problem.terminal_at(pde.nodes)
    steps = pde.grid.steps
    order = [(k, k - 1) for k in range(steps, 0, -1)]
    solution = _march(problem, pde, problem.spec.drift_at, terminal, order)
    _check_maximum_principle(problem, pde, solution, terminal)
    log.info("Backward PDE solved on %s cells and %s steps.", pde.cells, steps)
    return _to_field(pde, solution, "g")


def solve_fk_forward(problem: FKProblem, pde: PdeGrid, reversed_drift: Callable) -> ScalarField:
    """
    (-d_t + b~ d_x + (a/2) d_xx + V) f = 0 with f(0, .) = f_0, marched forward from 0;
    the reversed drift b~ is supplied in closed form
    """
    _check_one_dimensional(problem)
    initial = problem.initial_weight_at(pde.nodes)
    order = [(k, k + 1) for k in range(pde.grid.steps)]
    solution = _march(problem, pde, reversed_drift, initial, order)
    _check_maximum_principle(problem, pde, solution, initial)
    log.info("Forward PDE solved on %s cells and %s steps.", pde.cells, pde.grid.steps)
    return _to_field(pde, solution, "f")


def psi_from_pde(g: ScalarField) -> ScalarField:
    """
    log g with every cell valid; values under the solver floor are clipped and flagged
    """
    below = g.values < PDE_LOG_FLOOR
    clipped = int(np.sum(below))
    if clipped:
        log.warning("%s PDE cells fell below %.1e and were clipped.", clipped, PDE_LOG_FLOOR)
    psi = np.log(np.maximum(g.values, PDE_LOG_FLOOR))
    name = g.meta.get("field", "g")
    return g.replace(values=psi, mask=np.ones_like(psi, dtype=bool),
                     meta={"field": f"log {name}", "clipped_cells": clipped})


@dataclass
class OracleComparison:
    cells: int
    agreement: float
    max_excess: float
    threshold: float = 0.95

    @property
    def passed(self) -> bool:
        return self.cells > 0 and self.agreement >= self.threshold

    def to_json(self) -> dict:
        return {"cells": self.cells, "agreement": self.agreement, "max_excess": self.max_excess,
                "threshold": self.threshold, "passed": self.passed}


def compare_with_mc(estimate: ScalarField, oracle: ScalarField, tolerance: float = 1e-3,
                    sigmas: float = 3.0) -> OracleComparison:
    """
    Share of jointly valid cells, outside the oracle's boundary band,
    where |MC - PDE| <= sigmas * stderr + tolerance
    """
    if estimate.grid != oracle.grid:
        raise ValueError("MC and PDE fields must share the time grid.")
    band = int(oracle.meta.get("boundary_band", 0))
    trusted = np.ones(oracle.box.n_cells, dtype=bool)
    if band:
        trusted[:band] = False
        trusted[-band:] = False
    centers = estimate.box.centers()
    excess, checked, inside = [], 0, 0
    for k in range(oracle.grid.steps + 1):
        reference, ok = multilinear(oracle.box, oracle.values[k], oracle.mask[k] & trusted, centers)
        joint = ok & estimate.mask[k]
        if not np.any(joint):
            continue
        gap = np.abs(estimate.values[k, joint] - reference[joint]) - (sigmas * estimate.stderr[k, joint] + tolerance)
        excess.append(float(np.max(gap)))
        checked += int(np.sum(joint))
        inside += int(np.sum(gap <= 0))
    if not checked:
        return OracleComparison(0, 0.0, float("inf"))
    return OracleComparison(checked, inside / checked, max(excess))


def closed_form_gaussian(potential: float = 0.3, horizon: float = 1.0) -> Callable:
    """
    g(t, x) for b = 0, a = 1, constant V and g_T = exp(-x^2 / 2)
    """

    def solution(t, x):
        remaining = horizon - t
        x = np.asarray(x, dtype=float).reshape(-1)
        return np.exp(potential * remaining - x ** 2 / (2 * (1 + remaining))) / np.sqrt(1 + remaining)

    return solution
