"""
Feynman-Kac transform of the reference path measure: importance weights, relative entropy
and the Girsanov-side identities it satisfies
"""
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import sem

from conditions import entropy_domain_guard
from constants import ESS_FLOOR_FRACTION, MIN_COVERAGE, MIN_SAMPLES
from diffusion import DiffusionSpec, FKProblem, NonFiniteIntegralError, PathEnsemble, integrate_along, \
    path_values, window_integrals
from feynman_kac import NonFiniteWeightError
from field import DegenerateESSError, MaskCoverageError, ScalarField, SpaceBox, cell_masses, conditional_mean
from hjb_verify import GRID_DIFFERENCES, gradient_estimate

log = logging.getLogger(__name__)


class AllKilledError(Exception):
    """
    Every path carries a -inf log-weight
    """


class WeightedEnsemble:
    """
    Reference ensemble with per-path log dP/dR; normalized weights have empirical mean 1
    """

    def __init__(self, base: PathEnsemble, log_weights: np.ndarray):
        log_weights = np.asarray(log_weights, dtype=float)
        if log_weights.shape != (base.count,):
            raise ValueError(f"Expected {base.count} log-weights, got shape {log_weights.shape}.")
        if np.any(np.isnan(log_weights)) or np.any(log_weights == np.inf):
            raise NonFiniteWeightError("Log-weights contain +inf or NaN.")
        alive = log_weights > -np.inf
        if not np.any(alive):
            raise AllKilledError(f"All {base.count} paths were killed.")

        self.base = base
        self.log_weights = log_weights
        self.log_normalizer = float(logsumexp(log_weights) - np.log(base.count))
        self.normalized_log_weights = log_weights - self.log_normalizer
        self.weights = np.exp(self.normalized_log_weights)
        self.ess = float(np.sum(self.weights) ** 2 / np.sum(self.weights ** 2))
        self.killed = int(np.sum(~alive))

    @property
    def count(self) -> int:
        return self.base.count

    @property
    def killed_fraction(self) -> float:
        return self.killed / self.base.count

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as file:
            writer = csv.writer(file)
            writer.writerow(["path", "log_weight", "weight"])
            for index, (log_weight, weight) in enumerate(zip(self.log_weights, self.weights)):
                writer.writerow([index, repr(float(log_weight)), repr(float(weight))])


def fk_weights(problem: FKProblem, ensemble: PathEnsemble) -> WeightedEnsemble:
    """
    log f_0(X_0) + int_0^T V(t, X_t) dt + log g_T(X_T) for every path
    """
    try:
        action = integrate_along(ensemble, problem.potential_at)
    except NonFiniteIntegralError as exc:
        raise NonFiniteWeightError("Potential integral is +inf or NaN along a path.") from exc
    with np.errstate(divide="ignore"):
        start = np.log(problem.initial_weight_at(ensemble.states(0)))
        end = np.log(problem.terminal_at(ensemble.states(ensemble.grid.steps)))
    weighted = WeightedEnsemble(ensemble, start + action + end)
    log.info("Feynman-Kac weights built: ESS %.1f of %s, %s killed paths.", weighted.ess, ensemble.count,
             weighted.killed)
    return weighted


def _check_ess(weighted: WeightedEnsemble, ess_floor: Optional[float]) -> None:
    floor = ESS_FLOOR_FRACTION * weighted.count if ess_floor is None else ess_floor
    if weighted.ess < floor:
        raise DegenerateESSError(f"ESS {weighted.ess:.2f} below floor {floor:.2f}.")


@dataclass
class EntropyEstimate:
    """
    Pathwise relative entropy H(P|R) with jackknife standard error and diagnostics
    """

    value: float
    stderr: float
    ess: float
    killed_fraction: float
    outside_domain: bool = False
    truncated_reference: bool = False
    diagnostics: dict = field(default_factory=dict)


def _entropy_terms(log_weights: np.ndarray) -> Tuple[float, float]:
    alive = log_weights > -np.inf
    shifted = np.exp(log_weights - np.max(log_weights[alive]))
    log_shifted = np.where(alive, log_weights - np.max(log_weights[alive]), 0.0)
    count = log_weights.shape[0]
    mass = np.sum(shifted)
    tilt = np.sum(shifted * log_shifted)
    value = tilt / mass - np.log(mass / count)

    rest_mass = mass - shifted
    rest_tilt = tilt - shifted * log_shifted
    if count < 3 or np.any(rest_mass <= 0):
        return float(value), float("inf")
    leave_one_out = rest_tilt / rest_mass - np.log(rest_mass / (count - 1))
    spread = np.sqrt((count - 1) / count * np.sum((leave_one_out - np.mean(leave_one_out)) ** 2))
    return float(value), float(spread)


def relative_entropy(weighted: WeightedEnsemble, ess_floor: Optional[float] = None,
                     w0: Optional[Callable] = None, spec: Optional[DiffusionSpec] = None) -> EntropyEstimate:
    """
    H(P|R) as the self-normalized mean of the normalized log-weights, with a jackknife
    standard error. An optional W_0 runs the entropy domain guard on the initial states;
    a spec with a truncated initial law marks the estimate as taken against a truncated reference.
    """
    _check_ess(weighted, ess_floor)
    value, spread = _entropy_terms(weighted.log_weights)
    estimate = EntropyEstimate(value, spread, weighted.ess, weighted.killed_fraction,
                               truncated_reference=bool(spec is not None and spec.initial_law.truncated))
    if w0 is not None:
        guard = entropy_domain_guard(weighted, w0)
        estimate.outside_domain = not guard.passed
        estimate.diagnostics["domain_guard"] = guard.to_json()
        if estimate.outside_domain:
            log.warning("Entropy estimate flagged outside the entropy domain.")
    return estimate


@dataclass
class EntropyDecomposition:
    """
    Initial-law term and kinetic action of H(P|R)
    """

    h0: float
    kinetic: float
    coverage: float
    per_knot: np.ndarray

    @property
    def total(self) -> float:
        return self.h0 + self.kinetic


def _initial_divergence(weighted: WeightedEnsemble, box: SpaceBox) -> float:
    cells = box.cell_index(weighted.base.states(0))
    target = cell_masses(cells, box.n_cells, weighted.weights)
    reference = cell_masses(cells, box.n_cells)
    used = target > 0
    if np.any(used & (reference == 0)):
        return float("inf")
    return float(np.sum(target[used] * np.log(target[used] / reference[used])))


def decompose_entropy(weighted: WeightedEnsemble, psi: ScalarField, spec: DiffusionSpec,
                      method: str = GRID_DIFFERENCES, h: Optional[float] = None,
                      min_coverage: float = MIN_COVERAGE) -> EntropyDecomposition:
    """
    h0 from the histogram ratio of P_0 to R_0, kinetic = E_P int |grad psi|_a^2 / 2 dt
    """
    if not spec.invertible:
        raise ValueError("Entropy decomposition needs an invertible diffusion matrix.")
    grad = gradient_estimate(psi, method, weighted.base, h, spec)
    grid = weighted.base.grid
    weights = weighted.weights
    total = np.sum(weights)

    per_knot = np.full(grid.steps + 1, np.nan)
    coverage = np.zeros(grid.steps + 1)
    for k, t in enumerate(grid.times):
        states = weighted.base.states(k)
        vectors, ok = grad.interpolate(k, states)
        ok &= weights > 0
        coverage[k] = np.sum(weights[ok]) / total
        if not np.any(ok):
            continue
        matrix = spec.diffusion_matrix(t, states[ok])
        energy = 0.5 * np.einsum("pi,pij,pj->p", vectors[ok], matrix, vectors[ok])
        per_knot[k] = np.sum(weights[ok] * energy) / np.sum(weights[ok])

    mean_coverage = float(np.sum(grid.trapezoid_weights() * coverage) / grid.horizon)
    if mean_coverage < min_coverage:
        raise MaskCoverageError(f"Only {mean_coverage:.1%} of the P-weight lies on valid psi cells.")
    known = np.isfinite(per_knot)
    filled = np.interp(grid.times, grid.times[known], per_knot[known])
    kinetic = float(np.sum(grid.trapezoid_weights() * filled))
    return EntropyDecomposition(_initial_divergence(weighted, psi.box), kinetic, mean_coverage, filled)


@dataclass
class DensityResiduals:
    """
    Per-path residuals of psi(s, X_s) against the binned log-conditional of exp(int_s^t V) exp(psi(t, X_t))
    """

    pairs: List[Tuple[int, int]]
    residuals: List[np.ndarray]
    stderr: List[np.ndarray]
    retained: List[float]

    def mean_abs(self, index: int) -> float:
        return float(np.mean(np.abs(self.residuals[index])))

    def pooled_stderr(self, index: int) -> float:
        return float(np.mean(self.stderr[index]))


def girsanov_log_density(weighted: WeightedEnsemble, psi: ScalarField, problem: FKProblem,
                         pairs: Optional[Sequence[Tuple[int, int]]] = None, min_samples: int = MIN_SAMPLES,
                         min_coverage: float = MIN_COVERAGE) -> DensityResiduals:
    """
    Checks psi(s, x) = log E_R[exp(int_s^t V) exp(psi(t, X_t)) | X_s = x] along the retained paths
    """
    ensemble = weighted.base
    grid, box = ensemble.grid, psi.box
    steps = grid.steps
    if pairs is None:
        pairs = [(0, steps), (steps // 4, steps // 2), (steps // 2, steps)]
    potential = path_values(ensemble, problem.potential_at)
    evaluate = psi.as_function()

    residuals, errors, retained = [], [], []
    for s, t in pairs:
        with np.errstate(over="ignore"):
            functional = np.exp(window_integrals(potential, grid, s, t) + evaluate(grid.times[t], ensemble.states(t)))
        cells = box.cell_index(ensemble.states(s))
        mean, stderr, _, mask = conditional_mean(cells, functional, box.n_cells, min_samples=min_samples)
        usable = (cells >= 0) & np.isfinite(functional)
        usable[usable] &= mask[cells[usable]] & psi.mask[s, cells[usable]]
        share = float(np.sum(weighted.weights[usable]) / np.sum(weighted.weights))
        if share < min_coverage:
            raise MaskCoverageError(f"Only {share:.1%} of the P-weight retained for the pair ({s}, {t}).")
        chosen = cells[usable]
        with np.errstate(divide="ignore"):
            residuals.append(psi.values[s, chosen] - np.log(mean[chosen]))
            errors.append(np.hypot(stderr[chosen] / mean[chosen], psi.stderr[s, chosen]))
        retained.append(share)
    return DensityResiduals(list(pairs), residuals, errors, retained)


@dataclass
class ChainBound:
    """
    H(p|r) against 2 H(p|q) + E_q(dq/dr)
    """

    lhs: float
    rhs: float
    stderr: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + 3 * self.stderr


def entropy_chain_bound(p: WeightedEnsemble, q: WeightedEnsemble, ess_floor: Optional[float] = None) -> ChainBound:
    """
    Both sides of H(p|r) <= 2 H(p|q) + E_q(dq/dr) for two weightings of the same reference ensemble
    """
    if p.base is not q.base:
        raise ValueError("Chain bound needs two weightings of one ensemble.")
    _check_ess(p, ess_floor)
    _check_ess(q, ess_floor)
    alive = p.weights > 0
    if np.any(alive & (q.weights == 0)):
        return ChainBound(_entropy_terms(p.log_weights)[0], float("inf"), 0.0)

    own = np.where(alive, p.weights * p.normalized_log_weights, 0.0)
    cross = np.where(alive, p.weights * (p.normalized_log_weights - q.normalized_log_weights), 0.0)
    second = q.weights ** 2
    lhs = float(np.mean(own))
    rhs = float(2 * np.mean(cross) + np.mean(second))
    spread = float(sem(2 * cross + second - own)) if p.count > 1 else 0.0
    return ChainBound(lhs, rhs, spread)


def born_marginal_check(weighted: WeightedEnsemble, f: ScalarField, g: ScalarField, t: int,
                        min_coverage: float = MIN_COVERAGE) -> float:
    """
    Total variation between the P-histogram of X_t and the R-histogram reweighted by f_t g_t
    """
    box = f.box
    cells = box.cell_index(weighted.base.states(t))
    target = cell_masses(cells, box.n_cells, weighted.weights)
    reference = cell_masses(cells, box.n_cells)
    joint = f.mask[t] & g.mask[t]
    share = float(np.sum(target[joint]))
    if share < min_coverage:
        raise MaskCoverageError(f"Only {share:.1%} of P_t lies on cells where f and g are valid.")

    tilted = np.where(joint, reference * np.where(joint, f.values[t] * g.values[t], 0.0), 0.0)
    target = np.where(joint, target, 0.0)
    tilted /= np.sum(tilted)
    target /= np.sum(target)
    return float(0.5 * np.sum(np.abs(target - tilted)))


def entropy_report(estimate: EntropyEstimate, decomposition: Optional[EntropyDecomposition] = None) -> dict:
    report = {"h": estimate.value, "stderr": estimate.stderr, "ess": estimate.ess,
              "killed_fraction": estimate.killed_fraction, "outside_domain": estimate.outside_domain,
              "truncated_reference": estimate.truncated_reference}
    if decomposition is not None:
        report.update({"h0": decomposition.h0, "kinetic": decomposition.kinetic,
                       "coverage": decomposition.coverage})
    return report


def save_entropy_report(path: str, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as file:
        json.dump(report, file, indent=4, sort_keys=True)
