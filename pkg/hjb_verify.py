"""
Gradient estimates of psi and residual checks of the extended HJB equation, the L^P identity,
the extended Feynman-Kac equation and the drift formula
"""
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from constants import MIN_COVERAGE, MIN_SAMPLES
from diffusion import DiffusionSpec, FKProblem, PathEnsemble
from field import MaskCoverageError, ScalarField, SpaceBox, VectorFieldEstimate, cell_masses, multilinear
from stochastic_calculus import nelson_velocity, window_steps

log = logging.getLogger(__name__)

GRID_DIFFERENCES = "grid-differences"
MARTINGALE_REGRESSION = "martingale-regression"


class IllConditionedError(Exception):
    """
    Within-cell increment covariance is near-singular
    """


@dataclass
class ResidualReport:
    """
    Cellwise residual with dt dP-weighted norms.
    Passes when coverage is sufficient and the L1 norm is within the tolerance times the L1 scale.
    Reports with a min_within share also pass when that share of cells sits within three stderr.
    """

    name: str
    values: np.ndarray
    stderr: np.ndarray
    mask: np.ndarray
    l1: float
    l2: float
    coverage: float
    scale_l1: float
    pooled_stderr: float
    within_fraction: float
    tolerance: float
    budget: dict = field(default_factory=dict)
    min_within: Optional[float] = None
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        small = self.l1 <= self.tolerance * self.scale_l1
        if self.min_within is not None:
            small = small or self.within_fraction >= self.min_within
        return self.coverage >= MIN_COVERAGE and small

    def to_json(self) -> dict:
        return {"name": self.name, "l1": self.l1, "l2": self.l2, "coverage": self.coverage,
                "scale_l1": self.scale_l1, "pooled_stderr": self.pooled_stderr,
                "within_fraction": self.within_fraction, "tolerance": self.tolerance,
                "budget": self.budget, "passed": self.passed}

    def save_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as file:
            json.dump(self.to_json(), file, indent=4, sort_keys=True)

    def to_csv(self, path: str, grid, box: SpaceBox) -> None:
        centers = box.centers()
        with open(path, "w", newline="", encoding="utf-8") as file:
            writer = csv.writer(file)
            writer.writerow(["t"] + [f"x{axis + 1}" for axis in range(box.dim)] + ["residual", "std_error", "valid"])
            for k, t in enumerate(grid.times):
                for cell, center in enumerate(centers):
                    writer.writerow([repr(float(t))] + [repr(float(c)) for c in center] +
                                    [repr(float(self.values[k, cell])), repr(float(self.stderr[k, cell])),
                                     int(self.mask[k, cell])])


def _masses(weighted, grid, box: SpaceBox) -> np.ndarray:
    """
    dt dP weight of every (knot, cell): trapezoid time weight times the P-mass of the cell
    """
    if hasattr(weighted, "base"):
        ensemble, weights = weighted.base, weighted.weights
    else:
        ensemble, weights = weighted, None
    tau = grid.trapezoid_weights()
    masses = np.stack([cell_masses(box.cell_index(ensemble.states(k)), box.n_cells, weights)
                       for k in range(grid.steps + 1)])
    return tau[:, None] * masses


def build_report(name: str, residual: np.ndarray, stderr: np.ndarray, mask: np.ndarray, scale: np.ndarray,
                 weighted, grid, box: SpaceBox, tolerance: float, budget: Optional[dict] = None,
                 min_coverage: float = MIN_COVERAGE, min_within: Optional[float] = None) -> ResidualReport:
    """
    Folds a cellwise residual into a report; norms run over valid cells only
    """
    masses = _masses(weighted, grid, box)
    mask = mask & np.isfinite(residual) & np.isfinite(scale)
    total = np.sum(masses)
    coverage = float(np.sum(masses[mask]) / total) if total > 0 else 0.0
    if coverage < min_coverage:
        raise MaskCoverageError(f"{name}: only {coverage:.1%} of the P-weight lies on valid cells.")

    weight = masses[mask]
    absolute = np.abs(residual[mask])
    spread = np.abs(stderr[mask])
    l1 = float(np.sum(weight * absolute))
    l2 = float(np.sqrt(np.sum(weight * absolute ** 2)))
    within = float(np.mean(absolute <= 3 * spread + 1e-12)) if absolute.size else 0.0
    report = ResidualReport(name, np.where(mask, residual, np.nan), np.where(mask, stderr, np.nan), mask, l1, l2,
                            coverage, float(np.sum(weight * np.abs(scale[mask]))),
                            float(np.sum(weight * spread)), within, tolerance, dict(budget or {}), min_within)
    log.info("%s: L1 %.3e vs scale %.3e, coverage %.1f%%, passed=%s.", name, report.l1, report.scale_l1,
             100 * coverage, report.passed)
    return report


@dataclass
class RefinementReport:
    """
    One residual at a coarse level (M/2 knots, bandwidth 2h) and at the run's own level (M, h)
    """

    name: str
    coarse: ResidualReport
    fine: ResidualReport
    sigmas: float = 2.0

    @property
    def noise(self) -> float:
        return max(self.coarse.pooled_stderr, self.fine.pooled_stderr)

    @property
    def passed(self) -> bool:
        return self.fine.l1 <= self.coarse.l1 + self.sigmas * self.noise

    def to_json(self) -> dict:
        return {"name": self.name, "coarse": self.coarse.to_json(), "fine": self.fine.to_json(),
                "noise": self.noise, "sigmas": self.sigmas, "passed": self.passed}


def refinement_check(coarse: ResidualReport, fine: ResidualReport, sigmas: float = 2.0) -> RefinementReport:
    """
    The residual must not grow, beyond `sigmas` times the pooled noise, when M and 1/h double
    """
    if coarse.name != fine.name:
        raise ValueError(f"Refinement compares one residual, got {coarse.name} and {fine.name}.")
    report = RefinementReport(fine.name, coarse, fine, sigmas)
    log.info("%s refinement: L1 %.3e -> %.3e, noise %.3e, passed=%s.", fine.name, coarse.l1, fine.l1, report.noise,
             report.passed)
    return report


def _grid_differences(psi: ScalarField) -> VectorFieldEstimate:
    box = psi.box
    shape = (psi.grid.steps + 1,) + tuple(box.cells)
    values = psi.values.reshape(shape)
    stderr = psi.stderr.reshape(shape)
    valid = psi.mask.reshape(shape)

    gradients, errors, masks = [], [], []
    for axis in range(box.dim):
        spine = axis + 1
        width = box.widths[axis]
        size = box.cells[axis]

        def shifted(array, offset, fill):
            out = np.full_like(array, fill)
            source = [slice(None)] * array.ndim
            target = [slice(None)] * array.ndim
            if offset > 0:
                source[spine], target[spine] = slice(offset, None), slice(None, size - offset)
            else:
                source[spine], target[spine] = slice(None, size + offset), slice(-offset, None)
            out[tuple(target)] = array[tuple(source)]
            return out

        up_ok, down_ok = shifted(valid, 1, False), shifted(valid, -1, False)
        up, down = shifted(values, 1, np.nan), shifted(values, -1, np.nan)
        up_err, down_err = shifted(stderr, 1, 0.0), shifted(stderr, -1, 0.0)
        with np.errstate(invalid="ignore"):
            central = (up - down) / (2 * width)
            forward = (up - values) / width
            backward = (values - down) / width
        both = up_ok & down_ok
        gradient = np.where(both, central, np.where(up_ok, forward, np.where(down_ok, backward, np.nan)))
        error = np.where(both, np.sqrt(up_err ** 2 + down_err ** 2) / (2 * width),
                         np.where(up_ok, np.sqrt(up_err ** 2 + stderr ** 2) / width,
                                  np.sqrt(down_err ** 2 + stderr ** 2) / width))
        gradients.append(gradient.reshape(psi.values.shape))
        errors.append(error.reshape(psi.values.shape))
        masks.append((valid & (up_ok | down_ok)).reshape(psi.values.shape))

    return VectorFieldEstimate(psi.grid, box, np.stack(gradients, axis=-1), np.stack(errors, axis=-1),
                               psi.samples, np.logical_and.reduce(masks),
                               {"field": "gradient", "method": GRID_DIFFERENCES})


def _martingale_regression(psi: ScalarField, ensemble: PathEnsemble, h: float, spec: Optional[DiffusionSpec],
                           weights: Optional[np.ndarray], min_samples: int) -> VectorFieldEstimate:
    grid, box = ensemble.grid, psi.box
    dim, n_cells = box.dim, box.n_cells
    width = window_steps(grid, h)
    steps = grid.steps
    evaluate = psi.as_function()
    along = np.stack([evaluate(t, ensemble.states(k)) for k, t in enumerate(grid.times)], axis=1)
    weights = np.ones(ensemble.count) if weights is None else np.asarray(weights, dtype=float)

    shape = (steps + 1, n_cells)
    values, errors = np.full(shape + (dim,), np.nan), np.full(shape + (dim,), np.nan)
    samples, mask = np.zeros(shape, dtype=int), np.zeros(shape, dtype=bool)
    for k in range(steps):
        stop = min(k + width, steps)
        elapsed = grid.times[stop] - grid.times[k]
        response = along[:, stop] - along[:, k]
        design = ensemble.states(stop) - ensemble.states(k)
        cells = box.cell_index(ensemble.states(k))
        keep = (cells >= 0) & np.isfinite(response) & (weights > 0)
        cells, response, design, weight = cells[keep], response[keep], design[keep], weights[keep]

        total = np.bincount(cells, weights=weight, minlength=n_cells)
        counts = np.bincount(cells, minlength=n_cells)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_x = np.stack([np.bincount(cells, weights=weight * design[:, i], minlength=n_cells)
                               for i in range(dim)], axis=-1) / total[:, None]
            mean_y = np.bincount(cells, weights=weight * response, minlength=n_cells) / total
        centered_x = design - mean_x[cells]
        centered_y = response - mean_y[cells]
        cov_xx = np.zeros((n_cells, dim, dim))
        cov_xy = np.zeros((n_cells, dim))
        for i in range(dim):
            cov_xy[:, i] = np.bincount(cells, weights=weight * centered_x[:, i] * centered_y, minlength=n_cells)
            for j in range(dim):
                cov_xx[:, i, j] = np.bincount(cells, weights=weight * centered_x[:, i] * centered_x[:, j],
                                              minlength=n_cells)

        usable = counts >= min_samples
        if not np.any(usable):
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            scaled = cov_xx[usable] / total[usable, None, None]
        smallest = np.linalg.eigvalsh(scaled)[:, 0]
        floor = 0.1 * elapsed * (spec.lambda_min if spec is not None and spec.invertible else 1e-8)
        if np.any(smallest < floor):
            raise IllConditionedError(
                f"Increment covariance eigenvalue {smallest.min():.3e} below {floor:.3e} at t={grid.times[k]}.")

        slope = np.linalg.solve(cov_xx[usable], cov_xy[usable][..., None])[..., 0]
        per_cell = np.zeros((n_cells, dim))
        per_cell[usable] = slope
        residual = centered_y - np.einsum("pi,pi->p", centered_x, per_cell[cells])
        noise = np.bincount(cells, weights=weight * residual ** 2, minlength=n_cells)[usable] / total[usable]
        inverse = np.linalg.inv(scaled)
        spread = np.sqrt(np.maximum(noise[:, None] * np.diagonal(inverse, axis1=1, axis2=2) / counts[usable, None],
                                    0.0))
        values[k, usable], errors[k, usable] = slope, spread
        samples[k] = counts
        mask[k] = usable & np.all(np.isfinite(values[k]), axis=-1)

    return VectorFieldEstimate(grid, box, values, errors, samples, mask,
                               {"field": "gradient", "method": MARTINGALE_REGRESSION, "h": h})


def gradient_estimate(psi: ScalarField, method: str = GRID_DIFFERENCES, ensemble: Optional[PathEnsemble] = None,
                      h: Optional[float] = None, spec: Optional[DiffusionSpec] = None,
                      weights: Optional[np.ndarray] = None, min_samples: int = MIN_SAMPLES) -> VectorFieldEstimate:
    """
    Spatial gradient of psi.
    grid-differences: central differences on valid neighbours, one-sided at mask edges.
    martingale-regression: per-cell least squares of psi increments on state increments.
    """
    if method == GRID_DIFFERENCES:
        result = _grid_differences(psi)
    elif method == MARTINGALE_REGRESSION:
        if ensemble is None or h is None:
            raise ValueError("Martingale regression needs an ensemble and a bandwidth.")
        if hasattr(ensemble, "base"):
            ensemble = ensemble.base
        result = _martingale_regression(psi, ensemble, h, spec, weights, min_samples)
    else:
        raise ValueError(f"Unknown gradient method {method}.")
    if not np.any(result.mask):
        raise MaskCoverageError(f"No valid gradient cell with {method}.")
    return result


def gradient_agreement(first: VectorFieldEstimate, second: VectorFieldEstimate, sigmas: float = 2.0) -> float:
    """
    Share of jointly valid cells where two gradient estimates agree within `sigmas` pooled standard errors
    """
    joint = first.mask & second.mask
    if not np.any(joint):
        return 0.0
    pooled = np.sqrt(first.stderr[joint] ** 2 + second.stderr[joint] ** 2)
    close = np.abs(first.values[joint] - second.values[joint]) <= sigmas * pooled + 1e-12
    return float(np.mean(np.all(close, axis=-1)))


def _on_centers(grad: VectorFieldEstimate, box: SpaceBox):
    centers = box.centers()
    knots = grad.grid.steps + 1
    values = np.full((knots, box.n_cells, grad.dim), np.nan)
    errors = np.full_like(values, np.nan)
    ok = np.zeros((knots, box.n_cells), dtype=bool)
    for k in range(knots):
        values[k], ok[k] = grad.interpolate(k, centers)
        errors[k], _ = multilinear(grad.box, grad.stderr[k], grad.mask[k], centers)
    return values, errors, ok


def _quadratic_form(spec: DiffusionSpec, grid, box: SpaceBox, vectors: np.ndarray, errors: np.ndarray):
    """
    |v|_a^2 = v.a v on every (knot, cell) and the propagated standard error of half of it
    """
    centers = box.centers()
    form = np.empty(vectors.shape[:2])
    spread = np.empty(vectors.shape[:2])
    for k, t in enumerate(grid.times):
        matrix = spec.diffusion_matrix(t, centers)
        pushed = np.einsum("cij,cj->ci", matrix, vectors[k])
        form[k] = np.einsum("ci,ci->c", vectors[k], pushed)
        spread[k] = np.sqrt(np.sum((pushed * errors[k]) ** 2, axis=-1))
    return form, spread


def _potential_on_centers(problem: FKProblem, grid, box: SpaceBox) -> np.ndarray:
    centers = box.centers()
    return np.stack([problem.potential_at(t, centers) for t in grid.times])


def _budget(field_estimate: ScalarField, ensemble_size: int, tolerance: float) -> dict:
    return {"h": field_estimate.meta.get("h"), "dx": field_estimate.box.widths.tolist(),
            "dt": float(field_estimate.grid.dt[0]), "paths": ensemble_size, "tolerance": tolerance}


def _ensemble_size(weighted) -> int:
    return weighted.base.count if hasattr(weighted, "base") else weighted.count


def hjb_residual(psi: ScalarField, grad: VectorFieldEstimate, L_psi: ScalarField, problem: FKProblem, weighted,
                 tolerance: float = 0.05) -> ResidualReport:
    """
    L psi + |grad psi|_a^2 / 2 + V on valid cells, with L psi the reference generator acting on psi
    """
    box, grid = L_psi.box, L_psi.grid
    gradient, gradient_err, ok = _on_centers(grad, box)
    form, form_err = _quadratic_form(problem.spec, grid, box, gradient, gradient_err)
    potential = _potential_on_centers(problem, grid, box)
    residual = L_psi.values + 0.5 * form + potential
    stderr = np.sqrt(L_psi.stderr ** 2 + form_err ** 2)
    mask = L_psi.mask & ok & np.isfinite(potential)
    scale = np.abs(potential) + np.abs(L_psi.values)
    return build_report("hjb", residual, stderr, mask, scale, weighted, grid, box, tolerance,
                        _budget(L_psi, _ensemble_size(weighted), tolerance))


def lp_identity_check(psi: ScalarField, grad: VectorFieldEstimate, LP_psi: ScalarField, problem: FKProblem, weighted,
                      tolerance: float = 0.05) -> ResidualReport:
    """
    L^P psi - (|grad psi|_a^2 / 2 - V), with L^P psi the P-weighted forward derivative of psi
    """
    box, grid = LP_psi.box, LP_psi.grid
    gradient, gradient_err, ok = _on_centers(grad, box)
    form, form_err = _quadratic_form(problem.spec, grid, box, gradient, gradient_err)
    potential = _potential_on_centers(problem, grid, box)
    target = 0.5 * form - potential
    residual = LP_psi.values - target
    stderr = np.sqrt(LP_psi.stderr ** 2 + form_err ** 2)
    mask = LP_psi.mask & ok & np.isfinite(potential)
    scale = np.abs(LP_psi.values) + np.abs(target)
    return build_report("lp-identity", residual, stderr, mask, scale, weighted, grid, box, tolerance,
                        _budget(LP_psi, _ensemble_size(weighted), tolerance))


def generator_gap_check(L_psi: ScalarField, LP_psi: ScalarField, grad: VectorFieldEstimate, spec: DiffusionSpec,
                        weighted, tolerance: float = 0.05) -> ResidualReport:
    """
    L psi - (L^P psi - |grad psi|_a^2) cellwise
    """
    box, grid = L_psi.box, L_psi.grid
    gradient, gradient_err, ok = _on_centers(grad, box)
    form, form_err = _quadratic_form(spec, grid, box, gradient, gradient_err)
    residual = L_psi.values - (LP_psi.values - form)
    stderr = np.sqrt(L_psi.stderr ** 2 + LP_psi.stderr ** 2 + 4 * form_err ** 2)
    mask = L_psi.mask & LP_psi.mask & ok
    scale = np.abs(L_psi.values) + np.abs(LP_psi.values)
    return build_report("generator-gap", residual, stderr, mask, scale, weighted, grid, box, tolerance,
                        _budget(L_psi, _ensemble_size(weighted), tolerance))


def fk_residual(g: ScalarField, L_g: ScalarField, problem: FKProblem, weighted,
                tolerance: float = 0.05) -> ResidualReport:
    """
    L g + V g on valid cells, with L g the reference generator acting on g
    """
    box, grid = L_g.box, L_g.grid
    centers = box.centers()
    values = np.full(L_g.values.shape, np.nan)
    errors = np.full(L_g.values.shape, np.nan)
    ok = np.zeros(L_g.values.shape, dtype=bool)
    for k in range(grid.steps + 1):
        values[k], ok[k] = g.interpolate(k, centers)
        errors[k], _ = multilinear(g.box, g.stderr[k], g.mask[k], centers)
    potential = _potential_on_centers(problem, grid, box)
    residual = L_g.values + potential * values
    stderr = np.sqrt(L_g.stderr ** 2 + (potential * errors) ** 2)
    mask = L_g.mask & ok & np.isfinite(potential)
    scale = np.abs(potential * values)
    return build_report("fk", residual, stderr, mask, scale, weighted, grid, box, tolerance,
                        _budget(L_g, _ensemble_size(weighted), tolerance))


def drift_formula_check(spec: DiffusionSpec, grad: VectorFieldEstimate, weighted, h: float, box: SpaceBox,
                        tolerance: float = 0.1, extrapolate: bool = False,
                        min_samples: int = MIN_SAMPLES) -> ResidualReport:
    """
    Drift of P from its Nelson velocity against b + a grad psi.
    Passes when the residual sits within three pooled standard errors on at least 90% of valid cells
    or its L1 norm is within the tolerance times the L1 norm of the P drift.
    """
    velocity = nelson_velocity(weighted, h, box, extrapolate=extrapolate, min_samples=min_samples)
    grid = velocity.grid
    gradient, gradient_err, ok = _on_centers(grad, box)
    centers = box.centers()
    rhs = np.empty_like(velocity.values)
    rhs_err = np.empty_like(velocity.values)
    for k, t in enumerate(grid.times):
        matrix = spec.diffusion_matrix(t, centers)
        rhs[k] = spec.drift_at(t, centers) + np.einsum("cij,cj->ci", matrix, gradient[k])
        rhs_err[k] = np.sqrt(np.einsum("cij,cj->ci", matrix ** 2, gradient_err[k] ** 2))

    gap = velocity.values - rhs
    spread = np.sqrt(velocity.stderr ** 2 + rhs_err ** 2)
    if velocity.dim == 1:
        residual, stderr = gap[..., 0], spread[..., 0]
    else:
        residual = np.linalg.norm(gap, axis=-1)
        stderr = np.linalg.norm(spread, axis=-1)
    mask = velocity.mask & ok
    scale = np.linalg.norm(velocity.values, axis=-1)
    report = build_report("drift-formula", residual, stderr, mask, scale, weighted, grid, box, tolerance,
                          {"h": h, "dx": box.widths.tolist(), "dt": float(grid.dt[0]),
                           "paths": _ensemble_size(weighted), "tolerance": tolerance}, min_within=0.9)
    report.extras["velocity"] = velocity
    return report
