"""
Checkable sufficient conditions for a finite-entropy Feynman-Kac transform:
Khas'minskii bound, Kato class membership for Brownian references, the script potentials
and the growth-condition audits
"""
import itertools
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.stats import sem

from constants import KATO_THRESHOLD, MIN_SAMPLES, QUADRATURE_TOLERANCE
from diffusion import DiffusionSpec, FKProblem, PathEnsemble, path_values, window_integrals
from field import DegenerateESSError, SpaceBox, conditional_mean

log = logging.getLogger(__name__)


class NonFiniteError(Exception):
    """
    A condition evaluated to NaN
    """


class QuadratureFailureError(Exception):
    """
    Adaptive quadrature did not reach its tolerance
    """


class KatoUnresolvedError(Exception):
    """
    Kato class membership could not be decided
    """


class Verdict(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    INCONCLUSIVE = "INCONCLUSIVE"


def conjunction(verdicts: Sequence[Verdict]) -> Verdict:
    if any(verdict == Verdict.FAIL for verdict in verdicts):
        return Verdict.FAIL
    if any(verdict == Verdict.INCONCLUSIVE for verdict in verdicts):
        return Verdict.INCONCLUSIVE
    return Verdict.PASS


def _zero_scalar(_, x):
    return np.zeros(np.shape(x)[0])


def _zero_vector(_, x):
    return np.zeros(np.shape(x))


def _zero_matrix(_, x):
    x = np.asarray(x)
    return np.zeros(x.shape + (x.shape[1],))


@dataclass
class SmoothPotential:
    """
    C^{1,2} scalar field with its time derivative, gradient and Hessian
    """

    value: Callable
    time_derivative: Callable = _zero_scalar
    gradient: Callable = _zero_vector
    hessian: Callable = _zero_matrix

    @classmethod
    def zero(cls) -> "SmoothPotential":
        return cls(_zero_scalar)

    @classmethod
    def quadratic(cls, k: float, epsilon: float) -> "SmoothPotential":
        """
        k |x|^2 / (2 epsilon)
        """
        rate = k / epsilon
        return cls(lambda t, x: 0.5 * rate * np.sum(x ** 2, axis=1),
                   gradient=lambda t, x: rate * np.asarray(x),
                   hessian=lambda t, x: rate * np.broadcast_to(np.eye(x.shape[1]), x.shape + (x.shape[1],)))

    @classmethod
    def log_radial(cls, gamma: float) -> "SmoothPotential":
        """
        gamma log sqrt(1 + |x|^2)
        """

        def hessian(_, x):
            x = np.asarray(x)
            bump = 1 + np.sum(x ** 2, axis=1)
            eye = np.eye(x.shape[1])
            outer = np.einsum("pi,pj->pij", x, x)
            return gamma * (bump[:, None, None] * eye - 2 * outer) / bump[:, None, None] ** 2

        return cls(lambda t, x: 0.5 * gamma * np.log1p(np.sum(np.asarray(x) ** 2, axis=1)),
                   gradient=lambda t, x: gamma * np.asarray(x) / (1 + np.sum(np.asarray(x) ** 2, axis=1))[:, None],
                   hessian=hessian)

    @classmethod
    def linear(cls, direction: Sequence[float]) -> "SmoothPotential":
        direction = np.asarray(direction, dtype=float)
        return cls(lambda t, x: np.asarray(x) @ direction,
                   gradient=lambda t, x: np.broadcast_to(direction, np.shape(x)))

    def minus(self, other: "SmoothPotential") -> "SmoothPotential":
        return SmoothPotential(lambda t, x: self.value(t, x) - other.value(t, x),
                               lambda t, x: self.time_derivative(t, x) - other.time_derivative(t, x),
                               lambda t, x: self.gradient(t, x) - other.gradient(t, x),
                               lambda t, x: self.hessian(t, x) - other.hessian(t, x))


@dataclass
class AuditGrid:
    """
    Bulk lattice on a box plus log-spaced far-field rings
    """

    lo: float = -5.0
    hi: float = 5.0
    points: int = 41
    ring_radii: Sequence[float] = tuple(np.geomspace(6.0, 1000.0, 8))
    ring_directions: int = 16

    def bulk(self, dim: int) -> np.ndarray:
        count = self.points if dim == 1 else max(11, int(round(self.points ** (2.0 / dim))))
        axis = np.linspace(self.lo, self.hi, count)
        mesh = np.meshgrid(*([axis] * dim), indexing="ij")
        return np.stack([part.ravel() for part in mesh], axis=-1)

    def directions(self, dim: int) -> np.ndarray:
        if dim == 1:
            return np.array([[1.0], [-1.0]])
        if dim == 2:
            angles = np.linspace(0, 2 * np.pi, self.ring_directions, endpoint=False)
            return np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        corners = np.array([step for step in itertools.product((-1.0, 0.0, 1.0), repeat=dim) if any(step)])
        return corners / np.linalg.norm(corners, axis=1, keepdims=True)

    def rings(self, dim: int) -> List[np.ndarray]:
        heading = self.directions(dim)
        return [radius * heading for radius in self.ring_radii]


@dataclass
class GrowthCaseSpec:
    """
    Data of a growth-condition check: U, U_diamond, U_star, v_star, constants c and kappa,
    the log-density of the measure m^U and of R_0 (both against Lebesgue), and the audit grid
    """

    diffusion: DiffusionSpec
    U: SmoothPotential = field(default_factory=SmoothPotential.zero)
    U_diamond: SmoothPotential = field(default_factory=SmoothPotential.zero)
    U_star: Callable = lambda x: np.zeros(np.shape(x)[0])
    v_star: Callable = _zero_vector
    c: float = 0.0
    kappa: float = 0.0
    reference_log_density: Optional[Callable] = None
    initial_log_density: Optional[Callable] = None
    audit: AuditGrid = field(default_factory=AuditGrid)

    def __post_init__(self):
        if self.c < 0 or self.kappa < 0:
            raise ValueError("Constants c and kappa must be nonnegative.")


@dataclass
class HypothesisResult:
    name: str
    status: Verdict
    margin: float
    worst_point: Optional[list] = None
    detail: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"name": self.name, "status": self.status.value, "margin": self.margin,
                "worst_point": self.worst_point, "detail": self.detail}


@dataclass
class GrowthVerdict:
    theorem: str
    legs: List[HypothesisResult]

    @property
    def status(self) -> Verdict:
        return conjunction([leg.status for leg in self.legs])

    def to_json(self) -> dict:
        return {"theorem": self.theorem, "status": self.status.value, "legs": [leg.to_json() for leg in self.legs]}

    def table(self) -> str:
        rows = [f"{'hypothesis':<28}{'status':<14}{'margin':>14}"]
        for leg in self.legs:
            rows.append(f"{leg.name:<28}{leg.status.value:<14}{leg.margin:>14.4g}")
        rows.append(f"{'overall':<28}{self.status.value:<14}")
        return "\n".join(rows)


def _laplacian(matrix: np.ndarray, hessian: np.ndarray) -> np.ndarray:
    return np.einsum("pij,pji->p", matrix, hessian)


def _finite(values: np.ndarray, name: str) -> np.ndarray:
    if np.any(np.isnan(values)):
        raise NonFiniteError(f"{name} evaluated to NaN.")
    return values


def script_U(case: GrowthCaseSpec, t: float, x: np.ndarray, potential: Optional[SmoothPotential] = None) -> np.ndarray:
    """
    |grad U|_a^2 / 2 - d_t U - Delta_a U / 2; pass U_diamond as potential for its counterpart
    """
    potential = case.U if potential is None else potential
    x = np.atleast_2d(np.asarray(x, dtype=float))
    matrix = case.diffusion.diffusion_matrix(t, x)
    gradient = np.asarray(potential.gradient(t, x), dtype=float)
    energy = np.einsum("pi,pij,pj->p", gradient, matrix, gradient)
    result = 0.5 * energy - potential.time_derivative(t, x) - 0.5 * _laplacian(matrix, potential.hessian(t, x))
    return _finite(np.asarray(result, dtype=float), "script U")


def script_H(case: GrowthCaseSpec, t: float, x: np.ndarray):
    """
    script H for H = U_diamond - U, directly and as script U_diamond - script U
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    H = case.U_diamond.minus(case.U)
    matrix = case.diffusion.diffusion_matrix(t, x)
    grad_u = np.asarray(case.U.gradient(t, x), dtype=float)
    grad_h = np.asarray(H.gradient(t, x), dtype=float)
    direct = (-H.time_derivative(t, x) + np.einsum("pi,pij,pj->p", grad_u, matrix, grad_h)
              - 0.5 * _laplacian(matrix, H.hessian(t, x)) + 0.5 * np.einsum("pi,pij,pj->p", grad_h, matrix, grad_h))
    difference = script_U(case, t, x, case.U_diamond) - script_U(case, t, x)
    return _finite(np.asarray(direct, dtype=float), "script H"), difference


@dataclass
class KhasminskiiRecord:
    alpha: float
    exp_moment: float
    exp_stderr: float
    bound: float
    holds: bool
    lambda_tau: float
    horizon_moment: float
    horizon_bound: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def khasminskii_bound(ensemble: PathEnsemble, W: Callable, tau: float, box: SpaceBox,
                      min_samples: int = MIN_SAMPLES) -> KhasminskiiRecord:
    """
    alpha = max conditional mean of int |W| over windows of length tau; if alpha < 1 the
    exponential moment over a window is at most 1/(1 - alpha). Lambda(tau) = log of the
    windowed moment bounds the whole-horizon moment by subadditivity.
    """
    grid = ensemble.grid
    width = int(round(tau / grid.dt[0]))
    if width < 1 or not grid.is_uniform:
        raise ValueError(f"Window {tau} must span whole steps of a uniform grid.")
    magnitude = np.abs(path_values(ensemble, W))

    alpha, moment, moment_err = 0.0, 1.0, 0.0
    any_valid = False
    for start in range(0, grid.steps - width + 1, width):
        occupation = window_integrals(magnitude, grid, start, start + width)
        cells = box.cell_index(ensemble.states(start))
        mean, _, _, mask = conditional_mean(cells, occupation, box.n_cells, min_samples=min_samples)
        with np.errstate(over="ignore"):
            exp_mean, exp_err, _, exp_mask = conditional_mean(cells, np.exp(occupation), box.n_cells,
                                                              min_samples=min_samples)
        if not np.any(mask):
            continue
        any_valid = True
        alpha = max(alpha, float(np.max(mean[mask])))
        worst = int(np.argmax(np.where(exp_mask, exp_mean, -np.inf)))
        if exp_mean[worst] > moment:
            moment, moment_err = float(exp_mean[worst]), float(exp_err[worst])
    if not any_valid:
        raise DegenerateESSError(f"No start cell reached {min_samples} samples.")

    bound = 1.0 / (1.0 - alpha) if alpha < 1 else float("inf")
    fraction = moment_err / moment if moment > 0 else 0.0
    windows = int(np.ceil(grid.horizon / tau - 1e-9))
    with np.errstate(over="ignore"):
        horizon = float(np.mean(np.exp(window_integrals(magnitude, grid, 0, grid.steps))))
    lambda_tau = float(np.log(moment))
    record = KhasminskiiRecord(alpha, moment, moment_err, bound, bool(moment <= bound * (1 + 3 * fraction) + 1e-12),
                               lambda_tau, horizon, float(np.exp(lambda_tau * windows)))
    log.info("Khas'minskii: alpha %.4f, moment %.4f, bound %.4f.", alpha, moment, bound)
    return record


def _sphere_rule(dim: int, order: int = 16):
    """
    Nodes and weights on the unit sphere; weights sum to its surface measure
    """
    if dim == 1:
        return np.array([[1.0], [-1.0]]), np.ones(2)
    if dim == 2:
        angles = np.linspace(0, 2 * np.pi, 4 * order, endpoint=False)
        return np.stack([np.cos(angles), np.sin(angles)], axis=-1), np.full(4 * order, 2 * np.pi / (4 * order))
    if dim == 3:
        cosines, polar_weights = np.polynomial.legendre.leggauss(order)
        azimuths = np.linspace(0, 2 * np.pi, 2 * order, endpoint=False)
        sines = np.sqrt(1 - cosines ** 2)
        nodes = np.array([[s * np.cos(phi), s * np.sin(phi), c] for c, s in zip(cosines, sines) for phi in azimuths])
        weights = np.array([w * 2 * np.pi / (2 * order) for w in polar_weights for _ in azimuths])
        return nodes, weights
    raise ValueError(f"Spherical quadrature is implemented for n <= 3, got {dim}.")


def _radial_weight(dim: int) -> Callable[[float], float]:
    # Green kernel times the shell volume element
    if dim == 2:
        return lambda r: r * abs(np.log(1.0 / r))
    return lambda r: r


def kato_integral(W: Callable, probe: np.ndarray, alpha: float, dim: int,
                  tolerance: float = QUADRATURE_TOLERANCE) -> float:
    """
    int_{|z| <= alpha} |g(z) W(probe + z)| dz with r = alpha e^{-u}, u in [0, 40]
    """
    nodes, weights = _sphere_rule(dim)
    weight = _radial_weight(dim)
    probe = np.asarray(probe, dtype=float)

    def integrand(u):
        r = alpha * np.exp(-u)
        shell = np.sum(weights * np.abs(W(probe + r * nodes)))
        return weight(r) * shell * r

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        value, error = integrate.quad(integrand, 0.0, 40.0, epsabs=tolerance, epsrel=1e-10, limit=200)
    if not np.isfinite(value) or error > max(100 * tolerance, 1e-6 * abs(value)):
        raise QuadratureFailureError(
            f"Kato integral at probe {probe.tolist()}, alpha {alpha}: value {value}, error estimate {error}.")
    return float(value)


@dataclass
class KatoVerdict:
    status: Verdict
    alphas: List[float]
    sup_values: List[float]
    worst_probe: list
    monotone: bool

    def to_json(self) -> dict:
        return {"status": self.status.value, "alphas": self.alphas, "sup_values": self.sup_values,
                "worst_probe": self.worst_probe, "monotone": self.monotone}


DEFAULT_ALPHAS = tuple(0.5 * 0.25 ** np.arange(7))


def kato_check_brownian(W: Callable, dim: int, probe_points: Optional[Sequence] = None,
                        alphas: Sequence[float] = DEFAULT_ALPHAS, singular_points: Sequence = (),
                        threshold: float = KATO_THRESHOLD, tolerance: float = QUADRATURE_TOLERANCE) -> KatoVerdict:
    """
    Kato class criterion for the Brownian reference: the sup over probes of the Green-weighted
    local integral of |W| must decay to zero along the decreasing alpha ladder.
    """
    alphas = sorted(alphas, reverse=True)
    probes = [np.zeros(dim)] if probe_points is None else [np.asarray(p, dtype=float) for p in probe_points]
    probes += [np.asarray(p, dtype=float) for p in singular_points]

    table = np.array([[kato_integral(W, probe, alpha, dim, tolerance) for alpha in alphas] for probe in probes])
    sup_values = table.max(axis=0)
    worst = probes[int(np.argmax(table[:, -1]))]
    slack = 10 * tolerance
    monotone = bool(np.all(np.diff(table, axis=1) <= slack))
    if not monotone:
        log.warning("Kato ladder is not monotone in alpha for a nonnegative |W|.")

    last = sup_values[-1]
    if last < threshold and monotone:
        status = Verdict.PASS
    elif last >= threshold and len(sup_values) > 1 and last >= 0.9 * sup_values[-2]:
        status = Verdict.FAIL
    else:
        status = Verdict.INCONCLUSIVE
    return KatoVerdict(status, [float(a) for a in alphas], sup_values.tolist(), worst.tolist(), monotone)


@dataclass
class LadderVerdict:
    status: Verdict
    radii: List[float]
    integrals: List[float]

    def to_json(self) -> dict:
        return {"status": self.status.value, "radii": self.radii, "integrals": self.integrals}


def _box_integral(log_integrand: Callable, dim: int, inner: float, outer: float) -> float:
    def density(*coordinates):
        point = np.array(coordinates, dtype=float).reshape(1, dim)
        with np.errstate(over="ignore", under="ignore"):
            return float(np.exp(log_integrand(point))[0])

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        if dim == 1:
            pieces = [integrate.quad(density, -outer, -inner, limit=200)[0],
                      integrate.quad(density, inner, outer, limit=200)[0]] if inner > 0 else \
                [integrate.quad(density, -outer, outer, points=[-1.0, 0.0, 1.0], limit=200)[0]]
            return float(sum(pieces))
        total = integrate.nquad(density, [[-outer, outer]] * dim, opts={"limit": 50})[0]
        return float(total)


def integrability_ladder(log_integrand: Callable, dim: int, radii: Sequence[float] = (2.0, 4.0, 8.0, 16.0, 32.0),
                         ) -> LadderVerdict:
    """
    Finiteness of int exp(log_integrand) dLeb from integrals over growing boxes:
    geometrically shrinking increments pass, stalling increments fail
    """
    radii = sorted(radii)
    integrals = []
    previous = 0.0
    for index, radius in enumerate(radii):
        if dim == 1:
            inner = radii[index - 1] if index else 0.0
            current = previous + _box_integral(log_integrand, dim, inner, radius)
        else:
            current = _box_integral(log_integrand, dim, 0.0, radius)
        integrals.append(current)
        previous = current
    if not np.all(np.isfinite(integrals)):
        return LadderVerdict(Verdict.FAIL, list(radii), integrals)

    increments = np.diff(integrals)
    scale = 1.0 + abs(integrals[-1])
    if abs(increments[-1]) <= 1e-10 * scale:
        status = Verdict.PASS
    else:
        ratio = abs(increments[-1]) / max(abs(increments[-2]), 1e-300)
        if ratio <= 0.75:
            status = Verdict.PASS
        elif ratio >= 0.95:
            status = Verdict.FAIL
        else:
            status = Verdict.INCONCLUSIVE
    return LadderVerdict(status, list(radii), integrals)


def _audit_points(case: GrowthCaseSpec):
    dim = case.diffusion.dim
    return case.audit.bulk(dim), case.audit.rings(dim)


def _pointwise_leg(name: str, case: GrowthCaseSpec, sides: Callable, times: Sequence[float]) -> HypothesisResult:
    """
    Audits lhs <= rhs on the bulk lattice and the far-field rings; a projected violation
    one decade beyond the last ring makes the leg inconclusive
    """
    bulk, rings = _audit_points(case)
    worst_margin, worst_point = np.inf, None
    ring_minima = np.full(len(rings), np.inf)
    for t in times:
        for index, points in enumerate([bulk] + rings):
            lhs, rhs = sides(t, points)
            lhs = np.broadcast_to(np.asarray(lhs, dtype=float), (points.shape[0],))
            rhs = np.broadcast_to(np.asarray(rhs, dtype=float), (points.shape[0],))
            with np.errstate(invalid="ignore"):
                margin = rhs - lhs
            margin = np.where((lhs == -np.inf) | (rhs == np.inf), np.inf, margin)
            _finite(margin, name)
            slack = 1e-10 * (1 + np.abs(np.where(np.isfinite(rhs), rhs, 0.0)))
            position = int(np.argmin(margin + slack))
            if margin[position] + slack[position] < worst_margin:
                worst_margin = float(margin[position] + slack[position])
                worst_point = [float(t)] + points[position].tolist()
            if index:
                ring_minima[index - 1] = min(ring_minima[index - 1], float(np.min(margin)))

    if worst_margin < 0:
        status = Verdict.FAIL
    elif _projected_crossing(ring_minima, np.asarray(case.audit.ring_radii, dtype=float)):
        status = Verdict.INCONCLUSIVE
    else:
        status = Verdict.PASS
    return HypothesisResult(name, status, worst_margin, worst_point)


def _projected_crossing(minima: np.ndarray, radii: np.ndarray) -> bool:
    """
    Continues the ring-to-ring drops of the margin geometrically over one more decade of radius
    and reports whether they would use up the last margin
    """
    finite = np.isfinite(minima)
    if np.sum(finite) < 2:
        return False
    margins, radii = minima[finite], radii[finite]
    drop = margins[-2] - margins[-1]
    if drop <= 0:
        return False
    earlier = margins[-3] - margins[-2] if margins.shape[0] >= 3 else drop
    ratio = drop / earlier if earlier > 0 else 1.0
    rings_per_decade = np.log(10.0) / np.mean(np.diff(np.log(radii)))
    if np.isclose(ratio, 1.0):
        future = drop * rings_per_decade
    else:
        future = drop * ratio * (1 - ratio ** rings_per_decade) / (1 - ratio)
    return bool(future > margins[-1])


def _supremum_leg(name: str, case: GrowthCaseSpec, values: Callable, times: Sequence[float]) -> HypothesisResult:
    """
    Audits that a nonnegative quantity stays bounded; growth over the far-field rings is inconclusive
    """
    bulk, rings = _audit_points(case)
    peaks = []
    worst, worst_point = -np.inf, None
    for points in [bulk] + rings:
        peak = -np.inf
        for t in times:
            current = np.asarray(values(t, points), dtype=float)
            if np.any(np.isnan(current)) or np.any(current == np.inf):
                position = int(np.argmax(~np.isfinite(current)))
                return HypothesisResult(name, Verdict.FAIL, float("inf"), [float(t)] + points[position].tolist())
            position = int(np.argmax(current))
            if current[position] > worst:
                worst, worst_point = float(current[position]), [float(t)] + points[position].tolist()
            peak = max(peak, float(current[position]))
        peaks.append(peak)
    status = Verdict.PASS
    if len(peaks) > 2 and peaks[-1] > 2 * max(max(peaks[:-1]), 1.0) and peaks[-1] > peaks[-2]:
        status = Verdict.INCONCLUSIVE
    return HypothesisResult(name, status, worst, worst_point)


def _ladder_leg(name: str, log_integrand: Callable, dim: int) -> HypothesisResult:
    ladder = integrability_ladder(log_integrand, dim)
    return HypothesisResult(name, ladder.status, float(ladder.integrals[-1]), None, ladder.to_json())


def _log_plus(values: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(values > 1, np.log(np.maximum(values, 1.0)), 0.0)


def _entropy_like(values: np.ndarray) -> np.ndarray:
    return values * _log_plus(values)


def _potential_sides(problem: FKProblem, extra: Callable):
    def sides(t, x):
        potential = problem.potential_at(t, x)
        lhs = potential + np.log1p(np.maximum(potential, 0.0))
        return lhs, extra(t, x)

    return sides


def _v_star_norm(case: GrowthCaseSpec):
    def values(t, x):
        vector = np.asarray(case.v_star(t, x), dtype=float)
        inverse = np.linalg.pinv(case.diffusion.diffusion_matrix(t, x))
        return np.sqrt(np.maximum(np.einsum("pi,pij,pj->p", vector, inverse, vector), 0.0))

    return values


def _require_densities(case: GrowthCaseSpec) -> None:
    if case.reference_log_density is None or case.initial_log_density is None:
        raise ValueError("Growth checks need the log-densities of m^U and R_0.")


def growth_check_thm30(case: GrowthCaseSpec, problem: FKProblem) -> GrowthVerdict:
    """
    Gradient-form reference with bounded perturbation: integrability of the U_diamond tilt
    against m^U, bounded log-density ratio of R_0, and the pointwise growth inequalities
    """
    _require_densities(case)
    dim = case.diffusion.dim
    horizon = case.diffusion.horizon
    times = (0.0, 0.5 * horizon, horizon)

    def tilt(t, x):
        return case.U.value(t, x) - case.U_diamond.value(t, x)

    def doubled(x):
        return 2 * tilt(0.0, x) + case.reference_log_density(x)

    def with_star(x):
        with np.errstate(divide="ignore"):
            return np.log(case.U_star(x)) + doubled(x)

    def without_star(x):
        return -case.U_star(x) + case.reference_log_density(x)

    legs = [
        _ladder_leg("integrability-a", doubled, dim),
        _ladder_leg("integrability-b", with_star, dim),
        _ladder_leg("integrability-c", without_star, dim),
        _supremum_leg("initial-log-ratio",
                      case, lambda t, x: np.abs(case.initial_log_density(x) - case.reference_log_density(x))
                      / (1 + case.U_star(x)), (0.0,)),
        _supremum_leg("bounded-v-star", case, _v_star_norm(case), times),
        _pointwise_leg("f0-growth", case,
                       lambda t, x: (_entropy_like(problem.initial_weight_at(x)),
                                     case.kappa * np.exp(np.minimum(tilt(0.0, x), 700.0))), (0.0,)),
        _pointwise_leg("gT-growth", case,
                       lambda t, x: (_entropy_like(problem.terminal_at(x)),
                                     case.kappa * np.exp(np.minimum(tilt(horizon, x), 700.0))), (horizon,)),
        _pointwise_leg("potential-growth", case,
                       _potential_sides(problem, lambda t, x: script_U(case, t, x)
                                        - script_U(case, t, x, case.U_diamond) + case.c), times),
    ]
    verdict = GrowthVerdict("gradient-reference", legs)
    log.info("Growth check (gradient reference): %s.", verdict.status.value)
    return verdict


def growth_check_thm32(case: GrowthCaseSpec, problem: FKProblem, W: Callable, p: float,
                       h0: Callable, hT: Callable, kato_assumed: Optional[bool] = None,
                       probe_points: Optional[Sequence] = None, singular_points: Sequence = ()) -> GrowthVerdict:
    """
    Divergence-form reference started from Lebesgue: L^p bounds on the dominating densities,
    a Kato-class W absorbing the potential, and the pointwise growth inequalities
    """
    if case.initial_log_density is None:
        raise ValueError("Growth check needs the log-density of R_0.")
    if p < 1:
        raise ValueError(f"Exponent must be at least 1, got {p}.")
    dim = case.diffusion.dim
    horizon = case.diffusion.horizon
    times = (0.0, 0.5 * horizon, horizon)
    conjugate = np.inf if p == 1 else (1.0 if np.isinf(p) else p / (p - 1))

    def power_leg(name, func, exponent):
        if np.isinf(exponent):
            return _supremum_leg(name, case, lambda t, x: func(x), (0.0,))

        def log_power(x):
            with np.errstate(divide="ignore"):
                return exponent * np.log(np.abs(func(x)))

        return _ladder_leg(name, log_power, dim)

    legs = [
        power_leg("initial-domination-Lp", lambda x: (1 + case.U_star(x)) * h0(x), p),
        power_leg("terminal-domination-Lp'", hT, conjugate),
        _ladder_leg("integrability-star", lambda x: -case.U_star(x) - 2 * case.U.value(0.0, x), dim),
        _supremum_leg("initial-log-density", case,
                      lambda t, x: np.abs(case.initial_log_density(x) + 2 * case.U.value(0.0, x))
                      / (1 + case.U_star(x)), (0.0,)),
        _supremum_leg("bounded-v-star", case, _v_star_norm(case), times),
        _pointwise_leg("f0-domination", case,
                       lambda t, x: (problem.initial_weight_at(x),
                                     np.exp(np.minimum(case.U.value(0.0, x), 700.0)) * h0(x)), (0.0,)),
        _pointwise_leg("gT-domination", case,
                       lambda t, x: (problem.terminal_at(x),
                                     np.exp(np.minimum(case.U.value(horizon, x), 700.0)) * hT(x)), (horizon,)),
        _pointwise_leg("potential-growth", case,
                       _potential_sides(problem, lambda t, x: script_U(case, t, x) + W(x)), times),
    ]

    if kato_assumed is None:
        kato = kato_check_brownian(W, dim, probe_points, singular_points=singular_points)
        if kato.status == Verdict.INCONCLUSIVE:
            raise KatoUnresolvedError(f"Kato membership of W is inconclusive: {kato.to_json()}.")
        detail = kato.to_json()
        # time-independent W and a reversible reference make the reversed class identical
        detail["reversed_class"] = "identical for time-independent W on a reversible reference"
        legs.append(HypothesisResult("kato-class", kato.status, kato.sup_values[-1], kato.worst_probe, detail))
    else:
        legs.append(HypothesisResult("kato-class", Verdict.PASS if kato_assumed else Verdict.FAIL, 0.0, None,
                                     {"assumed": kato_assumed}))
    verdict = GrowthVerdict("divergence-reference", legs)
    log.info("Growth check (divergence reference): %s.", verdict.status.value)
    return verdict


@dataclass
class GuardReport:
    passed: bool
    mean: float
    half_mean: float
    stderr: float
    reference_moment: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def entropy_domain_guard(weighted, W0: Callable, relative_tolerance: float = 0.1) -> GuardReport:
    """
    P-weighted mean of W_0(X_0), required finite and stable when the sample is halved;
    E_R exp(-W_0) is reported alongside
    """
    states = weighted.base.states(0)
    weights = weighted.weights
    with np.errstate(over="ignore", invalid="ignore"):
        values = np.asarray(W0(states), dtype=float)
        terms = weights * values
        mean = float(np.sum(terms) / np.sum(weights))
        half = weights.shape[0] // 2
        half_mean = float(np.sum(terms[:half]) / np.sum(weights[:half])) if half and np.sum(weights[:half]) > 0 \
            else float("nan")
        reference = float(np.mean(np.exp(-values)))
    spread = float(sem(terms)) if np.all(np.isfinite(terms)) and terms.shape[0] > 1 else float("inf")
    stable = np.isfinite(mean) and np.isfinite(half_mean) and \
        abs(mean - half_mean) <= max(relative_tolerance * abs(mean), 3 * spread)
    passed = bool(stable and np.isfinite(reference))
    if not passed:
        log.warning("Entropy domain guard failed: mean %s, half-sample mean %s.", mean, half_mean)
    return GuardReport(passed, mean, half_mean, spread, reference)
