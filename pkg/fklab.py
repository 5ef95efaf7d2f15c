"""
Experiment runner: config validation, registries, built-in scenarios and the command line
"""
import argparse
import copy
import glob
import hashlib
import json
import logging.config
import os
import shutil
import sys
import time
from collections import namedtuple
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from json.decoder import JSONDecodeError
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from conditions import (AuditGrid, GrowthCaseSpec, KatoUnresolvedError, NonFiniteError, QuadratureFailureError,
                        SmoothPotential, Verdict, growth_check_thm30, growth_check_thm32,
                        kato_check_brownian, khasminskii_bound)
from constants import (ASSETS_PATH, CODE_VERSION, EXPERIMENT_CONFIG_PATH, LOGGING_CONFIG_PATH, OUTPUT_ROOT_ENV,
                       SCENARIOS_PATH)
from diffusion import (DiracLaw, FKProblem, GaussianLaw, TimeGrid, UniformLaw, brownian, ornstein_uhlenbeck,
                       polynomial_drift, simulate, thin, unit_function, zero_potential)
from feynman_kac import fk_solve_backward, fk_solve_forward, log_transform, semigroup_consistency
from field import SampledFunction, ScalarField, SpaceBox, VectorFieldEstimate
from girsanov import (born_marginal_check, decompose_entropy, entropy_report, fk_weights, relative_entropy,
                      save_entropy_report)
from hjb_verify import (ResidualReport, drift_formula_check, fk_residual, generator_gap_check, gradient_estimate,
                        hjb_residual, lp_identity_check, refinement_check)
from pde_oracle import PdeGrid, compare_with_mc, psi_from_pde, solve_fk_backward
from stochastic_calculus import forward_derivative

logging.config.fileConfig(fname=LOGGING_CONFIG_PATH, disable_existing_loggers=False)
log = logging.getLogger("fklab")


class ConfigError(Exception):
    """
    Most general config error
    """


class UnknownRegistryEntryError(ConfigError):
    """
    Config refers to a model, potential or boundary datum that is not registered
    """


class IncorrectConfigValueError(ConfigError):
    """
    Config value has a wrong type or lies out of range
    """


class UnknownScenarioError(ConfigError):
    """
    Neither a config file nor a known scenario name
    """


class StageError(Exception):
    """
    A pipeline stage failed
    """


MC_GATES = ("fk_residual", "hjb_residual", "lp_identity", "generator_gap", "semigroup", "entropy", "drift",
            "born", "pde_oracle", "khasminskii", "refinement")
CONDITION_GATES = ("kato", "growth")
DERIVATIVE_GATES = ("fk_residual", "hjb_residual", "lp_identity", "generator_gap", "drift", "entropy", "refinement")
REFINED_GATES = ("fk_residual", "hjb_residual")

DEFAULTS = {
    "model": {"name": "zero", "dim": 1, "epsilon": 1.0, "horizon": 1.0},
    "potential": {"name": "zero"},
    "terminal": {"name": "one"},
    "initial_weight": {"name": "one"},
    "paths": 20000,
    "steps": 64,
    "seed": 20240101,
    "threads": 1,
    "box": {"lo": [-4.0], "hi": [4.0], "cells": [32]},
    "bandwidth": 0.0625,
    "extrapolate": True,
    "tolerances": {"fk": 0.05, "hjb": 0.05, "drift": 0.1, "entropy": 0.05, "born": 0.05, "oracle": 1e-3},
    "gates": [],
    "pde": {"lo": -6.0, "hi": 6.0, "cells": 401},
    "conditions": {},
    "output": None,
}


def _vector(value, dim: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), (dim,)).copy()


def _radius(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.asarray(x, dtype=float), axis=1)


def _log_plus(values: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(values, 1.0))


def _sampled(params: dict, dim: int) -> SampledFunction:
    box = SpaceBox(_vector(params["lo"], dim), _vector(params["hi"], dim), params["cells"])
    return SampledFunction(box, params["values"])


def _constant_potential(params, _):
    level = float(params["c"])
    return lambda t, x: np.full(x.shape[0], level)


def _quadratic_potential(params, _):
    rate = float(params["lambda"])
    return lambda t, x: rate * np.sum(x ** 2, axis=1)


def _coulomb_potential(params, _):
    strength, power = float(params.get("strength", 1.0)), float(params.get("power", 1.0))
    softening = float(params.get("softening", 0.0))

    def potential(_, x):
        with np.errstate(divide="ignore"):
            return strength * (np.sum(x ** 2, axis=1) + softening ** 2) ** (-0.5 * power)

    return potential


def _radial_polynomial(params, _):
    coefficients = np.asarray(params["coefficients"], dtype=float)
    return lambda t, x: np.polynomial.polynomial.polyval(_radius(x), coefficients)


def _ou_critical(params, _):
    """
    k^2 |x|^2 / (2 epsilon) - 2 log_+ |x| + w0
    """
    k, epsilon, w0 = float(params["k"]), float(params["epsilon"]), float(params.get("w0", 0.0))
    return lambda t, x: k ** 2 * np.sum(x ** 2, axis=1) / (2 * epsilon) - 2 * _log_plus(_radius(x)) + w0


POTENTIALS: Dict[str, Callable] = {
    "zero": lambda params, dim: zero_potential,
    "constant": _constant_potential,
    "quadratic": _quadratic_potential,
    "coulomb": _coulomb_potential,
    "radial-polynomial": _radial_polynomial,
    "ou-critical": _ou_critical,
    "grid": lambda params, dim: _sampled(params, dim),
}


def _gaussian_profile(params, dim):
    mean, scale = _vector(params.get("mean", 0.0), dim), float(params.get("scale", 1.0))
    return lambda x: np.exp(-np.sum((x - mean) ** 2, axis=1) / (2 * scale ** 2))


def _gaussian_density(params, dim):
    law = GaussianLaw(_vector(params.get("mean", 0.0), dim), float(params.get("scale", 1.0)) ** 2)
    return lambda x: np.exp(law.log_density(x))


def _indicator(params, dim):
    lo, hi = _vector(params.get("lo", -1.0), dim), _vector(params.get("hi", 1.0), dim)
    return lambda x: np.all((x >= lo) & (x <= hi), axis=1).astype(float)


def _power(params, _):
    exponent = float(params.get("exponent", 2.0))
    return lambda x: _radius(x) ** exponent


BOUNDARY_DATA: Dict[str, Callable] = {
    "one": lambda params, dim: unit_function,
    "gaussian": _gaussian_profile,
    "gaussian-density": _gaussian_density,
    "indicator": _indicator,
    "power": _power,
    "grid": lambda params, dim: _sampled(params, dim),
}

INITIAL_LAWS: Dict[str, Callable] = {
    "dirac": lambda params, dim: DiracLaw(_vector(params.get("point", 0.0), dim)),
    "gaussian": lambda params, dim: GaussianLaw(_vector(params.get("mean", 0.0), dim),
                                                float(params.get("variance", 1.0))),
    "uniform": lambda params, dim: UniformLaw(_vector(params["lo"], dim), _vector(params["hi"], dim)),
}

MODELS: Dict[str, Callable] = {
    "zero": lambda params, law: brownian(params["dim"], params.get("epsilon", 1.0), law, params["horizon"]),
    "ou": lambda params, law: ornstein_uhlenbeck(params["dim"], params.get("k", 1.0), params.get("epsilon", 2.0),
                                                 law, params["horizon"]),
    "polynomial": lambda params, law: polynomial_drift(params["coefficients"], params["dim"],
                                                       params.get("epsilon", 1.0), law, params["horizon"]),
}

SMOOTH_POTENTIALS: Dict[str, Callable] = {
    "zero": lambda params: SmoothPotential.zero(),
    "quadratic": lambda params: SmoothPotential.quadratic(params["k"], params["epsilon"]),
    "log-radial": lambda params: SmoothPotential.log_radial(params.get("gamma", 1.0)),
    "linear": lambda params: SmoothPotential.linear(params["direction"]),
}

STAR_POTENTIALS: Dict[str, Callable] = {
    "zero": lambda params, dim: (lambda x: np.zeros(x.shape[0])),
    "log-radial-plus": lambda params, dim: (lambda x: float(params.get("factor", dim + 1)) * _log_plus(_radius(x))),
}


LOG_DENSITIES: Dict[str, Callable] = {
    "lebesgue": lambda params, dim, spec: (lambda x: np.zeros(np.shape(x)[0])),
    "gaussian": lambda params, dim, spec: GaussianLaw(_vector(params.get("mean", 0.0), dim),
                                                      float(params.get("variance", 1.0))).log_density,
    "initial-law": lambda params, dim, spec: spec.initial_law.log_density,
}


def _lookup(registry: Dict[str, Callable], entry: dict, key: str) -> Callable:
    name = entry.get("name") if isinstance(entry, dict) else None
    if name not in registry:
        raise UnknownRegistryEntryError(f"Unknown entry '{name}' for '{key}'; known: {sorted(registry)}.")
    return registry[name]


def _merge(base: dict, update: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict) and key not in ("potential", "terminal",
                                                                                         "initial_weight"):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class ExperimentConfig:
    """
    Validated experiment description with the objects it refers to
    """

    scenario: str
    raw: dict
    problem: FKProblem
    grid: TimeGrid
    box: SpaceBox
    paths: int
    seed: int
    threads: int
    bandwidth: float
    tolerances: Dict[str, float]
    gates: List[str]
    output: Optional[str] = None
    description: str = ""
    extrapolate: bool = True

    @property
    def config_hash(self) -> str:
        hashed = {key: value for key, value in self.raw.items() if key not in ("threads", "output")}
        return hashlib.sha256(json.dumps(hashed, sort_keys=True).encode("utf-8")).hexdigest()


def build_problem(raw: dict) -> FKProblem:
    model = raw["model"]
    dim = model["dim"]
    law = None
    if "initial_law" in model:
        law = _lookup(INITIAL_LAWS, model["initial_law"], "model.initial_law")(model["initial_law"], dim)
    spec = _lookup(MODELS, model, "model")(model, law)
    return FKProblem(spec,
                     _lookup(POTENTIALS, raw["potential"], "potential")(raw["potential"], dim),
                     _lookup(BOUNDARY_DATA, raw["terminal"], "terminal")(raw["terminal"], dim),
                     _lookup(BOUNDARY_DATA, raw["initial_weight"], "initial_weight")(raw["initial_weight"], dim))


def resolve_scenario(target: str) -> dict:
    """
    Returns the raw config for a config path, a built-in scenario name or a user scenario name
    """
    if os.path.isfile(target):
        with open(target, encoding="utf-8") as file:
            return json.load(file)
    if target in BUILTIN_SCENARIOS:
        return copy.deepcopy(BUILTIN_SCENARIOS[target]["config"])
    user = os.path.join(SCENARIOS_PATH, f"{target}.json")
    if os.path.isfile(user):
        with open(user, encoding="utf-8") as file:
            return json.load(file)
    raise UnknownScenarioError(f"'{target}' is neither a config file nor a known scenario.")


def validate_config(target: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """
    Validates given config
    """
    Check = namedtuple("Check", ["status", "error", "key"])

    try:
        raw = _merge(DEFAULTS, resolve_scenario(target))
        raw = _merge(raw, {key: value for key, value in (overrides or {}).items() if value is not None})

        model = raw["model"]
        dim = model["dim"]
        is_positive_int = {key: isinstance(raw[key], int) and not isinstance(raw[key], bool) and raw[key] > 0
                           for key in ("paths", "steps", "threads")}
        is_correct_seed = isinstance(raw["seed"], int) and raw["seed"] >= 0
        is_correct_dim = isinstance(dim, int) and dim > 0
        is_correct_horizon = isinstance(model["horizon"], (int, float)) and model["horizon"] > 0
        box = raw["box"]
        is_correct_box = is_correct_dim and all(len(box[key]) == dim for key in ("lo", "hi", "cells"))
        window = raw["bandwidth"] * raw["steps"] / model["horizon"] if is_correct_horizon else 0.0
        uses_derivatives = any(gate in DERIVATIVE_GATES for gate in raw["gates"])
        is_correct_bandwidth = not uses_derivatives or (
            raw["bandwidth"] > 0 and window >= 1 - 1e-9 and abs(window - round(window)) < 1e-9)
        unknown_gates = [gate for gate in raw["gates"] if gate not in MC_GATES + CONDITION_GATES]
        bad_tolerances = [key for key, value in raw["tolerances"].items()
                          if not isinstance(value, (int, float)) or value <= 0]
        needs_block = {"kato": "kato", "growth": "growth", "khasminskii": "khasminskii"}
        missing_blocks = [gate for gate, block in needs_block.items()
                          if gate in raw["gates"] and block not in raw["conditions"]]
        is_correct_refinement = "refinement" not in raw["gates"] or (
            any(gate in raw["gates"] for gate in REFINED_GATES) and is_positive_int["steps"] and raw["steps"] % 2 == 0)

        checks = (
            Check(is_positive_int["paths"], IncorrectConfigValueError, "paths"),
            Check(is_positive_int["steps"], IncorrectConfigValueError, "steps"),
            Check(is_positive_int["threads"], IncorrectConfigValueError, "threads"),
            Check(is_correct_seed, IncorrectConfigValueError, "seed"),
            Check(is_correct_dim, IncorrectConfigValueError, "model.dim"),
            Check(is_correct_horizon, IncorrectConfigValueError, "model.horizon"),
            Check(is_correct_box, IncorrectConfigValueError, "box"),
            Check(is_correct_bandwidth, IncorrectConfigValueError, "bandwidth"),
            Check(isinstance(raw["extrapolate"], bool), IncorrectConfigValueError, "extrapolate"),
            Check(is_correct_refinement, IncorrectConfigValueError, "gates refinement"),
            Check(not unknown_gates, UnknownRegistryEntryError, f"gates {unknown_gates}"),
            Check(not bad_tolerances, IncorrectConfigValueError, f"tolerances {bad_tolerances}"),
            Check(not missing_blocks, IncorrectConfigValueError, f"conditions for gates {missing_blocks}"),
            Check("pde_oracle" not in raw["gates"] or dim == 1, IncorrectConfigValueError, "pde"),
        )

        for check in checks:
            if not check.status:
                raise check.error(f"Incorrect value for '{check.key}'.")

        problem = build_problem(raw)
        grid = TimeGrid.uniform(model["horizon"], raw["steps"])
        space = SpaceBox(box["lo"], box["hi"], box["cells"])

    except (JSONDecodeError, KeyError, TypeError) as exc:
        log.exception("%s was encountered while validating experiment config.", exc.__class__.__name__)
        raise ConfigError(f"Could not read config key {exc}.") from exc

    return ExperimentConfig(raw.get("scenario", os.path.splitext(os.path.basename(target))[0]), raw, problem, grid,
                            space, raw["paths"], raw["seed"], raw["threads"], float(raw["bandwidth"]),
                            {key: float(value) for key, value in raw["tolerances"].items()}, list(raw["gates"]),
                            raw.get("output"), raw.get("description", ""), raw["extrapolate"])


def prepare_environment(base_path: str) -> None:
    """
    Creates the artifact folder, removing an existing one
    """
    shutil.rmtree(base_path, ignore_errors=True)
    Path(base_path).mkdir(parents=True, exist_ok=True)


def output_directory(config: ExperimentConfig, out: Optional[str] = None) -> str:
    if out:
        return out
    if config.output:
        return config.output
    return os.path.join(os.environ.get(OUTPUT_ROOT_ENV, ASSETS_PATH), config.scenario)


def _save_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as file:
        json.dump(payload, file, indent=4, sort_keys=True)


def _point_function(potential: Callable) -> Callable:
    return lambda x: potential(0.0, np.atleast_2d(x))


def _growth_case(config: ExperimentConfig, block: dict) -> GrowthCaseSpec:
    spec = config.problem.spec
    dim = spec.dim
    densities = {}
    for key in ("reference_log_density", "initial_log_density"):
        if key in block:
            densities[key] = _lookup(LOG_DENSITIES, block[key], f"conditions.growth.{key}")(block[key], dim, spec)
    audit = AuditGrid(**block.get("audit", {}))
    return GrowthCaseSpec(spec,
                          U=_lookup(SMOOTH_POTENTIALS, block.get("U", {"name": "zero"}), "conditions.growth.U")(
                              block.get("U", {})),
                          U_diamond=_lookup(SMOOTH_POTENTIALS, block.get("U_diamond", {"name": "zero"}),
                                            "conditions.growth.U_diamond")(block.get("U_diamond", {})),
                          U_star=_lookup(STAR_POTENTIALS, block.get("U_star", {"name": "zero"}),
                                         "conditions.growth.U_star")(block.get("U_star", {}), dim),
                          c=float(block.get("c", 0.0)), kappa=float(block.get("kappa", 0.0)), audit=audit,
                          **densities)


def check_conditions(config: ExperimentConfig) -> Dict[str, dict]:
    """
    Evaluates the configured Kato and growth gates; needs no simulation
    """
    blocks = config.raw["conditions"]
    dim = config.problem.spec.dim
    results = {}
    if "kato" in config.gates:
        block = blocks["kato"]
        W = _lookup(POTENTIALS, block["W"], "conditions.kato.W")(block["W"], dim)
        verdict = kato_check_brownian(_point_function(W), dim, block.get("probe_points"),
                                      singular_points=block.get("singular_points", ()))
        results["kato"] = {"passed": verdict.status == Verdict.PASS, **verdict.to_json()}
    if "growth" in config.gates:
        block = blocks["growth"]
        case = _growth_case(config, block)
        theorem = block.get("theorem", "thm30")
        if theorem == "thm30":
            verdict = growth_check_thm30(case, config.problem)
        elif theorem == "thm32":
            W = _lookup(POTENTIALS, block.get("W", {"name": "zero"}), "conditions.growth.W")(block.get("W", {}), dim)
            h0 = _lookup(BOUNDARY_DATA, block["h0"], "conditions.growth.h0")(block["h0"], dim)
            hT = _lookup(BOUNDARY_DATA, block["hT"], "conditions.growth.hT")(block["hT"], dim)
            verdict = growth_check_thm32(case, config.problem, _point_function(W), float(block.get("p", 2.0)), h0, hT,
                                         block.get("kato_assumed"), block.get("probe_points"),
                                         block.get("singular_points", ()))
        else:
            raise IncorrectConfigValueError(f"Incorrect value for 'conditions.growth.theorem': {theorem}.")
        print(verdict.table())
        results["growth"] = {"passed": verdict.status == Verdict.PASS, **verdict.to_json()}
    return results


class ScenarioRun:
    """
    Runs the pipeline of one scenario: simulate, fields, weights, derivatives, residual reports, conditions
    """

    def __init__(self, config: ExperimentConfig, directory: str):
        self.config = config
        self.directory = directory
        self.gates: Dict[str, dict] = {}
        self.wall_times: Dict[str, float] = {}
        self.artifacts: List[str] = []

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            log.exception("%s was encountered in stage '%s'.", exc.__class__.__name__, name)
            raise StageError(f"Stage '{name}' failed with {exc.__class__.__name__}: {exc}") from exc
        finally:
            self.wall_times[name] = time.perf_counter() - start

    def path(self, name: str) -> str:
        self.artifacts.append(name)
        return os.path.join(self.directory, name)

    def gate(self, name: str, passed: bool, **details) -> None:
        self.gates[name] = {"passed": bool(passed), **details}
        log.info("Gate '%s': %s.", name, "passed" if passed else "FAILED")

    def wants(self, *names: str) -> bool:
        return any(name in self.config.gates for name in names)

    def execute(self) -> None:
        if self.wants(*MC_GATES):
            self._monte_carlo()
        if self.wants(*CONDITION_GATES):
            with self.stage("conditions"):
                results = check_conditions(self.config)
                _save_json(self.path("conditions.json"), results)
                for name, result in results.items():
                    self.gate(name, result["passed"], status=result["status"])

    def _derivative(self, ensemble, u: ScalarField, h: float) -> ScalarField:
        """
        Forward derivative of u on the config box: martingale-compensated on the reference ensemble,
        plain conditional increments under P weights. The extrapolate key picks the rung.
        """
        config = self.config
        if hasattr(ensemble, "base"):
            ladder = forward_derivative(ensemble, u.as_function(), h, config.box)
        else:
            ladder = forward_derivative(ensemble, u.as_function(), h, config.box, spec=config.problem.spec)
        return ladder.extrapolated if config.extrapolate else ladder.raw

    def _residuals(self, ensemble, weighted, g: ScalarField, psi: ScalarField, h: float,
                   grad: Optional[VectorFieldEstimate] = None,
                   L_psi: Optional[ScalarField] = None) -> Dict[str, ResidualReport]:
        config, problem = self.config, self.config.problem
        reports = {}
        if self.wants("fk_residual"):
            L_g = self._derivative(ensemble, g, h)
            reports["fk_residual"] = fk_residual(g, L_g, problem, weighted, config.tolerances["fk"])
        if self.wants("hjb_residual"):
            grad = gradient_estimate(psi) if grad is None else grad
            L_psi = self._derivative(ensemble, psi, h) if L_psi is None else L_psi
            reports["hjb_residual"] = hjb_residual(psi, grad, L_psi, problem, weighted, config.tolerances["hjb"])
        return reports

    def _monte_carlo(self) -> None:
        config = self.config
        problem, box, h = config.problem, config.box, config.bandwidth
        tolerances = config.tolerances

        with self.stage("simulate"):
            ensemble = simulate(problem.spec, config.grid, config.paths, config.seed, config.threads)
            log.info("Ensemble of %s paths simulated.", ensemble.count)

        with self.stage("fields"):
            g = fk_solve_backward(problem, ensemble, box)
            f = fk_solve_forward(problem, ensemble, box)
            psi = log_transform(g)
            for name, estimate in (("g.csv", g), ("f.csv", f), ("psi.csv", psi)):
                estimate.to_csv(self.path(name))

        with self.stage("weights"):
            weighted = fk_weights(problem, ensemble)
            weighted.to_csv(self.path("weights.csv"))

        oracle = None
        if self.wants("pde_oracle"):
            with self.stage("pde_oracle"):
                block = config.raw["pde"]
                oracle = solve_fk_backward(problem, PdeGrid(block["lo"], block["hi"], block["cells"], config.grid))
                oracle.to_csv(self.path("pde_g.csv"))
                comparison = compare_with_mc(g, oracle, tolerances["oracle"])
                _save_json(self.path("pde_oracle.json"), comparison.to_json())
                self.gate("pde_oracle", comparison.passed, agreement=comparison.agreement)

        # with an oracle the derivative gates see its g and psi, so only the derivative estimator is measured
        exact_g, exact_psi = (g, psi) if oracle is None else (oracle, psi_from_pde(oracle))

        grad = L_psi = LP_psi = None
        if self.wants("hjb_residual", "lp_identity", "generator_gap", "drift"):
            with self.stage("derivatives"):
                grad = gradient_estimate(exact_psi)
                grad.to_csv(self.path("grad_psi.csv"))
                if self.wants("hjb_residual", "generator_gap"):
                    L_psi = self._derivative(ensemble, exact_psi, h)
                if self.wants("lp_identity", "generator_gap"):
                    LP_psi = self._derivative(weighted, exact_psi, h)

        fine: Dict[str, ResidualReport] = {}
        with self.stage("residuals"):
            fine = self._residuals(ensemble, weighted, exact_g, exact_psi, h, grad, L_psi)
            reports = list(fine.items())
            if self.wants("lp_identity"):
                reports.append(("lp_identity",
                                lp_identity_check(exact_psi, grad, LP_psi, problem, weighted, tolerances["hjb"])))
            if self.wants("generator_gap"):
                reports.append(("generator_gap",
                                generator_gap_check(L_psi, LP_psi, grad, problem.spec, weighted, tolerances["hjb"])))
            if self.wants("drift"):
                reports.append(("drift", drift_formula_check(problem.spec, grad, weighted, h, box,
                                                             tolerances["drift"])))
            for name, report in reports:
                report.save_json(self.path(f"{name}.json"))
                report.to_csv(self.path(f"{name}.csv"), config.grid, box)
                self.gate(name, report.passed, l1=report.l1, scale_l1=report.scale_l1, coverage=report.coverage)
            if self.wants("semigroup"):
                consistency = semigroup_consistency(problem, ensemble, g)
                _save_json(self.path("semigroup.json"), consistency.to_json())
                self.gate("semigroup", consistency.passed, agreement=consistency.agreement,
                          dropped=consistency.dropped)

        if self.wants("refinement"):
            with self.stage("refinement"):
                coarse = thin(ensemble, 2)
                if oracle is None:
                    coarse_g = fk_solve_backward(problem, coarse, box)
                    coarse_psi = log_transform(coarse_g)
                else:
                    coarse_g, coarse_psi = exact_g.thin(2), exact_psi.thin(2)
                levels = self._residuals(coarse, fk_weights(problem, coarse), coarse_g, coarse_psi, 2 * h)
                checks = [refinement_check(levels[name], fine[name]) for name in REFINED_GATES if name in fine]
                _save_json(self.path("refinement.json"), {check.name: check.to_json() for check in checks})
                self.gate("refinement", all(check.passed for check in checks),
                          l1={check.name: [check.coarse.l1, check.fine.l1] for check in checks})

        if self.wants("entropy"):
            with self.stage("entropy"):
                estimate = relative_entropy(weighted, spec=problem.spec)
                decomposition = decompose_entropy(weighted, psi, problem.spec, h=h)
                report = entropy_report(estimate, decomposition)
                save_entropy_report(self.path("entropy.json"), report)
                gap = abs(estimate.value - decomposition.total)
                self.gate("entropy", gap <= tolerances["entropy"] * abs(estimate.value) + 3 * estimate.stderr,
                          h=estimate.value, decomposed=decomposition.total)

        if self.wants("born"):
            with self.stage("born"):
                distance = born_marginal_check(weighted, f, g, config.grid.steps // 2)
                self.gate("born", distance < tolerances["born"], total_variation=distance)

        if self.wants("khasminskii"):
            with self.stage("khasminskii"):
                block = config.raw["conditions"]["khasminskii"]
                W = _lookup(POTENTIALS, block["W"], "conditions.khasminskii.W")(block["W"], problem.spec.dim)
                record = khasminskii_bound(ensemble, W, float(block["tau"]), box)
                _save_json(self.path("khasminskii.json"), record.to_json())
                self.gate("khasminskii", record.holds, alpha=record.alpha)


def run(target: str, seed: Optional[int] = None, out: Optional[str] = None, threads: Optional[int] = None,
        tolerance_scale: float = 1.0) -> Tuple[int, str]:
    """
    Runs a scenario and writes its artifacts and manifest; exit status 0 iff every configured gate passes
    """
    config = validate_config(target, {"seed": seed, "threads": threads})
    if tolerance_scale <= 0:
        raise IncorrectConfigValueError("Incorrect value for 'tolerance-scale'.")
    config.tolerances = {key: value * tolerance_scale for key, value in config.tolerances.items()}
    directory = output_directory(config, out)
    prepare_environment(directory)

    started = datetime.now(timezone.utc).isoformat()
    scenario = ScenarioRun(config, directory)
    error = None
    try:
        scenario.execute()
    except StageError as exc:
        error = str(exc)
        scenario.gate("stage", False, error=error)

    status = 0 if scenario.gates and all(gate["passed"] for gate in scenario.gates.values()) else 1
    manifest = {
        "scenario": config.scenario,
        "config_hash": config.config_hash,
        "code_version": CODE_VERSION,
        "seed": config.seed,
        "threads": config.threads,
        "tolerance_scale": tolerance_scale,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "wall_times": scenario.wall_times,
        "gates": scenario.gates,
        "artifacts": sorted(scenario.artifacts),
        "exit_status": status,
    }
    _save_json(os.path.join(directory, "manifest.json"), manifest)
    log.info("Scenario '%s' finished with status %s in %s.", config.scenario, status, directory)
    return status, directory


def list_scenarios(directory: str = SCENARIOS_PATH) -> List[Tuple[str, str, str]]:
    """
    Built-in scenarios followed by user scenario files
    """
    listing = [(name, entry["description"], entry["anchors"]) for name, entry in BUILTIN_SCENARIOS.items()]
    for path in sorted(glob.glob(os.path.join(directory, "*.json"))):
        try:
            with open(path, encoding="utf-8") as file:
                content = json.load(file)
        except (OSError, JSONDecodeError):
            log.warning("Scenario file %s could not be read.", path)
            continue
        name = os.path.splitext(os.path.basename(path))[0]
        listing.append((name, content.get("description", ""), content.get("anchors", "")))
    return listing


BUILTIN_SCENARIOS = {
    "null": {
        "description": "V = 0, g_T = 1 on Brownian motion; every residual is identically zero",
        "anchors": "backward field, extended HJB equation, semigroup law, entropy decomposition, Born factorization",
        "config": {"scenario": "null",
                   "gates": ["fk_residual", "hjb_residual", "lp_identity", "semigroup", "entropy", "born"]},
    },
    "constant-tilt": {
        "description": "Constant potential c = 0.5: g = exp(c (T - t)), psi = c (T - t), P = R",
        "anchors": "backward field, log transform, extended HJB equation",
        "config": {"scenario": "constant-tilt", "potential": {"name": "constant", "c": 0.5},
                   "gates": ["fk_residual", "hjb_residual", "lp_identity", "semigroup", "entropy"]},
    },
    "brownian-gaussian": {
        "description": "V = 0.3, g_T = exp(-x^2 / 2), T = 1 with a closed form and a PDE oracle",
        "anchors": "Feynman-Kac formula, PDE oracle, extended HJB and FK residuals",
        "config": {"scenario": "brownian-gaussian", "potential": {"name": "constant", "c": 0.3},
                   "terminal": {"name": "gaussian", "mean": 0.0, "scale": 1.0},
                   "paths": 200000, "steps": 256, "bandwidth": 0.015625, "extrapolate": False,
                   "box": {"lo": [-4.0], "hi": [4.0], "cells": [40]},
                   "gates": ["fk_residual", "hjb_residual", "semigroup", "pde_oracle", "refinement"]},
    },
    "bridge-tilt": {
        "description": "Brownian motion from 0 tilted towards 1 by g_T = exp(-(x - 1)^2 / 0.08)",
        "anchors": "drift formula, entropy decomposition, Born factorization",
        "config": {"scenario": "bridge-tilt", "terminal": {"name": "gaussian", "mean": 1.0, "scale": 0.2},
                   "paths": 100000, "steps": 128, "bandwidth": 0.03125,
                   "box": {"lo": [-5.0], "hi": [5.0], "cells": [100]},
                   "gates": ["drift", "entropy", "born", "semigroup"]},
    },
    "ou-stationary": {
        "description": "Stationary Ornstein-Uhlenbeck process with f_0 = x^2 and V = 0",
        "anchors": "forward field, Nelson velocity, initial entropy term, Born factorization",
        "config": {"scenario": "ou-stationary",
                   "model": {"name": "ou", "dim": 1, "k": 1.0, "epsilon": 2.0, "horizon": 1.0},
                   "initial_weight": {"name": "power", "exponent": 2.0},
                   "paths": 50000, "box": {"lo": [-4.0], "hi": [4.0], "cells": [32]},
                   "gates": ["fk_residual", "drift", "entropy", "born", "semigroup"]},
    },
    "kato-suite": {
        "description": "Kato class membership of W = 1/|y| for three-dimensional Brownian motion",
        "anchors": "Kato class, Green-kernel criterion",
        "config": {"scenario": "kato-suite", "model": {"name": "zero", "dim": 3, "horizon": 1.0},
                   "box": {"lo": [-4.0, -4.0, -4.0], "hi": [4.0, 4.0, 4.0], "cells": [8, 8, 8]},
                   "gates": ["kato"],
                   "conditions": {"kato": {"W": {"name": "coulomb", "strength": 1.0, "power": 1.0},
                                           "probe_points": [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]]}}},
    },
    "growth-suite": {
        "description": "Classical Ornstein-Uhlenbeck case of the gradient-reference growth conditions",
        "anchors": "growth conditions, script potentials, integrability ladder",
        "config": {"scenario": "growth-suite",
                   "model": {"name": "ou", "dim": 1, "k": 1.0, "epsilon": 2.0, "horizon": 1.0},
                   "potential": {"name": "ou-critical", "k": 1.0, "epsilon": 2.0, "w0": 0.0},
                   "gates": ["growth"],
                   "conditions": {"growth": {"theorem": "thm30",
                                             "U": {"name": "quadratic", "k": 1.0, "epsilon": 2.0},
                                             "U_diamond": {"name": "log-radial", "gamma": 1.0},
                                             "U_star": {"name": "zero"}, "c": 4.0, "kappa": 1.0,
                                             "reference_log_density": {"name": "initial-law"},
                                             "initial_log_density": {"name": "initial-law"}}}},
    },
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="fklab", description="Monte Carlo laboratory for Feynman-Kac path measures")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="run a scenario or config file")
    run_parser.add_argument("config", nargs="?", default=EXPERIMENT_CONFIG_PATH,
                            help="config path or scenario name")
    run_parser.add_argument("--seed", type=int, default=None, help="master seed override")
    run_parser.add_argument("--out", type=str, default=None, help="artifact directory")
    run_parser.add_argument("--threads", type=int, default=None, help="simulation threads")
    run_parser.add_argument("--tolerance-scale", type=float, default=1.0, help="multiplies every tolerance")

    commands.add_parser("list", help="list built-in and user scenarios")

    check_parser = commands.add_parser("check-conditions", help="evaluate the configured condition gates")
    check_parser.add_argument("config", help="config path or scenario name")

    args = parser.parse_args(argv)
    try:
        if args.command == "list":
            for name, description, anchors in list_scenarios():
                print(f"{name:<20}{description}\n{'':<20}[{anchors}]")
            return 0
        if args.command == "check-conditions":
            config = validate_config(args.config)
            results = check_conditions(config)
            print(json.dumps({name: result["status"] for name, result in results.items()}, indent=4))
            return 0 if results and all(result["passed"] for result in results.values()) else 1
        status, directory = run(args.config, args.seed, args.out, args.threads, args.tolerance_scale)
        print(f"Artifacts written to {directory}")
        return status
    except ConfigError as exc:
        log.error("Config error: %s", exc)
        return 2
    except (KatoUnresolvedError, QuadratureFailureError, NonFiniteError) as exc:
        log.error("Condition check failed: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
