import json
import shutil
import unittest

import fklab
from config.config_generator import generate_config
from config.test_params import TEST_EXPERIMENT_CONFIG_PATH, TEST_PATH
from constants import EXPERIMENT_CONFIG_PATH
from fklab import ConfigError, IncorrectConfigValueError, UnknownRegistryEntryError, UnknownScenarioError

print("Stage 0: Validating Experiment Config")
print("Starting tests with received config")


class ExtendedTestCase(unittest.TestCase):
    def assertRaisesWithMessage(self, msg, exception, func, *args, **kwargs):
        try:
            func(*args, **kwargs)
        except Exception as inst:  # pylint: disable=broad-except
            self.assertEqual(type(inst), exception, msg=msg)
        else:
            self.fail(msg)


class ExperimentConfigCheck(ExtendedTestCase):
    def setUp(self) -> None:
        with open(EXPERIMENT_CONFIG_PATH, encoding="utf-8") as f:
            self.reference = json.load(f)

    def tearDown(self) -> None:
        shutil.rmtree(TEST_PATH, ignore_errors=True)

    def test_reference_config_is_valid(self):
        config = fklab.validate_config(EXPERIMENT_CONFIG_PATH)
        self.assertEqual(config.scenario, self.reference["scenario"])
        self.assertEqual(config.grid.steps, self.reference["steps"])
        self.assertEqual(config.box.n_cells, 32)

    def test_incorrect_paths_config_param(self):
        """
        Checks that the runner rejects a nonpositive number of paths
        """
        generate_config({"paths": -5})
        error_message = """Checking that paths parameter is a positive integer.
                            If fails - check the positivity check of the ensemble size"""
        self.assertRaisesWithMessage(error_message, IncorrectConfigValueError, fklab.validate_config,
                                     TEST_EXPERIMENT_CONFIG_PATH)

    def test_incorrect_paths_config_param_type(self):
        generate_config({"paths": "plain text"})
        self.assertRaisesWithMessage("Paths must be an integer", IncorrectConfigValueError, fklab.validate_config,
                                     TEST_EXPERIMENT_CONFIG_PATH)

    def test_bandwidth_off_the_step_lattice(self):
        """
        Checks that derivative gates need a bandwidth spanning whole time steps
        """
        generate_config({"bandwidth": 0.02})
        error_message = """Checking that bandwidth is a multiple of the time step.
                            If fails - check the bandwidth check of the derivative gates"""
        self.assertRaisesWithMessage(error_message, IncorrectConfigValueError, fklab.validate_config,
                                     TEST_EXPERIMENT_CONFIG_PATH)

    def test_bandwidth_is_free_without_derivative_gates(self):
        generate_config({"bandwidth": 0.02, "gates": ["semigroup"]})
        self.assertEqual(fklab.validate_config(TEST_EXPERIMENT_CONFIG_PATH).gates, ["semigroup"])

    def test_refinement_needs_a_residual_gate(self):
        """
        Checks that the refinement gate is rejected without fk or hjb residuals and on an odd step count
        """
        generate_config({"gates": ["semigroup", "refinement"]})
        self.assertRaisesWithMessage("Refinement without a residual gate must be rejected", IncorrectConfigValueError,
                                     fklab.validate_config, TEST_EXPERIMENT_CONFIG_PATH)
        generate_config({"gates": ["fk_residual", "refinement"], "steps": 63, "bandwidth": 1 / 63})
        self.assertRaisesWithMessage("Refinement halves the step count, so it must be even",
                                     IncorrectConfigValueError, fklab.validate_config, TEST_EXPERIMENT_CONFIG_PATH)
        generate_config({"gates": ["fk_residual", "refinement"]})
        self.assertIn("refinement", fklab.validate_config(TEST_EXPERIMENT_CONFIG_PATH).gates)

    def test_extrapolate_flag(self):
        generate_config({"extrapolate": "yes"})
        self.assertRaisesWithMessage("extrapolate must be a boolean", IncorrectConfigValueError,
                                     fklab.validate_config, TEST_EXPERIMENT_CONFIG_PATH)
        self.assertTrue(fklab.validate_config(EXPERIMENT_CONFIG_PATH).extrapolate)
        self.assertFalse(fklab.validate_config("brownian-gaussian").extrapolate)

    def test_unknown_gate(self):
        generate_config({"gates": ["fk_residual", "telepathy"]})
        self.assertRaisesWithMessage("Unknown gates must be rejected", UnknownRegistryEntryError,
                                     fklab.validate_config, TEST_EXPERIMENT_CONFIG_PATH)

    def test_unknown_potential(self):
        generate_config({"potential": {"name": "harmonic-ish"}})
        self.assertRaisesWithMessage("Unknown potentials must be rejected", UnknownRegistryEntryError,
                                     fklab.validate_config, TEST_EXPERIMENT_CONFIG_PATH)

    def test_missing_potential_parameter(self):
        generate_config({"potential": {"name": "constant"}})
        self.assertRaisesWithMessage("A constant potential without its level must be rejected", ConfigError,
                                     fklab.validate_config, TEST_EXPERIMENT_CONFIG_PATH)

    def test_box_of_wrong_dimension(self):
        generate_config({"box": {"lo": [-1.0, -1.0], "hi": [1.0, 1.0], "cells": [4, 4]}})
        self.assertRaisesWithMessage("Box must match the model dimension", IncorrectConfigValueError,
                                     fklab.validate_config, TEST_EXPERIMENT_CONFIG_PATH)

    def test_missing_condition_block(self):
        generate_config({"gates": ["kato"]})
        self.assertRaisesWithMessage("Condition gates need their config block", IncorrectConfigValueError,
                                     fklab.validate_config, TEST_EXPERIMENT_CONFIG_PATH)

    def test_negative_tolerance(self):
        generate_config({"tolerances": {"fk": -0.1}})
        self.assertRaisesWithMessage("Tolerances must be positive", IncorrectConfigValueError,
                                     fklab.validate_config, TEST_EXPERIMENT_CONFIG_PATH)

    def test_broken_json(self):
        generate_config({})
        with open(TEST_EXPERIMENT_CONFIG_PATH, "w", encoding="utf-8") as f:
            f.write("{\"paths\": ")
        self.assertRaisesWithMessage("Broken JSON must surface as a config error", ConfigError,
                                     fklab.validate_config, TEST_EXPERIMENT_CONFIG_PATH)

    def test_unknown_scenario(self):
        self.assertRaisesWithMessage("Unknown scenario names must be rejected", UnknownScenarioError,
                                     fklab.validate_config, "no-such-scenario")

    def test_overrides(self):
        config = fklab.validate_config(EXPERIMENT_CONFIG_PATH, {"seed": 7, "threads": None})
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.threads, self.reference["threads"])

    def test_hash_ignores_threads(self):
        first = fklab.validate_config(EXPERIMENT_CONFIG_PATH, {"threads": 1})
        second = fklab.validate_config(EXPERIMENT_CONFIG_PATH, {"threads": 4})
        third = fklab.validate_config(EXPERIMENT_CONFIG_PATH, {"seed": 1})
        self.assertEqual(first.config_hash, second.config_hash)
        self.assertNotEqual(first.config_hash, third.config_hash)

    def test_builtin_scenarios_are_valid(self):
        for name in fklab.BUILTIN_SCENARIOS:
            config = fklab.validate_config(name)
            self.assertEqual(config.scenario, name)


if __name__ == "__main__":
    unittest.main()
