import os
import shutil
import unittest

import numpy as np

from config.test_params import TEST_PATH
from diffusion import FKProblem, GaussianLaw, TimeGrid, UniformLaw, brownian, simulate
from feynman_kac import NonFiniteWeightError, fk_solve_backward, fk_solve_forward, log_transform
from field import SpaceBox
from girsanov import (AllKilledError, DegenerateESSError, WeightedEnsemble, born_marginal_check, decompose_entropy,
                      entropy_chain_bound, entropy_report, fk_weights, girsanov_log_density, relative_entropy,
                      save_entropy_report)

print("Stage 3A: Weighting Paths")


def gaussian_bump(mean: float, scale: float):
    return lambda x: np.exp(-(x[:, 0] - mean) ** 2 / (2 * scale ** 2))


class WeightsCheck(unittest.TestCase):
    def setUp(self) -> None:
        self.spec = brownian(dim=1)
        self.ensemble = simulate(self.spec, TimeGrid.uniform(1.0, 8), 2000, master_seed=17)

    def test_null_weights(self):
        """
        Checks unit weights, full ESS and zero entropy without a tilt
        """
        weighted = fk_weights(FKProblem(self.spec), self.ensemble)
        self.assertTrue(np.allclose(weighted.weights, 1.0, rtol=0, atol=1e-14))
        self.assertAlmostEqual(weighted.ess, 2000.0, places=8)
        self.assertEqual(relative_entropy(weighted).value, 0.0, msg="H(R|R) must vanish exactly")

    def test_constant_tilt_is_normalized_away(self):
        problem = FKProblem(self.spec, potential=lambda t, x: np.full(x.shape[0], 0.7))
        weighted = fk_weights(problem, self.ensemble)
        self.assertAlmostEqual(weighted.log_normalizer, 0.7, places=12)
        self.assertAlmostEqual(relative_entropy(weighted).value, 0.0, places=12)

    def test_all_paths_killed(self):
        problem = FKProblem(self.spec, terminal=lambda x: np.zeros(x.shape[0]))
        with self.assertRaises(AllKilledError, msg="A terminal weight vanishing everywhere kills every path"):
            fk_weights(problem, self.ensemble)

    def test_partial_killing(self):
        problem = FKProblem(self.spec, terminal=lambda x: (x[:, 0] > 0).astype(float))
        weighted = fk_weights(problem, self.ensemble)
        self.assertGreater(weighted.killed_fraction, 0.3)
        self.assertLess(weighted.killed_fraction, 0.7)
        self.assertAlmostEqual(float(np.mean(weighted.weights)), 1.0, places=12)
        estimate = relative_entropy(weighted)
        self.assertAlmostEqual(estimate.value, np.log(1 / (1 - weighted.killed_fraction)), places=10,
                               msg="Conditioning on an event of mass q costs log(1/q)")

    def test_rejects_bad_log_weights(self):
        with self.assertRaises(NonFiniteWeightError):
            WeightedEnsemble(self.ensemble, np.full(2000, np.nan))
        with self.assertRaises(ValueError):
            WeightedEnsemble(self.ensemble, np.zeros(10))

    def test_degenerate_ess(self):
        weighted = fk_weights(FKProblem(self.spec, terminal=gaussian_bump(1.0, 0.2)), self.ensemble)
        with self.assertRaises(DegenerateESSError):
            relative_entropy(weighted, ess_floor=weighted.ess + 1)


class BridgeEntropyCheck(unittest.TestCase):
    def setUp(self) -> None:
        self.spec = brownian(dim=1)
        self.grid = TimeGrid.uniform(1.0, 8)
        self.ensemble = simulate(self.spec, self.grid, 50000, master_seed=23)
        self.problem = FKProblem(self.spec, terminal=gaussian_bump(1.0, 0.2))
        self.weighted = fk_weights(self.problem, self.ensemble)

    def tearDown(self) -> None:
        shutil.rmtree(TEST_PATH, ignore_errors=True)

    def test_bridge_entropy(self):
        """
        Checks H(P|R) against the Gaussian divergence of the terminal marginals, about 1.611
        """
        variance, mean = 1 / 26, 25 / 26
        expected = 0.5 * (variance + mean ** 2 - 1 - np.log(variance))
        estimate = relative_entropy(self.weighted)
        self.assertLess(abs(estimate.value - expected), max(0.03, 3 * estimate.stderr),
                        msg=f"""Entropy {estimate.value} +- {estimate.stderr}, expected {expected}.
                        If fails - check the self-normalization of the weights""")
        self.assertGreater(estimate.stderr, 0.0)
        self.assertTrue(np.isfinite(estimate.stderr))

    def test_chain_bound(self):
        other = fk_weights(FKProblem(self.spec, terminal=gaussian_bump(0.8, 0.3)), self.ensemble)
        bound = entropy_chain_bound(self.weighted, other)
        self.assertTrue(bound.holds, msg=f"Chain bound violated: {bound}")
        alien = fk_weights(FKProblem(self.spec), simulate(self.spec, self.grid, 50000, master_seed=24))
        with self.assertRaises(ValueError):
            entropy_chain_bound(self.weighted, alien)

    def test_born_marginal(self):
        """
        Checks that P_t is the reference marginal tilted by f_t g_t
        """
        box = SpaceBox([-1.5], [2.5], [40])
        g = fk_solve_backward(self.problem, self.ensemble, box)
        f = fk_solve_forward(self.problem, self.ensemble, box)
        self.assertLess(born_marginal_check(self.weighted, f, g, 4), 1e-9)

    def test_report_file(self):
        os.makedirs(TEST_PATH, exist_ok=True)
        path = os.path.join(TEST_PATH, "entropy.json")
        estimate = relative_entropy(self.weighted, spec=self.spec)
        report = entropy_report(estimate)
        save_entropy_report(path, report)
        self.assertTrue(os.path.exists(path))
        self.assertFalse(report["truncated_reference"])
        self.assertEqual(sorted(report), ["ess", "h", "killed_fraction", "outside_domain", "stderr",
                                          "truncated_reference"])


class DecompositionCheck(unittest.TestCase):
    def setUp(self) -> None:
        self.spec = brownian(dim=1, initial_law=GaussianLaw([0.0], 1.0))
        self.ensemble = simulate(self.spec, TimeGrid.uniform(1.0, 16), 20000, master_seed=29)
        self.box = SpaceBox([-4.0], [4.0], [32])
        self.problem = FKProblem(self.spec, potential=lambda t, x: np.full(x.shape[0], 0.5))
        self.weighted = fk_weights(self.problem, self.ensemble)
        self.psi = log_transform(fk_solve_backward(self.problem, self.ensemble, self.box))

    def test_constant_tilt_has_no_entropy(self):
        decomposition = decompose_entropy(self.weighted, self.psi, self.spec)
        self.assertAlmostEqual(decomposition.h0, 0.0, places=12)
        self.assertAlmostEqual(decomposition.kinetic, 0.0, places=10)
        self.assertGreaterEqual(decomposition.coverage, 0.9)

    def test_log_density_residuals(self):
        """
        Checks psi(s, x) = log E_R[exp(int_s^t V) exp(psi(t, X_t)) | X_s = x] for a constant tilt
        """
        residuals = girsanov_log_density(self.weighted, self.psi, self.problem)
        for index in range(len(residuals.pairs)):
            self.assertLess(float(np.max(np.abs(residuals.residuals[index]))), 1e-10)
            self.assertGreaterEqual(residuals.retained[index], 0.9)

    def test_domain_guard(self):
        estimate = relative_entropy(self.weighted, w0=lambda x: 0.5 * np.sum(x ** 2, axis=1))
        self.assertFalse(estimate.outside_domain)
        self.assertIn("domain_guard", estimate.diagnostics)

    def test_truncated_reference_is_flagged(self):
        spec = brownian(dim=1, initial_law=UniformLaw([-1.0], [1.0]))
        weighted = fk_weights(FKProblem(spec), simulate(spec, TimeGrid.uniform(1.0, 4), 500, master_seed=2))
        self.assertTrue(relative_entropy(weighted, spec=spec).truncated_reference)


if __name__ == "__main__":
    unittest.main()
