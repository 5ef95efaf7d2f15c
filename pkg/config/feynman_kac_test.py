import unittest

import numpy as np

from diffusion import FKProblem, GaussianLaw, TimeGrid, brownian, simulate
from feynman_kac import (InterpolationOutOfRangeError, NonFiniteWeightError, fk_semigroup_apply, fk_solve_backward,
                         fk_solve_forward, log_transform, semigroup_consistency)
from field import FieldSlice, ScalarField, SpaceBox

print("Stage 2A: Estimating Feynman-Kac Fields")


class BackwardFieldCheck(unittest.TestCase):
    def setUp(self) -> None:
        self.spec = brownian(dim=1, initial_law=GaussianLaw([0.0], 1.0))
        self.grid = TimeGrid.uniform(1.0, 16)
        self.box = SpaceBox([-3.0], [3.0], [12])
        self.ensemble = simulate(self.spec, self.grid, 20000, master_seed=21)

    def test_null_field_is_one(self):
        """
        Checks g = 1 on every valid cell when V = 0 and g_T = 1
        """
        g = fk_solve_backward(FKProblem(self.spec), self.ensemble, self.box)
        self.assertTrue(np.all(g.values[g.mask] == 1.0), msg="Null data must give g = 1 exactly")
        self.assertTrue(np.all(g.stderr[g.mask] == 0.0))
        psi = log_transform(g)
        self.assertTrue(np.all(psi.values[psi.mask] == 0.0))

    def test_constant_tilt(self):
        """
        Checks g = exp(c (T - t)) and psi = c (T - t) for a constant potential
        """
        problem = FKProblem(self.spec, potential=lambda t, x: np.full(x.shape[0], 0.5))
        g = fk_solve_backward(problem, self.ensemble, self.box)
        psi = log_transform(g)
        expected = 0.5 * (1.0 - self.grid.times)[:, None] * np.ones(self.box.n_cells)
        self.assertTrue(np.allclose(psi.values[psi.mask], expected[psi.mask], rtol=0, atol=1e-12),
                        msg="Log transform of a constant tilt must be linear in time")

    def test_forward_constant_tilt(self):
        problem = FKProblem(self.spec, potential=lambda t, x: np.full(x.shape[0], -0.25))
        f = fk_solve_forward(problem, self.ensemble, self.box)
        expected = np.exp(-0.25 * self.grid.times)[:, None] * np.ones(self.box.n_cells)
        self.assertTrue(np.allclose(f.values[f.mask], expected[f.mask], rtol=1e-12, atol=0))

    def test_scale_invariance_of_psi(self):
        """
        Checks that multiplying g_T by 4 shifts psi by log 4
        """
        terminal = lambda x: np.exp(-x[:, 0] ** 2 / 2)
        first = log_transform(fk_solve_backward(FKProblem(self.spec, terminal=terminal), self.ensemble, self.box))
        second = log_transform(fk_solve_backward(FKProblem(self.spec, terminal=lambda x: 4 * terminal(x)),
                                                 self.ensemble, self.box))
        joint = first.mask & second.mask
        self.assertTrue(np.allclose(second.values[joint] - first.values[joint], np.log(4.0), rtol=0, atol=1e-12))

    def test_forward_field_is_conditional_moment(self):
        """
        Checks f(1, 0) = E[X_0^2 | X_1 = 0] = 1/2 for f_0 = x^2 and X_0 ~ N(0, 1)
        """
        problem = FKProblem(self.spec, initial_weight=lambda x: x[:, 0] ** 2)
        ensemble = simulate(self.spec, TimeGrid.uniform(1.0, 4), 100000, master_seed=22)
        f = fk_solve_forward(problem, ensemble, SpaceBox([-0.2], [0.2], [1]))
        self.assertTrue(f.mask[-1, 0])
        self.assertLess(abs(f.values[-1, 0] - 0.5), 0.025, msg=f"f(1, 0) is {f.values[-1, 0]}, expected 1/2")

    def test_larger_potential_larger_field(self):
        """
        Checks V <= V' => g <= g' on every jointly valid cell of one ensemble
        """
        terminal = lambda x: np.exp(-x[:, 0] ** 2 / 2)
        lower = fk_solve_backward(FKProblem(self.spec, lambda t, x: np.full(x.shape[0], 0.3), terminal),
                                  self.ensemble, self.box)
        upper = fk_solve_backward(FKProblem(self.spec, lambda t, x: 0.3 + 0.2 * np.abs(x[:, 0]), terminal),
                                  self.ensemble, self.box)
        joint = lower.mask & upper.mask
        self.assertTrue(np.any(joint))
        self.assertTrue(np.all(lower.values[joint] <= upper.values[joint]))

    def test_non_finite_functional(self):
        problem = FKProblem(self.spec, terminal=lambda x: np.exp(1e3 * x[:, 0] ** 2))
        with np.errstate(over="ignore"):
            with self.assertRaises(NonFiniteWeightError, msg="An overflowing g_T must be reported"):
                fk_solve_backward(problem, self.ensemble, self.box)


class GaussianClosedFormCheck(unittest.TestCase):
    def test_value_at_origin(self):
        """
        Checks g(0, 0) = e^0.3 / sqrt(2) for V = 0.3, g_T = exp(-x^2 / 2), Brownian motion from 0
        """
        spec = brownian(dim=1)
        grid = TimeGrid.uniform(1.0, 16)
        problem = FKProblem(spec, potential=lambda t, x: np.full(x.shape[0], 0.3),
                            terminal=lambda x: np.exp(-x[:, 0] ** 2 / 2))
        ensemble = simulate(spec, grid, 20000, master_seed=8)
        box = SpaceBox([-0.125], [0.125], [1])
        g = fk_solve_backward(problem, ensemble, box)
        expected = np.exp(0.3) / np.sqrt(2.0)
        self.assertLess(abs(g.values[0, 0] / expected - 1.0), 0.02,
                        msg="""Monte Carlo g(0, 0) is off the closed form.
                        If fails - check the tail integrals of V and the terminal weighting""")


class SemigroupCheck(unittest.TestCase):
    def setUp(self) -> None:
        self.spec = brownian(dim=1, initial_law=GaussianLaw([0.0], 1.0))
        self.grid = TimeGrid.uniform(1.0, 16)
        self.box = SpaceBox([-3.0], [3.0], [12])
        self.ensemble = simulate(self.spec, self.grid, 20000, master_seed=31)
        self.problem = FKProblem(self.spec, potential=lambda t, x: np.full(x.shape[0], 0.5))

    def test_identity_when_times_coincide(self):
        g = fk_solve_backward(self.problem, self.ensemble, self.box)
        applied = fk_semigroup_apply(self.problem, self.ensemble, 8, 8, g.slice(8))
        joint = applied.mask & g.mask[8]
        self.assertTrue(np.allclose(applied.values[joint], g.values[8, joint], rtol=0, atol=1e-14))

    def test_consistency_of_constant_tilt(self):
        g = fk_solve_backward(self.problem, self.ensemble, self.box)
        report = semigroup_consistency(self.problem, self.ensemble, g)
        self.assertTrue(report.passed, msg=f"Semigroup law violated: {report.to_json()}")
        self.assertEqual(report.agreement, [1.0, 1.0, 1.0])

    def test_all_paths_dropped(self):
        u = FieldSlice(self.box, np.ones(self.box.n_cells), np.zeros(self.box.n_cells, dtype=bool))
        with self.assertRaises(InterpolationOutOfRangeError):
            fk_semigroup_apply(self.problem, self.ensemble, 0, 16, u)

    def test_dropped_paths_are_counted(self):
        mask = np.ones(self.box.n_cells, dtype=bool)
        mask[:2] = False
        u = FieldSlice(self.box, np.ones(self.box.n_cells), mask)
        applied = fk_semigroup_apply(self.problem, self.ensemble, 0, 16, u)
        self.assertGreater(applied.meta["dropped"], 0, msg="Paths ending on masked cells must be counted")


class LogTransformCheck(unittest.TestCase):
    def test_cells_below_floor_are_masked(self):
        grid = TimeGrid.uniform(1.0, 1)
        box = SpaceBox([0.0], [3.0], [3])
        values = np.array([[1.0, 1e-5, 0.0], [1.0, 1.0, 1.0]])
        g = ScalarField(grid, box, values, np.ones((2, 3), dtype=bool))
        psi = log_transform(g)
        self.assertEqual(psi.mask[0].tolist(), [True, False, False])
        self.assertEqual(psi.meta["below_floor_cells"], 2)
        self.assertAlmostEqual(psi.meta["log_floor"], 1e-3)


if __name__ == "__main__":
    unittest.main()
