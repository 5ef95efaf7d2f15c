import unittest

import numpy as np

from diffusion import FKProblem, GaussianLaw, PathEnsemble, TimeGrid, brownian, ornstein_uhlenbeck, simulate
from field import SpaceBox, conditional_mean
from girsanov import fk_weights
from stochastic_calculus import (LEFT, RIGHT, TRUNCATE, BandwidthTooSmallError, KernelSpec, backward_derivative,
                                 carre_du_champ, convolve_time, exit_time_truncate, forward_derivative,
                                 nelson_velocity, series_norm, window_steps)

print("Stage 2B: Estimating Stochastic Derivatives")


class ConvolutionCheck(unittest.TestCase):
    def setUp(self) -> None:
        self.grid = TimeGrid.uniform(1.0, 8)

    def test_constant_series(self):
        ones = np.ones(9)
        self.assertTrue(np.allclose(convolve_time(ones, KernelSpec(LEFT, 0.25), self.grid), 1.0),
                        msg="Renormalized windows must keep constants")
        truncated = convolve_time(ones, KernelSpec(LEFT, 0.25), self.grid, boundary=TRUNCATE)
        self.assertTrue(np.allclose(truncated, [1, 1, 1, 1, 1, 1, 1, 0.5, 0]),
                        msg="Truncated windows lose the mass past T")

    def test_linear_series(self):
        """
        Checks that box averages of t shift it by half the bandwidth
        """
        times = self.grid.times
        left = convolve_time(times, KernelSpec(LEFT, 0.25), self.grid)
        right = convolve_time(times, KernelSpec(RIGHT, 0.25), self.grid)
        self.assertTrue(np.allclose(left[:7], times[:7] + 0.125, rtol=0, atol=1e-14))
        self.assertTrue(np.allclose(right[2:], times[2:] - 0.125, rtol=0, atol=1e-14))

    def test_truncated_window_contracts(self):
        """
        Checks ||k^h * v||_p <= ||v||_p for p = 1, 2 with left and right kernels
        """
        series = np.random.default_rng(3).standard_normal((100, 9))
        for shape in (LEFT, RIGHT):
            averaged = convolve_time(series, KernelSpec(shape, 0.25), self.grid, boundary=TRUNCATE)
            self.assertEqual(averaged.shape, series.shape)
            self.assertTrue(np.all(np.max(np.abs(averaged), axis=1) <= np.max(np.abs(series), axis=1) + 1e-12))
            for p in (1, 2):
                grew = series_norm(averaged, self.grid, p) > series_norm(series, self.grid, p) + 1e-12
                self.assertFalse(np.any(grew), msg=f"{shape} window grew an L{p} norm")
        self.assertTrue(np.allclose(series_norm(np.ones(9), self.grid, p=2), np.sqrt(9 / 8)))

    def test_averages_approach_lipschitz_series(self):
        """
        Checks that ||k^h * v - v||_2 shrinks every time h halves
        """
        grid = TimeGrid.uniform(1.0, 64)
        times = grid.times
        lipschitz = (("t", times), ("|t - 1/2|", np.abs(times - 0.5)), ("sin 2 pi t", np.sin(2 * np.pi * times)))
        for name, series in lipschitz:
            gaps = [float(series_norm(convolve_time(series, KernelSpec(LEFT, 2.0 ** -power), grid) - series, grid)[0])
                    for power in range(2, 7)]
            self.assertTrue(all(later < earlier for earlier, later in zip(gaps, gaps[1:])),
                            msg=f"Averages of {name} do not converge monotonically: {gaps}")

    def test_bandwidth_limits(self):
        with self.assertRaises(BandwidthTooSmallError):
            window_steps(self.grid, 0.05)
        with self.assertRaises(ValueError, msg="Bandwidths off the step lattice must be rejected"):
            window_steps(self.grid, 0.2)
        with self.assertRaises(ValueError):
            KernelSpec("centered", 0.25)


class DerivativeCheck(unittest.TestCase):
    def setUp(self) -> None:
        self.grid = TimeGrid.uniform(1.0, 64)
        self.box = SpaceBox([-3.0], [3.0], [24])
        self.spec = brownian(dim=1, initial_law=GaussianLaw([0.0], 1.0))
        self.ensemble = simulate(self.spec, self.grid, 20000, master_seed=12)

    def test_derivative_of_time(self):
        """
        Checks D t = 1 forward and D_* t = -1 in the reversed convention
        """
        forward = forward_derivative(self.ensemble, lambda t, x: np.full(x.shape[0], t), 1 / 16, self.box)
        values = forward.extrapolated.values[forward.extrapolated.mask]
        self.assertTrue(np.allclose(values, 1.0, rtol=0, atol=1e-12))
        self.assertFalse(np.any(forward.raw.mask[-1]), msg="The last knot has no forward increment")
        self.assertEqual(forward.bandwidths, [1 / 16, 1 / 32, 1 / 64])

        backward = backward_derivative(self.ensemble, lambda t, x: np.full(x.shape[0], t), 1 / 16, self.box)
        self.assertTrue(np.allclose(backward.raw.values[backward.raw.mask], -1.0, rtol=0, atol=1e-12))
        self.assertFalse(np.any(backward.raw.mask[0]), msg="The first knot has no backward increment")
        original = backward_derivative(self.ensemble, lambda t, x: np.full(x.shape[0], t), 1 / 16, self.box,
                                       convention="original")
        self.assertTrue(np.allclose(original.raw.values[original.raw.mask], 1.0, rtol=0, atol=1e-12))

    def test_too_small_bandwidth(self):
        with self.assertRaises(BandwidthTooSmallError):
            forward_derivative(self.ensemble, lambda t, x: x[:, 0], 1 / 128, self.box)

    def test_carre_du_champ_of_coordinate(self):
        """
        Checks Gamma(x, x) = epsilon for Brownian motion
        """
        ladder = carre_du_champ(self.ensemble, lambda t, x: x[:, 0], lambda t, x: x[:, 0], 1 / 16, self.box)
        estimate = ladder.raw
        inner = estimate.mask[:48]
        weights = estimate.samples[:48][inner]
        average = np.sum(estimate.values[:48][inner] * weights) / np.sum(weights)
        self.assertLess(abs(average - 1.0), 0.05, msg=f"Carre du champ of x is {average}, expected 1")

    def test_compensated_increments_keep_the_mean(self):
        """
        Checks that removing the martingale part keeps L x^2 = 1 and shrinks its standard error
        """
        def square(_, x):
            return x[:, 0] ** 2

        plain = forward_derivative(self.ensemble, square, 1 / 16, self.box).raw
        compensated = forward_derivative(self.ensemble, square, 1 / 16, self.box, spec=self.spec).raw
        joint = plain.mask & compensated.mask
        counts = compensated.samples[joint]
        average = np.sum(compensated.values[joint] * counts) / np.sum(counts)
        self.assertLess(abs(average - 1.0), 0.02, msg=f"Compensated L x^2 averages {average}, expected 1")
        close = np.abs(compensated.values[joint] - 1.0) <= 3 * compensated.stderr[joint] + 1e-12
        self.assertGreaterEqual(np.mean(close), 0.9)
        self.assertLess(np.mean(compensated.stderr[joint]), 0.7 * np.mean(plain.stderr[joint]),
                        msg="Compensation must reduce the spread of the increment quotients")
        with self.assertRaises(ValueError):
            forward_derivative(self.ensemble, square, 1 / 16, self.box, weights=np.ones(self.ensemble.count),
                               spec=self.spec)

    def test_product_rule_defect_is_carre_du_champ(self):
        """
        Checks L(uv) - u Lv - v Lu = Gamma(u, v) = 2x for u = x^2, v = x
        """
        def coordinate(_, x):
            return x[:, 0]

        def square(_, x):
            return x[:, 0] ** 2

        def cube(_, x):
            return x[:, 0] ** 3

        L_uv, L_u, L_v = (forward_derivative(self.ensemble, func, 1 / 16, self.box, spec=self.spec).raw
                          for func in (cube, square, coordinate))
        gamma = carre_du_champ(self.ensemble, square, coordinate, 1 / 16, self.box).raw
        centers = self.box.centers()[:, 0]
        defect = L_uv.values - centers ** 2 * L_v.values - centers * L_u.values
        spread = np.sqrt(L_uv.stderr ** 2 + centers ** 4 * L_v.stderr ** 2 + centers ** 2 * L_u.stderr ** 2 +
                         gamma.stderr ** 2)
        valid = L_uv.mask & L_u.mask & L_v.mask & gamma.mask
        # knots whose window is clipped at T
        valid[self.grid.steps - 4:] = False
        close = np.abs(defect - gamma.values)[valid] <= 3 * spread[valid] + 1e-12
        self.assertGreaterEqual(np.mean(close), 0.9,
                                msg=f"Product rule defect matches Gamma on only {np.mean(close):.1%} of cells")

    def test_ou_drift_is_recovered(self):
        """
        Checks D x = -x on a nearly deterministic Ornstein-Uhlenbeck flow
        """
        spec = ornstein_uhlenbeck(dim=1, k=1.0, epsilon=1e-8, initial_law=GaussianLaw([0.0], 1.0))
        ensemble = simulate(spec, self.grid, 5000, master_seed=6)
        ladder = forward_derivative(ensemble, lambda t, x: x[:, 0], 1 / 16, self.box)
        estimate = ladder.extrapolated
        for k in (0, 20, 40):
            cells = self.box.cell_index(ensemble.states(k))
            position, _, _, _ = conditional_mean(cells, ensemble.states(k)[:, 0], self.box.n_cells)
            valid = estimate.mask[k]
            self.assertTrue(np.allclose(estimate.values[k, valid], -position[valid], rtol=0.02, atol=1e-3),
                            msg=f"Extrapolated drift at knot {k} is off -x")

    def test_relative_velocity_vanishes_under_reference(self):
        spec = ornstein_uhlenbeck(dim=1, k=1.0, epsilon=1e-8, initial_law=GaussianLaw([0.0], 1.0))
        ensemble = simulate(spec, self.grid, 5000, master_seed=6)
        velocity = nelson_velocity(ensemble, 1 / 16, self.box, relative=True, spec=spec)
        self.assertLess(float(np.max(np.abs(velocity.values[velocity.mask]))), 0.05)
        with self.assertRaises(ValueError):
            nelson_velocity(ensemble, 1 / 16, self.box, relative=True)


class BridgeVelocityCheck(unittest.TestCase):
    def test_weighted_velocity_of_bridge_tilt(self):
        """
        Checks the P-velocity of Brownian motion tilted by g_T = exp(-(x - 1)^2 / 0.08)
        against (1 - x) / (1.04 - t) on the bulk of the P-marginal
        """
        grid = TimeGrid.uniform(1.0, 64)
        box = SpaceBox([-5.0], [5.0], [40])
        problem = FKProblem(brownian(dim=1), terminal=lambda x: np.exp(-(x[:, 0] - 1.0) ** 2 / 0.08))
        weighted = fk_weights(problem, simulate(problem.spec, grid, 60000, master_seed=29))
        velocity = nelson_velocity(weighted, 0.25, box)
        centers = box.centers()[:, 0]
        for t in (0.25, 0.5, 0.75):
            k = grid.index_of(t)
            states = weighted.base.states(k)
            position, _, _, valid = conditional_mean(box.cell_index(states), states[:, 0], box.n_cells,
                                                     weights=weighted.weights)
            mean, spread = t / 1.04, np.sqrt(t * (1.04 - t) / 1.04)
            bulk = velocity.mask[k] & valid & (np.abs(centers - mean) <= spread)
            expected = (1.0 - position[bulk]) / (1.04 - t)
            gap = float(np.mean(np.abs(velocity.values[k, bulk, 0] - expected)))
            self.assertGreater(np.sum(bulk), 2)
            self.assertLessEqual(gap, 0.1 * float(np.mean(np.abs(expected))),
                                 msg=f"Bridge velocity at t={t} is off by {gap} on average")


class ExitTimeCheck(unittest.TestCase):
    def test_paths_freeze_at_exit(self):
        grid = TimeGrid.uniform(1.0, 4)
        paths = np.array([[0.0, 1.0, 2.5, 1.0, 0.0], [0.0, 0.5, -0.5, 0.5, 1.5]])[:, :, None]
        truncated, exits = exit_time_truncate(PathEnsemble(grid, paths), 2.0)
        self.assertEqual(exits.tolist(), [2, -1])
        self.assertEqual(truncated.paths[0, :, 0].tolist(), [0.0, 1.0, 2.5, 2.5, 2.5])
        self.assertEqual(truncated.paths[1, :, 0].tolist(), paths[1, :, 0].tolist())

    def test_infinite_radius_is_identity(self):
        grid = TimeGrid.uniform(1.0, 4)
        ensemble = PathEnsemble(grid, np.zeros((3, 5, 1)))
        truncated, exits = exit_time_truncate(ensemble, np.inf)
        self.assertIs(truncated, ensemble)
        self.assertTrue(np.all(exits == -1))


if __name__ == "__main__":
    unittest.main()
