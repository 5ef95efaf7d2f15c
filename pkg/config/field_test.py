import os
import shutil
import unittest

import numpy as np

from config.test_params import TEST_PATH
from diffusion import TimeGrid
from field import SampledFunction, ScalarField, SpaceBox, cell_masses, conditional_mean, multilinear

print("Stage 1B: Validating Grid Fields")


class SpaceBoxCheck(unittest.TestCase):
    def test_cell_index(self):
        box = SpaceBox([-1.0, 0.0], [1.0, 1.0], [4, 2])
        points = np.array([[-0.9, 0.1], [0.9, 0.9], [1.5, 0.5], [np.nan, 0.5]])
        self.assertEqual(box.cell_index(points).tolist(), [0, 7, -1, -1],
                         msg="Cells are numbered in C order; outside or NaN points get -1")

    def test_centers_order(self):
        box = SpaceBox([0.0, 0.0], [2.0, 2.0], [2, 2])
        self.assertEqual(box.centers().tolist(), [[0.5, 0.5], [0.5, 1.5], [1.5, 0.5], [1.5, 1.5]])


class MultilinearCheck(unittest.TestCase):
    def setUp(self) -> None:
        self.box = SpaceBox([0.0, 0.0], [4.0, 4.0], [4, 4])
        centers = self.box.centers()
        self.values = 2 * centers[:, 0] - 3 * centers[:, 1] + 1

    def test_reproduces_affine_functions(self):
        points = np.array([[0.5, 0.5], [1.3, 2.7], [3.5, 1.0]])
        values, ok = multilinear(self.box, self.values, np.ones(16, dtype=bool), points)
        self.assertTrue(np.all(ok))
        self.assertTrue(np.allclose(values, 2 * points[:, 0] - 3 * points[:, 1] + 1, rtol=0, atol=1e-12))

    def test_invalid_corner_unresolves(self):
        valid = np.ones(16, dtype=bool)
        valid[self.box.cell_index(np.array([[1.5, 1.5]]))[0]] = False
        values, ok = multilinear(self.box, self.values, valid, np.array([[1.2, 1.2], [0.5, 0.5], [2.5, 2.5]]))
        self.assertEqual(ok.tolist(), [False, True, True],
                         msg="Only points that put weight on the invalid cell may be unresolved")
        self.assertTrue(np.isnan(values[0]))

    def test_sampled_function_clamps(self):
        function = SampledFunction(SpaceBox([0.0], [1.0], [2]), [1.0, 3.0])
        self.assertTrue(np.allclose(function(0.0, np.array([[0.5], [-7.0], [9.0]])), [2.0, 1.0, 3.0]))


class ConditionalMeanCheck(unittest.TestCase):
    def test_unweighted_mean(self):
        cells = np.array([0] * 60 + [1] * 10 + [-1] * 5)
        values = np.arange(75, dtype=float)
        mean, stderr, counts, mask = conditional_mean(cells, values, 3, min_samples=50)
        self.assertAlmostEqual(mean[0], 29.5)
        self.assertEqual(counts.tolist(), [60, 10, 0])
        self.assertEqual(mask.tolist(), [True, False, False], msg="Cells under the sample threshold are masked")
        self.assertGreater(stderr[0], 0.0)

    def test_weighted_effective_count(self):
        """
        Checks that a cell dominated by one weight fails the effective-count threshold
        """
        cells = np.zeros(100, dtype=int)
        weights = np.full(100, 1e-6)
        weights[0] = 1.0
        _, _, _, mask = conditional_mean(cells, np.ones(100), 1, weights=weights, min_samples=50)
        self.assertFalse(mask[0])

    def test_masses_sum_to_inside_share(self):
        cells = np.array([0, 1, 1, -1])
        self.assertTrue(np.allclose(cell_masses(cells, 2), [0.25, 0.5]))


class ScalarFieldCheck(unittest.TestCase):
    def setUp(self) -> None:
        self.grid = TimeGrid.uniform(1.0, 4)
        self.box = SpaceBox([-1.0], [1.0], [8])
        self.field = ScalarField.from_function(self.grid, self.box, lambda t, x: t + x[:, 0])

    def tearDown(self) -> None:
        shutil.rmtree(TEST_PATH, ignore_errors=True)

    def test_time_interpolation(self):
        evaluate = self.field.as_function()
        value = evaluate(0.375, np.array([[0.125]]))[0]
        self.assertAlmostEqual(value, 0.5, places=12)

    def test_binary_file(self):
        os.makedirs(TEST_PATH, exist_ok=True)
        path = os.path.join(TEST_PATH, "field.bin")
        self.field.save_binary(path)
        loaded = ScalarField.load_binary(path)
        self.assertTrue(np.array_equal(loaded.values, self.field.values))
        self.assertTrue(np.array_equal(loaded.mask, self.field.mask))
        self.assertEqual(loaded.grid, self.grid)


if __name__ == "__main__":
    unittest.main()
