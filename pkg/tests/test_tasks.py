# -*- coding: utf-8 -*-
#
# Copyright (C) 2024 the gud developers
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

"""Test suite for the tasks module.
"""

import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from gud.process import GaussianMixture, GaussianScore, MixtureScore
from gud.schedule import column_schedule, standard_schedule
from gud.tasks import check_extension, extend_image, frozen_components, reconstruct, \
    restoration_gap, start_extension, variant_seeds, window_restoration_gap, working_time


def unit_columns_score(num_columns: int) -> MixtureScore:
    """Exact score of independent unit-variance columns.
    """
    return MixtureScore(GaussianMixture([1.], np.zeros((1, num_columns)),
                                        np.ones((1, num_columns))))


def independent_columns_score(num_columns: int, mean: float, variance: float) -> MixtureScore:
    """Exact score of independent Gaussian columns with a common mean and variance.
    """
    return MixtureScore(GaussianMixture([1.], np.full((1, num_columns), mean),
                                        np.full((1, num_columns), variance)))



class TestExtensionTiming(unittest.TestCase):

    """Unit tests for the extension timing.
    """

    def test_working_time(self):
        """Working time and restoration gaps.
        """
        schedule = column_schedule(16, 0.5, -7., 5.)
        t = working_time(schedule)
        self.assertAlmostEqual(t, 0.5 + 0.5 / 15.)
        self.assertAlmostEqual(window_restoration_gap(schedule, t, 4), 0., delta=1.e-12)
        gap = restoration_gap(schedule, t, 4)
        self.assertAlmostEqual(gap.committed, 0., delta=1.e-12)
        self.assertGreater(gap.appended, 0.)
        self.assertEqual(working_time(column_schedule(4, 0.9, -7., 5.)), 1.)

    def test_check(self):
        """Admissible values of k.
        """
        schedule = column_schedule(16, 0.5, -7., 5.)
        check_extension(schedule, 1)
        check_extension(schedule, 15)
        for k in (0, 16):
            with self.assertRaises(ValueError):
                check_extension(schedule, k)
        with self.assertRaises(ValueError):
            check_extension(standard_schedule(np.zeros(16)), 4)

    def test_window_shape(self):
        """The window must match the schedule columns.
        """
        schedule = column_schedule(16, 0.5, -7., 5.)
        with self.assertRaises(ValueError):
            start_extension(unit_columns_score(16), schedule, (2, 8, 1), 4)



class TestExtension(unittest.TestCase):

    """Unit tests for the image extension.
    """

    def test_independent_columns(self):
        """Committed columns of independent N(1.5, 4) columns, within 3 standard errors.

        gamma_max = 10 keeps the appended prior-noise columns close enough to
        the prior for a nonzero mean.
        """
        mean, variance, num = 1.5, 4., 2000
        schedule = column_schedule(16, 0.5, -7., 10.)
        score = independent_columns_score(16, mean, variance)
        strip, index = extend_image(score, schedule, (1, 16, 1), 4, 5, seed=0, batch=num,
                                    steps=1500)
        self.assertEqual(strip.shape, (num, 1, 36, 1))
        self.assertEqual(index, [(0, 0, 3), (1, 4, 7), (2, 8, 11), (3, 12, 15), (4, 16, 19)])
        self.assertTrue(np.all(np.isfinite(strip)))
        committed = strip[:, 0, :20, 0]
        mean_stderr = np.sqrt(variance / num)
        var_stderr = variance * np.sqrt(2. / (num - 1))
        assert_allclose(committed.mean(axis=0), mean, atol=3. * mean_stderr)
        assert_allclose(committed.var(axis=0, ddof=1), variance, atol=3. * var_stderr)

    def test_determinism(self):
        """Same seed, same strips.
        """
        schedule = column_schedule(8, 0.5, -7., 5.)
        score = unit_columns_score(8)
        first, _ = extend_image(score, schedule, (1, 8, 1), 2, 3, seed=1, batch=2, steps=50)
        second, _ = extend_image(score, schedule, (1, 8, 1), 2, 3, seed=1, batch=2, steps=50)
        assert_array_equal(first, second)
        third, _ = extend_image(score, schedule, (1, 8, 1), 2, 3, seed=2, batch=2, steps=50)
        self.assertFalse(np.array_equal(first, third))

    def test_init_window(self):
        """Extension from a given window, with no cycles.
        """
        schedule = column_schedule(8, 0.5, -7., 5.)
        window = np.zeros((3, 1, 8, 1))
        strip, index = extend_image(unit_columns_score(8), schedule, (1, 8, 1), 2, 0,
                                    init_window=window, steps=50)
        self.assertEqual(strip.shape, (3, 1, 8, 1))
        self.assertEqual(index, [])
        with self.assertRaises(ValueError):
            extend_image(unit_columns_score(8), schedule, (1, 8, 1), 2, -1)



class TestReconstruction(unittest.TestCase):

    """Unit tests for the partial reconstruction.
    """

    def test_small_noise(self):
        """Reconstructions from a slightly noised image stay close to it.
        """
        schedule = standard_schedule(np.zeros(8), -7., 5.)
        image = np.linspace(-1., 1., 8)
        variants = reconstruct(GaussianScore(np.eye(8)), schedule, image, 0.05, seed=3,
                               n_variants=4, steps=200)
        self.assertEqual(variants.shape, (4, 8))
        assert_allclose(variants, np.tile(image, (4, 1)), atol=0.3)
        self.assertFalse(np.array_equal(variants[0], variants[1]))

    def test_frozen_columns(self):
        """Columns that are not noised yet are only touched by the forward kernel.
        """
        schedule = column_schedule(4, 0.6, -7., 5.)
        mask = frozen_components(schedule, 0.3)
        assert_array_equal(mask, [True, True, False, False])
        image = np.array([0.5, -0.5, 1., 2.])
        variants = reconstruct(unit_columns_score(4), schedule, image, 0.3, n_variants=2)
        alpha = schedule.state(0.3).alpha[:2]
        assert_allclose(variants[:, :2], np.tile(alpha * image[:2], (2, 1)), atol=0.2)
        self.assertFalse(np.any(frozen_components(standard_schedule(np.zeros(3)), 0.)))

    def test_seeds(self):
        """Variant seeds are reproducible and distinct.
        """
        seeds = variant_seeds(4, 3)
        self.assertEqual(seeds, variant_seeds(4, 3))
        self.assertEqual(len(set(seeds)), 3)

    def test_invalid(self):
        """Invalid inputs.
        """
        schedule = standard_schedule(np.zeros(4))
        score = unit_columns_score(4)
        for t_noise in (0., 1.):
            with self.assertRaises(ValueError):
                reconstruct(score, schedule, np.zeros(4), t_noise)
        with self.assertRaises(ValueError):
            reconstruct(score, schedule, np.zeros(5), 0.5)
        with self.assertRaises(ValueError):
            reconstruct(score, schedule, np.zeros(4), 0.5, n_variants=0)



if __name__ == '__main__':
    unittest.main()
