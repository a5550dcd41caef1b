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

"""Test suite for the data module.
"""

import hashlib
import os
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from gud import fixture_file_path
from gud.data import Dataset, csv_to_images, dequantize, dequantize_and_center, \
    images_to_csv, load_images, read_images, requantize, restore, save_images, \
    synth_mixture, synthetic_mixture
from gud.helpers import FormatError, MissingInputError


FIXTURE_SHA256 = 'e18ea941758dfedc91eca9b7f4a2b515efbc309b67ade85d429ae96fcc42c314'


def fixture_pixels() -> np.ndarray:
    """Closed-form content of the packaged 8 x 8 fixture.
    """
    n, r, c = np.meshgrid(np.arange(16), np.arange(8), np.arange(8), indexing='ij')
    values = (16 * c + 7 * r + 13 * n + ((r * c * (n + 1)) % 11)) % 256
    return values[..., None]



class TestImageFiles(unittest.TestCase):

    """Unit tests for the GUDIMGS file format.
    """

    def setUp(self):
        """Create a scratch folder.
        """
        self.folder = tempfile.TemporaryDirectory()

    def tearDown(self):
        """Remove the scratch folder.
        """
        self.folder.cleanup()

    def _path(self, file_name: str) -> str:
        """Path to a scratch file.
        """
        return os.path.join(self.folder.name, file_name)

    def test_fixture(self):
        """Checksum and content of the packaged fixture.
        """
        file_path = fixture_file_path('tiny8x8.gudimgs')
        with open(file_path, 'rb') as input_file:
            self.assertEqual(hashlib.sha256(input_file.read()).hexdigest(), FIXTURE_SHA256)
        raw = read_images(file_path)
        self.assertEqual(raw.shape, (16, 8, 8, 1))
        assert_array_equal(raw[0, 0, :, 0], np.arange(0, 128, 16))
        self.assertEqual(raw[1, 1, 1, 0], 38)
        assert_array_equal(raw, fixture_pixels())
        dataset = load_images(file_path, (8, 8, 1))
        self.assertEqual(len(dataset), 16)
        self.assertEqual(dataset.dim, 64)
        with self.assertRaises(FormatError):
            load_images(file_path, (4, 4, 4))

    def test_roundtrip(self):
        """Write and read back.
        """
        raw = np.random.default_rng(0).integers(0, 256, (3, 2, 5, 3))
        save_images(self._path('test.gudimgs'), raw)
        assert_array_equal(read_images(self._path('test.gudimgs')), raw)

    def test_empty(self):
        """A file with no images is valid.
        """
        save_images(self._path('empty.gudimgs'), np.zeros((0, 4, 4, 1)))
        self.assertEqual(read_images(self._path('empty.gudimgs')).shape, (0, 4, 4, 1))

    def test_errors(self):
        """Malformed files.
        """
        with self.assertRaises(MissingInputError):
            read_images(self._path('missing.gudimgs'))
        with self.assertRaises(ValueError):
            save_images(self._path('bad.gudimgs'), np.full((1, 2, 2, 1), 256))
        save_images(self._path('good.gudimgs'), np.ones((2, 2, 2, 1)))
        with open(self._path('good.gudimgs'), 'rb') as input_file:
            data = input_file.read()
        for name, payload in (('truncated', data[:-1]), ('trailing', data + b'\x00'),
                              ('magic', b'XUDIMGS' + data[7:]),
                              ('version', data[:7] + b'\x02' + data[8:]),
                              ('short', data[:10])):
            file_path = self._path(f'{name}.gudimgs')
            with open(file_path, 'wb') as output_file:
                output_file.write(payload)
            with self.assertRaises(FormatError):
                read_images(file_path)

    def test_csv(self):
        """Conversion from and to csv.
        """
        raw = np.random.default_rng(1).integers(0, 256, (4, 2, 3, 1))
        save_images(self._path('test.gudimgs'), raw)
        images_to_csv(self._path('test.gudimgs'), self._path('test.csv'))
        csv_to_images(self._path('test.csv'), self._path('copy.gudimgs'), (2, 3, 1))
        assert_array_equal(read_images(self._path('copy.gudimgs')), raw)
        with self.assertRaises(FormatError):
            csv_to_images(self._path('test.csv'), self._path('bad.gudimgs'), (2, 2, 1))
        with open(self._path('text.csv'), 'w') as output_file:
            output_file.write('1,2,x,4\n')
        with self.assertRaises(FormatError):
            csv_to_images(self._path('text.csv'), self._path('bad.gudimgs'), (2, 2, 1))



class TestPreprocessing(unittest.TestCase):

    """Unit tests for the dequantization and centering.
    """

    def test_dequantize(self):
        """Endpoints of the dequantization map.
        """
        self.assertEqual(dequantize(0, 0., 256), -1.)
        self.assertEqual(dequantize(255, 1., 256), 1.)
        self.assertEqual(dequantize(127, 1., 256), 0.)

    def test_centering(self):
        """The training split is centered, and the inverse is consistent.
        """
        raw = read_images(fixture_file_path('tiny8x8.gudimgs'))
        dataset = dequantize_and_center(raw, seed=2)
        self.assertLessEqual(np.abs(dataset.samples.mean(axis=0)).max(), 1.e-10)
        self.assertEqual(dataset.levels, 256)
        x = restore(dataset)
        self.assertTrue(np.all(x >= -1.) and np.all(x <= 1.))
        assert_array_equal(requantize(dataset), raw)

    def test_reproducible(self):
        """Each sample is dequantized the same way regardless of the others.
        """
        raw = read_images(fixture_file_path('tiny8x8.gudimgs'))
        first = dequantize_and_center(raw, seed=3)
        second = dequantize_and_center(raw[:4], seed=3, mean=first.mean, split='test')
        assert_array_equal(second.samples, first.samples[:4])
        self.assertEqual(second.split, 'test')

    def test_requantize_clip(self):
        """Generated samples out of range are clipped.
        """
        dataset = Dataset(np.zeros((1, 2)), np.zeros(2), 256)
        assert_array_equal(requantize(dataset, np.array([[-5., 5.]])), [[0, 255]])
        with self.assertRaises(ValueError):
            requantize(Dataset(np.zeros((1, 2))))

    def test_invalid(self):
        """Invalid inputs.
        """
        with self.assertRaises(ValueError):
            dequantize_and_center(np.array([[256]]))
        with self.assertRaises(ValueError):
            dequantize_and_center(np.array([[0.5]]))
        with self.assertRaises(ValueError):
            dequantize_and_center(np.zeros((0, 2)))
        with self.assertRaises(ValueError):
            Dataset(np.zeros((2, 2)), split='validation')



class TestSynthetic(unittest.TestCase):

    """Unit tests for the synthetic mixtures.
    """

    def test_moments(self):
        """Sample moments of the predefined mixtures.
        """
        for name in ('gaussian', 'anisotropic', 'bimodal'):
            mix = synthetic_mixture(name, 4)
            dataset = synth_mixture(mix, 100000, seed=4)
            self.assertEqual(dataset.samples.shape, (100000, 4))
            assert_allclose(dataset.samples.var(axis=0), mix.component_variance(), rtol=0.03)
        assert_allclose(synthetic_mixture('anisotropic', 3).variances[0], [4., 2., 1.])

    def test_seed(self):
        """Same seed, same samples.
        """
        mix = synthetic_mixture('bimodal', 2)
        assert_array_equal(synth_mixture(mix, 10, 5).samples, synth_mixture(mix, 10, 5).samples)

    def test_invalid(self):
        """Unknown mixtures.
        """
        with self.assertRaises(ValueError):
            synthetic_mixture('uniform', 2)
        with self.assertRaises(ValueError):
            synthetic_mixture('gaussian', 0)



if __name__ == '__main__':
    unittest.main()
