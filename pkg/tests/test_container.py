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

"""Test suite for the container module.
"""

import os
import tempfile
import unittest

import numpy as np
from numpy.testing import assert_array_equal

from gud.container import read_container, write_container
from gud.helpers import FormatError


MAGIC = b'GUDTEST'


class TestContainer(unittest.TestCase):

    """Unit tests for the binary containers.
    """

    def setUp(self):
        """Create a scratch folder.
        """
        self.folder = tempfile.TemporaryDirectory()
        self.file_path = os.path.join(self.folder.name, 'test.bin')

    def tearDown(self):
        """Remove the scratch folder.
        """
        self.folder.cleanup()

    def test_roundtrip(self):
        """Arrays and header survive a write-read cycle bit by bit.
        """
        arrays = {'b': np.random.default_rng(0).standard_normal((3, 4)),
                  'a': np.array([np.pi, -0., 1.e-300]), 'empty': np.zeros((0, 5))}
        write_container(self.file_path, MAGIC, {'kind': 'test', 'levels': 2}, arrays)
        header, other = read_container(self.file_path, MAGIC)
        self.assertEqual(header, {'kind': 'test', 'levels': 2})
        self.assertEqual(list(other), ['b', 'a', 'empty'])
        for name, array in arrays.items():
            assert_array_equal(other[name], array)
            self.assertEqual(other[name].tobytes(), array.tobytes())

    def _corrupt(self, data: bytes) -> None:
        """Write a corrupted file and make sure it is rejected.
        """
        with open(self.file_path, 'wb') as output_file:
            output_file.write(data)
        with self.assertRaises(FormatError):
            read_container(self.file_path, MAGIC)

    def test_errors(self):
        """Malformed containers.
        """
        write_container(self.file_path, MAGIC, {}, {'x': np.ones(4)})
        with open(self.file_path, 'rb') as input_file:
            data = input_file.read()
        with self.assertRaises(FormatError):
            read_container(self.file_path, b'GUDOTHER')
        self._corrupt(data[:-8])
        self._corrupt(data + b'\x00')
        self._corrupt(data[:len(MAGIC)] + b'\x07' + data[len(MAGIC) + 1:])
        self._corrupt(data[:len(MAGIC) + 3])
        self._corrupt(data[:len(MAGIC) + 5] + b'\xff' + data[len(MAGIC) + 6:])



if __name__ == '__main__':
    unittest.main()
