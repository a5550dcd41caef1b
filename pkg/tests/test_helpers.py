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

"""Test suite for the helpers module.
"""

import os
import tempfile
import unittest

from gud.helpers import ArgumentParser, ConfigurationError, GUDError, MissingInputError, \
    check_input_file, memoize, mktree, write_csv


class TestHelpers(unittest.TestCase):

    """Unit tests for the utility functions.
    """

    def test_memoize(self):
        """The decorated function is evaluated once per argument.
        """
        calls = []

        @memoize
        def square(value):
            calls.append(value)
            return value**2

        self.assertEqual(square(3), 9)
        self.assertEqual(square(3), 9)
        self.assertEqual(square(4), 16)
        self.assertEqual(calls, [3, 4])

    def test_files(self):
        """Folder creation, input checks and csv output.
        """
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'a', 'b')
            mktree(path)
            mktree(path)
            self.assertTrue(os.path.isdir(path))
            file_path = os.path.join(path, 'table.csv')
            with self.assertRaises(MissingInputError):
                check_input_file(file_path)
            write_csv(file_path, ('name', 'value'), [('x', 0.1), ('y', 2)])
            self.assertEqual(check_input_file(file_path), file_path)
            with open(file_path) as input_file:
                lines = input_file.read().splitlines()
        self.assertEqual(lines, ['name,value', 'x,0.1', 'y,2'])
        with self.assertRaises(MissingInputError):
            check_input_file(None)

    def test_parser(self):
        """Parsing errors are turned into configuration errors.
        """
        parser = ArgumentParser(prog='gud')
        parser.add_argument('--steps', type=int, default=10)
        self.assertEqual(parser.parse_args([]).steps, 10)
        with self.assertRaises(ConfigurationError):
            parser.parse_args(['--stesp', '3'])
        with self.assertRaises(ConfigurationError):
            parser.parse_args(['--steps', 'many'])
        self.assertTrue(issubclass(ConfigurationError, GUDError))
        self.assertTrue(issubclass(ConfigurationError, ValueError))



if __name__ == '__main__':
    unittest.main()
