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


"""Definition of the underlying environment for the package and related
utility functions.
"""

import os

from .version import version as __version__


# Basic local environment.
#
BASE_FOLDER = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir))


def _join(*args) -> str:
    """Path concatenation relative to the base package folder.
    (Avoids some typing.)
    """
    return os.path.join(BASE_FOLDER, *args)


# Input folders.
FIXTURES_FOLDER = _join('fixtures')


def fixture_file_path(file_name: str) -> str:
    """Return the path to a packaged fixture file.
    """
    return os.path.join(FIXTURES_FOLDER, file_name)


# Output folder. This can be overridden through the GUD_OUT_DIR environmental
# variable, and is the default location for all the files written by the
# command-line interface.
OUTPUT_FOLDER_ENV = 'GUD_OUT_DIR'


def output_folder() -> str:
    """Return the current output folder.

    Note the environment is queried at every call (and not once and for all at
    import time), so that the output folder can be changed at runtime.
    """
    return os.environ.get(OUTPUT_FOLDER_ENV, _join('output'))
