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

"""Utility functions.
"""

import argparse
import csv
import functools
import os

from typing import Iterable, Optional, Sequence

from loguru import logger


class GUDError(Exception):

    """Base class for all the exceptions raised by the package.
    """



class ConfigurationError(GUDError, ValueError):

    """Invalid user configuration (command-line flags or configuration file).
    """



class MissingInputError(GUDError, FileNotFoundError):

    """An input file referenced by the configuration does not exist.
    """



class FormatError(GUDError, ValueError):

    """Malformed or truncated binary container.
    """



class NumericalError(GUDError, ArithmeticError):

    """Numerical failure (non-finite values, divergence, integrator failure).
    """



def mktree(folder_path: str) -> None:
    """Create a directory tree, if it does not exist already.
    """
    if not os.path.exists(folder_path):
        logger.info(f'Creating folder {folder_path}...')
        os.makedirs(folder_path)


def check_input_file(file_path: str) -> str:
    """Make sure an input file exists, and return its path.
    """
    if file_path is None or not os.path.isfile(file_path):
        raise MissingInputError(f'Could not find input file {file_path}')
    return file_path


def memoize(func):
    """Simple decorator to memoize the return value of a function.

    See https://stackoverflow.com/questions/5630409
    for the use of nonlocal in the body of the wrapper function.
    Mind the cached values are shared between callers, and should be treated
    as read-only.
    """
    cache = {}
    @functools.wraps(func)
    def wrapper(*args):
        """Simple wrapper for the function call.
        """
        nonlocal cache
        if not args in cache:
            cache[args] = func(*args)
        return cache[args]
    return wrapper


def write_csv(file_path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write a table to a csv file.

    Floating-point values are written with repr(), so that the output is
    both lossless and reproducible.
    """
    logger.info(f'Writing csv table to {file_path}...')
    with open(file_path, 'w', newline='') as output_file:
        writer = csv.writer(output_file)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(item) if isinstance(item, float) else item for item in row])
    logger.info('Done.')



class ArgumentFormatter(argparse.RawDescriptionHelpFormatter,
                        argparse.ArgumentDefaultsHelpFormatter):

    """Do nothing class combining our favorite formatting for the
    command-line options, i.e., the newlines in the descriptions are
    preserved and, at the same time, the argument defaults are printed
    out when the --help options is passed.

    The inspiration for this is coming from one of the comments in
    https://stackoverflow.com/questions/3853722
    """
    pass



class ArgumentParser(argparse.ArgumentParser):

    """Thin wrapper over argparse.ArgumentParser(), meant to standardize the
    command-line options for all the gud subcommands.

    Mind parsing errors (including unknown flags) are turned into a
    ConfigurationError, rather than terminating the interpreter, so that
    the caller has full control over the exit status.
    """

    def __init__(self, description: Optional[str] = None,
                 epilog: Optional[str] = None, **kwargs) -> None:
        """Constructor.
        """
        kwargs.setdefault('formatter_class', ArgumentFormatter)
        argparse.ArgumentParser.__init__(self, description=description,
                                         epilog=epilog, **kwargs)

    def error(self, message: str):
        """Overloaded method.
        """
        raise ConfigurationError(f'{self.prog}: {message}')
