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

"""Run configuration for the command-line interface.

All the tunables are collected in a single RunConfig object, which is filled
in order of increasing priority from the built-in defaults, an optional
key-value configuration file, e.g.,

    [gud]
    batch = 64
    seed = 1

    [schedule]
    a = 0.5
    b = 0.3:0.7

and the command-line flags.
"""

import argparse
import configparser

from dataclasses import dataclass, field, fields
from typing import Callable, Dict, NamedTuple, Optional, Sequence, Tuple

from loguru import logger

import gud
from gud.basis import BASIS_KINDS
from gud.data import SYNTHETIC_MIXTURES
from gud.helpers import ConfigurationError, check_input_file
from gud.process import ODE_METHODS
from gud.schedule import SCHEDULE_FAMILIES


COMMANDS = ('fit-basis', 'train', 'sample', 'nll', 'extend', 'reconstruct', 'schedule-viz',
            'sweep', 'convert')
SAMPLERS = ('sde', 'ode')
SCHEDULE_PARAMETERS = ('a', 'b', 'r', 'gamma_denoise', 'gamma_noise', 'gamma_min', 'gamma_max')



class ParameterValue(NamedTuple):

    """Value of a schedule parameter on the command line.

    This can be a single value ("0.5"), a range from which the parameter is
    drawn uniformly during training ("0.3:0.7"), or a grid for the parameter
    sweeps ("0.4,1.0,1.6").
    """

    values: Tuple[float, ...]
    is_range: bool = False

    @classmethod
    def parse(cls, text: str) -> 'ParameterValue':
        """Parse a parameter specification.
        """
        text = str(text).strip()
        try:
            if ':' in text:
                low, high = (float(item) for item in text.split(':'))
                if high < low:
                    raise ConfigurationError(f'Empty parameter range "{text}"')
                return cls((low, high), True)
            return cls(tuple(float(item) for item in text.split(',')))
        except ValueError as exception:
            raise ConfigurationError(f'Invalid parameter value "{text}"') from exception

    def single(self) -> float:
        """Return the value, for parameters that must be fixed.
        """
        if len(set(self.values)) != 1:
            raise ConfigurationError(f'A single parameter value is required, got {self}')
        return self.values[0]

    def range(self) -> Tuple[float, float]:
        """Return the (low, high) range.
        """
        if self.is_range:
            return self.values
        return self.single(), self.single()

    def grid(self) -> Tuple[float, ...]:
        """Return the grid of values.
        """
        if self.is_range:
            raise ConfigurationError(f'A list of values is required, got the range {self}')
        return self.values

    def __str__(self) -> str:
        """String formatting.
        """
        separator = ':' if self.is_range else ','
        return separator.join(f'{value:g}' for value in self.values)


def parse_bool(text) -> bool:
    """Parse a boolean from a configuration file.
    """
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ConfigurationError(f'Invalid boolean value "{text}"')


def parse_shape(text: str) -> Tuple[int, int, int]:
    """Parse an image shape in the HxWxC form.
    """
    try:
        shape = tuple(int(item) for item in str(text).lower().split('x'))
    except ValueError as exception:
        raise ConfigurationError(f'Invalid shape "{text}"') from exception
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigurationError(f'Invalid shape "{text}" (HxWxC expected)')
    return shape



@dataclass
class RunConfig:

    """Full configuration of a command-line run.
    """

    command: str = 'fit-basis'
    # Paths.
    data: Optional[str] = None
    test_data: Optional[str] = None
    basis_file: Optional[str] = None
    checkpoint: Optional[str] = None
    output: Optional[str] = None
    config: Optional[str] = None
    # Data.
    synthetic: Optional[str] = None
    dim: int = 2
    num_samples: int = 4096
    quant_levels: int = 256
    # Basis.
    basis: str = 'identity'
    whiten: bool = False
    levels: int = 2
    # Schedule.
    schedule: str = 'standard'
    a: Optional[ParameterValue] = None
    b: Optional[ParameterValue] = None
    r: Optional[ParameterValue] = None
    gamma_denoise: ParameterValue = field(default_factory=lambda: ParameterValue((-7.,)))
    gamma_noise: Optional[ParameterValue] = None
    gamma_min: Optional[ParameterValue] = None
    gamma_max: Optional[ParameterValue] = None
    sigma_min: float = 0.99
    haar_rescale: bool = False
    # Sampling and likelihood.
    sampler: str = 'sde'
    steps: Optional[int] = None
    tol: float = 1.e-4
    ode_method: str = 'RK45'
    probes: int = 3
    num: Optional[int] = None
    exact_score: bool = False
    points: int = 101
    # Tasks.
    k: int = 9
    cycles: int = 5
    t_noise: float = 0.5
    variants: int = 4
    image_index: int = 0
    # Conversion.
    input: Optional[str] = None
    target: Optional[str] = None
    shape: Optional[Tuple[int, int, int]] = None
    # Training.
    batch: int = 128
    lr: float = 5.e-4
    ema: float = 0.999
    hidden: int = 256
    depth: int = 3
    # Miscellanea.
    seed: int = 0
    threads: int = 1
    verbose: bool = False

    def schedule_values(self) -> Dict[str, ParameterValue]:
        """Return the schedule parameters that have been set.
        """
        return {name: getattr(self, name) for name in SCHEDULE_PARAMETERS
                if getattr(self, name) is not None}

    def fixed_schedule_parameters(self, exclude: Sequence[str] = ()) -> Dict[str, object]:
        """Return the schedule parameters as single values (the ones in exclude
        being left out), along with the options that are never drawn at random.
        """
        params = {name: value.single() for name, value in self.schedule_values().items()
                  if name not in exclude}
        params.update(self.schedule_options())
        return params

    def schedule_options(self) -> Dict[str, object]:
        """Return the schedule options that are not parameters proper.
        """
        return {'sigma_min': self.sigma_min, 'rescale_levels': self.haar_rescale}

    def parameter_ranges(self) -> Dict[str, Tuple[float, float]]:
        """Return the (low, high) ranges of the schedule parameters.
        """
        return {name: value.range() for name, value in self.schedule_values().items()}

    def num_items(self, default: int) -> int:
        """Return the number of items (samples, strips...) to process.
        """
        return default if self.num is None else self.num

    def _validate_schedule(self) -> None:
        """Make sure the schedule parameters are admissible for the family.
        """
        if self.schedule not in SCHEDULE_FAMILIES:
            raise ConfigurationError(f'Unknown schedule family "{self.schedule}"')
        limits = {'b': (0., 1., False)}
        if self.schedule == 'haar-column':
            limits['a'] = (0., 1., False)
        elif self.schedule == 'linear-softness':
            limits['r'] = (0., 1., True)
        for name, value in self.schedule_values().items():
            if name in limits:
                low, high, closed = limits[name]
                for item in value.values:
                    if item < low or item > high or (item == high and not closed):
                        raise ConfigurationError(f'{name}={item:g} outside the admissible '
                                                 f'range for the {self.schedule} schedule')
            if name == 'a' and self.schedule == 'linear-softness' and min(value.values) <= 0.:
                raise ConfigurationError('a must be positive for the linear-softness schedule')
        if not 0. < self.sigma_min < 1.:
            raise ConfigurationError(f'sigma_min={self.sigma_min} outside (0, 1)')

    def validate(self) -> None:
        """Validate the configuration, once and for all.
        """
        if self.command not in COMMANDS:
            raise ConfigurationError(f'Unknown command "{self.command}"')
        for name, choices in (('basis', BASIS_KINDS), ('sampler', SAMPLERS),
                              ('ode_method', ODE_METHODS)):
            if getattr(self, name) not in choices:
                raise ConfigurationError(f'Invalid {name} "{getattr(self, name)}" '
                                         f'(choose among {choices})')
        if self.synthetic is not None and self.synthetic not in SYNTHETIC_MIXTURES:
            raise ConfigurationError(f'Unknown synthetic dataset "{self.synthetic}"')
        for name in ('dim', 'num_samples', 'levels', 'probes', 'points', 'k', 'variants',
                     'batch', 'hidden', 'threads', 'quant_levels'):
            if getattr(self, name) < 1:
                raise ConfigurationError(f'{name} must be positive')
        for name in ('steps', 'num'):
            if getattr(self, name) is not None and getattr(self, name) < 1:
                raise ConfigurationError(f'{name} must be positive')
        if self.cycles < 0 or self.depth < 0 or self.image_index < 0:
            raise ConfigurationError('cycles, depth and image index must be nonnegative')
        if self.tol <= 0. or self.lr <= 0.:
            raise ConfigurationError('tol and lr must be positive')
        if not 0. < self.ema < 1.:
            raise ConfigurationError(f'EMA decay {self.ema} outside (0, 1)')
        if not 0. < self.t_noise < 1.:
            raise ConfigurationError(f't_noise={self.t_noise} outside (0, 1)')
        self._validate_schedule()
        needs_data = self.command not in ('convert',)
        if needs_data and (self.data is None) == (self.synthetic is None):
            raise ConfigurationError('Exactly one of --data and --synthetic is required')
        if self.exact_score and self.synthetic is None:
            raise ConfigurationError('--exact-score requires a synthetic dataset')
        if self.command in ('sample', 'nll', 'extend', 'reconstruct', 'sweep') and \
                not self.exact_score and self.checkpoint is None:
            raise ConfigurationError(f'{self.command} requires --checkpoint or --exact-score')
        if self.command == 'extend' and self.schedule != 'column':
            raise ConfigurationError('extend requires the column schedule')
        if self.command == 'convert' and (self.input is None or self.target is None):
            raise ConfigurationError('convert requires --input and --target')
        for name in ('data', 'test_data', 'basis_file', 'checkpoint', 'config', 'input'):
            if getattr(self, name) is not None:
                check_input_file(getattr(self, name))
        if self.output is None:
            self.output = gud.output_folder()



class Flag(NamedTuple):

    """Description of a command-line flag.
    """

    name: str
    converter: Callable
    help: str
    commands: Sequence[str] = COMMANDS
    choices: Optional[Sequence[str]] = None


_DATA_COMMANDS = ('fit-basis', 'train', 'sample', 'nll', 'extend', 'reconstruct', 'schedule-viz',
                  'sweep')
_SCORE_COMMANDS = ('sample', 'nll', 'extend', 'reconstruct', 'sweep')
_SCHEDULE_COMMANDS = ('train', 'sample', 'nll', 'extend', 'reconstruct', 'schedule-viz', 'sweep')
_SAMPLE_COMMANDS = ('sample', 'extend', 'reconstruct')

FLAGS = (
    Flag('data', str, 'path to the training images (GUDIMGS format)', _DATA_COMMANDS),
    Flag('test_data', str, 'path to the test images (GUDIMGS format)', ('nll', 'sweep')),
    Flag('basis_file', str, 'path to a basis written by fit-basis', _DATA_COMMANDS),
    Flag('checkpoint', str, 'path to a network checkpoint written by train', _SCORE_COMMANDS),
    Flag('output', str, 'output folder (default: $GUD_OUT_DIR or <repo>/output)'),
    Flag('config', str, 'path to a key-value configuration file'),
    Flag('synthetic', str, 'use a synthetic Gaussian mixture instead of images', _DATA_COMMANDS,
         SYNTHETIC_MIXTURES),
    Flag('dim', int, 'dimension of the synthetic data', _DATA_COMMANDS),
    Flag('num_samples', int, 'number of synthetic samples', _DATA_COMMANDS),
    Flag('quant_levels', int, 'number of quantization levels of the images', _DATA_COMMANDS),
    Flag('basis', str, 'basis kind', _DATA_COMMANDS, BASIS_KINDS),
    Flag('whiten', parse_bool, 'rescale the components to unit variance', _DATA_COMMANDS),
    Flag('levels', int, 'number of Haar levels', _DATA_COMMANDS),
    Flag('schedule', str, 'schedule family', _SCHEDULE_COMMANDS, SCHEDULE_FAMILIES),
    Flag('a', ParameterValue.parse, 'softness parameter a (value, lo:hi range or list)',
         _SCHEDULE_COMMANDS),
    Flag('b', ParameterValue.parse, 'softness parameter b (value, lo:hi range or list)',
         _SCHEDULE_COMMANDS),
    Flag('r', ParameterValue.parse, 'frequency-ordering parameter r (value, range or list)',
         _SCHEDULE_COMMANDS),
    Flag('gamma_denoise', ParameterValue.parse, 'denoised-end parameter (default: -7)',
         _SCHEDULE_COMMANDS),
    Flag('gamma_noise', ParameterValue.parse, 'noised-end parameter (default: from sigma-min)',
         _SCHEDULE_COMMANDS),
    Flag('gamma_min', ParameterValue.parse, 'lower gamma clip of the column schedules',
         _SCHEDULE_COMMANDS),
    Flag('gamma_max', ParameterValue.parse, 'upper gamma clip of the column schedules',
         _SCHEDULE_COMMANDS),
    Flag('sigma_min', float, 'minimum noise level at t = 1 (default: 0.99)', _SCHEDULE_COMMANDS),
    Flag('haar_rescale', parse_bool, 'rescale the Haar level clocks', _SCHEDULE_COMMANDS),
    Flag('sampler', str, 'sampler', ('sample',), SAMPLERS),
    Flag('steps', int, 'number of training steps (train) or sampler steps per unit time',
         ('train',) + _SAMPLE_COMMANDS),
    Flag('tol', float, 'ODE relative and absolute tolerance (default: 1e-4)',
         ('sample', 'nll', 'sweep')),
    Flag('ode_method', str, 'ODE integrator', ('sample', 'nll', 'sweep'), ODE_METHODS),
    Flag('probes', int, 'number of Hutchinson probes', ('nll', 'sweep')),
    Flag('num', int, 'number of samples (sample, extend) or evaluated data points (nll, sweep)',
         ('sample', 'nll', 'extend', 'sweep')),
    Flag('exact_score', parse_bool, 'use the exact score of the synthetic mixture',
         _SCORE_COMMANDS),
    Flag('points', int, 'number of time points', ('schedule-viz',)),
    Flag('k', int, 'number of columns committed per cycle', ('extend',)),
    Flag('cycles', int, 'number of extension cycles', ('extend',)),
    Flag('t_noise', float, 'noising time of the reconstruction', ('reconstruct',)),
    Flag('variants', int, 'number of reconstructed variants', ('reconstruct',)),
    Flag('image_index', int, 'index of the image to be reconstructed', ('reconstruct',)),
    Flag('input', str, 'input file (.csv or .gudimgs)', ('convert',)),
    Flag('target', str, 'output file', ('convert',)),
    Flag('shape', parse_shape, 'image shape HxWxC (csv input)', ('convert',)),
    Flag('batch', int, 'batch size (default: 128)', ('train',)),
    Flag('lr', float, 'learning rate (default: 5e-4)', ('train',)),
    Flag('ema', float, 'EMA decay rate (default: 0.999)', ('train',)),
    Flag('hidden', int, 'width of the hidden layers', ('train',)),
    Flag('depth', int, 'number of residual blocks', ('train',)),
    Flag('seed', int, 'random seed'),
    Flag('threads', int, 'number of threads'),
)
_FLAGS_BY_NAME = {flag.name: flag for flag in FLAGS}
_BOOLEAN_FLAGS = ('whiten', 'haar_rescale', 'exact_score')


def add_flags(parser: argparse.ArgumentParser, command: str) -> None:
    """Add all the flags relevant to a subcommand to a parser.

    The defaults are suppressed, so that the parsed namespace only contains
    the flags actually passed on the command line.
    """
    for flag in FLAGS:
        if command not in flag.commands:
            continue
        option = f'--{flag.name.replace("_", "-")}'
        if flag.name in _BOOLEAN_FLAGS:
            parser.add_argument(option, action='store_true', help=flag.help)
        else:
            parser.add_argument(option, type=flag.converter, choices=flag.choices, help=flag.help)
    parser.add_argument('--verbose', action='store_true', help='verbose (debug) output')


def read_config_file(file_path: str) -> Dict[str, object]:
    """Read a key-value configuration file into a dictionary of converted values.
    """
    check_input_file(file_path)
    parser = configparser.ConfigParser()
    try:
        parser.read(file_path)
    except configparser.Error as exception:
        raise ConfigurationError(f'Malformed configuration file {file_path}: {exception}') \
            from exception
    values = {}
    for section in parser.sections():
        if section not in ('gud', 'schedule'):
            raise ConfigurationError(f'Unknown section [{section}] in {file_path}')
        for key, text in parser.items(section):
            name = key.replace('-', '_')
            if section == 'schedule' and name == 'family':
                name = 'schedule'
            if name not in _FLAGS_BY_NAME or name == 'config':
                raise ConfigurationError(f'Unknown key "{key}" in {file_path}')
            flag = _FLAGS_BY_NAME[name]
            value = parse_bool(text) if name in _BOOLEAN_FLAGS else flag.converter(text)
            if flag.choices is not None and value not in flag.choices:
                raise ConfigurationError(f'Invalid value "{text}" for "{key}" in {file_path}')
            values[name] = value
    logger.debug(f'Configuration file {file_path}: {values}')
    return values


def build_config(command: str, namespace: argparse.Namespace) -> RunConfig:
    """Merge defaults, configuration file and command-line flags.
    """
    flags = {key: value for key, value in vars(namespace).items()
             if key not in ('command', 'verbose')}
    values = {}
    if flags.get('config') is not None:
        values.update(read_config_file(flags['config']))
    values.update({key: value for key, value in flags.items() if value is not None})
    known = {item.name for item in fields(RunConfig)}
    config = RunConfig(command=command, verbose=getattr(namespace, 'verbose', False),
                       **{key: value for key, value in values.items() if key in known})
    config.validate()
    return config
