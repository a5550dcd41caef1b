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

"""Noising states and component-wise noise schedules.

The forward process of each component is fully characterized by the noising
state gamma_i(t) = logit(sigma_i^2(t)), through

    alpha_i^2 = sigmoid(-gamma_i),   sigma_i^2 = sigmoid(gamma_i),

with the noise rate beta_i = sigma_i^2 dgamma_i/dt. A schedule is a map
t -> gamma(t) over t in [0, 1], and all the schedule families implemented here
are piecewise linear in t, so that gamma_dot is returned as a right derivative.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.special import expit, log_expit, logit

from gud.basis import BasisSpec, component_columns, haar_groups


GAMMA_CLAMP = 30.
SCHEDULE_FAMILIES = ('standard', 'linear-softness', 'column', 'haar-column')
DEFAULT_GAMMA_DENOISE = -7.
DEFAULT_SIGMA_MIN = 0.99
MINIMUM_GAMMA_NOISE = 3.
# Largest admissible 1 - sigma_i(1)^2 for sampling from the standard-normal prior.
PRIOR_MAX_GAP = 5.e-2

TimeType = Union[float, np.ndarray]


def clamp_gamma(gamma: np.ndarray) -> np.ndarray:
    """Clamp the noising state to [-GAMMA_CLAMP, GAMMA_CLAMP], so that the
    sigmoids never underflow to exactly 0 or 1.
    """
    return np.clip(gamma, -GAMMA_CLAMP, GAMMA_CLAMP)



class NoisingState:

    """Noising state of all the components at a given time.

    The gamma vector can have arbitrary leading (batch) dimensions. All the
    derived quantities are calculated from the clamped gamma, and
    alpha^2 and sigma^2 come from a single sigmoid evaluation, so that they
    sum up to one.
    """

    def __init__(self, gamma: np.ndarray) -> None:
        """Constructor.
        """
        self.gamma = clamp_gamma(np.asarray(gamma, dtype=float))
        self.sigma2 = expit(self.gamma)
        self.alpha2 = 1. - self.sigma2

    @property
    def alpha(self) -> np.ndarray:
        """Signal scaling factor.
        """
        return np.sqrt(self.alpha2)

    @property
    def sigma(self) -> np.ndarray:
        """Noise standard deviation.
        """
        return np.sqrt(self.sigma2)

    @property
    def log_alpha2(self) -> np.ndarray:
        """Numerically accurate log(alpha^2).
        """
        return log_expit(-self.gamma)

    def __len__(self) -> int:
        """Return the number of components.
        """
        return self.gamma.shape[-1]

    def __repr__(self) -> str:
        """String representation.
        """
        return f'NoisingState(gamma={self.gamma!r})'


def log_snr(state: NoisingState, log_var: np.ndarray) -> np.ndarray:
    """Return the logarithm of the magnitude-aware signal-to-noise ratio,
    log SNR_i = log Sigma_ii - gamma_i.
    """
    log_var = np.asarray(log_var, dtype=float)
    if log_var.shape[-1] != len(state):
        raise ValueError(f'Length mismatch ({log_var.shape[-1]} vs. {len(state)})')
    return log_var - state.gamma


def _check_time(t: TimeType) -> np.ndarray:
    """Make sure the time (or array of times) is in the unit interval and
    return it as an array with a trailing broadcasting axis.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.) or np.any(t > 1.) or not np.all(np.isfinite(t)):
        raise ValueError(f'Diffusion time outside [0, 1]: {t}')
    return t[..., None]


def _clip_with_slope(value: np.ndarray, slope: np.ndarray, low, high) -> Tuple[np.ndarray, np.ndarray]:
    """Clip a linear function of time, returning the clipped value and its
    right derivative.
    """
    active = (value >= low) & (value < high)
    return np.clip(value, low, high), np.where(active, slope, 0.)



class Schedule(ABC):

    """Abstract base class for the schedules.

    Subclasses must implement _evaluate(), returning gamma(t) and its right
    derivative for an array of times with a trailing broadcasting axis.
    """

    family = None

    def __init__(self, dim: int, params: Dict[str, float]) -> None:
        """Constructor.
        """
        self.dim = int(dim)
        self.params = dict(params)

    @abstractmethod
    def _evaluate(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Do nothing method, to be reimplemented by derived classes.
        """

    def gamma(self, t: TimeType) -> np.ndarray:
        """Return the raw (unclamped) noising state at time t.
        """
        return self._evaluate(_check_time(t))[0]

    def gamma_dot(self, t: TimeType) -> np.ndarray:
        """Return the right derivative of the noising state at time t.
        """
        return self._evaluate(_check_time(t))[1]

    def state(self, t: TimeType) -> NoisingState:
        """Return the noising state at time t.
        """
        return NoisingState(self.gamma(t))

    def to_config(self) -> Dict[str, str]:
        """Serialize the schedule parameters to a flat key-value dictionary.
        """
        config = {'family': self.family}
        config.update({key: repr(value) for key, value in sorted(self.params.items())})
        return config

    def __str__(self) -> str:
        """String formatting.
        """
        text = ', '.join(f'{key}={value}' for key, value in sorted(self.params.items()))
        return f'{self.family} schedule ({text}) for {self.dim} components'



class LinearSchedule(Schedule):

    """Component-wise linear interpolation between gamma_min and gamma_max.
    """

    def __init__(self, gamma_min: np.ndarray, gamma_max: np.ndarray,
                 family: str = 'linear-softness', params: Optional[dict] = None) -> None:
        """Constructor.
        """
        self.gamma_min = np.asarray(gamma_min, dtype=float)
        self.gamma_max = np.asarray(gamma_max, dtype=float)
        if self.gamma_min.shape != self.gamma_max.shape or self.gamma_min.ndim != 1:
            raise ValueError('gamma_min and gamma_max must be vectors of equal length')
        if np.any(self.gamma_max < self.gamma_min):
            raise ValueError('gamma_max must not be smaller than gamma_min')
        self.family = family
        super().__init__(self.gamma_min.size, params or {})

    def _evaluate(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Overloaded method.
        """
        slope = self.gamma_max - self.gamma_min
        gamma = self.gamma_min + slope * t
        return gamma, np.broadcast_to(slope, gamma.shape).copy()



class ColumnSchedule(Schedule):

    """Column-wise sequential schedule.

    Column i (from 1 to L) starts being noised at t_i = b (L - i) / (L - 1),
    and is frozen once it reaches gamma_max, so that shifting a column by
    one to the right is equivalent to shifting the time by b / (L - 1).
    """

    family = 'column'

    def __init__(self, num_columns: int, b: float, gamma_min: float, gamma_max: float,
                 groups: Optional[np.ndarray] = None) -> None:
        """Constructor.
        """
        if num_columns < 2:
            raise ValueError('The column schedule needs at least two columns')
        if not 0. <= b < 1.:
            raise ValueError(f'Softness parameter b={b} outside [0, 1)')
        if not gamma_min < gamma_max:
            raise ValueError('gamma_min must be smaller than gamma_max')
        if groups is None:
            groups = np.arange(1, num_columns + 1)
        self.groups = np.asarray(groups).astype(int)
        if self.groups.min() < 1 or self.groups.max() > num_columns:
            raise ValueError(f'Column groups must be in [1, {num_columns}]')
        self.num_columns = int(num_columns)
        self.b = float(b)
        self.gamma_min = float(gamma_min)
        self.gamma_max = float(gamma_max)
        params = dict(b=self.b, gamma_min=self.gamma_min, gamma_max=self.gamma_max)
        super().__init__(self.groups.size, params)

    @property
    def time_step(self) -> float:
        """The time shift equivalent to moving the noising front by one column.
        """
        return self.b / (self.num_columns - 1)

    def onset_times(self) -> np.ndarray:
        """Return the onset times t_i of all the columns.
        """
        index = np.arange(1, self.num_columns + 1)
        return self.b * (self.num_columns - index) / (self.num_columns - 1)

    def column_gamma(self, t: TimeType) -> Tuple[np.ndarray, np.ndarray]:
        """Return gamma and its right derivative for each column (rather than
        for each component).
        """
        t = _check_time(t)
        slope = (self.gamma_max - self.gamma_min) / (1. - self.b)
        value = self.gamma_min + (t - self.onset_times()) * slope
        return _clip_with_slope(value, np.full(value.shape, slope), self.gamma_min,
                                self.gamma_max)

    def _evaluate(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Overloaded method.
        """
        gamma, gamma_dot = self.column_gamma(t[..., 0])
        return gamma[..., self.groups - 1], gamma_dot[..., self.groups - 1]



class HaarColumnSchedule(Schedule):

    """Combination of a hierarchical schedule among the Haar levels and a
    column-wise schedule within each level.

    Level i (1 being the coarsest) runs on the clock
    t_i = clip(t - c_i / (1 - a), 0, 1), with c_i = a (N - i) / (N - 1), and
    column j of level i is offset by c_ij = b (L_i - j) / (L_i - 1).
    With rescale_levels=True the level clock is t_i = clip((t - c_i) / (1 - a))
    instead, so that all the levels reach gamma_max at t = 1.
    """

    family = 'haar-column'

    # pylint: disable=too-many-arguments
    def __init__(self, columns_per_level: Sequence[int], a: float, b: float,
                 gamma_min: float, gamma_max: float, level_groups: Optional[np.ndarray] = None,
                 column_groups: Optional[np.ndarray] = None, rescale_levels: bool = False) -> None:
        """Constructor.
        """
        self.columns_per_level = tuple(int(item) for item in columns_per_level)
        num_levels = len(self.columns_per_level)
        if num_levels < 2:
            raise ValueError('The haar-column schedule needs at least two levels')
        if min(self.columns_per_level) < 2:
            raise ValueError('The haar-column schedule needs at least two columns per level')
        for name, value in (('a', a), ('b', b)):
            if not 0. <= value < 1.:
                raise ValueError(f'Softness parameter {name}={value} outside [0, 1)')
        if not gamma_min < gamma_max:
            raise ValueError('gamma_min must be smaller than gamma_max')
        if level_groups is None:
            level_groups = np.repeat(np.arange(1, num_levels + 1), self.columns_per_level)
            column_groups = np.concatenate([np.arange(1, num + 1) for num in self.columns_per_level])
        self.level_groups = np.asarray(level_groups).astype(int)
        self.column_groups = np.asarray(column_groups).astype(int)
        if self.level_groups.shape != self.column_groups.shape:
            raise ValueError('Level and column groups must have the same length')
        if self.level_groups.min() < 1 or self.level_groups.max() > num_levels:
            raise ValueError(f'Level groups must be in [1, {num_levels}]')
        limits = np.array(self.columns_per_level)[self.level_groups - 1]
        if self.column_groups.min() < 1 or np.any(self.column_groups > limits):
            raise ValueError('Column groups exceed the number of columns of their level')
        self.a = float(a)
        self.b = float(b)
        self.gamma_min = float(gamma_min)
        self.gamma_max = float(gamma_max)
        self.rescale_levels = bool(rescale_levels)
        params = dict(a=self.a, b=self.b, gamma_min=self.gamma_min, gamma_max=self.gamma_max,
                      rescale_levels=self.rescale_levels)
        super().__init__(self.level_groups.size, params)

    @property
    def num_levels(self) -> int:
        """The number of hierarchical levels.
        """
        return len(self.columns_per_level)

    def level_offsets(self) -> np.ndarray:
        """Return the level offsets c_i for i = 1 ... N.
        """
        index = np.arange(1, self.num_levels + 1)
        return self.a * (self.num_levels - index) / (self.num_levels - 1)

    def column_offsets(self) -> np.ndarray:
        """Return the column offset c_ij of each component.
        """
        num_columns = np.array(self.columns_per_level)[self.level_groups - 1]
        return self.b * (num_columns - self.column_groups) / (num_columns - 1)

    def level_time(self, t: TimeType) -> Tuple[np.ndarray, np.ndarray]:
        """Return the clock t_i of each level and its right derivative.
        """
        t = _check_time(t)
        offsets = self.level_offsets()
        if self.rescale_levels:
            raw = (t - offsets) / (1. - self.a)
            rate = 1. / (1. - self.a)
        else:
            raw = t - offsets / (1. - self.a)
            rate = 1.
        return _clip_with_slope(raw, np.full(raw.shape, rate), 0., 1.)

    def _evaluate(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Overloaded method.
        """
        level_t, level_rate = self.level_time(t[..., 0])
        level_t = level_t[..., self.level_groups - 1]
        level_rate = level_rate[..., self.level_groups - 1]
        slope = (self.gamma_max - self.gamma_min) / (1. - self.b)
        value = self.gamma_min + slope * (level_t - self.column_offsets())
        return _clip_with_slope(value, slope * level_rate, self.gamma_min, self.gamma_max)


def gamma(schedule: Schedule, t: TimeType) -> NoisingState:
    """Return the noising state of a schedule at time t.
    """
    return schedule.state(t)


def gamma_dot(schedule: Schedule, t: TimeType) -> np.ndarray:
    """Return the right derivative of the noising state at time t.
    """
    return schedule.gamma_dot(t)


def beta_from_schedule(schedule: Schedule, t: TimeType) -> np.ndarray:
    """Return the noise rate beta_i(t) = sigma_i^2(t) dgamma_i/dt.

    Components whose clamped noising state is frozen have exactly zero rate.
    """
    raw = schedule.gamma(t)
    rate = np.where(np.abs(raw) < GAMMA_CLAMP, schedule.gamma_dot(t), 0.)
    return NoisingState(raw).sigma2 * rate


def beta_integral(schedule: Schedule, s: TimeType, t: TimeType) -> np.ndarray:
    """Return the integral of beta between s and t (s <= t).

    Since dlog(alpha^2)/dt = -beta, this is exactly
    log alpha^2(s) - log alpha^2(t), for any schedule family.
    """
    return schedule.state(s).log_alpha2 - schedule.state(t).log_alpha2


def standard_schedule(log_var: np.ndarray, gamma_denoise: float = DEFAULT_GAMMA_DENOISE,
                      gamma_noise: Optional[float] = None) -> LinearSchedule:
    """Standard diffusion, i.e., the same gamma(t) for all the components.

    This is the linear-softness schedule with a = 1 and the ordering
    variables l_i = -log Sigma_i, which makes the endpoint constraints
    automatically satisfied.
    """
    log_var = np.asarray(log_var, dtype=float)
    if gamma_noise is None:
        gamma_noise = noise_floor(log_var, DEFAULT_SIGMA_MIN)
    schedule = linear_softness_schedule(log_var, -log_var, 1., gamma_denoise, gamma_noise)
    schedule.family = 'standard'
    schedule.params = dict(gamma_denoise=float(gamma_denoise), gamma_noise=float(gamma_noise))
    return schedule


def linear_softness_schedule(log_var: np.ndarray, l: np.ndarray, a: float,
                             gamma_denoise: float = DEFAULT_GAMMA_DENOISE,
                             gamma_noise: float = MINIMUM_GAMMA_NOISE) -> LinearSchedule:
    """Linear schedule with ordering variables l and softness 1 / a.

    Parameters
    ----------
    log_var : array_like
        The logarithm of the component variances log Sigma_i.
    l : array_like
        The ordering variables.
    a : float
        The inverse softness (a > 0).
    gamma_denoise, gamma_noise : float
        The endpoint parameters, such that min_i log SNR_i(0) = -gamma_denoise
        and max_i log SNR_i(1) = -gamma_noise.
    """
    log_var = np.asarray(log_var, dtype=float)
    l = np.asarray(l, dtype=float)
    if l.size == 0:
        raise ValueError('Empty ordering variables')
    if l.shape != log_var.shape:
        raise ValueError('Ordering variables and log-variances must have the same length')
    if not np.all(np.isfinite(l)):
        raise ValueError('Ordering variables must be finite')
    if a <= 0.:
        raise ValueError(f'Softness parameter a={a} must be positive')
    gamma_min = gamma_denoise + log_var + a * (l - l.max())
    gamma_max = gamma_noise + log_var + a * (l - l.min())
    params = dict(a=float(a), gamma_denoise=float(gamma_denoise), gamma_noise=float(gamma_noise))
    return LinearSchedule(gamma_min, gamma_max, 'linear-softness', params)


def fft_ordering_variables(log_var: np.ndarray, freq: np.ndarray, r: float) -> np.ndarray:
    """Interpolate the ordering variables between -log Sigma_i (r = 0) and an
    affine function of the frequency magnitude (r = 1).

    The slope kappa and offset delta of the frequency term are chosen so that
    the range of (|k_i| + delta) / kappa matches the range of -log Sigma_i.
    """
    if not 0. <= r <= 1.:
        raise ValueError(f'Ordering parameter r={r} outside [0, 1]')
    log_var = np.asarray(log_var, dtype=float)
    freq = np.asarray(freq, dtype=float)
    if freq.shape != log_var.shape:
        raise ValueError('Frequencies and log-variances must have the same length')
    if np.any(freq < 0.):
        raise ValueError('Frequency magnitudes must be nonnegative')
    target = -log_var
    if r == 0.:
        return target
    freq_range = freq.max() - freq.min()
    if freq_range == 0.:
        raise ValueError('Cannot match the range of a constant frequency vector')
    target_range = target.max() - target.min()
    if target_range == 0.:
        frequency_term = np.full(freq.shape, target.min())
    else:
        kappa = freq_range / target_range
        delta = kappa * target.min() - freq.min()
        frequency_term = (freq + delta) / kappa
    return (1. - r) * target + r * frequency_term


def noise_floor(log_var: np.ndarray, sigma_min: float = DEFAULT_SIGMA_MIN) -> float:
    """Return the smallest admissible gamma_noise, i.e., the one guaranteeing
    sigma_i(1) >= sigma_min for all the components (with a floor at 3).
    """
    if not 0. < sigma_min < 1.:
        raise ValueError(f'sigma_min={sigma_min} outside (0, 1)')
    return float(max(MINIMUM_GAMMA_NOISE, logit(sigma_min**2) - np.min(log_var)))


def prior_gap(schedule: Schedule) -> float:
    """Return the largest 1 - sigma_i(1)^2 across the components.
    """
    return float(1. - np.min(schedule.state(1.).sigma2))


def prior_mismatch(schedule: Schedule, max_gap: float = PRIOR_MAX_GAP) -> Optional[str]:
    """Return a description of why the schedule does not reach the
    standard-normal prior at t = 1, or None if it does.

    The default threshold admits the smallest noise floor, gamma = 3
    (a gap of 0.047), and the softness shifts of the linear-softness family
    around the floor for sigma_min = 0.99 (a gap of 0.0199).
    """
    gap = prior_gap(schedule)
    if gap <= max_gap:
        return None
    sigma = schedule.state(1.).sigma
    num = int(np.sum(1. - sigma**2 > max_gap))
    message = f'The {schedule.family} schedule does not reach the prior at t = 1: ' \
              f'{num} component(s) with 1 - sigma^2 > {max_gap} (min sigma = {sigma.min():.4f})'
    if isinstance(schedule, HaarColumnSchedule) and not schedule.rescale_levels:
        message = f'{message}; use --haar-rescale (rescale_levels=True)'
    return message


def check_prior(schedule: Schedule, max_gap: float = PRIOR_MAX_GAP) -> bool:
    """Warn if the schedule does not reach the prior at t = 1.
    """
    message = prior_mismatch(schedule, max_gap)
    if message is not None:
        logger.warning(message)
        return False
    return True


def column_schedule(num_columns: int, b: float, gamma_min: float, gamma_max: float,
                    groups: Optional[np.ndarray] = None) -> ColumnSchedule:
    """Create a column-wise sequential schedule.
    """
    return ColumnSchedule(num_columns, b, gamma_min, gamma_max, groups)


# pylint: disable=too-many-arguments
def haar_column_schedule(columns_per_level: Sequence[int], a: float, b: float,
                         gamma_min: float, gamma_max: float,
                         level_groups: Optional[np.ndarray] = None,
                         column_groups: Optional[np.ndarray] = None,
                         rescale_levels: bool = False) -> HaarColumnSchedule:
    """Create a hierarchical Haar times column-wise schedule.
    """
    return HaarColumnSchedule(columns_per_level, a, b, gamma_min, gamma_max, level_groups,
                              column_groups, rescale_levels)



class ScheduleContext(NamedTuple):

    """Everything, besides the parameters, that a schedule family needs to
    be instantiated for a given basis.
    """

    log_var: np.ndarray
    labels: np.ndarray
    columns: Optional[np.ndarray] = None
    haar: Optional[tuple] = None


def schedule_context(basis: BasisSpec, log_var: Optional[np.ndarray] = None) -> ScheduleContext:
    """Build the schedule context for a given basis.

    If no log-variances are passed, all the components are assumed to have
    unit variance (e.g., for whitened data).
    """
    if log_var is None:
        log_var = np.zeros(basis.dim)
    columns = None
    haar = None
    if basis.kind in ('identity', 'permutation'):
        columns = component_columns(basis)
    elif basis.kind == 'haar':
        haar = haar_groups(basis.shape, basis.levels)
    return ScheduleContext(np.asarray(log_var, dtype=float), basis.labels, columns, haar)


def _parse_bool(value) -> bool:
    """Parse a boolean from a configuration value.
    """
    if isinstance(value, str):
        return value.strip().lower() in ('1', 'true', 'yes', 'on')
    return bool(value)


def build_schedule(family: str, params: Dict[str, float], context: ScheduleContext) -> Schedule:
    """Instantiate a schedule from the family name and a parameter dictionary.

    Missing endpoint parameters default to gamma_denoise = -7 and to the
    noise floor for sigma_min = 0.99 (or the sigma_min parameter, if given).
    """
    if family not in SCHEDULE_FAMILIES:
        raise ValueError(f'Unknown schedule family "{family}"')
    params = {key: value for key, value in params.items() if value is not None}
    log_var = context.log_var
    sigma_min = float(params.get('sigma_min', DEFAULT_SIGMA_MIN))
    gamma_denoise = float(params.get('gamma_denoise', DEFAULT_GAMMA_DENOISE))
    gamma_noise = float(params.get('gamma_noise', noise_floor(log_var, sigma_min)))
    if family == 'standard':
        return standard_schedule(log_var, gamma_denoise, gamma_noise)
    if family == 'linear-softness':
        l = fft_ordering_variables(log_var, context.labels, float(params.get('r', 0.)))
        schedule = linear_softness_schedule(log_var, l, float(params.get('a', 1.)),
                                            gamma_denoise, gamma_noise)
        schedule.params['r'] = float(params.get('r', 0.))
        return schedule
    gamma_min = float(params.get('gamma_min', gamma_denoise))
    gamma_max = float(params.get('gamma_max', gamma_noise))
    b = float(params.get('b', 0.5))
    if family == 'column':
        if context.columns is None:
            raise ValueError('The column schedule requires a pixel-space basis')
        return column_schedule(int(context.columns.max()), b, gamma_min, gamma_max,
                               context.columns)
    if context.haar is None:
        raise ValueError('The haar-column schedule requires a haar basis')
    level, column, columns_per_level = context.haar
    return haar_column_schedule(columns_per_level, float(params.get('a', 0.5)), b, gamma_min,
                                gamma_max, level, column,
                                _parse_bool(params.get('rescale_levels', False)))


def schedule_from_config(config: Dict[str, str], context: ScheduleContext) -> Schedule:
    """Instantiate a schedule from a key-value configuration section (as
    written by Schedule.to_config()).
    """
    config = dict(config)
    family = config.pop('family', 'standard')
    params = {}
    for key, value in config.items():
        if key == 'rescale_levels':
            params[key] = _parse_bool(value)
        else:
            params[key] = float(value)
    logger.debug(f'Building {family} schedule with parameters {params}...')
    return build_schedule(family, params, context)
