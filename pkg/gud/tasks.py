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

"""Composite generation procedures: sequential image extension and partial
reconstruction.

Image extension works on a window of L pixel columns, in the identity basis,
under a column schedule. Since moving the noising front by one column is
equivalent to a time shift b / (L - 1), a window can be denoised by k such
shifts, its k leftmost (fully denoised) columns committed, the remaining
columns shifted to the left and k columns of prior noise appended on the
right, which brings the window back to the original working time.
"""

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import torch
from loguru import logger

from gud.basis import column_grouping, image_shape
from gud.process import DTYPE, ScoreFunction, as_tensor, forward_sample, make_generator, \
    reverse_sde_sample
from gud.schedule import ColumnSchedule, Schedule


DEFAULT_STEPS_PER_UNIT_TIME = 500
RESTORATION_TOLERANCE = 1.e-9


def _num_steps(steps_per_unit_time: int, duration: float) -> int:
    """Number of integration steps for a time interval.
    """
    return max(1, int(np.ceil(steps_per_unit_time * duration - 1.e-9)))


def working_time(schedule: ColumnSchedule) -> float:
    """Return the working time of the extension window, i.e., the latest time
    at which denoising by one column makes the leftmost column fully denoised.
    """
    return min(1., schedule.b + schedule.time_step)


def check_extension(schedule: ColumnSchedule, k: int) -> None:
    """Make sure the window can be advanced by k columns per cycle.
    """
    if not isinstance(schedule, ColumnSchedule):
        raise ValueError('Image extension requires a column schedule')
    if not 1 <= k < schedule.num_columns:
        raise ValueError(f'k={k} outside [1, {schedule.num_columns - 1}]')
    if k * schedule.time_step > schedule.b + 1.e-12:
        raise ValueError(f'Insufficient softness b={schedule.b} for k={k} '
                         f'(k * dt = {k * schedule.time_step:.4f} > b)')


def window_restoration_gap(schedule: ColumnSchedule, t: float, k: int) -> float:
    """Return the largest difference between the noising state of the shifted
    columns after one cycle and the one of the same window positions before
    the cycle.
    """
    before, _ = schedule.column_gamma(t)
    after, _ = schedule.column_gamma(t - k * schedule.time_step)
    return float(np.max(np.abs(after[k:] - before[:-k])))



class RestorationGap(NamedTuple):

    """Residual noising-state mismatches of an extension cycle.

    committed is the largest distance from gamma_min of the committed
    columns, appended the largest distance from gamma_max of the positions
    filled with prior noise.
    """

    committed: float
    appended: float


def restoration_gap(schedule: ColumnSchedule, t: float, k: int) -> RestorationGap:
    """Calculate the restoration gaps of an extension cycle at working time t.
    """
    committed, _ = schedule.column_gamma(t - k * schedule.time_step)
    appended, _ = schedule.column_gamma(t)
    return RestorationGap(float(np.max(committed[:k] - schedule.gamma_min)),
                          float(np.max(schedule.gamma_max - appended[-k:])))



@dataclass
class ExtensionState:

    """State of an image extension.

    Arguments
    ---------
    committed : np.ndarray
        The (batch, H, W_committed, C) strip of committed columns.
    window : torch.Tensor
        The (batch, H, L, C) working window, at noising time t.
    schedule : ColumnSchedule
        The column schedule.
    k : int
        The number of columns advanced per cycle.
    t : float
        The working time.
    """

    committed: np.ndarray
    window: torch.Tensor
    schedule: ColumnSchedule
    k: int
    t: float
    index: List[Tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        """Post-initialization checks.
        """
        if self.window.shape[2] != self.schedule.num_columns:
            raise ValueError(f'Window width {self.window.shape[2]} != L = {self.schedule.num_columns}')
        check_extension(self.schedule, self.k)

    @property
    def batch(self) -> int:
        """The number of strips being extended.
        """
        return self.window.shape[0]

    @property
    def width(self) -> int:
        """The width of the committed strip.
        """
        return self.committed.shape[2]

    def flat_window(self) -> torch.Tensor:
        """Return the window as (batch, d) component vectors.
        """
        return self.window.reshape(self.batch, -1)


def _check_window_shape(schedule: ColumnSchedule, shape) -> Tuple[int, int, int]:
    """Make sure the window shape matches the column grouping of the schedule.
    """
    shape = image_shape(shape)
    if not np.array_equal(column_grouping(shape), schedule.groups):
        raise ValueError(f'Window shape {shape} does not match the schedule column groups')
    return shape


# pylint: disable=too-many-arguments
def start_extension(score: ScoreFunction, schedule: ColumnSchedule, shape, k: int,
                    batch: int = 1, init_window: Optional[np.ndarray] = None,
                    steps: int = DEFAULT_STEPS_PER_UNIT_TIME,
                    generator: Optional[torch.Generator] = None) -> ExtensionState:
    """Create the initial extension state.

    Unless an initial window (at the working time) is given, this is obtained
    by a reverse run from the prior down to the working time.
    """
    shape = _check_window_shape(schedule, shape)
    check_extension(schedule, k)
    t = working_time(schedule)
    gap = restoration_gap(schedule, t, k)
    if max(gap) > RESTORATION_TOLERANCE:
        logger.warning(f'Extension cycles are not exactly restoring the window: '
                       f'committed gap {gap.committed:.3e}, appended gap {gap.appended:.3e}')
    if generator is None:
        generator = make_generator(0)
    if init_window is None:
        window = reverse_sde_sample(score, schedule, _num_steps(steps, 1. - t), batch,
                                    t_start=1., t_end=t, generator=generator) if t < 1. else \
            torch.randn((batch, schedule.dim), generator=generator, dtype=DTYPE)
    else:
        window = as_tensor(init_window).reshape(-1, schedule.dim)
    window = window.reshape((-1,) + shape)
    committed = np.zeros((window.shape[0], shape[0], 0, shape[2]))
    return ExtensionState(committed, window, schedule, k, t)


def extension_cycle(state: ExtensionState, score: ScoreFunction,
                    steps: int = DEFAULT_STEPS_PER_UNIT_TIME,
                    generator: Optional[torch.Generator] = None) -> ExtensionState:
    """Run a single extension cycle, in place.
    """
    if generator is None:
        generator = make_generator(0)
    schedule = state.schedule
    duration = state.k * schedule.time_step
    chi = reverse_sde_sample(score, schedule, _num_steps(steps, duration), state.batch,
                             chi_init=state.flat_window(), t_start=state.t,
                             t_end=max(0., state.t - duration), generator=generator)
    window = chi.reshape(state.window.shape)
    cycle = len(state.index)
    first = state.width
    state.committed = np.concatenate([state.committed, window[:, :, :state.k].numpy()], axis=2)
    noise_shape = (state.batch, window.shape[1], state.k, window.shape[3])
    noise = torch.randn(noise_shape, generator=generator, dtype=DTYPE)
    state.window = torch.cat([window[:, :, state.k:], noise], dim=2)
    state.index.append((cycle, first, state.width - 1))
    logger.debug(f'Extension cycle {cycle} committed columns {first}-{state.width - 1}.')
    return state


def finish_extension(state: ExtensionState, score: ScoreFunction,
                     steps: int = DEFAULT_STEPS_PER_UNIT_TIME,
                     generator: Optional[torch.Generator] = None) -> np.ndarray:
    """Fully denoise the working window and return the complete strip.
    """
    if generator is None:
        generator = make_generator(0)
    chi = reverse_sde_sample(score, state.schedule, _num_steps(steps, state.t), state.batch,
                             chi_init=state.flat_window(), t_start=state.t, t_end=0.,
                             generator=generator)
    window = chi.reshape(state.window.shape).numpy()
    return np.concatenate([state.committed, window], axis=2)


# pylint: disable=too-many-arguments
def extend_image(score: ScoreFunction, schedule: ColumnSchedule, shape, k: int, cycles: int,
                 seed: int = 0, batch: int = 1, init_window: Optional[np.ndarray] = None,
                 steps: int = DEFAULT_STEPS_PER_UNIT_TIME) -> Tuple[np.ndarray, list]:
    """Generate image strips longer than the window the score was trained on.

    After each cycle the k vacated positions are filled with standard-normal
    noise, while the schedule at the working time puts those positions below
    gamma_max (see restoration_gap(), a warning is logged when the gap is not
    zero). The appended columns start from the prior rather than from the
    noised marginal at their actual gamma, so the procedure is exact only for
    independent standard-normal columns; otherwise the committed
    marginals are biased by an amount that shrinks with gamma_max. For
    correlated columns the committed variance drifts below the data variance.

    Parameters
    ----------
    score : ScoreFunction
        The score function over the L-column window.
    schedule : ColumnSchedule
        The column schedule.
    shape : tuple
        The (H, L, C) window shape.
    k : int
        The number of columns committed per cycle.
    cycles : int
        The number of extension cycles.
    seed : int
        The random seed.
    batch : int
        The number of independent strips.
    init_window : array_like, optional
        The initial window at the working time.
    steps : int
        The number of reverse-SDE steps per unit time.

    Returns
    -------
    strip, index
        The (batch, H, L + k * cycles, C) strips, and the list of
        (cycle, first column, last column) committed at each cycle.
    """
    if cycles < 0:
        raise ValueError(f'Invalid number of cycles ({cycles})')
    generator = make_generator(seed)
    state = start_extension(score, schedule, shape, k, batch, init_window, steps, generator)
    logger.info(f'Extending {state.batch} strip(s) by {k} column(s) for {cycles} cycle(s)...')
    for _ in range(cycles):
        extension_cycle(state, score, steps, generator)
    strip = finish_extension(state, score, steps, generator)
    logger.info(f'Done, strip width {strip.shape[2]}.')
    return strip, state.index


def frozen_components(schedule: Schedule, t: float) -> np.ndarray:
    """Return the mask of the components whose noising state at time t is
    frozen at its lower clip value, i.e., not noised yet.
    """
    gamma_min = getattr(schedule, 'gamma_min', None)
    if gamma_min is None or np.ndim(gamma_min) > 0:
        return np.zeros(schedule.dim, dtype=bool)
    return schedule.gamma(t) <= gamma_min


def variant_seeds(seed: int, n_variants: int) -> List[int]:
    """Derive independent sub-seeds, one per variant.
    """
    streams = np.random.SeedSequence(seed).spawn(n_variants)
    return [int(stream.generate_state(1)[0]) for stream in streams]


def reconstruct(score: ScoreFunction, schedule: Schedule, image, t_noise: float, seed: int = 0,
                n_variants: int = 1, steps: int = DEFAULT_STEPS_PER_UNIT_TIME) -> np.ndarray:
    """Partially noise an image (in the component space) and generate
    n_variants completions.

    Returns
    -------
    np.ndarray
        The (n_variants, d) reconstructions.
    """
    if not 0. < t_noise < 1.:
        raise ValueError(f't_noise={t_noise} outside (0, 1)')
    if n_variants < 1:
        raise ValueError(f'Invalid number of variants ({n_variants})')
    image = as_tensor(image).reshape(1, -1)
    if image.shape[-1] != schedule.dim:
        raise ValueError(f'Image dimension {image.shape[-1]} != schedule dimension {schedule.dim}')
    state = schedule.state(t_noise)
    logger.info(f'Reconstructing {n_variants} variant(s) from t = {t_noise}...')
    variants = []
    for sub_seed in variant_seeds(seed, n_variants):
        generator = make_generator(sub_seed)
        chi = forward_sample(image, state, generator=generator)
        chi = reverse_sde_sample(score, schedule, _num_steps(steps, t_noise), 1, chi_init=chi,
                                 t_start=t_noise, t_end=0., generator=generator)
        variants.append(chi[0].numpy())
    return np.array(variants)
