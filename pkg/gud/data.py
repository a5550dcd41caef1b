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

"""Dataset ingestion and synthesis.
"""

import csv
import struct

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from loguru import logger

from gud.helpers import FormatError, check_input_file
from gud.process import GaussianMixture


IMAGES_MAGIC = b'GUDIMGS'
IMAGES_VERSION = 1
_IMAGES_HEADER = '<4I'
DEFAULT_LEVELS = 256
# Dequantization noise is drawn in [0, 1 - 2 * REQUANTIZATION_GUARD].
REQUANTIZATION_GUARD = 1.e-6
SYNTHETIC_MIXTURES = ('gaussian', 'anisotropic', 'bimodal')
SPLITS = ('train', 'test')



@dataclass
class Dataset:

    """Collection of samples, along with the preprocessing metadata.

    Arguments
    ---------
    samples : np.ndarray
        The (N, H, W, C) or (N, d) sample array.
    mean : np.ndarray, optional
        The mean subtracted at preprocessing time (one sample worth of values).
    levels : int, optional
        The number of quantization levels of the raw data.
    split : str
        The split tag (train or test).
    """

    samples: np.ndarray
    mean: Optional[np.ndarray] = None
    levels: Optional[int] = None
    split: str = 'train'

    def __post_init__(self) -> None:
        """Post-initialization checks.
        """
        if self.split not in SPLITS:
            raise ValueError(f'Invalid split "{self.split}" (choose among {SPLITS})')
        if self.samples.ndim < 2:
            raise ValueError('Samples must have a leading sample axis')
        if self.mean is not None and self.mean.shape != self.samples.shape[1:]:
            raise ValueError('Mean shape does not match the sample shape')

    def __len__(self) -> int:
        """Return the number of samples.
        """
        return self.samples.shape[0]

    @property
    def shape(self) -> Tuple[int, ...]:
        """The shape of a single sample.
        """
        return self.samples.shape[1:]

    @property
    def dim(self) -> int:
        """The number of dimensions of a single sample.
        """
        return int(np.prod(self.shape))

    def flat(self) -> np.ndarray:
        """Return the samples as an (N, d) array.
        """
        return self.samples.reshape(len(self), self.dim)


def _check_images(raw: np.ndarray) -> np.ndarray:
    """Make sure an array can be stored as a GUDIMGS payload.
    """
    raw = np.asarray(raw)
    if raw.ndim != 4:
        raise ValueError(f'Images must be a (N, H, W, C) array, got shape {raw.shape}')
    if raw.size and (not np.all(raw == np.round(raw)) or raw.min() < 0 or raw.max() > 255):
        raise ValueError('Pixel values must be integers in [0, 255]')
    return raw.astype(np.uint8)


def save_images(file_path: str, raw: np.ndarray) -> None:
    """Write a (N, H, W, C) array of 8-bit pixel values to a GUDIMGS file.
    """
    raw = _check_images(raw)
    logger.info(f'Writing {raw.shape[0]} image(s) to {file_path}...')
    with open(file_path, 'wb') as output_file:
        output_file.write(IMAGES_MAGIC)
        output_file.write(struct.pack('<B', IMAGES_VERSION))
        output_file.write(struct.pack(_IMAGES_HEADER, *raw.shape))
        output_file.write(np.ascontiguousarray(raw).tobytes())
    logger.info('Done.')


def read_images(file_path: str) -> np.ndarray:
    """Read the raw (N, H, W, C) uint8 array from a GUDIMGS file.
    """
    check_input_file(file_path)
    with open(file_path, 'rb') as input_file:
        data = input_file.read()
    prefix = len(IMAGES_MAGIC)
    header_size = prefix + 1 + struct.calcsize(_IMAGES_HEADER)
    if len(data) < header_size or data[:prefix] != IMAGES_MAGIC:
        raise FormatError(f'{file_path} is not a GUDIMGS file')
    version = data[prefix]
    if version != IMAGES_VERSION:
        raise FormatError(f'Unsupported GUDIMGS version {version} in {file_path}')
    shape = struct.unpack(_IMAGES_HEADER, data[prefix + 1:header_size])
    if min(shape[1:]) < 1:
        raise FormatError(f'Malformed GUDIMGS header {shape} in {file_path}')
    size = int(np.prod(shape))
    payload = data[header_size:]
    if len(payload) < size:
        raise FormatError(f'Truncated payload in {file_path} ({len(payload)}/{size} bytes)')
    if len(payload) > size:
        raise FormatError(f'Trailing bytes in {file_path}')
    if size == 0:
        return np.zeros(shape, dtype=np.uint8)
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def load_images(file_path: str, shape: Optional[Tuple[int, int, int]] = None,
                split: str = 'train') -> Dataset:
    """Load a GUDIMGS file into a (raw, not preprocessed) dataset.

    If a shape is passed, the (H, W, C) shape in the file must match it.
    """
    raw = read_images(file_path)
    if shape is not None and tuple(raw.shape[1:]) != tuple(shape):
        raise FormatError(f'Image shape {raw.shape[1:]} in {file_path} != expected {tuple(shape)}')
    logger.info(f'{raw.shape[0]} image(s) of shape {raw.shape[1:]} loaded from {file_path}.')
    return Dataset(raw.astype(float), split=split)


def dequantize(raw: np.ndarray, noise: np.ndarray, levels: int = DEFAULT_LEVELS) -> np.ndarray:
    """Map quantized values (plus uniform noise) onto [-1, 1],
    x = 2 (raw + u) / levels - 1.
    """
    return 2. * (np.asarray(raw, dtype=float) + noise) / levels - 1.


def dequantize_and_center(raw, levels: int = DEFAULT_LEVELS, seed: int = 0,
                          mean: Optional[np.ndarray] = None, split: str = 'train') -> Dataset:
    """Uniformly dequantize raw pixel values and subtract the mean.

    The dequantization noise of each sample comes from its own generator,
    spawned from the seed, so that a given sample is always dequantized the
    same way. If no mean is passed (training split) the empirical mean is
    calculated and stored, otherwise the given one (e.g., computed on the
    training split) is subtracted.
    """
    raw = np.asarray(raw)
    if raw.ndim < 2:
        raise ValueError('Raw data must have a leading sample axis')
    if levels < 2:
        raise ValueError(f'Invalid number of quantization levels ({levels})')
    if raw.size and (not np.all(raw == np.round(raw)) or raw.min() < 0 or raw.max() > levels - 1):
        raise ValueError(f'Raw values must be integers in [0, {levels - 1}]')
    streams = np.random.SeedSequence(seed).spawn(raw.shape[0])
    high = 1. - 2. * REQUANTIZATION_GUARD
    noise = np.array([np.random.default_rng(stream).uniform(0., high, raw.shape[1:])
                      for stream in streams]).reshape(raw.shape)
    x = dequantize(raw, noise, levels)
    if mean is None:
        if raw.shape[0] == 0:
            raise ValueError('Cannot calculate the mean of an empty dataset')
        mean = x.mean(axis=0)
    logger.debug(f'Dequantized {raw.shape[0]} sample(s) with {levels} levels.')
    return Dataset(x - mean, np.asarray(mean, dtype=float), int(levels), split)


def restore(dataset: Dataset, samples: Optional[np.ndarray] = None) -> np.ndarray:
    """Add the stored mean back to (centered) samples.
    """
    if samples is None:
        samples = dataset.samples
    if dataset.mean is None:
        return np.asarray(samples)
    return np.asarray(samples).reshape((-1,) + dataset.shape) + dataset.mean


def requantize(dataset: Dataset, samples: Optional[np.ndarray] = None) -> np.ndarray:
    """Map dequantized samples back to integer pixel values.

    For data produced by dequantize_and_center() this recovers the raw values
    exactly; generated samples are clipped to the valid range.
    """
    if dataset.levels is None:
        raise ValueError('The dataset carries no quantization metadata')
    values = (restore(dataset, samples) + 1.) * dataset.levels / 2.
    values = np.floor(values + REQUANTIZATION_GUARD)
    return np.clip(values, 0, dataset.levels - 1).astype(int)


def synth_mixture(mix: GaussianMixture, size: int, seed: int = 0) -> Dataset:
    """Draw exact samples from a Gaussian mixture.
    """
    if size < 0:
        raise ValueError(f'Invalid number of samples ({size})')
    samples = mix.sample(size, np.random.default_rng(seed))
    return Dataset(samples)


def synthetic_mixture(name: str, dim: int) -> GaussianMixture:
    """Return one of the predefined synthetic mixtures.

    - gaussian: the standard normal N(0, I);
    - anisotropic: zero-mean Gaussian with variances geometrically spaced
      from 4 down to 1;
    - bimodal: two components with weights (0.3, 0.7), means -/+ 1.5 along
      all the axes and variances 0.25.
    """
    if dim < 1:
        raise ValueError(f'Invalid dimension ({dim})')
    if name == 'gaussian':
        return GaussianMixture([1.], np.zeros((1, dim)), np.ones((1, dim)))
    if name == 'anisotropic':
        return GaussianMixture([1.], np.zeros((1, dim)), np.geomspace(4., 1., dim)[None, :])
    if name == 'bimodal':
        means = np.vstack([np.full(dim, -1.5), np.full(dim, 1.5)])
        return GaussianMixture([0.3, 0.7], means, np.full((2, dim), 0.25))
    raise ValueError(f'Unknown synthetic mixture "{name}" (choose among {SYNTHETIC_MIXTURES})')


def csv_to_images(csv_file_path: str, output_file_path: str, shape: Tuple[int, int, int]) -> np.ndarray:
    """Convert a flat CSV pixel dump (one image per row, row-major pixel
    order) into a GUDIMGS file.
    """
    check_input_file(csv_file_path)
    shape = tuple(int(item) for item in shape)
    size = int(np.prod(shape))
    rows = []
    with open(csv_file_path, newline='') as input_file:
        for line_number, row in enumerate(csv.reader(input_file), start=1):
            if not row:
                continue
            if len(row) != size:
                raise FormatError(f'Row {line_number} of {csv_file_path} has {len(row)} '
                                  f'value(s), {size} expected')
            try:
                rows.append([int(value) for value in row])
            except ValueError as exception:
                raise FormatError(f'Row {line_number} of {csv_file_path}: {exception}') from exception
    raw = np.array(rows, dtype=int).reshape((len(rows),) + shape)
    try:
        save_images(output_file_path, raw)
    except ValueError as exception:
        raise FormatError(f'{csv_file_path}: {exception}') from exception
    return raw


def images_to_csv(file_path: str, csv_file_path: str) -> np.ndarray:
    """Convert a GUDIMGS file into a flat CSV pixel dump.
    """
    raw = read_images(file_path)
    logger.info(f'Writing {raw.shape[0]} image(s) to {csv_file_path}...')
    with open(csv_file_path, 'w', newline='') as output_file:
        writer = csv.writer(output_file)
        for image in raw.reshape(raw.shape[0], -1):
            writer.writerow(image.tolist())
    logger.info('Done.')
    return raw
