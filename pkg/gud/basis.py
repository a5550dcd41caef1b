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

"""Change of representation between the data (pixel) space and the component
space in which the diffusion process is diagonal.

A basis is the composition M = S^{-1} U of an orthogonal transformation U
and a positive diagonal scaling S, so that the components read
chi = S^{-1} U phi, and the prior covariance of the process in the data space
is U^{-1} S^2 U. All the orthogonal transformations act on the pixels of
each color channel independently, and all vectors are flattened in
row-major (row, column, channel) order. In the component space the
flattening order is (component, channel).
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
import scipy.linalg
from loguru import logger

from gud.container import read_container, write_container
from gud.helpers import NumericalError, memoize


BASIS_KINDS = ('identity', 'dense-orthogonal', 'fft2-real', 'haar', 'permutation')
BASIS_MAGIC = b'GUDBASIS'
DEFAULT_VARIANCE_FLOOR = 1.e-6
_SQRT2 = np.sqrt(2.)


def image_shape(shape) -> Tuple[int, int, int]:
    """Normalize a shape specification to a (height, width, channels) tuple.

    A one-dimensional shape (d,) is interpreted as a single row of d pixels
    with one channel.
    """
    shape = tuple(int(item) for item in shape)
    if len(shape) == 1:
        shape = (1, shape[0], 1)
    elif len(shape) == 2:
        shape = shape + (1,)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f'Invalid image shape {shape}')
    return shape



@dataclass
class BasisSpec:

    """Description of a basis, i.e., an orthogonal transformation U plus a
    positive diagonal scaling S.

    Parameters
    ----------
    kind : str
        One of BASIS_KINDS.
    shape : tuple
        The (height, width, channels) shape of the data.
    scaling : array_like
        The diagonal of S (length d).
    labels : array_like
        Per-component position labels (length d).
    levels : int
        The number of decomposition levels (haar kind only).
    matrix : array_like, optional
        The P x P orthogonal matrix acting on the pixels of each channel, with
        the basis vectors as rows (dense-orthogonal kind only).
    permutation : array_like, optional
        The pixel-space index of each component (permutation kind only).
    """

    kind: str
    shape: Tuple[int, int, int]
    scaling: np.ndarray
    labels: np.ndarray
    levels: int = 0
    matrix: Optional[np.ndarray] = None
    permutation: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        """Validate the basis.
        """
        if self.kind not in BASIS_KINDS:
            raise ValueError(f'Unknown basis kind "{self.kind}"')
        self.shape = image_shape(self.shape)
        self.scaling = np.asarray(self.scaling, dtype=float).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=float).reshape(-1)
        dim = self.dim
        if self.scaling.shape != (dim,) or self.labels.shape != (dim,):
            raise ValueError(f'Scaling and labels must have length {dim}')
        if not np.all(np.isfinite(self.scaling)) or np.any(self.scaling <= 0.):
            raise ValueError('Scaling entries must be strictly positive and finite')
        if self.kind == 'dense-orthogonal':
            self.matrix = np.asarray(self.matrix, dtype=float)
            size = self.num_pixels
            if self.matrix.shape != (size, size):
                raise ValueError(f'Dense basis matrix must be {size} x {size}')
        if self.kind == 'haar':
            haar_check_shape(self.shape, self.levels)
        if self.kind == 'permutation':
            self.permutation = np.asarray(self.permutation).astype(np.int64)
            if not np.array_equal(np.sort(self.permutation), np.arange(dim)):
                raise ValueError('Invalid permutation')

    @property
    def num_pixels(self) -> int:
        """Number of pixels per channel.
        """
        return self.shape[0] * self.shape[1]

    @property
    def dim(self) -> int:
        """Total number of components.
        """
        return self.num_pixels * self.shape[2]

    def _check_dim(self, x: np.ndarray) -> np.ndarray:
        """Make sure the last axis of an input array matches the basis.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise ValueError(f'Expected vectors of length {self.dim}, got shape {x.shape}')
        return x

    def _pixel_matrix(self) -> Optional[np.ndarray]:
        """Return the per-channel matrix for the matrix-based kinds.
        """
        if self.kind == 'dense-orthogonal':
            return self.matrix
        if self.kind == 'fft2-real':
            return fft_tables(*self.shape[:2]).matrix
        return None

    def rotate(self, phi: np.ndarray) -> np.ndarray:
        """Apply the orthogonal part U to a (batch of) data vectors.
        """
        phi = self._check_dim(phi)
        if self.kind == 'identity':
            return phi.copy()
        if self.kind == 'permutation':
            return phi[..., self.permutation]
        if self.kind == 'haar':
            return haar_decompose(phi.reshape(phi.shape[:-1] + self.shape), self.levels)
        pixels = phi.reshape(phi.shape[:-1] + (self.num_pixels, self.shape[2]))
        chi = np.einsum('qp,...pc->...qc', self._pixel_matrix(), pixels)
        return chi.reshape(phi.shape)

    def unrotate(self, chi: np.ndarray) -> np.ndarray:
        """Apply the inverse U^{-1} = U^T of the orthogonal part.
        """
        chi = self._check_dim(chi)
        if self.kind == 'identity':
            return chi.copy()
        if self.kind == 'permutation':
            phi = np.empty_like(chi)
            phi[..., self.permutation] = chi
            return phi
        if self.kind == 'haar':
            image = haar_reconstruct(chi, self.shape, self.levels)
            return image.reshape(chi.shape)
        coeffs = chi.reshape(chi.shape[:-1] + (self.num_pixels, self.shape[2]))
        phi = np.einsum('qp,...qc->...pc', self._pixel_matrix(), coeffs)
        return phi.reshape(chi.shape)



class CovarianceEstimate(NamedTuple):

    """Empirical first and second moments of a sample, in a given basis.
    """

    mean: np.ndarray
    variances: np.ndarray
    count: int

    @property
    def log_var(self) -> np.ndarray:
        """Logarithm of the variances, floored to DEFAULT_VARIANCE_FLOOR.
        """
        return np.log(np.maximum(self.variances, DEFAULT_VARIANCE_FLOOR))


def estimate_covariance(samples) -> CovarianceEstimate:
    """Estimate the mean and the (unbiased) per-component variances of a
    collection of vectors.

    The variances are computed after the subtraction of the empirical mean,
    and callers are expected to subtract the mean before the diffusion.
    """
    if not isinstance(samples, np.ndarray):
        lengths = {len(sample) for sample in samples}
        if len(lengths) > 1:
            raise ValueError(f'Mismatched sample lengths {sorted(lengths)}')
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise ValueError(f'Expected a two-dimensional sample array, got shape {samples.shape}')
    if samples.shape[0] < 2:
        raise ValueError('At least two samples are needed to estimate the covariance')
    mean = samples.mean(axis=0)
    variances = np.sum((samples - mean)**2, axis=0) / (samples.shape[0] - 1)
    return CovarianceEstimate(mean, variances, samples.shape[0])


def channel_averaged_covariance(samples: np.ndarray, shape) -> np.ndarray:
    """Return the P x P pixel covariance matrix, averaged over the color
    channels, of a sample of flattened images.

    This is the input for the PCA basis that we apply, unchanged, to each
    color channel.
    """
    height, width, channels = image_shape(shape)
    samples = np.asarray(samples, dtype=float)
    pixels = samples.reshape(-1, height * width, channels)
    size = height * width
    cov = sum(np.cov(pixels[:, :, channel], rowvar=False).reshape(size, size)
              for channel in range(channels))
    return cov / channels


def build_identity_basis(shape) -> BasisSpec:
    """Identity (pixel) basis, labelled by column index.
    """
    shape = image_shape(shape)
    return BasisSpec('identity', shape, np.ones(np.prod(shape)), column_grouping(shape))


def build_pca_basis(cov_matrix: np.ndarray, whiten: bool = False,
                    variance_floor: float = DEFAULT_VARIANCE_FLOOR,
                    shape=None) -> BasisSpec:
    """Build the PCA basis diagonalizing a given pixel covariance matrix.

    Parameters
    ----------
    cov_matrix : array_like
        The symmetric P x P covariance matrix.
    whiten : bool
        If True, the scaling is set to the square root of the (floored)
        eigenvalues, so that the transformed data have unit variance.
    variance_floor : float
        The minimum eigenvalue used in the scaling and in the labels.
    shape : tuple, optional
        The image shape; defaults to a single row of P pixels.

    Returns
    -------
    basis : BasisSpec
        A dense-orthogonal basis with rows ordered by descending eigenvalue.
    """
    cov_matrix = np.asarray(cov_matrix, dtype=float)
    if cov_matrix.ndim != 2 or cov_matrix.shape[0] != cov_matrix.shape[1]:
        raise ValueError(f'Covariance matrix must be square, got shape {cov_matrix.shape}')
    if not np.allclose(cov_matrix, cov_matrix.T, rtol=0., atol=1.e-8):
        raise ValueError('Covariance matrix is not symmetric')
    if variance_floor <= 0.:
        raise ValueError('The variance floor must be positive')
    size = cov_matrix.shape[0]
    shape = image_shape((size,) if shape is None else shape)
    if shape[0] * shape[1] != size:
        raise ValueError(f'Shape {shape} does not match a {size} x {size} covariance')
    try:
        eigvals, eigvecs = scipy.linalg.eigh(0.5 * (cov_matrix + cov_matrix.T))
    except (np.linalg.LinAlgError, ValueError) as exception:
        logger.error(f'Eigendecomposition failed: {exception}')
        raise NumericalError(f'Eigendecomposition failed: {exception}') from exception
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    # Largest-magnitude entry of each eigenvector positive.
    pivots = np.argmax(np.abs(eigvecs), axis=0)
    eigvecs *= np.sign(eigvecs[pivots, np.arange(size)])
    floored = np.maximum(eigvals, variance_floor)
    channels = shape[2]
    scaling = np.sqrt(floored) if whiten else np.ones(size)
    labels = -np.log(floored)
    return BasisSpec('dense-orthogonal', shape, np.repeat(scaling, channels),
                     np.repeat(labels, channels), matrix=eigvecs.T)


class FFTTables(NamedTuple):

    """Real orthogonal representation of the two-dimensional DFT.
    """

    matrix: np.ndarray
    frequency: np.ndarray


@memoize
def fft_tables(height: int, width: int) -> FFTTables:
    """Build the real orthogonal DFT matrix for a given image size.

    Each non-redundant frequency k contributes a cosine row and, unless k is
    its own conjugate, a sine row, with sqrt(2) normalization, so that the
    P x P matrix is orthogonal. Rows are sorted lexicographically in
    (|k|, k_y, k_x), using the signed frequencies of the representative.
    """
    num_pixels = height * width
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing='ij')
    rows = rows.ravel()
    cols = cols.ravel()
    signed_y = np.fft.fftfreq(height, 1. / height).astype(int)
    signed_x = np.fft.fftfreq(width, 1. / width).astype(int)
    entries = []
    for ky in range(height):
        for kx in range(width):
            conjugate = ((-ky) % height, (-kx) % width)
            if conjugate < (ky, kx):
                continue
            fy, fx = signed_y[ky], signed_x[kx]
            magnitude = np.hypot(fy, fx)
            phase = 2. * np.pi * (ky * rows / height + kx * cols / width)
            if conjugate == (ky, kx):
                entries.append((magnitude, fy, fx, 0, np.cos(phase) / np.sqrt(num_pixels)))
            else:
                norm = np.sqrt(2. / num_pixels)
                entries.append((magnitude, fy, fx, 0, norm * np.cos(phase)))
                entries.append((magnitude, fy, fx, 1, norm * np.sin(phase)))
    entries.sort(key=lambda entry: entry[:4])
    matrix = np.array([entry[4] for entry in entries])
    frequency = np.array([entry[0] for entry in entries])
    return FFTTables(matrix, frequency)


def build_fft_basis(shape) -> BasisSpec:
    """Real two-dimensional Fourier basis, applied to each channel, labelled by
    the frequency magnitude |k|.
    """
    shape = image_shape(shape)
    tables = fft_tables(*shape[:2])
    labels = np.repeat(tables.frequency, shape[2])
    return BasisSpec('fft2-real', shape, np.ones(np.prod(shape)), labels)


def haar_check_shape(shape, levels: int) -> None:
    """Make sure an image shape supports a given number of Haar levels.
    """
    height, width, _ = image_shape(shape)
    if levels < 1:
        raise ValueError('The number of Haar levels must be positive')
    step = 2**levels
    if height % step or width % step:
        raise ValueError(f'Image shape {height} x {width} not divisible by 2^{levels}')


def haar_decompose(image: np.ndarray, levels: int) -> np.ndarray:
    """Multi-level two-dimensional Haar transform.

    At each level the one-dimensional transform is applied first to pairs of
    rows and then to pairs of columns, and the high-frequency sub-bands are
    stacked as HF = (LH, HL, HH). The output is the concatenation of
    HF^(1), ..., HF^(levels) and LL^(levels), each flattened in row-major
    (row, column, channel) order.

    Parameters
    ----------
    image : array_like
        The input, with shape (..., height, width, channels).
    levels : int
        The number of decomposition levels.

    Returns
    -------
    coefficients : np.ndarray
        The coefficients, with shape (..., height * width * channels).
    """
    image = np.asarray(image, dtype=float)
    haar_check_shape(image.shape[-3:], levels)
    batch_shape = image.shape[:-3]
    channels = image.shape[-1]
    pieces = []
    low = image
    for _ in range(levels):
        row_low = (low[..., 0::2, :, :] + low[..., 1::2, :, :]) / _SQRT2
        row_high = (low[..., 0::2, :, :] - low[..., 1::2, :, :]) / _SQRT2
        low = (row_low[..., 0::2, :] + row_low[..., 1::2, :]) / _SQRT2
        bands = (
            (row_low[..., 0::2, :] - row_low[..., 1::2, :]) / _SQRT2,
            (row_high[..., 0::2, :] + row_high[..., 1::2, :]) / _SQRT2,
            (row_high[..., 0::2, :] - row_high[..., 1::2, :]) / _SQRT2
        )
        pieces += [band.reshape(batch_shape + (-1, channels)) for band in bands]
    pieces.append(low.reshape(batch_shape + (-1, channels)))
    return np.concatenate(pieces, axis=-2).reshape(batch_shape + (-1,))


def haar_reconstruct(coefficients: np.ndarray, shape, levels: int) -> np.ndarray:
    """Inverse of haar_decompose().

    Returns
    -------
    image : np.ndarray
        The image, with shape (..., height, width, channels).
    """
    height, width, channels = image_shape(shape)
    haar_check_shape((height, width, channels), levels)
    coefficients = np.asarray(coefficients, dtype=float)
    batch_shape = coefficients.shape[:-1]
    if coefficients.shape[-1] != height * width * channels:
        raise ValueError(f'Expected {height * width * channels} coefficients')
    coefficients = coefficients.reshape(batch_shape + (-1, channels))
    # Slice the coefficient vector into the sub-bands of each level.
    bands = []
    offset = 0
    for level in range(1, levels + 1):
        band_shape = (height >> level, width >> level)
        size = band_shape[0] * band_shape[1]
        level_bands = []
        for _ in range(3):
            band = coefficients[..., offset:offset + size, :]
            level_bands.append(band.reshape(batch_shape + band_shape + (channels,)))
            offset += size
        bands.append(level_bands)
    low = coefficients[..., offset:, :].reshape(batch_shape + band_shape + (channels,))
    for level in range(levels, 0, -1):
        lh, hl, hh = bands[level - 1]
        band_height, band_width = lh.shape[-3:-1]
        row_low = np.empty(batch_shape + (band_height, 2 * band_width, channels))
        row_high = np.empty_like(row_low)
        row_low[..., 0::2, :] = (low + lh) / _SQRT2
        row_low[..., 1::2, :] = (low - lh) / _SQRT2
        row_high[..., 0::2, :] = (hl + hh) / _SQRT2
        row_high[..., 1::2, :] = (hl - hh) / _SQRT2
        low = np.empty(batch_shape + (2 * band_height, 2 * band_width, channels))
        low[..., 0::2, :, :] = (row_low + row_high) / _SQRT2
        low[..., 1::2, :, :] = (row_low - row_high) / _SQRT2
    return low



class HaarLayout(NamedTuple):

    """Per-component bookkeeping for the Haar coefficient vector.

    All the arrays have the length d of the coefficient vector. The level runs
    from 1 (finest) to the number of levels, and the band is one of
    'LH', 'HL', 'HH' and 'LL'. Rows and columns are indices within the
    sub-band array.
    """

    level: np.ndarray
    band: np.ndarray
    row: np.ndarray
    column: np.ndarray
    channel: np.ndarray


@memoize
def haar_layout(shape: Tuple[int, int, int], levels: int) -> HaarLayout:
    """Return the layout of the coefficient vector produced by haar_decompose().
    """
    height, width, channels = image_shape(shape)
    haar_check_shape((height, width, channels), levels)
    columns = []
    for level in range(1, levels + 1):
        names = ('LH', 'HL', 'HH', 'LL') if level == levels else ('LH', 'HL', 'HH')
        band_height, band_width = height >> level, width >> level
        row, col, chan = np.meshgrid(np.arange(band_height), np.arange(band_width),
                                     np.arange(channels), indexing='ij')
        for name in names:
            size = row.size
            columns.append((np.full(size, level), np.full(size, name), row.ravel(),
                            col.ravel(), chan.ravel()))
    return HaarLayout(*(np.concatenate(item) for item in zip(*columns)))


class HaarGroups(NamedTuple):

    """Assignment of the Haar coefficients to (level, column) schedule groups.

    The schedule level runs from 1 (coarsest, LL and the coarsest
    high-frequency bands) to the number of levels (finest), and the column
    from 1 to the width of the sub-bands at that level.
    """

    level: np.ndarray
    column: np.ndarray
    columns_per_level: Tuple[int, ...]


@memoize
def haar_groups(shape: Tuple[int, int, int], levels: int) -> HaarGroups:
    """Return the (level, column) groups of the Haar coefficients.
    """
    height, width, channels = image_shape(shape)
    layout = haar_layout((height, width, channels), levels)
    schedule_level = levels - layout.level + 1
    columns_per_level = tuple(width >> (levels - i + 1) for i in range(1, levels + 1))
    return HaarGroups(schedule_level, layout.column + 1, columns_per_level)


def build_haar_basis(shape, levels: int) -> BasisSpec:
    """Haar wavelet basis, labelled by a running index over the adjacent
    (level, column) groups of coefficients, coarsest first.
    """
    shape = image_shape(shape)
    groups = haar_groups(shape, levels)
    offsets = np.concatenate(([0], np.cumsum(groups.columns_per_level)[:-1]))
    labels = offsets[groups.level - 1] + groups.column
    return BasisSpec('haar', shape, np.ones(np.prod(shape)), labels, levels=levels)


def column_grouping(shape) -> np.ndarray:
    """Return the column index (1 to W) of each component in the pixel basis.
    """
    height, width, channels = image_shape(shape)
    _, col, _ = np.meshgrid(np.arange(height), np.arange(width), np.arange(channels),
                            indexing='ij')
    return col.ravel() + 1


def build_column_basis(shape) -> BasisSpec:
    """Pixel basis with the components reordered column by column, i.e., in
    (column, row, channel) order, and labelled by the column index.
    """
    shape = image_shape(shape)
    height, width, channels = shape
    index = np.arange(np.prod(shape)).reshape(shape)
    permutation = np.transpose(index, (1, 0, 2)).ravel()
    labels = column_grouping(shape)[permutation]
    return BasisSpec('permutation', shape, np.ones(permutation.size), labels,
                     permutation=permutation)


def component_columns(basis: BasisSpec) -> np.ndarray:
    """Return the pixel column (1 to W) of each component, for the pixel-space
    bases (identity and permutation).
    """
    if basis.kind == 'identity':
        return column_grouping(basis.shape)
    if basis.kind == 'permutation':
        return column_grouping(basis.shape)[basis.permutation]
    raise ValueError(f'Components of a {basis.kind} basis are not pixel columns')


def rescale(basis: BasisSpec, variances: np.ndarray,
            variance_floor: float = DEFAULT_VARIANCE_FLOOR) -> BasisSpec:
    """Return a copy of a basis whitened according to the given per-component
    variances (measured in the unscaled basis).
    """
    scaling = np.sqrt(np.maximum(np.asarray(variances, dtype=float), variance_floor))
    return BasisSpec(basis.kind, basis.shape, scaling, basis.labels, basis.levels,
                     basis.matrix, basis.permutation)


def forward_transform(basis: BasisSpec, phi: np.ndarray) -> np.ndarray:
    """Map (a batch of) data vectors to the component space, chi = S^{-1} U phi.
    """
    return basis.rotate(phi) / basis.scaling


def inverse_transform(basis: BasisSpec, chi: np.ndarray) -> np.ndarray:
    """Map (a batch of) component vectors back to the data space, phi = U^{-1} S chi.
    """
    chi = basis._check_dim(chi)
    return basis.unrotate(chi * basis.scaling)


def transform_matrix(basis: BasisSpec) -> np.ndarray:
    """Return the full d x d matrix F of the forward transformation, acting on
    row vectors, i.e., such that chi = phi @ F.
    """
    return forward_transform(basis, np.eye(basis.dim))


def score_phi_to_chi(basis: BasisSpec, grad_phi: np.ndarray) -> np.ndarray:
    """Convert a data-space score into a component-space score, S U grad_phi.
    """
    return basis.scaling * basis.rotate(grad_phi)


def score_chi_to_phi(basis: BasisSpec, grad_chi: np.ndarray) -> np.ndarray:
    """Convert a component-space score into a data-space score.
    """
    grad_chi = basis._check_dim(grad_chi)
    return basis.unrotate(grad_chi / basis.scaling)


def loglik_base_change(basis: BasisSpec, loglik_chi):
    """Convert a log-likelihood in the component space into the corresponding
    log-likelihood in the data space.

    Since |det M| = prod 1 / S_ii, this amounts to subtracting sum log S_ii.
    """
    scaling = np.asarray(basis.scaling, dtype=float)
    if np.any(scaling <= 0.):
        raise ValueError('Scaling entries must be strictly positive')
    return loglik_chi - np.sum(np.log(scaling))


def save_basis(file_path: str, basis: BasisSpec,
               estimate: Optional[CovarianceEstimate] = None) -> None:
    """Write a basis (and, optionally, the data moments in that basis) to file.
    """
    header = {'kind': basis.kind, 'shape': list(basis.shape), 'levels': basis.levels}
    arrays = {'scaling': basis.scaling, 'labels': basis.labels}
    if basis.kind == 'dense-orthogonal':
        arrays['matrix'] = basis.matrix
    if basis.kind == 'permutation':
        arrays['permutation'] = basis.permutation.astype(float)
    if estimate is not None:
        header['count'] = int(estimate.count)
        arrays['mean'] = estimate.mean
        arrays['variances'] = estimate.variances
    write_container(file_path, BASIS_MAGIC, header, arrays)


def load_basis(file_path: str) -> Tuple[BasisSpec, Optional[CovarianceEstimate]]:
    """Read a basis written by save_basis().
    """
    header, arrays = read_container(file_path, BASIS_MAGIC)
    basis = BasisSpec(header['kind'], tuple(header['shape']), arrays['scaling'],
                      arrays['labels'], header.get('levels', 0), arrays.get('matrix'),
                      arrays.get('permutation'))
    estimate = None
    if 'variances' in arrays:
        estimate = CovarianceEstimate(arrays['mean'], arrays['variances'], header['count'])
    return basis, estimate
