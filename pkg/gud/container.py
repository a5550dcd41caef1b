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

"""Self-describing binary containers for float64 arrays.

All the binary files written by the package (bases, samples and network
checkpoints) share the same layout:

=============  ================================================================
Field          Content
=============  ================================================================
magic          fixed ASCII string identifying the file type (e.g., GUDBASIS)
version        one unsigned byte
header size    little-endian unsigned 32-bit integer
header         UTF-8 encoded json object, including the list of arrays
payload        the arrays, in header order, as little-endian 64-bit floats
=============  ================================================================

Each entry of the header ``arrays`` list is a ``[name, shape]`` pair, and the
payload is the concatenation of the row-major array buffers.
"""

import json
import struct

from typing import Dict, Tuple

import numpy as np
from loguru import logger

from gud.helpers import FormatError, check_input_file


CONTAINER_VERSION = 1
_LENGTH_FORMAT = '<I'
_DTYPE = np.dtype('<f8')


def write_container(file_path: str, magic: bytes, header: dict,
                    arrays: Dict[str, np.ndarray]) -> None:
    """Write a set of arrays to a binary container.

    Parameters
    ----------
    file_path : str
        The path to the output file.
    magic : bytes
        The magic string identifying the file type.
    header : dict
        Additional json-serializable header information.
    arrays : dict
        The arrays to be written, indexed by name. Mind the order of the
        dictionary is preserved in the output file.
    """
    header = dict(header)
    header['arrays'] = [[name, list(np.shape(array))] for name, array in arrays.items()]
    header_data = json.dumps(header, sort_keys=True).encode('utf-8')
    logger.info(f'Writing {magic.decode()} container to {file_path}...')
    with open(file_path, 'wb') as output_file:
        output_file.write(magic)
        output_file.write(struct.pack('<B', CONTAINER_VERSION))
        output_file.write(struct.pack(_LENGTH_FORMAT, len(header_data)))
        output_file.write(header_data)
        for array in arrays.values():
            output_file.write(np.ascontiguousarray(array, dtype=_DTYPE).tobytes())
    logger.info('Done.')


def read_container(file_path: str, magic: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Read a binary container written by write_container().

    Returns
    -------
    header, arrays : dict, dict
        The json header (with the ``arrays`` entry removed) and the arrays,
        indexed by name.
    """
    check_input_file(file_path)
    logger.info(f'Reading {magic.decode()} container from {file_path}...')
    with open(file_path, 'rb') as input_file:
        data = input_file.read()
    if not data.startswith(magic):
        raise FormatError(f'{file_path} is not a {magic.decode()} container')
    offset = len(magic)
    if len(data) < offset + 5:
        raise FormatError(f'Truncated header in {file_path}')
    version, = struct.unpack_from('<B', data, offset)
    if version != CONTAINER_VERSION:
        raise FormatError(f'Unsupported container version {version} in {file_path}')
    header_size, = struct.unpack_from(_LENGTH_FORMAT, data, offset + 1)
    offset += 5
    try:
        header = json.loads(data[offset:offset + header_size].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exception:
        raise FormatError(f'Malformed header in {file_path}: {exception}') from exception
    offset += header_size
    arrays = {}
    for name, shape in header.pop('arrays', []):
        size = int(np.prod(shape, dtype=np.int64))
        num_bytes = size * _DTYPE.itemsize
        if offset + num_bytes > len(data):
            raise FormatError(f'Truncated payload for array "{name}" in {file_path}')
        if size == 0:
            arrays[name] = np.zeros(shape)
            continue
        buffer = np.frombuffer(data, dtype=_DTYPE, count=size, offset=offset)
        arrays[name] = buffer.astype(np.float64).reshape(shape)
        offset += num_bytes
    if offset != len(data):
        raise FormatError(f'{len(data) - offset} trailing bytes in {file_path}')
    return header, arrays
