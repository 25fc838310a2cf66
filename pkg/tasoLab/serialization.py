"""TSR1 binary tensor container.

Layout: magic ``b"TSR1"``, u8 dtype code (1 = float32, 2 = float64), u8 ndim,
ndim x u64 little-endian dims, then the row-major little-endian payload.
"""
from pathlib import Path
from typing import BinaryIO, Union
import struct

import numpy as np
from loguru import logger

from .autodiff import Matrix
from .utils import SchemaError

MAGIC = b"TSR1"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}

TensorLike = Union[Matrix, np.ndarray]


def _serialize(file: BinaryIO, tensor: TensorLike) -> None:
    array = tensor.data if isinstance(tensor, Matrix) else np.asarray(tensor)
    if array.dtype not in _CODE_OF:
        array = array.astype(np.float64)
    code = _CODE_OF[array.dtype]
    file.write(MAGIC)
    file.write(struct.pack("<BB", code, array.ndim))
    file.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    file.write(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes(order="C"))


def _deserialize(file: BinaryIO, source: str) -> np.ndarray:
    magic = file.read(4)
    if magic != MAGIC:
        raise SchemaError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    header = file.read(2)
    if len(header) != 2:
        raise SchemaError(f"{source}: truncated header")
    code, ndim = struct.unpack("<BB", header)
    if code not in DTYPE_CODES:
        raise SchemaError(f"{source}: unknown dtype code {code}")
    raw_dims = file.read(8 * ndim)
    if len(raw_dims) != 8 * ndim:
        raise SchemaError(f"{source}: truncated dimensions")
    shape = struct.unpack(f"<{ndim}Q", raw_dims)
    dtype = DTYPE_CODES[code]
    count = int(np.prod(shape)) if ndim else 1
    payload = file.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise SchemaError(f"{source}: payload holds {len(payload)} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path: Union[str, Path], tensor: TensorLike) -> Path:
    """Write one tensor as a TSR1 file.

    Args:
        path: Destination file
        tensor: Matrix or numpy array (float32/float64; other dtypes are stored as float64)

    Returns:
        Path: The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        _serialize(f, tensor)
    logger.debug(f"Wrote TSR1 tensor {path}")
    return path


def load_array(path: Union[str, Path]) -> np.ndarray:
    """Read a TSR1 file into a numpy array of its stored dtype and shape."""
    with open(path, "rb") as f:
        array = _deserialize(f, str(path))
        if f.read(1):
            raise SchemaError(f"{path}: trailing bytes after payload")
    return array


def load_tensor(path: Union[str, Path], *, trainable: bool = False, name: str = None) -> Matrix:
    """Read a TSR1 file holding a 1-D or 2-D tensor as a Matrix."""
    array = load_array(path)
    if array.ndim > 2:
        raise SchemaError(f"{path}: a Matrix needs at most 2 dimensions, got {array.ndim}")
    return Matrix(array, trainable=trainable, name=name, dtype=array.dtype)
