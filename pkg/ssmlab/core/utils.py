"""
Utility functions for output files, checksums, and the binary container.
"""
import io
import json
import struct
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd

from ssmlab.core.errors import SSMLabError

MAGIC = b'SSMC'
VERSION = 1

KIND_COEFFICIENTS = 1
KIND_TRAJECTORY = 2
KIND_PARAMS = 3
KIND_DATASET = 4

MODE_CONTINUOUS = 0b01
MODE_COMPLEX = 0b10

# magic, version, kind, tag, T, N, D, mode flag, metadata length
_HEADER = struct.Struct('<4sHBBIIIBI')
_ARRAY_HEAD = struct.Struct('<HBB')

CSV_FLOAT_FORMAT = '%.17g'


@dataclass
class Container:
    """Decoded contents of a binary container file."""
    kind: int
    tag: int = 0
    T: int = 0
    N: int = 0
    D: int = 0
    mode: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)


def ensure_output_dir(path: Union[str, Path]) -> Path:
    """Ensure output directory exists."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def bytes_checksum(data: bytes) -> str:
    """SHA-256 hex digest of a byte string."""
    return hashlib.sha256(data).hexdigest()


def file_checksum(file_path: Union[str, Path]) -> str:
    """SHA-256 hex digest of a file, read in chunks."""
    digest = hashlib.sha256()
    with open(file_path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def container_to_bytes(container: Container) -> bytes:
    """
    Serialize a container to its flat little-endian layout.

    Every array is stored as float64; complex arrays are stored as
    interleaved (real, imaginary) pairs and flagged per array.
    """
    meta = json.dumps(container.meta, sort_keys=True).encode('utf-8')
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, container.kind, container.tag,
                           container.T, container.N, container.D,
                           container.mode, len(meta)))
    buf.write(meta)
    buf.write(struct.pack('<I', len(container.arrays)))
    for name, array in container.arrays.items():
        array = np.asarray(array)
        is_complex = np.iscomplexobj(array)
        encoded = name.encode('utf-8')
        buf.write(_ARRAY_HEAD.pack(len(encoded), array.ndim, int(is_complex)))
        buf.write(encoded)
        buf.write(struct.pack(f'<{array.ndim}I', *array.shape))
        if is_complex:
            flat = np.stack([array.real, array.imag], axis=-1)
        else:
            flat = array
        buf.write(np.ascontiguousarray(flat, dtype='<f8').tobytes())
    return buf.getvalue()


def container_from_bytes(data: bytes) -> Container:
    """Parse bytes produced by `container_to_bytes`."""
    if len(data) < _HEADER.size:
        raise SSMLabError('Container truncated: header incomplete')
    magic, version, kind, tag, T, N, D, mode, meta_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SSMLabError(f'Not a container file (magic {magic!r})')
    if version != VERSION:
        raise SSMLabError(f'Unsupported container version: {version}')

    offset = _HEADER.size
    meta = json.loads(data[offset:offset + meta_len].decode('utf-8')) if meta_len else {}
    offset += meta_len
    (count,) = struct.unpack_from('<I', data, offset)
    offset += 4

    arrays = {}
    for _ in range(count):
        name_len, ndim, is_complex = _ARRAY_HEAD.unpack_from(data, offset)
        offset += _ARRAY_HEAD.size
        name = data[offset:offset + name_len].decode('utf-8')
        offset += name_len
        shape = struct.unpack_from(f'<{ndim}I', data, offset)
        offset += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) * (2 if is_complex else 1)
        flat = np.frombuffer(data, dtype='<f8', count=size, offset=offset).astype(np.float64)
        offset += 8 * size
        if is_complex:
            pairs = flat.reshape(tuple(shape) + (2,))
            arrays[name] = pairs[..., 0] + 1j * pairs[..., 1]
        else:
            arrays[name] = flat.reshape(shape)
    return Container(kind=kind, tag=tag, T=T, N=N, D=D, mode=mode, meta=meta, arrays=arrays)


def write_container(path: Union[str, Path], container: Container) -> str:
    """
    Write a container to disk.

    Returns:
        SHA-256 checksum of the written bytes
    """
    data = container_to_bytes(container)
    ensure_output_dir(Path(path).parent)
    with open(path, 'wb') as f:
        f.write(data)
    return bytes_checksum(data)


def read_container(path: Union[str, Path], expected_kind: Optional[int] = None) -> Container:
    """Read a container from disk, optionally enforcing its kind byte."""
    with open(path, 'rb') as f:
        container = container_from_bytes(f.read())
    if expected_kind is not None and container.kind != expected_kind:
        raise SSMLabError(
            f'{path}: expected container kind {expected_kind}, found {container.kind}'
        )
    return container


def write_csv(df: pd.DataFrame, path: Union[str, Path]) -> str:
    """Write a DataFrame as plot-ready CSV with a stable float format."""
    ensure_output_dir(Path(path).parent)
    df.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator='\n')
    return str(path)


def to_builtin(value: Any) -> Any:
    """Convert numpy scalars/arrays inside reports to JSON-serializable values."""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, complex):
        return {'re': value.real, 'im': value.imag}
    return value


def write_report(report: Dict[str, Any], path: Union[str, Path]) -> str:
    """Write a structured (nestable key-value) report as JSON."""
    ensure_output_dir(Path(path).parent)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(to_builtin(report), f, indent=2, sort_keys=True)
        f.write('\n')
    return str(path)
