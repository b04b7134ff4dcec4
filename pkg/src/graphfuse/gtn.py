"""GTN binary tensor format and named tensor archives.

Layout of a single tensor::

    b"GTN1" | u32 ndim | ndim x u32 dims | row-major float32 payload

All integers and floats are little-endian. Archives are zip files holding one
``<name>.gtn`` member per tensor plus an optional ``manifest.json``.
"""

from __future__ import annotations

import json
import os
import struct
import zipfile
from typing import Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import DataError
from .tensor import Tensor

MAGIC = b"GTN1"
PathLike = Union[str, os.PathLike]


def encode(x: Union[Tensor, np.ndarray]) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = np.asarray(arr, dtype="<f4", order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise DataError("not a GTN tensor (bad magic)")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * ndim
    if len(buf) < off:
        raise DataError("truncated GTN header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = int(np.prod(dims)) if ndim else 1
    if len(buf) != off + 4 * count:
        raise DataError(f"GTN payload has {len(buf) - off} bytes, expected {4 * count} for dims {dims}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def save(path: PathLike, x: Union[Tensor, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(x))


def load(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def save_archive(
    path: PathLike,
    tensors: Mapping[str, Union[Tensor, np.ndarray]],
    manifest: Optional[dict] = None,
) -> None:
    """Write ``name -> tensor`` into a zip archive, with a JSON manifest."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(tensors):
            # fixed timestamp keeps archives byte-identical across runs
            info = zipfile.ZipInfo(f"{name}.gtn", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, encode(tensors[name]))
        if manifest is not None:
            info = zipfile.ZipInfo("manifest.json", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))


def load_archive(path: PathLike) -> Tuple[Dict[str, np.ndarray], Optional[dict]]:
    tensors: Dict[str, np.ndarray] = {}
    manifest = None
    with zipfile.ZipFile(path, "r") as zf:
        for name in zf.namelist():
            if name == "manifest.json":
                manifest = json.loads(zf.read(name).decode("utf-8"))
            elif name.endswith(".gtn"):
                tensors[name[: -len(".gtn")]] = decode(zf.read(name))
    return tensors, manifest


__all__ = ["MAGIC", "decode", "encode", "load", "load_archive", "save", "save_archive"]
