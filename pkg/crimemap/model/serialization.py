"""
Model file format.

    magic      8 bytes  b"CMAPMDL\\n"
    version    uint16 little-endian
    header     uint32 length + canonical JSON (arch, seed, multipliers, tensor table)
    tensors    raw little-endian arrays in header order
    checksum   SHA-256 of everything above
"""

import hashlib
import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from ..errors import CorruptModelError, ShapeError
from .arch import ArchSpec
from .params import ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"CMAPMDL\n"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<HI")
_DIGEST_SIZE = hashlib.sha256().digest_size
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def params_to_bytes(params: ModelParams) -> bytes:
    table: List[Dict[str, Any]] = []
    blobs: List[bytes] = []
    for index, layer in enumerate(params.tensors):
        for name in sorted(layer):
            tensor = layer[name]
            dtype = tensor.dtype.newbyteorder("<")
            table.append(
                {
                    "layer": index,
                    "name": name,
                    "shape": list(tensor.shape),
                    "dtype": dtype.str,
                }
            )
            blobs.append(np.ascontiguousarray(tensor, dtype=dtype).tobytes())
    header = {
        "arch": params.arch.to_dict(),
        "seed": params.seed,
        "iterations": params.iterations,
        "lr_multipliers": params.lr_multipliers,
        "metadata": params.metadata,
        "tensors": table,
    }
    header_json = json.dumps(header, sort_keys=True, separators=(",", ":"))
    header_bytes = header_json.encode("utf-8")
    prefix = MAGIC + _PREFIX.pack(FORMAT_VERSION, len(header_bytes))
    body = prefix + header_bytes + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def params_from_bytes(data: bytes) -> ModelParams:
    """
    Parse a model file.

    Raises:
        CorruptModelError: On bad magic, version, checksum, or layout
    """
    minimum = len(MAGIC) + _PREFIX.size + _DIGEST_SIZE
    if len(data) < minimum or not data.startswith(MAGIC):
        raise CorruptModelError("Not a crimemap model file")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptModelError("Model file checksum mismatch (truncated or modified)")
    version, header_len = _PREFIX.unpack_from(body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CorruptModelError(
            f"Unsupported model format version {version} (expected {FORMAT_VERSION})"
        )
    offset = len(MAGIC) + _PREFIX.size
    try:
        header = json.loads(body[offset : offset + header_len].decode("utf-8"))
        offset += header_len
        arch = ArchSpec.from_dict(header["arch"])
        tensors: List[Dict[str, np.ndarray]] = [{} for _ in arch.layers]
        for entry in header["tensors"]:
            dtype = _DTYPES[entry["dtype"]]
            count = int(np.prod(entry["shape"], dtype=np.int64))
            size = count * dtype.itemsize
            if offset + size > len(body):
                raise CorruptModelError("Tensor data runs past the end of the file")
            array = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
            tensor = array.reshape(entry["shape"]).copy()
            tensors[entry["layer"]][entry["name"]] = tensor
            offset += size
        if offset != len(body):
            raise CorruptModelError("Trailing bytes after tensor data")
        params = ModelParams(
            arch=arch,
            tensors=tensors,
            seed=int(header["seed"]),
            lr_multipliers=[float(m) for m in header["lr_multipliers"]],
            iterations=int(header["iterations"]),
            metadata=header.get("metadata", {}),
        )
    except (ValueError, KeyError, TypeError, IndexError, ShapeError) as e:
        raise CorruptModelError(f"Malformed model header: {e}") from e
    if not params.is_finite():
        raise CorruptModelError("Model file contains non-finite weights")
    return params


def save_params(params: ModelParams, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(params_to_bytes(params))
    os.replace(tmp, path)
    logger.debug(f"Saved model to {path}")


def load_params(path: Union[str, Path]) -> ModelParams:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CorruptModelError(f"Cannot read model file {path}: {e}") from e
    return params_from_bytes(data)
