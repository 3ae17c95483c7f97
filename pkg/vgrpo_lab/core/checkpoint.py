"""
Policy snapshot files.

Layout: one line of compact JSON holding an array of ``{name, shape, offset}``
entries (offset in bytes into the payload), a newline, then the raw
little-endian float64 payload. The writer is deterministic so repeated runs
produce byte-identical files.
"""
import json
import logging
import os
from typing import Dict, List

import numpy as np

from ..utils.exceptions import ConfigurationError
from .layers import Activation, MlpParams

logger = logging.getLogger(__name__)

_DTYPE = np.dtype("<f8")


def save_arrays(path: str, arrays: Dict[str, np.ndarray]):
    """Write named arrays in insertion order."""
    manifest: List[dict] = []
    offset = 0
    for name, array in arrays.items():
        manifest.append({"name": name, "shape": list(np.shape(array)), "offset": offset})
        offset += int(np.size(array)) * _DTYPE.itemsize

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(manifest, separators=(",", ":")).encode("utf-8"))
        f.write(b"\n")
        for array in arrays.values():
            f.write(np.ascontiguousarray(array, dtype=_DTYPE).tobytes())
    logger.debug(f"Wrote {len(manifest)} arrays ({offset} bytes) to {path}")


def load_arrays(path: str) -> Dict[str, np.ndarray]:
    """Read a file written by ``save_arrays``."""
    if not os.path.exists(path):
        raise ConfigurationError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        header = f.readline()
        payload = f.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"corrupt checkpoint manifest in {path}: {e}")

    arrays = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + count * _DTYPE.itemsize
        if end > len(payload):
            raise ConfigurationError(f"checkpoint {path} truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload[start:end], dtype=_DTYPE).reshape(shape).copy()
    return arrays


def save_params(path: str, params: MlpParams):
    save_arrays(path, {name: t.data for name, t in params.named_tensors()})
    logger.info(f"Checkpoint written: {path}")


def load_params(path: str, activation: Activation) -> MlpParams:
    params = MlpParams.from_arrays(load_arrays(path), activation)
    logger.info(f"Checkpoint loaded: {path} ({params.parameter_count()} parameters)")
    return params
