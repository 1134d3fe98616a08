"""The CTF tensor file format and directory checkpoints.

Layout (little-endian throughout)::

    "CTF1" | dtype code u8 (0 = f32, 1 = f64) | ndim u8 | ndim x u32 extents |
    row-major payload of scalars

A checkpoint is a directory with one CTF file per parameter (file path =
parameter path with '.' replaced by '/') plus ``manifest.json`` listing the
paths, shapes and the optimizer step.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CTF1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
MAX_ELEMENTS = 2**31  # refuse to allocate absurd extents from hostile headers
MANIFEST_NAME = "manifest.json"


class CTFError(Exception):
    code = "ctf_error"


class BadMagicError(CTFError):
    code = "bad_magic"


class TruncatedPayloadError(CTFError):
    code = "truncated_payload"


class ExtentOverflowError(CTFError):
    code = "extent_overflow"


class InvalidHeaderError(CTFError):
    code = "invalid_header"


def write_ctf(path, array):
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise InvalidHeaderError(f"unsupported dtype {array.dtype}; use float32 or float64")
    if array.ndim > 255:
        raise InvalidHeaderError(f"too many dimensions: {array.ndim}")
    for e in array.shape:
        if e < 1 or e >= 2**32:
            raise InvalidHeaderError(f"extent out of range for u32: {e}")
    code = _CODES[array.dtype]
    header = MAGIC + bytes([code, array.ndim])
    header += b"".join(struct.pack("<I", e) for e in array.shape)
    payload = np.ascontiguousarray(array).astype(_DTYPES[code], copy=False).tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + payload)


def read_ctf(path):
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"not a CTF file (magic {buf[:4]!r}): {path}")
    if len(buf) < 6:
        raise TruncatedPayloadError(f"header cut short in {path}")
    code, ndim = buf[4], buf[5]
    if code not in _DTYPES:
        raise InvalidHeaderError(f"unknown dtype code {code} in {path}")
    offset = 6 + 4 * ndim
    if len(buf) < offset:
        raise TruncatedPayloadError(f"extent list cut short in {path}")
    extents = struct.unpack(f"<{ndim}I", buf[6:offset]) if ndim else ()
    count = 1
    for e in extents:
        if e == 0:
            raise InvalidHeaderError(f"zero extent in {path}")
        count *= e
        if count > MAX_ELEMENTS:
            raise ExtentOverflowError(f"extents {extents} exceed the element limit in {path}")
    dtype = _DTYPES[code]
    needed = count * dtype.itemsize
    if len(buf) - offset < needed:
        raise TruncatedPayloadError(
            f"payload holds {len(buf) - offset} bytes, header promises {needed} in {path}"
        )
    if len(buf) - offset > needed:
        raise InvalidHeaderError(f"{len(buf) - offset - needed} trailing bytes in {path}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    native = np.float32 if code == 0 else np.float64
    return arr.astype(native, copy=True).reshape(extents)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


class CheckpointMismatchError(RuntimeError):
    def __init__(self, path, detail):
        super().__init__(f"checkpoint/model mismatch at '{path}': {detail}")
        self.path = path


def save_checkpoint(directory, params, step, model_meta=None):
    """Write every parameter as a CTF file under ``directory`` plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for path, tensor in params.items():
        write_ctf(directory / path.replace(".", "/"), tensor.data)
        entries[path] = {"shape": list(tensor.data.shape), "dtype": str(tensor.data.dtype)}
    manifest = {
        "format": "ctf-checkpoint-v1",
        "step": int(step),
        "model": model_meta or {},
        "params": entries,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(directory):
    """Read a checkpoint directory back into (arrays, step, model_meta)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(manifest_path.read_text())
    arrays = {}
    for path, entry in manifest["params"].items():
        arr = read_ctf(directory / path.replace(".", "/"))
        if list(arr.shape) != list(entry["shape"]):
            raise CheckpointMismatchError(path, f"file shape {arr.shape} vs manifest {entry['shape']}")
        arrays[path] = arr
    return arrays, int(manifest["step"]), manifest.get("model", {})


def apply_checkpoint(params, arrays):
    """Load checkpoint arrays into a parameter registry, rejecting on the
    first (lexicographic) path whose shape or presence disagrees."""
    for path in sorted(set(params.paths()) | set(arrays)):
        if path not in arrays:
            raise CheckpointMismatchError(path, "missing from checkpoint")
        if path not in params:
            raise CheckpointMismatchError(path, "not a model parameter")
        src, dst = arrays[path], params[path]
        if src.shape != dst.data.shape:
            raise CheckpointMismatchError(path, f"shape {src.shape} vs model {dst.data.shape}")
    for path, t in params.items():
        t.data = arrays[path].astype(t.data.dtype, copy=True)
