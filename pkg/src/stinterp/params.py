"""Learnable parameter registry with stable, checkpointable paths."""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


class DuplicateParameterError(ValueError):
    pass


class ModelParams:
    """Maps dotted path strings (e.g. ``"pyramid.level1.conv2.weight"``) to
    gradient-enabled Tensors. Iteration order is lexicographic by path so
    optimizer sweeps and checkpoints are deterministic across runs."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def register(self, path, tensor):
        if path in self._entries:
            raise DuplicateParameterError(f"parameter path already registered: {path}")
        tensor.requires_grad = True
        self._entries[path] = tensor
        return tensor

    def create(self, path, array):
        return self.register(path, Tensor(np.asarray(array)))

    def __getitem__(self, path):
        return self._entries[path]

    def __contains__(self, path):
        return path in self._entries

    def __len__(self):
        return len(self._entries)

    def paths(self):
        return sorted(self._entries)

    def items(self):
        for path in self.paths():
            yield path, self._entries[path]

    def __iter__(self):
        return iter(self.paths())

    def tensors(self):
        return [self._entries[p] for p in self.paths()]

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def total_size(self):
        return sum(t.size for t in self._entries.values())

    def arrays(self):
        return {p: t.data for p, t in self.items()}

    def load_arrays(self, arrays, strict=True):
        """Overwrite parameter values in place; shapes must match exactly."""
        for path in self.paths():
            if path not in arrays:
                if strict:
                    raise KeyError(f"missing parameter in source: {path}")
                continue
            src = np.asarray(arrays[path])
            dst = self._entries[path]
            if src.shape != dst.data.shape:
                raise ValueError(f"shape mismatch at {path}: {src.shape} vs {dst.data.shape}")
            dst.data = src.astype(dst.data.dtype, copy=True)
        if strict:
            extra = set(arrays) - set(self._entries)
            if extra:
                raise KeyError(f"unknown parameter in source: {sorted(extra)[0]}")


# ----------------------------------------------------------------------
# initializers
# ----------------------------------------------------------------------


def he_uniform(shape, fan_in, rng, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def zeros(shape, dtype):
    return np.zeros(shape, dtype=dtype)


def eye_projection(out_dim, in_dim, dtype):
    """Rectangular identity: passes the first min(out,in) channels through."""
    w = np.zeros((out_dim, in_dim), dtype=dtype)
    for i in range(min(out_dim, in_dim)):
        w[i, i] = 1.0
    return w
