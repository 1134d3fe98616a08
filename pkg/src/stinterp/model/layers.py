"""Parameterized layers bound to a ModelParams registry.

Layers register their weights under a dotted path at construction time; the
forward call is a pure function of (input, registered tensors), so the same
layer object can be applied to any number of inputs (weight sharing is just
calling it twice).
"""
from __future__ import annotations

import numpy as np

from ..ops import conv2d
from ..params import ModelParams, eye_projection, he_uniform, zeros
from ..tensor import matmul


class Conv2d:
    def __init__(self, params: ModelParams, path, in_channels, out_channels,
                 kernel=3, stride=1, padding=None, bias=True, rng=None,
                 dtype=np.float32, init="he"):
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        shape = (out_channels, in_channels, kernel, kernel)
        if init == "he":
            w = he_uniform(shape, in_channels * kernel * kernel, rng, dtype)
        elif init == "zero":
            w = zeros(shape, dtype)
        elif init == "eye":
            if kernel != 1:
                raise ValueError("identity init is only defined for 1x1 kernels")
            w = eye_projection(out_channels, in_channels, dtype).reshape(shape)
        else:
            raise ValueError(f"unknown init '{init}'")
        self.weight = params.create(f"{path}.weight", w)
        self.bias = params.create(f"{path}.bias", zeros((out_channels,), dtype)) if bias else None

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear:
    """Affine map on the last axis; weight stored as [in, out]."""

    def __init__(self, params: ModelParams, path, in_features, out_features,
                 bias=True, rng=None, dtype=np.float32, init="he"):
        if init == "he":
            w = he_uniform((in_features, out_features), in_features, rng, dtype)
        elif init == "zero":
            w = zeros((in_features, out_features), dtype)
        elif init == "eye":
            w = eye_projection(in_features, out_features, dtype)
        else:
            raise ValueError(f"unknown init '{init}'")
        self.weight = params.create(f"{path}.weight", w)
        self.bias = params.create(f"{path}.bias", zeros((out_features,), dtype)) if bias else None

    def __call__(self, x):
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out
