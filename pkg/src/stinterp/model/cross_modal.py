"""Per-modality feature extraction and gated cross-modal fusion.

Each modality (H&E, expression) gets its own small trainable backbone; the
two anchor slices share all weights, so swapping the anchors swaps the
outputs exactly. The gate concatenates both modalities, squeezes them
through two 1x1 convolutions and multiplies the expression features by the
resulting sigmoid attention map.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..ops import ShapeError
from ..tensor import Tensor, concat, relu, sigmoid
from .layers import Conv2d


@dataclass
class GateResult:
    cat: Tensor  # concatenated [he; st] features
    pre_gate: Tensor  # ReLU output feeding the gate conv
    weights: Tensor  # sigmoid attention map, strictly in (0,1)
    fused: Tensor  # st features scaled by the attention map


class ModalityBackbone:
    """Two stride-1 conv blocks then one stride-2 block, ReLU throughout."""

    def __init__(self, params, path, in_channels, out_channels=16, rng=None, dtype=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv1 = Conv2d(params, f"{path}.conv1", in_channels, out_channels, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(params, f"{path}.conv2", out_channels, out_channels, rng=rng, dtype=dtype)
        self.conv3 = Conv2d(params, f"{path}.conv3", out_channels, out_channels, stride=2, rng=rng, dtype=dtype)

    def __call__(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"backbone expects {self.in_channels} channels, got {x.shape[1]}")
        if min(x.shape[2], x.shape[3]) < 4:
            raise ShapeError(f"backbone needs spatial extent >= 4, got {x.shape[2]}x{x.shape[3]}")
        h = relu(self.conv1(x))
        h = relu(self.conv2(h))
        return relu(self.conv3(h))


class GatedFusion:
    def __init__(self, params, path, he_channels, st_channels, hidden=32, rng=None, dtype=None):
        self.he_channels = he_channels
        self.st_channels = st_channels
        self.conv1 = Conv2d(params, f"{path}.conv1", he_channels + st_channels, hidden,
                            kernel=1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(params, f"{path}.conv2", hidden, st_channels,
                            kernel=1, rng=rng, dtype=dtype)

    def __call__(self, he_feat, st_feat):
        if he_feat.shape[2:] != st_feat.shape[2:]:
            raise ShapeError(f"spatial mismatch: {he_feat.shape} vs {st_feat.shape}")
        if he_feat.shape[1] != self.he_channels or st_feat.shape[1] != self.st_channels:
            raise ShapeError(
                f"channel mismatch: got ({he_feat.shape[1]}, {st_feat.shape[1]}), "
                f"expected ({self.he_channels}, {self.st_channels})"
            )
        cat = concat([he_feat, st_feat], axis=1)
        pre = relu(self.conv1(cat))
        gate = sigmoid(self.conv2(pre))
        return GateResult(cat=cat, pre_gate=pre, weights=gate, fused=st_feat * gate)
