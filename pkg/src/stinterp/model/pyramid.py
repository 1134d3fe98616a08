"""Weight-shared pyramid encoder and the coarse-to-fine deformation decoder."""
from __future__ import annotations

from ..ops import ShapeError, upsample_nearest
from ..tensor import concat, relu
from .layers import Conv2d

PYRAMID_LEVELS = 3
CONVS_PER_LEVEL = 4


class PyramidEncoder:
    """Three levels of four conv+ReLU layers over the fused features.

    Level 1 works at the incoming (backbone) resolution; each deeper level
    leads with a stride-2 layer, so the level extents are H', H'/2, H'/4.
    The finest level keeping full feature resolution is what lets the
    synthesizer recover the patch with a single sub-pixel upsample. Both
    anchors are encoded by the same weights.
    """

    def __init__(self, params, path, in_channels, channels=32, rng=None, dtype=None):
        self.channels = channels
        self.levels = []
        prev = in_channels
        for lv in range(1, PYRAMID_LEVELS + 1):
            stride = 1 if lv == 1 else 2
            convs = [Conv2d(params, f"{path}.level{lv}.conv1", prev, channels, stride=stride,
                            rng=rng, dtype=dtype)]
            for i in range(2, CONVS_PER_LEVEL + 1):
                convs.append(Conv2d(params, f"{path}.level{lv}.conv{i}", channels, channels, rng=rng, dtype=dtype))
            self.levels.append(convs)
            prev = channels

    def encode_one(self, x):
        if min(x.shape[2], x.shape[3]) < 2 ** (PYRAMID_LEVELS - 1):
            raise ShapeError(
                f"input {x.shape[2]}x{x.shape[3]} too small to halve {PYRAMID_LEVELS - 1} times"
            )
        feats = []
        h = x
        for convs in self.levels:
            for conv in convs:
                h = relu(conv(h))
            feats.append(h)
        return feats

    def __call__(self, x0, x1):
        if x0.shape != x1.shape:
            raise ShapeError(f"anchor features differ in shape: {x0.shape} vs {x1.shape}")
        return list(zip(self.encode_one(x0), self.encode_one(x1)))


class DeformationDecoder:
    """Emits bidirectional coarse deformation features per pyramid level.

    The coarsest block maps concat(a, b) -> flow; finer blocks additionally
    take the 2x-upsampled coarser flow. Each level owns its weights, but the
    two directions share them through the mirrored concat order, so swapping
    the anchors swaps the two output streams exactly.
    """

    def __init__(self, params, path, channels=32, rng=None, dtype=None):
        self.channels = channels
        self.blocks = []
        for lv in range(1, PYRAMID_LEVELS + 1):
            in_ch = 2 * channels if lv == PYRAMID_LEVELS else 3 * channels
            conv1 = Conv2d(params, f"{path}.level{lv}.conv1", in_ch, channels, rng=rng, dtype=dtype)
            conv2 = Conv2d(params, f"{path}.level{lv}.conv2", channels, channels, rng=rng, dtype=dtype)
            self.blocks.append((conv1, conv2))

    def _run_block(self, lv, parts):
        conv1, conv2 = self.blocks[lv]
        h = relu(conv1(concat(parts, axis=1)))
        return conv2(h)

    def __call__(self, level_feats):
        if len(level_feats) != PYRAMID_LEVELS:
            raise ShapeError(f"expected {PYRAMID_LEVELS} pyramid levels, got {len(level_feats)}")
        coarse = PYRAMID_LEVELS - 1
        f0, f1 = level_feats[coarse]
        fwd = self._run_block(coarse, [f0, f1])
        bwd = self._run_block(coarse, [f1, f0])
        flows = [None] * PYRAMID_LEVELS
        flows[coarse] = (fwd, bwd)
        for lv in range(coarse - 1, -1, -1):
            f0, f1 = level_feats[lv]
            up_fwd = upsample_nearest(fwd, f0.shape[2], f0.shape[3])
            up_bwd = upsample_nearest(bwd, f0.shape[2], f0.shape[3])
            fwd = self._run_block(lv, [up_fwd, f0, f1])
            bwd = self._run_block(lv, [up_bwd, f1, f0])
            flows[lv] = (fwd, bwd)
        return flows
