"""Position-aware modulation of deformation features and deformable fusion.

The interpolation depth of each missing slice is turned into a position in
(0,1), weighted by the histology gradient magnitude so structurally busy
intervals attract the sampling points. Each position then re-weights the
deformation features through a channel branch (pooled stats + position
embedding -> channel gates) and a spatial branch (local conv + broadcast
position embedding -> position-generated depthwise kernel), before three
estimator heads emit per-channel kernels, per-pixel offsets and masks for
the deformable sampling step that fuses the two directions into the output
slice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..data import HEPatch
from ..ops import ShapeError, bilinear_gather, depthwise_conv2d, pixel_shuffle
from ..tensor import Tensor, concat, relu, sigmoid, softplus
from .layers import Conv2d, Linear

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

# regular 3x3 sampling taps, row-major over (dy, dx) in {-1,0,1}^2
TAP_OFFSETS = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64)
KERNEL_TAPS = len(TAP_OFFSETS)


@dataclass
class PositionSet:
    count: int
    delta_d: float
    alpha: float
    weights: np.ndarray  # mean-1 normalized gradient weights, one per position
    positions: np.ndarray  # strictly increasing, all in (0,1)


@dataclass
class ModulatedFeature:
    channel_part: object
    spatial_part: object
    combined: object


@dataclass
class DeformParams:
    kernels: object  # [B,C,3,3], each channel's taps sum to 1
    offsets: object  # [B,2K,H,W], (dy,dx) interleaved per tap
    masks: object  # [B,K,H,W], sigmoid outputs in (0,1)


def _gray(image):
    if isinstance(image, HEPatch):
        image = image.rgb
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=0)
    if arr.ndim != 2:
        raise ValueError(f"expected [C,H,W] or [H,W] image, got shape {arr.shape}")
    return arr


def sobel_magnitude(image):
    """sqrt(Gx^2 + Gy^2) with the standard 3x3 Sobel kernels.

    The border is edge-padded so a constant image has zero response
    everywhere, keeping the gradient map a pure structure detector.
    """
    if isinstance(image, Tensor):
        arr = image.data
    else:
        arr = np.asarray(image)
    squeeze = arr.ndim == 3
    if squeeze:
        if arr.shape[0] != 1:
            raise ValueError(f"sobel_magnitude expects a single channel, got {arr.shape}")
        arr = arr[0]
    padded = np.pad(arr.astype(np.float64), 1, mode="edge")
    win = sliding_window_view(padded, (3, 3))
    gx = np.einsum("hwij,ij->hw", win, SOBEL_X)
    gy = np.einsum("hwij,ij->hw", win, SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    out = mag[None] if squeeze else mag
    return Tensor(out) if isinstance(image, Tensor) else out


def _monotone_unit_interval(raw):
    """Rescale a positive sequence into (0,1), preserving strict order."""
    r = np.array(raw, dtype=np.float64)
    for i in range(1, len(r)):
        if r[i] <= r[i - 1]:
            r[i] = r[i - 1] + 1e-9
    if r[-1] >= 1.0:
        r = r * ((len(r) / (len(r) + 1.0)) / r[-1])
    return r


def compute_positions(he0, he1, s, alpha, delta_d=1.0):
    """Adaptive interpolation depths from the anchors' gradient magnitudes.

    With alpha = 0 the result is exactly the uniform grid i/(s+1). Otherwise
    the mean Sobel magnitude of the two anchors is interpolated at each base
    depth, turned into weights 1 + alpha * g, normalized to mean 1, and used
    to scale the base grid (then nudged back into (0,1) if necessary).
    """
    if s < 1:
        raise ValueError(f"need at least one slice to place, got s={s}")
    if alpha < 0:
        raise ValueError(f"gradient scaling must be >= 0, got {alpha}")
    base = np.arange(1, s + 1, dtype=np.float64) / (s + 1)
    if alpha == 0:
        weights = np.ones(s)
        positions = base
    else:
        g0 = float(sobel_magnitude(_gray(he0)).mean())
        g1 = float(sobel_magnitude(_gray(he1)).mean())
        grads = (1.0 - base) * g0 + base * g1
        w = 1.0 + alpha * grads
        weights = w / w.mean()
        positions = _monotone_unit_interval(base * weights)
    return PositionSet(count=s, delta_d=delta_d, alpha=alpha, weights=weights, positions=positions)


class FeatureModulator:
    """Channel and spatial re-weighting of a deformation feature at a depth.

    The forward-direction feature is conditioned on p, the backward one on
    1-p. Output is 0.5 * channel_part + 0.5 * spatial_part.
    """

    BETA = 0.5
    GAMMA = 0.5

    def __init__(self, params, path, channels, pos_dim=16, spatial_pos_dim=8,
                 hidden=32, rng=None, dtype=np.float32):
        self.channels = channels
        self.pos_dim = pos_dim
        self.spatial_pos_dim = spatial_pos_dim
        self.dtype = dtype
        self.pos_embed = Linear(params, f"{path}.pos_embed", 1, pos_dim, rng=rng, dtype=dtype)
        self.channel_fc1 = Linear(params, f"{path}.channel_fc1", channels + pos_dim, hidden,
                                  rng=rng, dtype=dtype)
        self.channel_fc2 = Linear(params, f"{path}.channel_fc2", hidden, channels, rng=rng, dtype=dtype)
        self.local_conv = Conv2d(params, f"{path}.local_conv", channels, channels, rng=rng, dtype=dtype)
        self.spatial_embed = Linear(params, f"{path}.spatial_embed", 1, spatial_pos_dim,
                                    rng=rng, dtype=dtype)
        self.fuse_conv1 = Conv2d(params, f"{path}.fuse_conv1", channels + spatial_pos_dim, channels,
                                 kernel=1, rng=rng, dtype=dtype)
        self.fuse_conv2 = Conv2d(params, f"{path}.fuse_conv2", channels, channels,
                                 kernel=1, rng=rng, dtype=dtype)
        self.kernel_fc1 = Linear(params, f"{path}.kernel_fc1", spatial_pos_dim, hidden,
                                 rng=rng, dtype=dtype)
        self.kernel_fc2 = Linear(params, f"{path}.kernel_fc2", hidden, channels * KERNEL_TAPS,
                                 rng=rng, dtype=dtype)

    def __call__(self, feat, position, forward_direction=True):
        if not 0.0 < position < 1.0:
            raise ValueError(f"position must lie strictly in (0,1), got {position}")
        q = position if forward_direction else 1.0 - position
        b, c, h, w = feat.shape
        if c != self.channels:
            raise ShapeError(f"modulator expects {self.channels} channels, got {c}")
        pos = Tensor(np.array([[q]], dtype=self.dtype))

        pooled = feat.mean(axis=(2, 3))  # [B,C]
        emb = self.pos_embed(pos).broadcast_to((b, self.pos_dim))
        gates = sigmoid(self.channel_fc2(relu(self.channel_fc1(concat([pooled, emb], axis=1)))))
        channel_part = feat * gates.reshape(b, c, 1, 1)

        local = self.local_conv(feat)
        semb = self.spatial_embed(pos)  # [1, d']
        emb_map = semb.reshape(1, self.spatial_pos_dim, 1, 1).broadcast_to((b, self.spatial_pos_dim, h, w))
        fused = self.fuse_conv2(relu(self.fuse_conv1(concat([local, emb_map], axis=1))))
        kernel = self.kernel_fc2(relu(self.kernel_fc1(semb))).reshape(c, 3, 3)
        spatial_part = depthwise_conv2d(fused, kernel)

        combined = self.BETA * channel_part + self.GAMMA * spatial_part
        return ModulatedFeature(channel_part=channel_part, spatial_part=spatial_part, combined=combined)


class DeformEstimators:
    """Kernel / offset / mask heads over a modulated deformation feature.

    The kernel head pools globally, maps through an MLP, and softplus-
    normalizes so each channel's 9 taps sum to 1. The offset head's final
    convolution is zero-initialized so sampling starts on the regular grid;
    the mask head is sigmoid-bounded in (0,1).
    """

    def __init__(self, params, path, channels, hidden=64, rng=None, dtype=np.float32):
        self.channels = channels
        self.kernel_fc1 = Linear(params, f"{path}.kernel_fc1", channels, hidden, rng=rng, dtype=dtype)
        self.kernel_fc2 = Linear(params, f"{path}.kernel_fc2", hidden, channels * KERNEL_TAPS,
                                 rng=rng, dtype=dtype, init="zero")
        self.offset_conv1 = Conv2d(params, f"{path}.offset_conv1", channels, channels, rng=rng, dtype=dtype)
        self.offset_conv2 = Conv2d(params, f"{path}.offset_conv2", channels, 2 * KERNEL_TAPS,
                                   rng=rng, dtype=dtype, init="zero")
        self.mask_conv = Conv2d(params, f"{path}.mask_conv", channels, KERNEL_TAPS,
                                rng=rng, dtype=dtype, init="zero")

    def __call__(self, feat):
        b, c, h, w = feat.shape
        if c != self.channels:
            raise ShapeError(f"estimators expect {self.channels} channels, got {c}")
        raw = self.kernel_fc2(relu(self.kernel_fc1(feat.mean(axis=(2, 3)))))
        taps = softplus(raw).reshape(b, c, KERNEL_TAPS)
        taps = taps / taps.sum(axis=2, keepdims=True)
        kernels = taps.reshape(b, c, 3, 3)
        offsets = self.offset_conv2(relu(self.offset_conv1(feat)))
        masks = sigmoid(self.mask_conv(feat))
        return DeformParams(kernels=kernels, offsets=offsets, masks=masks)


def deformable_fuse(feat, deform: DeformParams):
    """Deformable 3x3 aggregation of ``feat`` with learned taps.

    out[b,c,y,x] = sum_j k[b,c,j] * m[b,j,y,x] *
                   sample(feat[b,c], y + dy_j + off_y, x + dx_j + off_x)

    Sampling is bilinear with zero padding, so the whole map is total and
    differentiable in the feature map, kernels, offsets and masks.
    """
    b, c, h, w = feat.shape
    if deform.offsets.shape != (b, 2 * KERNEL_TAPS, h, w):
        raise ShapeError(f"offsets must be [B,{2 * KERNEL_TAPS},H,W], got {deform.offsets.shape}")
    if deform.masks.shape != (b, KERNEL_TAPS, h, w):
        raise ShapeError(f"masks must be [B,{KERNEL_TAPS},H,W], got {deform.masks.shape}")
    if deform.kernels.shape != (b, c, 3, 3):
        raise ShapeError(f"kernels must be [B,C,3,3], got {deform.kernels.shape}")
    grid_y, grid_x = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                                 indexing="ij")
    base_y = grid_y[None, None] + TAP_OFFSETS[:, 0].reshape(1, KERNEL_TAPS, 1, 1)
    base_x = grid_x[None, None] + TAP_OFFSETS[:, 1].reshape(1, KERNEL_TAPS, 1, 1)
    off = deform.offsets.reshape(b, KERNEL_TAPS, 2, h, w)
    ys = off[:, :, 0] + base_y.astype(feat.dtype)
    xs = off[:, :, 1] + base_x.astype(feat.dtype)
    sampled = bilinear_gather(feat, ys, xs)  # [B,K,C,H,W]
    m = deform.masks.reshape(b, KERNEL_TAPS, 1, h, w)
    k = deform.kernels.reshape(b, c, KERNEL_TAPS).permute(0, 2, 1).reshape(b, KERNEL_TAPS, c, 1, 1)
    return (sampled * m * k).sum(axis=1)


class SliceSynthesizer:
    """Blend the two direction-fused features and decode to gene maps.

    One conv + sub-pixel shuffle undoes the backbone's 2x downsampling, a
    second conv refines at full resolution, and a 1x1 head plus sigmoid
    emits genes in (0,1) at the original patch size.
    """

    def __init__(self, params, path, channels, genes, up_channels=(32, 16), rng=None, dtype=np.float32):
        c1, c2 = up_channels
        self.genes = genes
        self.conv1 = Conv2d(params, f"{path}.conv1", 3 * channels, 4 * c1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(params, f"{path}.conv2", c1, c2, rng=rng, dtype=dtype)
        self.head = Conv2d(params, f"{path}.head", c2, genes, kernel=1, rng=rng, dtype=dtype)

    def __call__(self, fused0, fused1, position, out_size):
        blend = (1.0 - position) * fused0 + position * fused1
        h = relu(self.conv1(concat([blend, fused0, fused1], axis=1)))
        h = pixel_shuffle(h, 2)
        h = relu(self.conv2(h))
        out = sigmoid(self.head(h))
        if out.shape[2] != out_size or out.shape[3] != out_size:
            raise ShapeError(
                f"synthesized {out.shape[2]}x{out.shape[3]} does not match the "
                f"dataset patch size {out_size}"
            )
        return out
