"""Structured differentiable operations on 4-d feature maps.

Everything here is a primitive of the autodiff engine: forward in vectorized
NumPy, backward as a hand-written vector-Jacobian product verified against
finite differences by the test suite.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import _trace_region, _traced, as_tensor


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def _require_4d(x, name):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-d [B,C,H,W], got shape {x.shape}")


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw] filters.

    Odd kernel extents only; zero padding. Output spatial size is
    ``floor((H + 2*padding - kh) / stride) + 1``.
    """
    _require_4d(x, "conv2d input")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-d [Cout,Cin,kh,kw], got {weight.shape}")
    B, Ci, H, W = x.shape
    Co, Cw, kh, kw = weight.shape
    if Ci != Cw:
        raise ShapeError(
            f"conv2d channel mismatch: input has {Ci} channels but weight expects {Cw} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    oh = (H + 2 * padding - kh) // stride + 1
    ow = (W + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {kh}x{kw}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # contract (Ci, kh, kw) against the filters; tensordot hits BLAS
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = None
        if x.requires_grad:
            # per-output contribution to every (Ci, tap) pair, then col2im
            contrib = np.tensordot(g, weight.data, axes=([1], [0]))  # [B,OH,OW,Ci,kh,kw]
            contrib = np.moveaxis(contrib, 3, 1)  # [B,Ci,OH,OW,kh,kw]
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += contrib[
                        :, :, :, :, i, j
                    ]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        gw = (
            np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [Cout,Ci,kh,kw]
            if weight.requires_grad
            else None
        )
        if bias is None:
            return (gx, gw)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return (gx, gw, gb)

    return _traced(out, parents, bw)


def depthwise_conv2d(x, kernel, padding=None):
    """Per-channel convolution with a [C,kh,kw] kernel, spatial size preserved."""
    _require_4d(x, "depthwise input")
    if kernel.ndim != 3:
        raise ShapeError(f"depthwise kernel must be 3-d [C,kh,kw], got {kernel.shape}")
    B, C, H, W = x.shape
    Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"depthwise channel mismatch: input {C} vs kernel {Ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"depthwise kernel extents must be odd, got {kh}x{kw}")
    if padding is None:
        padding = (kh - 1) // 2
    if padding != (kh - 1) // 2 or (kw - 1) // 2 != padding:
        raise ShapeError("depthwise convolution requires padding = (k-1)/2 on both axes")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = (win * kernel.data[None, :, None, None]).sum(axis=(-2, -1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + H, j : j + W] += g * kernel.data[None, :, i, j, None, None]
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        gk = (win * g[..., None, None]).sum(axis=(0, 2, 3)) if kernel.requires_grad else None
        return (gx, gk)

    return _traced(out, (x, kernel), bw)


# ----------------------------------------------------------------------
# pixel shuffle
# ----------------------------------------------------------------------


def pixel_shuffle(x, r):
    """Rearrange [B, C*r*r, H, W] into [B, C, H*r, W*r] (sub-pixel layout)."""
    _require_4d(x, "pixel_shuffle input")
    if r < 1:
        raise ShapeError(f"pixel_shuffle factor must be >= 1, got {r}")
    B, C, H, W = x.shape
    if C % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle needs channels divisible by r^2={r * r}, got {C}")
    co = C // (r * r)
    data = x.data.reshape(B, co, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, co, H * r, W * r)

    def bw(g):
        return (g.reshape(B, co, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C, H, W),)

    return _traced(data, (x,), bw)


def pixel_unshuffle(x, r):
    """Inverse of :func:`pixel_shuffle` (exact index permutation)."""
    _require_4d(x, "pixel_unshuffle input")
    B, C, H, W = x.shape
    if H % r != 0 or W % r != 0:
        raise ShapeError(f"pixel_unshuffle needs spatial extents divisible by {r}, got {H}x{W}")
    h, w = H // r, W // r
    data = x.data.reshape(B, C, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, C * r * r, h, w)

    def bw(g):
        return (g.reshape(B, C, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(B, C, H, W),)

    return _traced(data, (x,), bw)


# ----------------------------------------------------------------------
# bilinear sampling
# ----------------------------------------------------------------------

_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def bilinear_gather(x, ys, xs):
    """Sample [B,C,H,W] at fractional coordinates, zero outside the image.

    ``ys`` and ``xs`` are [B,K,Ho,Wo] tensors of row/column coordinates; the
    result is [B,K,C,Ho,Wo]. Differentiable in the image and both coordinate
    tensors (piecewise linear in the coordinates).
    """
    _require_4d(x, "bilinear_gather input")
    if ys.shape != xs.shape or ys.ndim != 4:
        raise ShapeError(f"coordinate shapes must match and be 4-d, got {ys.shape} vs {xs.shape}")
    B, C, H, W = x.shape
    if ys.shape[0] != B:
        raise ShapeError(f"coordinate batch {ys.shape[0]} != image batch {B}")
    K, Ho, Wo = ys.shape[1:]

    yd, xd = ys.data, xs.data
    y0 = np.floor(yd)
    x0 = np.floor(xd)
    ty = yd - y0
    tx = xd - x0
    y0i = y0.astype(np.int64)
    x0i = x0.astype(np.int64)
    _trace_region(y0i)
    _trace_region(x0i)

    bidx = np.arange(B).reshape(B, 1, 1, 1)
    vals = []
    masks = []
    for dy, dx in _CORNERS:
        yy = y0i + dy
        xx = x0i + dx
        valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        yc = np.clip(yy, 0, H - 1)
        xc = np.clip(xx, 0, W - 1)
        v = x.data[bidx, :, yc, xc]  # [B,K,Ho,Wo,C]
        v = v * valid[..., None]
        vals.append(v)
        masks.append((valid, yc, xc))
    w00 = (1.0 - ty) * (1.0 - tx)
    w01 = (1.0 - ty) * tx
    w10 = ty * (1.0 - tx)
    w11 = ty * tx
    weights = (w00, w01, w10, w11)
    out = sum(w[..., None] * v for w, v in zip(weights, vals))
    out = np.moveaxis(out, -1, 2)  # [B,K,C,Ho,Wo]

    def bw(g):
        gm = np.moveaxis(g, 2, -1)  # [B,K,Ho,Wo,C]
        gx = None
        if x.requires_grad:
            gxf = np.zeros((B, C, H * W), dtype=x.dtype)
            bI = np.arange(B).reshape(B, 1, 1, 1, 1)
            cI = np.arange(C).reshape(1, 1, 1, 1, C)
            for w, (valid, yc, xc) in zip(weights, masks):
                contrib = (w * valid)[..., None] * gm
                pos = (yc * W + xc)[..., None]
                np.add.at(gxf, (bI, cI, pos), contrib)
            gx = gxf.reshape(B, C, H, W)
        gys = gxs = None
        if ys.requires_grad or xs.requires_grad:
            v00, v01, v10, v11 = vals
            dy_val = (1.0 - tx)[..., None] * (v10 - v00) + tx[..., None] * (v11 - v01)
            dx_val = (1.0 - ty)[..., None] * (v01 - v00) + ty[..., None] * (v11 - v10)
            if ys.requires_grad:
                gys = (gm * dy_val).sum(axis=-1)
            if xs.requires_grad:
                gxs = (gm * dx_val).sum(axis=-1)
        return (gx, gys, gxs)

    return _traced(out, (x, ys, xs), bw)


def bilinear_sample(x, y, xcoord, b=0, c=0):
    """Bilinear read of one image location; out-of-range reads return 0.

    ``y``/``xcoord`` may be floats or scalar Tensors (in which case the
    result is differentiable in the coordinates as well as the image).
    """
    yt = as_tensor(y, dtype=np.float64).reshape(1, 1, 1, 1)
    xt = as_tensor(xcoord, dtype=np.float64).reshape(1, 1, 1, 1)
    patch = x[b : b + 1, c : c + 1]
    out = bilinear_gather(patch, yt, xt)
    return out.reshape(())


# ----------------------------------------------------------------------
# nearest-neighbor upsampling
# ----------------------------------------------------------------------


def upsample_nearest(x, out_h, out_w):
    """Resize [B,C,H,W] to [B,C,out_h,out_w] by nearest-neighbor lookup."""
    _require_4d(x, "upsample input")
    B, C, H, W = x.shape
    iy = (np.arange(out_h) * H) // out_h
    ix = (np.arange(out_w) * W) // out_w
    data = x.data[:, :, iy[:, None], ix[None, :]]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, np.ix_(np.arange(B), np.arange(C), iy, ix), g)
        return (gx,)

    return _traced(data, (x,), bw)
