"""Input validation helpers shared by the estimator and the data APIs."""
from __future__ import annotations

import numpy as np

from .data import HEPatch, SliceTuple, STPatch


def check_unit_range(arr, name):
    arr = np.asarray(arr)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got range [{arr.min()}, {arr.max()}]")
    return arr


def check_gene_stack(arr, name="gene stack", genes=None):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be [N,H,W], got shape {arr.shape}")
    if genes is not None and arr.shape[0] != genes:
        raise ValueError(f"{name} has {arr.shape[0]} genes, expected {genes}")
    return check_unit_range(arr, name)


def check_rgb(arr, name="H&E image"):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"{name} must be [3,H,W], got shape {arr.shape}")
    return check_unit_range(arr, name)


def check_slice_tuple(t, genes=None, require_targets=False):
    if not isinstance(t, SliceTuple):
        raise TypeError(f"expected a SliceTuple, got {type(t).__name__}")
    a0, a1 = t.anchors
    h0, h1 = t.he_anchors
    for p, name in ((a0, "anchor 0"), (a1, "anchor 1")):
        if not isinstance(p, STPatch):
            raise TypeError(f"{name} must be an STPatch")
        check_gene_stack(p.genes, name, genes=genes)
    for p, name in ((h0, "H&E anchor 0"), (h1, "H&E anchor 1")):
        if not isinstance(p, HEPatch):
            raise TypeError(f"{name} must be an HEPatch")
        check_rgb(p.rgb, name)
    if a0.genes.shape != a1.genes.shape:
        raise ValueError(f"anchor shapes differ: {a0.genes.shape} vs {a1.genes.shape}")
    if h0.rgb.shape[1:] != a0.genes.shape[1:]:
        raise ValueError(
            f"H&E and expression patches are not registered: {h0.rgb.shape} vs {a0.genes.shape}"
        )
    if require_targets and not t.targets:
        raise ValueError("tuple carries no target slices")
    for tgt in t.targets:
        if not (a0.slice_index < tgt.slice_index < a1.slice_index):
            raise ValueError(
                f"target index {tgt.slice_index} outside anchors "
                f"({a0.slice_index}, {a1.slice_index})"
            )
    return t


def check_tuple_list(tuples, genes=None, require_targets=False):
    tuples = list(tuples)
    if not tuples:
        raise ValueError("empty tuple list")
    for t in tuples:
        check_slice_tuple(t, genes=genes, require_targets=require_targets)
    return tuples
