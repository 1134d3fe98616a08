"""Gene co-expression graph and its single-layer graph propagation.

The graph is a data statistic: Pearson correlations between the pooled pixel
vectors of each gene over the two anchor slices. It carries no gradient. The
propagation layer projects encoder channels into per-gene node slots, mixes
nodes with the row-normalized non-negative adjacency, applies a learned node
update, and blends the result with the input.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ..data import STPatch
from ..tensor import Tensor, relu
from .layers import Conv2d

_EPS = 1e-12


@dataclass
class CoexpressionGraph:
    corr: np.ndarray  # [N,N] Pearson correlations, symmetric, unit diagonal
    prop: np.ndarray  # [N,N] row-stochastic propagation matrix
    degenerate: tuple  # indices of zero-variance genes


def _gene_matrix(patch):
    genes = patch.genes if isinstance(patch, STPatch) else np.asarray(patch)
    if genes.ndim != 3:
        raise ValueError(f"expected [N,H,W] gene stack, got shape {genes.shape}")
    return genes.reshape(genes.shape[0], -1)


def build_graph(st0, st1):
    """Correlation graph over genes from the two anchors' pooled pixels."""
    e0 = _gene_matrix(st0)
    e1 = _gene_matrix(st1)
    if e0.shape != e1.shape:
        raise ValueError(f"anchor gene stacks differ: {e0.shape} vs {e1.shape}")
    n = e0.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 genes, got {n}")
    pooled = np.concatenate([e0, e1], axis=1).astype(np.float64)
    centered = pooled - pooled.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered**2).sum(axis=1))
    degenerate = tuple(int(i) for i in np.nonzero(norms < _EPS)[0])
    if degenerate:
        warnings.warn(
            f"zero-variance genes in co-expression graph: {degenerate}", RuntimeWarning
        )
    safe = np.where(norms < _EPS, 1.0, norms)
    unit = centered / safe[:, None]
    corr = unit @ unit.T
    corr = np.triu(corr, 1)
    corr = corr + corr.T  # exact symmetry
    np.fill_diagonal(corr, 1.0)
    if degenerate:
        idx = list(degenerate)
        corr[idx, :] = 0.0
        corr[:, idx] = 0.0
        corr[idx, idx] = 1.0
    corr = np.clip(corr, -1.0, 1.0)
    raw = np.maximum(corr, 0.0) + np.eye(n)
    prop = raw / raw.sum(axis=1, keepdims=True)
    return CoexpressionGraph(corr=corr, prop=prop, degenerate=degenerate)


class GraphPropagation:
    """One graph-convolution round on channel features, shared across levels.

    Channels are mapped into N x node_dim slots by a 1x1 projection (identity
    at init), mixed per spatial location as prop @ nodes @ node_weight with a
    ReLU, projected back, and blended: lam * propagated + (1 - lam) * input.
    """

    def __init__(self, params, path, channels, genes, rng=None, dtype=np.float32):
        self.channels = channels
        self.genes = genes
        self.node_dim = math.ceil(channels / genes)
        slots = genes * self.node_dim
        self.slots = slots
        self.proj_in = Conv2d(params, f"{path}.proj_in", channels, slots, kernel=1,
                              rng=rng, dtype=dtype, init="eye")
        self.proj_out = Conv2d(params, f"{path}.proj_out", slots, channels, kernel=1,
                               rng=rng, dtype=dtype, init="eye")
        eye = np.eye(self.node_dim, dtype=dtype)
        self.node_weight = params.create(f"{path}.node_weight", eye)

    def __call__(self, feat, graph: CoexpressionGraph, lam):
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"blend factor must lie in [0, 1], got {lam}")
        b, c, h, w = feat.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        prop = Tensor(graph.prop.astype(feat.dtype))
        nodes = self.proj_in(feat).reshape(b, self.genes, self.node_dim, h, w)
        nodes = nodes.permute(0, 3, 4, 1, 2)  # [B,H,W,N,node_dim]
        mixed = relu((prop @ nodes) @ self.node_weight)
        mixed = mixed.permute(0, 3, 4, 1, 2).reshape(b, self.slots, h, w)
        propagated = self.proj_out(mixed)
        return lam * propagated + (1.0 - lam) * feat
