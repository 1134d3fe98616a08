"""Full interpolation network: assembly of all sub-modules and the forward pass."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from ..ctf import apply_checkpoint, load_checkpoint
from ..data import HEPatch, STPatch
from ..params import ModelParams
from ..tensor import Tensor
from .cross_modal import GatedFusion, ModalityBackbone
from .gene_graph import GraphPropagation, build_graph
from .modulation import DeformEstimators, FeatureModulator, SliceSynthesizer, deformable_fuse
from .pyramid import DeformationDecoder, PyramidEncoder

VARIANTS = (None, "full", "no_cross_modal", "no_mgc_graph", "no_dlsm")


@dataclass
class ModelConfig:
    genes: int = 8
    patch_size: int = 32
    feat_channels: int = 16
    channels: int = 32
    gate_hidden: int = 32
    graph_blend: float = 0.5
    pos_dim: int = 16
    spatial_pos_dim: int = 8
    synth_channels: tuple = (32, 16)
    dtype: str = "float32"
    init_seed: int = 0

    def numpy_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "synth_channels" in d:
            d["synth_channels"] = tuple(d["synth_channels"])
        return cls(**d)


def _as_input(x, dtype):
    """Coerce an STPatch / HEPatch / array to a constant [1,C,H,W] Tensor."""
    if isinstance(x, STPatch):
        x = x.genes
    elif isinstance(x, HEPatch):
        x = x.rgb
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W] input, got shape {arr.shape}")
    return Tensor(arr)


def _positions_list(positions):
    if hasattr(positions, "positions"):
        return [float(p) for p in positions.positions]
    return [float(p) for p in positions]


class InterpolationNetwork:
    """End-to-end model over one anchor pair; batching happens across tuples."""

    def __init__(self, config: ModelConfig):
        self.config = config
        dtype = config.numpy_dtype()
        self.dtype = dtype
        self.params = ModelParams()
        rng = np.random.default_rng(config.init_seed)
        p = self.params
        self.he_backbone = ModalityBackbone(p, "cross_modal.he", 3, config.feat_channels,
                                            rng=rng, dtype=dtype)
        self.st_backbone = ModalityBackbone(p, "cross_modal.st", config.genes, config.feat_channels,
                                            rng=rng, dtype=dtype)
        self.gate = GatedFusion(p, "cross_modal.gate", config.feat_channels, config.feat_channels,
                                hidden=config.gate_hidden, rng=rng, dtype=dtype)
        self.encoder = PyramidEncoder(p, "pyramid.encoder", config.feat_channels, config.channels,
                                      rng=rng, dtype=dtype)
        self.graph_prop = GraphPropagation(p, "gcn", config.channels, config.genes,
                                           rng=rng, dtype=dtype)
        self.decoder = DeformationDecoder(p, "pyramid.decoder", config.channels, rng=rng, dtype=dtype)
        self.modulator = FeatureModulator(p, "dlsm.modulate", config.channels,
                                          pos_dim=config.pos_dim,
                                          spatial_pos_dim=config.spatial_pos_dim,
                                          rng=rng, dtype=dtype)
        self.estimators = DeformEstimators(p, "dlsm.estimate", config.channels, rng=rng, dtype=dtype)
        self.synthesizer = SliceSynthesizer(p, "dlsm.synth", config.channels, config.genes,
                                            up_channels=config.synth_channels, rng=rng, dtype=dtype)

    # ------------------------------------------------------------------

    def forward(self, st0, st1, he0, he1, positions, variant=None, collect=None):
        """Interpolate at every position; returns a list of [1,N,H,W] Tensors.

        ``variant`` switches the ablations: ``no_cross_modal`` bypasses the
        gate (expression features pass through untouched), ``no_mgc_graph``
        evaluates the graph blend at 0, ``no_dlsm`` feeds deformation
        features to the estimator heads without modulation.
        """
        if variant == "full":
            variant = None
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS[1:]}")
        dtype = self.dtype
        i0 = _as_input(st0, dtype)
        i1 = _as_input(st1, dtype)
        st_feat0 = self.st_backbone(i0)
        st_feat1 = self.st_backbone(i1)
        if variant == "no_cross_modal":
            fused0, fused1 = st_feat0, st_feat1
        else:
            h0 = _as_input(he0, dtype)
            h1 = _as_input(he1, dtype)
            fused0 = self.gate(self.he_backbone(h0), st_feat0).fused
            fused1 = self.gate(self.he_backbone(h1), st_feat1).fused

        levels = self.encoder(fused0, fused1)
        graph = build_graph(st0, st1)
        lam = 0.0 if variant == "no_mgc_graph" else self.config.graph_blend
        refined = [(self.graph_prop(f0, graph, lam), self.graph_prop(f1, graph, lam))
                   for f0, f1 in levels]
        flows = self.decoder(refined)
        flow01, flow10 = flows[0]

        outputs = []
        for pos in _positions_list(positions):
            if variant == "no_dlsm":
                mod01, mod10 = flow01, flow10
            else:
                mod01 = self.modulator(flow01, pos, forward_direction=True).combined
                mod10 = self.modulator(flow10, pos, forward_direction=False).combined
            est01 = self.estimators(mod01)
            est10 = self.estimators(mod10)
            agg0 = deformable_fuse(flow01, est01)
            agg1 = deformable_fuse(flow10, est10)
            outputs.append(self.synthesizer(agg0, agg1, pos, self.config.patch_size))

        if collect is not None:
            collect["fused"] = (fused0, fused1)
            collect["graph"] = graph
            collect["levels"] = levels
            collect["flows"] = flows
            collect["flow01"] = flow01
            collect["flow10"] = flow10
        return outputs

    def forward_tuple(self, slice_tuple, positions, variant=None, collect=None):
        st0, st1 = slice_tuple.anchors
        he0, he1 = slice_tuple.he_anchors
        return self.forward(st0, st1, he0, he1, positions, variant=variant, collect=collect)

    # ------------------------------------------------------------------

    def meta(self):
        return asdict(self.config)

    @classmethod
    def from_checkpoint(cls, directory, dtype=None):
        arrays, step, meta = load_checkpoint(directory)
        if not meta:
            raise ValueError(f"checkpoint at {directory} carries no model config")
        config = ModelConfig.from_dict(meta)
        if dtype is not None:
            config.dtype = dtype
        net = cls(config)
        apply_checkpoint(net.params, arrays)
        return net, step
