"""Scikit-learn style front end over the interpolation network.

``SliceInterpolator`` follows the estimator protocol (``get_params`` /
``set_params`` via ``BaseEstimator``, ``fit`` returning self, learned state
on trailing-underscore attributes), so it composes with the usual tooling
(``sklearn.base.clone``, grid search over its constructor parameters, ...).

X is a list of :class:`~stinterp.data.SliceTuple`; there is no separate y
(the tuples carry their own target slices).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .data import split_tuples
from .metrics import mean_reports, metric_suite
from .model import InterpolationNetwork
from .model.modulation import compute_positions
from .tensor import no_grad
from .training import RunConfig, fit_model
from .validation import check_tuple_list


class SliceInterpolator(BaseEstimator):
    """Interpolates missing expression slices between two measured anchors.

    Parameters mirror :class:`~stinterp.training.RunConfig`; ``s`` fixes how
    many intermediate slices each prediction emits and ``alpha`` scales the
    histology-gradient weighting of their depths.
    """

    def __init__(self, s=1, alpha=0.5, graph_blend=0.5, epochs=40, batch_size=6,
                 learning_rate=1e-4, lr_min=1e-6, weight_decay=1e-4,
                 sim_weight=1.0, smooth_weight=1.0, channels=32, feat_channels=16,
                 gate_hidden=32, dtype="float32", seed=0):
        self.s = s
        self.alpha = alpha
        self.graph_blend = graph_blend
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_min = lr_min
        self.weight_decay = weight_decay
        self.sim_weight = sim_weight
        self.smooth_weight = smooth_weight
        self.channels = channels
        self.feat_channels = feat_channels
        self.gate_hidden = gate_hidden
        self.dtype = dtype
        self.seed = seed

    # ------------------------------------------------------------------

    def _run_config(self):
        return RunConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr0=self.learning_rate,
            lr_min=self.lr_min, weight_decay=self.weight_decay,
            sim_weight=self.sim_weight, smooth_weight=self.smooth_weight,
            graph_blend=self.graph_blend, alpha=self.alpha, s=self.s,
            seed=self.seed, dtype=self.dtype, channels=self.channels,
            feat_channels=self.feat_channels, gate_hidden=self.gate_hidden,
        )

    def _coerce_tuples(self, X, require_targets):
        if isinstance(X, (str,)) or hasattr(X, "__fspath__"):
            X = split_tuples(X, "train", self.s)
        X = check_tuple_list(X, require_targets=require_targets)
        genes, h, w = X[0].anchors[0].genes.shape
        for t in X:
            if t.anchors[0].genes.shape != (genes, h, w):
                raise ValueError("tuples disagree on gene count or patch size")
        return X, genes, h

    def fit(self, X, y=None):
        """Train on tuples (a list of SliceTuple or a dataset directory)."""
        tuples, genes, size = self._coerce_tuples(X, require_targets=True)
        for t in tuples:
            if len(t.targets) != self.s:
                raise ValueError(f"tuple carries {len(t.targets)} targets, estimator expects s={self.s}")
        config = self._run_config()
        self.network_ = InterpolationNetwork(config.model_config(genes, size))
        log, state = fit_model(self.network_, tuples, config)
        self.history_ = log
        self.n_steps_ = len(log)
        self.genes_ = genes
        self.patch_size_ = size
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise RuntimeError("this SliceInterpolator instance is not fitted yet")

    def predict(self, X):
        """Interpolated slices per tuple: list of [s, N, H, W] arrays."""
        self._check_fitted()
        tuples, genes, size = self._coerce_tuples(X, require_targets=False)
        if genes != self.genes_ or size != self.patch_size_:
            raise ValueError(
                f"tuples have {genes} genes at {size}px, model was fitted on "
                f"{self.genes_} genes at {self.patch_size_}px"
            )
        outputs = []
        with no_grad():
            for t in tuples:
                positions = compute_positions(t.he_anchors[0], t.he_anchors[1], self.s, self.alpha)
                preds = self.network_.forward_tuple(t, positions)
                outputs.append(np.stack([p.data[0] for p in preds]))
        return outputs

    def predict_positions(self, X):
        """The interpolation depths the model would use for each tuple."""
        tuples, _, _ = self._coerce_tuples(X, require_targets=False)
        return [
            compute_positions(t.he_anchors[0], t.he_anchors[1], self.s, self.alpha).positions
            for t in tuples
        ]

    def score(self, X, y=None):
        """Mean PSNR (dB) of predictions against the tuples' targets."""
        self._check_fitted()
        tuples, _, _ = self._coerce_tuples(X, require_targets=True)
        preds = self.predict(tuples)
        reports = []
        for t, stack in zip(tuples, preds):
            reports.extend(metric_suite(p, tgt) for p, tgt in zip(stack, t.targets))
        return mean_reports(reports).psnr
