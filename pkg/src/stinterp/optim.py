"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ModelParams


class MissingGradientError(RuntimeError):
    def __init__(self, path):
        super().__init__(f"parameter has no gradient: {path}")
        self.path = path


@dataclass
class OptimizerState:
    """Per-parameter first/second moment buffers plus the schedule constants."""

    lr0: float
    lr_min: float
    total_steps: int
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optimizer(params: ModelParams, lr0=1e-4, lr_min=1e-6, total_steps=1000,
                   betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
    state = OptimizerState(lr0=lr0, lr_min=lr_min, total_steps=total_steps,
                           betas=betas, eps=eps, weight_decay=weight_decay)
    for path, t in params.items():
        state.m[path] = np.zeros_like(t.data)
        state.v[path] = np.zeros_like(t.data)
    return state


def cosine_lr(state: OptimizerState, step=None):
    """lr(t) = lr_min + 0.5 (lr0 - lr_min) (1 + cos(pi t / total)); clamped past the horizon."""
    t = state.step if step is None else step
    t = min(max(t, 0), state.total_steps)
    if state.total_steps == 0:
        return state.lr0
    return state.lr_min + 0.5 * (state.lr0 - state.lr_min) * (1.0 + math.cos(math.pi * t / state.total_steps))


def adamw_step(params: ModelParams, state: OptimizerState):
    """One decoupled-weight-decay Adam update over every registered parameter.

    The decay term ``p -= lr * wd * p`` is applied separately from (before)
    the moment-based update. The scheduled learning rate for the update is
    taken at the pre-increment step count, so the first step runs at lr0.
    """
    lr = cosine_lr(state)
    b1, b2 = state.betas
    t = state.step + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for path, p in params.items():
        if p.grad is None:
            raise MissingGradientError(path)
        g = p.grad
        if state.weight_decay:
            p.data = p.data - (lr * state.weight_decay) * p.data
        m = state.m[path]
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    state.step += 1
