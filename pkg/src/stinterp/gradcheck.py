"""Central finite-difference verification of analytic gradients.

The checker perturbs selected entries of each input tensor in place, so the
loss function must recompute from the tensors it closed over. All checks are
meant to run on float64 tensors; float32 lacks the headroom for h=1e-4.

The losses here are piecewise smooth (ReLU, |.|, bilinear sampling cells). A
central difference whose +h/-h evaluations land in different linear regions
estimates neither one-sided slope, so such probes are rejected via the
region signatures that the piecewise operations record (see
``tensor.record_regions``). The rejection rate is tracked; a check that
skips most of its probes fails loudly instead of passing emptily.
"""
from __future__ import annotations

import numpy as np

from .tensor import no_grad, record_regions

DEFAULT_H = 1e-4
DEFAULT_TOL = 1e-4
# Relative error is measured against max(|analytic|, |numeric|, floor) so a
# pair of near-zero gradients does not register as disagreement.
REL_FLOOR = 1e-4


def same_region(sig_a, sig_b):
    return len(sig_a) == len(sig_b) and all(np.array_equal(a, b) for a, b in zip(sig_a, sig_b))


def numeric_gradient(loss_fn, tensor, indices, h=DEFAULT_H, reject_kinks=True):
    """Central differences of ``loss_fn()`` w.r.t. flat ``indices`` of ``tensor``.

    Returns ``(grads, valid)``; entries whose probes straddled a kink carry
    ``valid=False`` and an unreliable gradient estimate.
    """
    flat = tensor.data.reshape(-1)
    grads = np.zeros(len(indices), dtype=np.float64)
    valid = np.ones(len(indices), dtype=bool)
    with no_grad():
        for n, idx in enumerate(indices):
            orig = flat[idx]
            flat[idx] = orig + h
            with record_regions([]) as sig_up:
                up = loss_fn().item()
            flat[idx] = orig - h
            with record_regions([]) as sig_down:
                down = loss_fn().item()
            flat[idx] = orig
            if reject_kinks and not same_region(sig_up, sig_down):
                valid[n] = False
                continue
            grads[n] = (up - down) / (2.0 * h)
    return grads, valid


def _sample_indices(size, max_entries, rng):
    if size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_entries, replace=False))


def max_relative_error(loss_fn, tensors, h=DEFAULT_H, max_entries=64, rng=None,
                       floor=REL_FLOOR, max_skip_fraction=0.5):
    """Largest relative analytic-vs-numeric gradient discrepancy.

    ``tensors`` are the leaves to differentiate; entries are subsampled when a
    tensor holds more than ``max_entries`` scalars.
    """
    rng = rng or np.random.default_rng(0)
    tensors = list(tensors)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("gradient checks must run on float64 tensors")
        t.requires_grad = True
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    checked = skipped = 0
    for t in tensors:
        if t.grad is None:
            raise AssertionError("no gradient reached a checked tensor")
        analytic_full = t.grad.reshape(-1)
        idx = _sample_indices(t.size, max_entries, rng)
        numeric, valid = numeric_gradient(loss_fn, t, idx, h=h)
        analytic = analytic_full[idx]
        checked += int(valid.sum())
        skipped += int((~valid).sum())
        if not valid.any():
            continue
        a = analytic[valid]
        n = numeric[valid]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
        t.zero_grad()
    total = checked + skipped
    if total == 0 or checked == 0 or skipped > max_skip_fraction * total:
        raise AssertionError(f"gradient check degenerate: {skipped}/{total} probes straddled kinks")
    return worst


def assert_gradients_match(loss_fn, tensors, tol=DEFAULT_TOL, **kwargs):
    err = max_relative_error(loss_fn, tensors, **kwargs)
    if err >= tol:
        raise AssertionError(f"gradient check failed: max relative error {err:.3e} >= {tol:.0e}")
    return err
