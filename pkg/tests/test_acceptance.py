"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete. The training-based criteria use fixed seeds and are
deterministic on a single thread.
"""
import sys
import time

import numpy as np
import pytest

from stinterp.ctf import read_ctf, write_ctf
from stinterp.data import GeneratorConfig, generate_volume, make_tuples, split_tuples, write_dataset
from stinterp.model import InterpolationNetwork, ModelConfig
from stinterp.model.gene_graph import build_graph
from stinterp.model.modulation import DeformParams, compute_positions, deformable_fuse
from stinterp.ops import depthwise_conv2d
from stinterp.tensor import Tensor, no_grad
from stinterp.training import RunConfig, evaluate_tuples, fit_model, train
from stinterp.verify import END_TO_END_TOL, OP_TOL, end_to_end_check, gradient_suite


def _report(criterion, ok, detail):
    line = f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line, file=sys.stderr)
    assert ok, line


# ----------------------------------------------------------------------
# 1. gradient suite
# ----------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    started = time.time()
    per_op = gradient_suite(instances=10, seed=0)
    worst_name, worst = max(per_op.items(), key=lambda kv: kv[1])
    e2e, checked, skipped = end_to_end_check(fraction=0.01, seed=0)
    elapsed = time.time() - started
    ok = all(err < OP_TOL for err in per_op.values()) and e2e < END_TO_END_TOL and elapsed < 300
    _report(
        1, ok,
        f"per-op worst {worst:.2e} ({worst_name}), end-to-end {e2e:.2e} over "
        f"{checked} entries ({skipped} kink probes skipped), {elapsed:.0f}s",
    )


# ----------------------------------------------------------------------
# 2. deformable convolution oracle
# ----------------------------------------------------------------------


def test_criterion_2_deformable_oracle():
    rng = np.random.default_rng(7)
    feat = Tensor(rng.normal(size=(2, 4, 8, 8)))
    b, c, h, w = feat.shape
    zero_off = Tensor(np.zeros((b, 18, h, w)))
    ones_mask = Tensor(np.ones((b, 9, h, w)))

    uniform = DeformParams(kernels=Tensor(np.full((b, c, 3, 3), 1.0 / 9.0)),
                           offsets=zero_off, masks=ones_mask)
    box = depthwise_conv2d(feat, Tensor(np.full((c, 3, 3), 1.0 / 9.0)))
    box_err = float(np.max(np.abs(deformable_fuse(feat, uniform).data - box.data)))

    delta_k = np.zeros((b, c, 3, 3))
    delta_k[:, :, 1, 1] = 1.0
    delta = DeformParams(kernels=Tensor(delta_k), offsets=zero_off, masks=ones_mask)
    id_err = float(np.max(np.abs(deformable_fuse(feat, delta).data - feat.data)))

    ok = box_err < 1e-6 and id_err < 1e-7
    _report(2, ok, f"box-filter equivalence {box_err:.2e} (<1e-6), identity {id_err:.2e} (<1e-7)")


# ----------------------------------------------------------------------
# 3. co-expression graph properties
# ----------------------------------------------------------------------


def test_criterion_3_graph_properties():
    rng = np.random.default_rng(11)
    failures = []
    for trial in range(100):
        n = int(rng.integers(2, 9))
        e0 = rng.random(size=(n, 8, 8))
        e1 = rng.random(size=(n, 8, 8))
        g = build_graph(e0, e1)
        if not np.array_equal(g.corr, g.corr.T):
            failures.append((trial, "symmetry"))
        if not np.array_equal(np.diag(g.corr), np.ones(n)):
            failures.append((trial, "diagonal"))
        if g.corr.min() < -1.0 or g.corr.max() > 1.0:
            failures.append((trial, "range"))
        pooled = np.concatenate(
            [e0.reshape(n, -1), e1.reshape(n, -1)], axis=1)
        oracle = np.corrcoef(pooled)
        if np.max(np.abs(g.corr - oracle)) >= 1e-6:
            failures.append((trial, "pearson"))

    degen = np.full((3, 6, 6), 0.4)
    degen_stack = np.concatenate([np.random.default_rng(0).random((2, 6, 6)), degen[:1]], axis=0)
    with pytest.warns(RuntimeWarning):
        g = build_graph(degen_stack, degen_stack)
    nan_free = not np.any(np.isnan(g.corr)) and not np.any(np.isnan(g.prop))

    ok = not failures and nan_free
    _report(3, ok, f"100 random anchor pairs clean, zero-variance NaN-free={nan_free}, "
                   f"violations={failures[:3]}")


# ----------------------------------------------------------------------
# 4. position contract
# ----------------------------------------------------------------------


def test_criterion_4_position_contract():
    from stinterp.data import HEPatch

    exact = True
    for s in (1, 2, 3, 4):
        h = HEPatch(rgb=np.random.default_rng(s).random((3, 8, 8)), slice_index=0)
        p = compute_positions(h, h, s, alpha=0.0).positions
        exact &= np.array_equal(p, np.arange(1, s + 1) / (s + 1))

    rng = np.random.default_rng(23)
    violations = 0
    for trial in range(1000):
        s = int(rng.integers(1, 5))
        alpha = float(rng.choice([0.1, 1.0, 10.0]))
        h0 = HEPatch(rgb=rng.random(size=(3, 8, 8)), slice_index=0)
        h1 = HEPatch(rgb=rng.random(size=(3, 8, 8)), slice_index=s + 1)
        p = compute_positions(h0, h1, s, alpha=alpha).positions
        if not (p[0] > 0.0 and p[-1] < 1.0 and np.all(np.diff(p) > 0.0)):
            violations += 1

    ok = exact and violations == 0
    _report(4, ok, f"alpha=0 grid exact for s in 1..4: {exact}; "
                   f"1000 randomized trials, {violations} violations")


# ----------------------------------------------------------------------
# 5. overfit experiment
# ----------------------------------------------------------------------


def test_criterion_5_overfit():
    started = time.time()
    gen = GeneratorConfig(genes=8, size=16, slices=6, volumes=1,
                          deform=2.0, drift=0.08, sparsity=0.15)
    sts, hes = generate_volume(gen, seed=42)
    tuples = make_tuples(sts, hes, s=1)[:4]
    config = RunConfig(epochs=1000, batch_size=4, lr0=4e-3, lr_min=1e-4,
                       s=1, seed=0, alpha=0.5, smooth_weight=0.0)
    net = InterpolationNetwork(config.model_config(8, 16))
    log, state = fit_model(net, tuples, config)
    assert len(log) <= 1000
    row, _ = evaluate_tuples(net, tuples, 1, config.alpha)
    elapsed = time.time() - started
    margin = row.model.psnr - row.baseline.psnr
    ok = row.model.psnr >= 30.0 and margin >= 1.0 and elapsed < 900
    _report(5, ok, f"train PSNR {row.model.psnr:.2f} dB (>=30), baseline "
                   f"{row.baseline.psnr:.2f} dB, margin {margin:+.2f} dB (>=1), "
                   f"{len(log)} steps in {elapsed:.0f}s (<900)")

    # monotone-trend check on the same run: the 20-step moving average of the
    # total loss at step 500 sits below its value at step 50
    totals = np.array([r["total"] for r in log])
    moving = np.convolve(totals, np.ones(20) / 20, mode="valid")
    assert moving[500 - 19] < moving[50 - 19]


# ----------------------------------------------------------------------
# 6. multi-slice generalization
# ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def generalization_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen") / "ds"
    gen = GeneratorConfig(genes=8, size=16, slices=8, volumes=6,
                          deform=1.5, drift=0.05, sparsity=0.2)
    write_dataset(root, gen, seed=101)
    config = RunConfig(dataset=str(root), epochs=120, batch_size=6, lr0=1.5e-3,
                       lr_min=5e-5, s=3, seed=0, alpha=0.5, smooth_weight=0.0)
    tuples = split_tuples(root, "train", 3)
    net = InterpolationNetwork(config.model_config(8, 16))
    fit_model(net, tuples, config)
    return net, root, config


def test_criterion_6_multislice_generalization(generalization_run):
    net, root, config = generalization_run
    details = []
    ok = True
    for s in (2, 3, 4):
        test_tuples = split_tuples(root, "test", s)
        row, _ = evaluate_tuples(net, test_tuples, s, config.alpha)
        ok &= row.model.rmse <= row.baseline.rmse
        details.append(f"s={s}: {row.model.rmse:.4f} vs baseline {row.baseline.rmse:.4f}")
        for t in test_tuples:
            p = compute_positions(t.he_anchors[0], t.he_anchors[1], s, config.alpha).positions
            ok &= bool(p[0] > 0 and p[-1] < 1 and np.all(np.diff(p) > 0))
    _report(6, ok, "held-out RMSE model<=baseline for every s; " + "; ".join(details))


# ----------------------------------------------------------------------
# 7. ablation consistency
# ----------------------------------------------------------------------


def test_criterion_7_ablation_consistency():
    gen = GeneratorConfig(genes=8, size=16, slices=5, volumes=1, deform=1.5)
    sts, hes = generate_volume(gen, seed=5)
    t = make_tuples(sts, hes, 2)[0]
    positions = compute_positions(t.he_anchors[0], t.he_anchors[1], 2, 0.5)

    net = InterpolationNetwork(ModelConfig(genes=8, patch_size=16, graph_blend=0.5))
    with no_grad():
        ablated = net.forward_tuple(t, positions, variant="no_mgc_graph")
    net.config.graph_blend = 0.0
    with no_grad():
        lam0 = net.forward_tuple(t, positions)
    net.config.graph_blend = 0.5
    bit_identical = all(np.array_equal(a.data, b.data) for a, b in zip(ablated, lam0))

    collect_a, collect_b = {}, {}
    with no_grad():
        net.forward_tuple(t, positions, variant="no_cross_modal", collect=collect_a)
    he0, he1 = t.he_anchors
    he0.rgb[:] = np.random.default_rng(9).random(he0.rgb.shape)
    he1.rgb[:] = np.random.default_rng(10).random(he1.rgb.shape)
    with no_grad():
        net.forward_tuple(t, positions, variant="no_cross_modal", collect=collect_b)
    max_diff = max(
        float(np.max(np.abs(a.data - b.data)))
        for a, b in zip(collect_a["fused"], collect_b["fused"])
    )

    ok = bit_identical and max_diff == 0.0
    _report(7, ok, f"no_mgc_graph bit-identical to lambda=0: {bit_identical}; "
                   f"no_cross_modal fused-feature drift under H&E perturbation: {max_diff}")


# ----------------------------------------------------------------------
# 8. training determinism
# ----------------------------------------------------------------------


def test_criterion_8_training_determinism(tmp_path):
    gen = GeneratorConfig(genes=6, size=16, slices=5, volumes=2, deform=1.5)
    write_dataset(tmp_path / "ds", gen, seed=31)

    def run(tag):
        config = RunConfig(dataset=str(tmp_path / "ds"), checkpoint=str(tmp_path / tag),
                           epochs=2, batch_size=4, lr0=1e-3, s=1, seed=7, dtype="float64")
        train(config)
        ckpt = tmp_path / tag / "final"
        return {p.relative_to(ckpt): p.read_bytes() for p in sorted(ckpt.rglob("*")) if p.is_file()}

    a = run("run_a")
    b = run("run_b")
    same_files = set(a) == set(b)
    identical = same_files and all(a[k] == b[k] for k in a)
    _report(8, identical, f"two seeded float64 runs produced byte-identical "
                          f"checkpoints ({len(a)} files)")


# ----------------------------------------------------------------------
# 9. CTF round-trips
# ----------------------------------------------------------------------


def test_criterion_9_ctf_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    failures = 0
    for i in range(1000):
        ndim = int(rng.integers(1, 5))
        shape = tuple(int(x) for x in rng.integers(1, 6, size=ndim))
        dtype = np.float32 if rng.integers(0, 2) == 0 else np.float64
        arr = rng.standard_normal(size=shape).astype(dtype)
        path = tmp_path / f"t{i % 8}.ctf"
        write_ctf(path, arr)
        back = read_ctf(path)
        if back.dtype != arr.dtype or not np.array_equal(back, arr):
            failures += 1
    _report(9, failures == 0, f"1000 random save/load cycles, {failures} mismatches "
                              f"(dtypes f32/f64, 1-4 dims)")
