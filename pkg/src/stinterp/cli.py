"""Command-line interface: dataset synthesis, training, evaluation, inference.

Subcommands:
    synth-data   generate a synthetic dataset directory
    train        optimize a model on a dataset's train split
    evaluate     metric table (model vs. linear baseline) on a split
    interpolate  run a checkpoint on one anchor tuple, write CTF outputs
    ablate       train + evaluate one ablated model variant
    gradcheck    finite-difference verification of all gradients
    dump-graph   write a tuple's gene co-expression matrix as CTF

Thread count for data generation / evaluation fan-out comes from the
STINTERP_THREADS environment variable (default 1).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .ctf import write_ctf
from .data import GeneratorConfig, load_patch, split_tuples, write_dataset
from .model import InterpolationNetwork
from .model.gene_graph import build_graph
from .model.modulation import compute_positions
from .tensor import no_grad
from .training import RunConfig, ablate, evaluate, format_rows, rows_to_json, train
from .verify import run_report


def _add_synth(sub):
    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--genes", type=int, default=8)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--slices", type=int, default=19)
    p.add_argument("--volumes", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--deform", type=float, default=1.5, help="RMS inter-slice displacement, px")
    p.add_argument("--drift", type=float, default=0.05)
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--blobs", type=int, default=4)


def _run_synth(args):
    config = GeneratorConfig(genes=args.genes, size=args.size, slices=args.slices,
                             volumes=args.volumes, deform=args.deform, drift=args.drift,
                             sparsity=args.sparsity, blobs=args.blobs)
    manifest = write_dataset(args.out, config, args.seed)
    print(f"wrote {sum(manifest['splits'].values())} volumes to {args.out} "
          f"(splits {manifest['splits']})")


def _config_from_args(args):
    if args.config:
        config = RunConfig.from_file(args.config)
    else:
        config = RunConfig()
    for name in ("dataset", "checkpoint", "epochs", "batch_size", "lr0", "lr_min",
                 "weight_decay", "alpha", "s", "seed", "dtype", "log_path",
                 "graph_blend", "checkpoint_every"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(config, name, value)
    return config


def _add_train_args(p, require_dataset=True):
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--dataset", required=require_dataset)
    p.add_argument("--checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--graph-blend", dest="graph_blend", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--s", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--log-path", dest="log_path")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)


def _run_train(args):
    config = _config_from_args(args)
    result, _ = train(config)
    last = result.final
    print(f"trained {result.steps} steps; final total loss {last.get('total', float('nan')):.6f}")
    if config.checkpoint:
        print(f"checkpoint: {result.checkpoint_dir}")


def _run_evaluate(args):
    net, _ = InterpolationNetwork.from_checkpoint(args.ckpt)
    rows = []
    for s in args.s:
        row, _ = evaluate(net, args.dataset, args.split, s, alpha=args.alpha)
        rows.append((f"s={s}", row))
    table = format_rows(rows)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table + "\n")
        (out / "report.json").write_text(json.dumps(rows_to_json(rows), indent=1, sort_keys=True))
        print(f"reports written to {out}")


def _load_tuple_spec(path):
    """Anchor tuple from a JSON spec or a directory of st_*/he_* CTF files."""
    path = Path(path)
    if path.is_dir():
        sts = sorted(path.glob("st_*.ctf"), key=lambda p: int(p.stem.split("_")[1]))
        if len(sts) < 2:
            raise FileNotFoundError(f"{path} needs at least two st_<i>.ctf files")
        st0, st1 = load_patch(sts[0]), load_patch(sts[-1])
        he0 = load_patch(path / f"he_{st0.slice_index}.ctf")
        he1 = load_patch(path / f"he_{st1.slice_index}.ctf")
        return st0, st1, he0, he1
    spec = json.loads(path.read_text())
    st0 = load_patch(spec["st0"])
    st1 = load_patch(spec["st1"])
    he0 = load_patch(spec["he0"])
    he1 = load_patch(spec["he1"])
    return st0, st1, he0, he1


def _run_interpolate(args):
    net, _ = InterpolationNetwork.from_checkpoint(args.ckpt)
    st0, st1, he0, he1 = _load_tuple_spec(args.tuple)
    positions = compute_positions(he0, he1, args.s, args.alpha)
    with no_grad():
        preds = net.forward(st0, st1, he0, he1, positions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (p, pos) in enumerate(zip(preds, positions.positions), start=1):
        name = f"interp_{i}.ctf"
        write_ctf(out / name, p.data[0].astype(np.float32))
        files.append({"file": name, "position": float(pos)})
    (out / "positions.json").write_text(json.dumps(
        {"s": args.s, "alpha": args.alpha, "weights": positions.weights.tolist(),
         "slices": files}, indent=1, sort_keys=True))
    print(f"wrote {len(files)} slices + positions.json to {out}")


def _run_ablate(args):
    config = _config_from_args(args)
    _, row = ablate(config, args.variant, split=args.split)
    print(format_rows([(args.variant, row)]))


def _run_gradcheck(args):
    ok = run_report(instances=args.instances, seed=args.seed, fraction=args.fraction)
    if not ok:
        sys.exit(1)


def _run_dump_graph(args):
    tuples = split_tuples(args.dataset, args.split, args.s)
    if not 0 <= args.tuple < len(tuples):
        raise IndexError(f"tuple index {args.tuple} out of range (split has {len(tuples)})")
    t = tuples[args.tuple]
    graph = build_graph(*t.anchors)
    write_ctf(args.out, graph.corr)
    print(f"wrote {graph.corr.shape[0]}x{graph.corr.shape[1]} correlation matrix to {args.out}")


def build_parser():
    parser = argparse.ArgumentParser(prog="stinterp",
                                     description="cross-slice interpolation of expression maps")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_synth(sub)

    p = sub.add_parser("train", help="train a model on a dataset")
    _add_train_args(p)

    p = sub.add_parser("evaluate", help="metrics on a split, model vs. linear baseline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--s", type=int, nargs="+", default=[1])
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", help="directory for report.txt / report.json")

    p = sub.add_parser("interpolate", help="interpolate one anchor tuple")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tuple", required=True,
                   help="JSON spec {st0,st1,he0,he1} or a directory of CTF patches")
    p.add_argument("--s", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train and evaluate an ablated variant")
    p.add_argument("--variant", required=True,
                   choices=("no_cross_modal", "no_mgc_graph", "no_dlsm"))
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    _add_train_args(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fraction", type=float, default=0.01)

    p = sub.add_parser("dump-graph", help="dump a tuple's co-expression matrix")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--tuple", type=int, required=True)
    p.add_argument("--s", type=int, default=1)
    p.add_argument("--out", required=True)

    return parser


_RUNNERS = {
    "synth-data": _run_synth,
    "train": _run_train,
    "evaluate": _run_evaluate,
    "interpolate": _run_interpolate,
    "ablate": _run_ablate,
    "gradcheck": _run_gradcheck,
    "dump-graph": _run_dump_graph,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    _RUNNERS[args.command](args)


if __name__ == "__main__":
    main()
