"""``refseg`` command line: gen-data, train, eval, match, oracle, ablate.

Every failure prints a single line ``refseg: error[<kind>]: <message>`` to
standard error. Usage and configuration errors exit with status 2; data
and runtime failures with status 1.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import ConfigError, load_config, with_overrides
from .tensor_io import NonFiniteTensorError, TensorFormatError

PROG = "refseg"
EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message, code: int) -> int:
    text = " ".join(str(message).split())
    print(f"{PROG}: error[{kind}]: {text}", file=sys.stderr)
    return code


def _load(args):
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "method", None):
        overrides["method.name"] = args.method
    if getattr(args, "tau", None) is not None:
        overrides["method.tau"] = args.tau
    return with_overrides(cfg, overrides) if overrides else cfg


def cmd_gen_data(args):
    from .synth import write_dataset
    from .experiment import seed_dataset

    cfg = _load(args)
    manifest = write_dataset(seed_dataset(cfg, args.seed), args.out_dir, args.label_format)
    print(manifest)
    return 0


def cmd_train(args):
    from .experiment import run_experiment

    cfg = _load(args)
    res = run_experiment(cfg, args.seed, args.out_dir, n_jobs=args.threads)
    print(f"method={res.method} n_labeled={res.n_labeled} mean_miou={res.mean:.4f} std_miou={res.std:.4f}")
    return 0


def _read_split(manifest, split):
    from .synth import read_manifest
    from .tensor_io import read_pgm, read_tensor

    entries, meta = read_manifest(manifest)
    if split not in entries:
        raise UsageError(f"split {split!r} not in manifest (have {sorted(entries)})")
    images, labels = [], []
    for image_path, label_path in entries[split]:
        if label_path is None:
            raise UsageError(f"split {split!r} has no labels")
        images.append(read_tensor(image_path))
        labels.append(read_pgm(label_path) if label_path.endswith(".pgm") else read_tensor(label_path))
    return np.stack(images), np.stack(labels), meta


def cmd_eval(args):
    from .model import PixelModel
    from .trainer import evaluate

    model = PixelModel.load(args.checkpoint)
    manifest = args.data
    if os.path.isdir(manifest):
        manifest = os.path.join(manifest, "manifest.txt")
    images, labels, _ = _read_split(manifest, args.split)
    rep = evaluate(model, images, labels.astype(np.int64))
    for j, v in enumerate(rep.per_class):
        print(f"class={j} iou={v:.6f}")
    print(f"miou={rep.miou:.6f}")
    return 0


def cmd_match(args):
    from .matching import assign_labels, brute_force_oracle
    from .pool import ReferencePool, resolve_k
    from .tensor_io import read_tensor, write_tensor

    feats = read_tensor(args.features)
    refs = read_tensor(args.refs)
    labels = read_tensor(args.labels)
    if labels.dtype == np.float32:
        labels = labels.astype(np.int64)
    pool = ReferencePool(refs.astype(np.float64), labels)
    k = resolve_k(args.k, len(pool))
    fn = brute_force_oracle if args.oracle else assign_labels
    kwargs = {} if args.oracle else {"n_jobs": args.threads}
    res = fn(feats.astype(np.float64), pool, k, args.n_classes, **kwargs)
    os.makedirs(args.out_dir, exist_ok=True)
    write_tensor(np.asarray(res.labels, dtype=np.uint8), os.path.join(args.out_dir, "labels.rgtf"))
    write_tensor(np.asarray(res.weights, dtype=np.float32), os.path.join(args.out_dir, "weights.rgtf"))
    write_tensor(np.asarray(res.nearest_distance, dtype=np.float32), os.path.join(args.out_dir, "distance.rgtf"))
    print(f"pixels={res.weights.size} k={k} mean_weight={float(res.weights.mean()):.6f}")
    return 0


def cmd_oracle(args):
    from .benchmark import compare_with_oracle

    cmp = compare_with_oracle(args.cases, args.seed, n_queries=args.pixels, dim=args.dim, n_jobs=args.threads)
    print(f"cases={cmp.cases} max_label_mismatches={cmp.max_label_mismatches} "
          f"max_weight_deviation={cmp.max_weight_deviation:.3e} seconds={cmp.seconds:.1f}")
    return 0 if cmp.max_label_mismatches == 0 and cmp.max_weight_deviation < 1e-5 else EXIT_FAILURE


def cmd_ablate(args):
    from .experiment import ablate, parse_values

    cfg = _load(args)
    try:
        values = parse_values(args.param, args.values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for param, value, method, n_l, mean, std in ablate(cfg, args.param, values, args.seed, args.out_dir,
                                                        n_jobs=args.threads):
        print(f"{param}={value} method={method} n_labeled={n_l} mean_miou={mean:.4f} std_miou={std:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Reference-based pseudo-label segmentation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, config=True, out=True):
        if config:
            p.add_argument("--config", required=True, help="YAML or JSON experiment config")
            p.add_argument("--seed", type=int, default=0, help="master seed")
        if out:
            p.add_argument("--out-dir", required=True)
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: REFSEG_THREADS)")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--label-format", choices=("pgm", "rgtf"), default="pgm")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run a multi-seed experiment")
    common(p)
    p.add_argument("--method", help="override method.name")
    p.add_argument("--tau", type=float, help="override method.tau")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory (e.g. checkpoints/seed-0/best)")
    p.add_argument("--data", required=True, help="dataset directory or manifest written by gen-data")
    p.add_argument("--split", default="test", choices=("labeled", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("match", help="pseudo-label feature vectors against a reference set")
    common(p, config=False)
    p.add_argument("--features", required=True, help="(N,d) or (d,h,w) float32 tensor")
    p.add_argument("--refs", required=True, help="(M,d) float32 tensor")
    p.add_argument("--labels", required=True, help="(M,) class indices or (M,c) bits")
    p.add_argument("--k", required=True, help="neighbour count or percentage, e.g. 50%%")
    p.add_argument("--n-classes", type=int, default=None)
    p.add_argument("--oracle", action="store_true", help="use the brute-force reference implementation")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("oracle", help="compare the fast matcher with the brute-force oracle")
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pixels", type=int, default=4096)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("ablate", help="sweep pool size or neighbour count")
    common(p)
    p.add_argument("--param", required=True, choices=("pool-size", "k"))
    p.add_argument("--values", required=True, help="comma separated, e.g. 1,2,3 or 10%%,50%%")
    p.add_argument("--method", help="override method.name")
    p.add_argument("--tau", type=float, help="override method.tau")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: gen-data, train, eval, match, oracle, ablate")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_USAGE)
    except (TensorFormatError, NonFiniteTensorError) as exc:
        return _fail("format", exc, EXIT_FAILURE)
    except FileNotFoundError as exc:
        return _fail("io", exc, EXIT_FAILURE)
    except (ValueError, RuntimeError) as exc:
        return _fail("runtime", exc, EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
