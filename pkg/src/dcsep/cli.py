"""Command-line interface.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
divergence, 4 self-test failure.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfg
from .autoencoder import build, load_checkpoint
from .data import imbalanced_subsample
from .errors import (ConfigError, DataError, DegenerateEmbedding, FormatError,
                     TrainingDiverged, TruncatedFile)
from .losses import ClusterState
from .metrics import accuracy, export_embeddings, export_projection, project_2d
from .trainer import predict, run

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_SELFTEST = 0, 1, 2, 3, 4

ABLATION_VARIANTS = {
    "Lr+Lc": {"gamma": 0.0, "omega": 0.0},
    "no_Lt": {"omega": 0.0},
    "no_Lb": {"gamma": 0.0},
    "full": {},
}

log = logging.getLogger("dcsep")


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; argparse's own code 2 means data error here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override the init/shuffle/augment seeds (N, N+1, N+2)")
    common.add_argument("--out", metavar="DIR", help="override the output directory")
    common.add_argument("--print-defaults", action="store_true",
                        help="print the full default configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = _Parser(prog="dcsep", description=__doc__.splitlines()[0])
    parser.set_defaults(verbose=False)
    parser.add_argument("--print-defaults", action="store_true",
                        help="print the full default configuration and exit")
    sub = parser.add_subparsers(dest="command")
    sub.add_parser("train", parents=[common], help="pretrain, initialize and train jointly")
    sub.add_parser("eval", parents=[common], help="score a trained checkpoint")
    sub.add_parser("ablate", parents=[common], help="compare loss-term subsets")
    imb = sub.add_parser("imbalance", parents=[common], help="retention-rate sweep")
    imb.add_argument("--r-min", type=float, nargs="+", metavar="R",
                     help="retention rates for the smallest class (default from config)")
    sub.add_parser("export-embeddings", parents=[common],
                   help="write embeddings and projection CSVs from a checkpoint")
    sub.add_parser("selftest", parents=[common], help="run built-in correctness checks")
    return parser


def _load_config(args):
    doc = cfg.load(args.config) if args.config else cfg.resolve({"dataset": {"kind": "synthetic"}})
    if args.seed is not None:
        doc = cfg.apply_seed(doc, args.seed)
    if args.out:
        doc["out_dir"] = args.out
    return doc


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x):
    return "" if x is None else f"{x:.9g}"


def cmd_train(doc):
    dataset = cfg.load_dataset(doc)
    k = cfg.n_clusters(doc, dataset)
    result = run(cfg.train_config(doc), dataset, k, out_dir=doc["out_dir"],
                 timing=doc["timing"])
    with open(Path(doc["out_dir"]) / "config.json", "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    acc = "n/a" if result.acc is None else f"{result.acc:.4f}"
    print(f"final acc: {acc}  ({len(result.log)} joint epochs, outputs in {doc['out_dir']})")
    return EXIT_OK


def _restore(doc, dataset):
    path = Path(doc["out_dir"]) / "checkpoint.dcae"
    tensors = load_checkpoint(path)
    config = cfg.train_config(doc)
    params = build(config.network_spec(dataset.image_shape), seed=config.init_seed)
    if "cluster.centroids" not in tensors:
        raise FormatError(f"{path} holds no centroids")
    try:
        params.load_state_dict({k: v for k, v in tensors.items()
                                if k.startswith(("enc.", "dec."))})
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path} does not match the configured network: {exc}") from None
    return params, ClusterState(tensors["cluster.centroids"])


def cmd_eval(doc):
    dataset = cfg.load_dataset(doc)
    params, state = _restore(doc, dataset)
    _, _, assign = predict(params, state, dataset.images)
    sizes = np.bincount(assign, minlength=state.n_clusters)
    print("cluster sizes: " + " ".join(str(int(s)) for s in sizes))
    if dataset.labels is not None:
        print(f"acc: {accuracy(dataset.labels, assign, state.n_clusters).acc:.4f}")
    return EXIT_OK


def cmd_export_embeddings(doc):
    dataset = cfg.load_dataset(doc)
    params, state = _restore(doc, dataset)
    z, _, assign = predict(params, state, dataset.images)
    out = Path(doc["out_dir"])
    export_embeddings(z, dataset.labels, assign, out / "embeddings.csv")
    export_projection(project_2d(z), dataset.labels, assign, out / "projection.csv")
    print(f"wrote {out / 'embeddings.csv'} and {out / 'projection.csv'}")
    return EXIT_OK


def ablation_rows(doc, dataset, k, seeds=None):
    """Final ACC per variant and seed: ``{variant: [acc, ...]}``."""
    base = cfg.train_config(doc)
    seeds = seeds if seeds is not None else doc["ablation"]["seeds"]
    results = {}
    for name, overrides in ABLATION_VARIANTS.items():
        accs = []
        for s in seeds:
            config = replace(base, init_seed=s, shuffle_seed=s + 1, augment_seed=s + 2,
                             **overrides)
            accs.append(run(config, dataset, k).acc)
            log.info("ablation %s seed %d: acc %.4f", name, s, accs[-1])
        results[name] = accs
    return results


def cmd_ablate(doc):
    dataset = cfg.load_dataset(doc)
    if dataset.labels is None:
        raise ConfigError("ablation needs a labelled dataset")
    results = ablation_rows(doc, dataset, cfg.n_clusters(doc, dataset))
    rows = [[name, _fmt(float(np.median(a))), _fmt(min(a)), _fmt(max(a))]
            for name, a in results.items()]
    path = Path(doc["out_dir"]) / "ablation.csv"
    _write_csv(path, ["variant", "acc_median", "acc_min", "acc_max"], rows)
    for row in rows:
        print(",".join(row))
    return EXIT_OK


def cmd_imbalance(doc, r_min_list=None):
    r_min_list = r_min_list or doc["imbalance"]["r_min"]
    for r in r_min_list:
        if not 0 < r <= 1:
            raise ConfigError(f"r_min must lie in (0, 1], got {r}")
    dataset = cfg.load_dataset(doc)
    k = cfg.n_clusters(doc, dataset)
    config = cfg.train_config(doc)
    rows = []
    for r in r_min_list:
        sub = imbalanced_subsample(dataset, r, seed=doc["imbalance"]["seed"])
        acc = run(config, sub, k).acc
        rows.append([_fmt(r), _fmt(acc)])
        print(f"r_min={r:g}: {len(sub)} samples, acc {acc:.4f}")
    _write_csv(Path(doc["out_dir"]) / "imbalance.csv", ["r_min", "acc"], rows)
    return EXIT_OK


def cmd_selftest():
    from .selftest import format_table, run_checks

    results = run_checks()
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_SELFTEST


def main(argv=None):
    parser = _parser()
    args = parser.parse_args(argv)
    if args.command is None and not args.print_defaults:
        parser.error("a command is required")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    # one BLAS thread keeps every run bit-reproducible
    with threadpool_limits(1):
        return _dispatch(args)


def _dispatch(args):
    try:
        if args.print_defaults:
            print(json.dumps(cfg.defaults(), indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "selftest":
            return cmd_selftest()
        doc = _load_config(args)
        if args.command == "train":
            return cmd_train(doc)
        if args.command == "eval":
            return cmd_eval(doc)
        if args.command == "export-embeddings":
            return cmd_export_embeddings(doc)
        if args.command == "ablate":
            return cmd_ablate(doc)
        if args.command == "imbalance":
            return cmd_imbalance(doc, args.r_min)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DegenerateEmbedding, TruncatedFile) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc.filename or exc}: not found", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
