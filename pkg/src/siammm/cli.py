"""Command-line entry point.

Exit codes: 0 success, 1 usage or data error, 2 numeric failure.
"""

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .encoder import load_checkpoint
from .errors import NumericalError
from .evaluate import ami, linear_probe, majority_label_accuracy
from .mixture import (VonMisesFisherMixture, e_step_hard, load_snapshot, save_snapshot,
                      save_snapshot_json)
from .trainer import TrainConfig, fit, write_run_outputs

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

# Each ablation variant is a set of overrides on the base config.
VARIANTS = {
    "siammm": {"loss_mode": "siammm"},
    "siammm_no_inst": {"loss_mode": "siammm_no_inst"},
    "nce1": {"loss_mode": "nce1"},
    "nce2": {"loss_mode": "nce2"},
    "inst_only": {"loss_mode": "inst_only"},
    "fixed": {"merge": False},
    "merged": {"merge": True},
    "plain": {"kappa_mode": "plain"},
    "pca": {"kappa_mode": "pca"},
    "hard_cosine": {"assign_mode": "hard_cosine"},
    "posterior": {"assign_mode": "posterior"},
    "consistent": {"centroid_mode": "consistent"},
    "reinit": {"centroid_mode": "reinit"},
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class UsageError(Exception):
    pass


def _parse_bool(text):
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _coerce(value, default):
    if isinstance(default, bool):
        return _parse_bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value.strip()


def parse_pairs(pairs, defaults, source="--set"):
    """Turn ``key=value`` strings into typed values keyed by the ``defaults`` names."""
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"{source}: expected key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in defaults:
            raise UsageError(f"{source}: unknown key {key!r}; valid keys: "
                             f"{', '.join(sorted(defaults))}")
        try:
            out[key] = _coerce(value, defaults[key])
        except ValueError as exc:
            raise UsageError(f"{source}: bad value for {key}: {exc}") from None
    return out


def read_config_file(path):
    """Flat ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    pairs = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            pairs.append(line)
    return pairs


def _defaults_of(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def build_train_config(args):
    defaults = _defaults_of(TrainConfig())
    values = {}
    if args.config:
        values.update(parse_pairs(read_config_file(args.config), defaults, args.config))
    values.update(parse_pairs(args.set or [], defaults))
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load(path, fmt=None):
    if not Path(path).exists():
        raise UsageError(f"dataset not found: {path}")
    return load_dataset(path, fmt)


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _quality(labels, embeddings, truth, seed):
    """Clustering and probe metrics, or ``None`` entries when no labels exist."""
    if truth is None:
        return {"ami": None, "majority_acc": None, "probe_acc": None}
    probe = linear_probe(embeddings, truth, seed=seed) if np.unique(truth).size > 1 else None
    return {"ami": ami(labels, truth), "majority_acc": majority_label_accuracy(labels, truth),
            "probe_acc": probe}


def _train_once(ds, config, verbose=True):
    def report(rep):
        if verbose:
            print(f"epoch {rep.epoch:3d}  K={rep.K:4d}  loss={rep.mean_loss:.4f}  "
                  f"loglik={rep.log_likelihood:.4f}  merges={rep.merges}")
    net, state, history = fit(ds.features, config, callback=report)
    emb = net.embed(ds.features, "momentum")
    labels = e_step_hard(emb, state)
    return net, state, history, emb, labels


def cmd_train(args):
    config = build_train_config(args)
    ds = _load(args.data, args.format)
    net, state, history, emb, labels = _train_once(ds, config, verbose=not args.quiet)
    out = Path(args.out)
    write_run_outputs(out, net, state, history, config.k0)
    metrics = _quality(labels, emb, ds.labels, config.seed)
    metrics.update(K_final=int(state.n_components), epochs=int(config.epochs))
    _write_json(out / "metrics.json", metrics)
    print(f"final K={state.n_components}; outputs in {out}")
    return EXIT_OK


def cmd_cluster(args):
    defaults = VonMisesFisherMixture().get_params()
    defaults["random_state"] = 0
    values = {}
    if args.config:
        values.update(parse_pairs(read_config_file(args.config), defaults, args.config))
    values.update(parse_pairs(args.set or [], defaults))
    if args.k0 is not None:
        values["n_components"] = args.k0
    if args.iters is not None:
        values["max_iter"] = args.iters
    if args.assign is not None:
        values["assign_mode"] = args.assign
    if args.merge is not None:
        values["merge"] = args.merge == "on"
    if args.seed is not None:
        values["random_state"] = args.seed
    ds = _load(args.data, args.format)
    model = VonMisesFisherMixture(**{**defaults, **values})
    try:
        model.fit(ds.features)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "assignments.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "cluster"])
        for i, c in enumerate(model.labels_):
            w.writerow([i, int(c)])
    with open(out / "trajectory.jsonl", "w") as fh:
        for it, (ll, k) in enumerate(zip(model.log_likelihood_, model.n_components_history_)):
            fh.write(json.dumps({"iteration": it + 1, "K": int(k), "log_likelihood": ll}) + "\n")
    save_snapshot(model.state_, out / "mixture.smm1")
    save_snapshot_json(model.state_, out / "mixture.json")
    print(f"final K={model.state_.n_components}; outputs in {out}")
    return EXIT_OK


def _read_assignments(path):
    if not Path(path).exists():
        raise UsageError(f"assignments file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0]] != ["index", "cluster"]:
        raise UsageError(f"{path}: expected header 'index,cluster'")
    try:
        return np.array([int(r[1]) for r in rows[1:] if r], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise UsageError(f"{path}: bad row: {exc}") from None


def cmd_eval(args):
    ds = _load(args.data, args.format)
    if ds.labels is None:
        raise UsageError(f"{args.data} has no labels; evaluation needs ground truth")
    if args.checkpoint:
        if not Path(args.checkpoint).exists():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        emb = load_checkpoint(args.checkpoint).embed(ds.features, "momentum")
    else:
        norms = np.linalg.norm(ds.features, axis=1, keepdims=True)
        emb = ds.features / np.where(norms > 0, norms, 1.0)
    if args.assignments:
        labels = _read_assignments(args.assignments)
    elif args.snapshot:
        if not Path(args.snapshot).exists():
            raise UsageError(f"snapshot not found: {args.snapshot}")
        state = load_snapshot(args.snapshot)
        if state.dim != emb.shape[1]:
            raise UsageError(f"snapshot dimension {state.dim} does not match embedding "
                             f"dimension {emb.shape[1]}")
        labels = e_step_hard(emb, state)
    else:
        raise UsageError("eval needs --assignments or --snapshot")
    if labels.shape[0] != ds.labels.shape[0]:
        raise UsageError(f"length mismatch: {labels.shape[0]} assignments but "
                         f"{ds.labels.shape[0]} labels")
    metrics = _quality(labels, emb, ds.labels, args.seed or 0)
    metrics["K"] = int(np.unique(labels).size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_synth(args):
    try:
        spec = SyntheticSpec(g=args.g, dim=args.dim, kappa_true=args.kappa, n=args.n,
                             seed=args.seed or 0, input_map=args.input_map)
        ds = generate_synthetic(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, args.out, args.format)
    print(f"wrote {ds.n} samples of dimension {ds.dim} to {args.out}")
    return EXIT_OK


def cmd_ablate(args):
    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = [v for v in names if v not in VARIANTS]
    if unknown or not names:
        raise UsageError(f"unknown variant(s) {', '.join(unknown) or '(none)'}; "
                         f"choose from {', '.join(VARIANTS)}")
    base = build_train_config(args)
    ds = _load(args.data, args.format)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in names:
        config = replace(base, **VARIANTS[name])
        print(f"-- variant {name}")
        t0 = time.perf_counter()
        net, state, history, emb, labels = _train_once(ds, config, verbose=not args.quiet)
        wall = time.perf_counter() - t0
        q = _quality(labels, emb, ds.labels, config.seed)
        write_run_outputs(out / name, net, state, history, config.k0)
        rows.append([name, state.n_components, q["ami"], q["probe_acc"], f"{wall:.3f}"])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "K_final", "ami", "probe_acc", "wall_time"])
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")
    return EXIT_OK


def _add_data_args(p):
    p.add_argument("--data", required=True, help="dataset path (.csv or SMMD binary)")
    p.add_argument("--format", choices=("csv", "smm_binary"), default=None)


def _add_config_args(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
    p.add_argument("--seed", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="siammm", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (env SIAMMM_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train encoder and mixture")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cluster", help="EM on precomputed embeddings")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--k0", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--assign", choices=("soft", "hard"), default=None)
    p.add_argument("--merge", choices=("on", "off"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("eval", help="score assignments against labels")
    _add_data_args(p)
    p.add_argument("--assignments")
    p.add_argument("--snapshot")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic labeled dataset")
    p.add_argument("--g", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input-map", choices=("identity", "random_linear"), default="identity")
    p.add_argument("--format", choices=("csv", "smm_binary"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="run a grid of variants")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--variants", required=True, help="comma-separated variant names")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def _thread_limit(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SIAMMM_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"SIAMMM_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        limit = _thread_limit(args)
        if limit is not None and limit < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(limits=limit):
            return args.func(args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
