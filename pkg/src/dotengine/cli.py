"""Command-line entry point: generation, training, evaluation, sweeps.

All emitted artifacts embed the fully resolved configuration and seed, use
canonical JSON, and are byte-identical across re-runs with identical inputs.
The env var DOT_ENGINE_THREADS caps parallel per-seed evaluation.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics as met
from .featurebank import read_bank, write_bank
from .pipeline import EpisodeConfig, run_episode
from .synthgen import SynthConfig, describe, generate


def _dump(doc, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


class CliError(RuntimeError):
    def __init__(self, kind, message, fields=None):
        super().__init__(message)
        self.kind = kind
        self.fields = fields or []


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise CliError("config", f"bad seeds list {text!r}", ["seeds"]) from None


def _episode_config(args, seed):
    doc = {
        "e_dot": args.e_dot,
        "e_oa": args.e_oa,
        "k_prototypes": args.k_prototypes,
        "lam": args.lam,
        "tau": args.tau,
        "heads": args.heads,
        "cov_mode": args.cov_mode,
        "seed": seed,
        "no_dot": args.no_dot,
        "align_schedule": args.align_schedule,
        "scale": args.scale,
        "normalize_projections": args.normalize_projections,
        "phase1_epochs": args.phase1_epochs,
        "lr": args.lr,
        "dot_lr": args.dot_lr,
        "dot_weight_decay": args.dot_weight_decay,
        "anchors_per_pair": args.anchors_per_pair,
        "pool_per_class": args.pool_per_class,
        "align_samples": args.align_samples,
        "prototype_selection": args.prototype_selection,
    }
    problems = []
    if doc["e_dot"] < 1:
        problems.append("e_dot must be >= 1")
    if doc["e_oa"] < 1:
        problems.append("e_oa must be >= 1")
    if doc["k_prototypes"] < 1:
        problems.append("k_prototypes must be >= 1")
    if not 0 < doc["lam"] < 1:
        problems.append("lambda must lie in (0, 1)")
    if doc["tau"] <= 0:
        problems.append("tau must be positive")
    if doc["heads"] < 1:
        problems.append("heads must be >= 1")
    if doc["cov_mode"] not in ("diagonal", "full"):
        problems.append("cov-mode must be diagonal or full")
    if doc["lr"] <= 0:
        problems.append("lr must be positive")
    if doc["dot_lr"] < 0 or doc["dot_weight_decay"] < 0:
        problems.append("dot-lr and dot-weight-decay must be nonnegative")
    if min(doc["anchors_per_pair"], doc["pool_per_class"], doc["align_samples"]) < 1:
        problems.append("per-step sample counts must be >= 1")
    if problems:
        raise CliError("config", "; ".join(problems), problems)
    return EpisodeConfig.from_dict(doc)


def _run_seed(bank, args, seed):
    config = _episode_config(args, seed)
    _, tensor = run_episode(bank, config)
    return config, tensor


def _run_seeds(bank, args, seeds):
    workers = int(os.environ.get("DOT_ENGINE_THREADS", "1"))
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda s: _run_seed(bank, args, s), seeds))
    return [_run_seed(bank, args, s) for s in seeds]


def _aggregate(metric_dicts):
    keys = sorted({k for d in metric_dicts for k in d})
    agg = {}
    for k in keys:
        vals = [d[k] for d in metric_dicts if k in d]
        agg[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return agg


_TABLE_COLUMNS = ["a_all", "a_in", "a_out", "w_out", "a_un", "f_all", "f_un"]


def _report_text(agg, label):
    headers = ["run"] + [c for c in _TABLE_COLUMNS if c in agg]
    row = {"run": label}
    for c in headers[1:]:
        row[c] = f"{100 * agg[c]['mean']:.2f}±{100 * agg[c]['std']:.2f}"
    return met.report_table([row], headers)


def cmd_gen_synth(args):
    if args.config:
        with open(args.config) as f:
            cfg = SynthConfig.from_dict(json.load(f))
    else:
        cfg = SynthConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.unseen_domain:
        cfg.unseen_domain = True
    bank = generate(cfg)
    write_bank(bank, args.out)
    sidecar = dict(config=cfg.to_dict(), summary=describe(bank))
    _dump(sidecar, str(args.out) + ".json")
    print(json.dumps({"bank": str(args.out), "records": len(bank.records)}))
    return 0


def cmd_run(args):
    bank = read_bank(args.bank)
    seeds = _parse_seeds(args.seeds)
    if not seeds:
        raise CliError("config", "at least one seed is required", ["seeds"])
    out = Path(args.out)
    results = _run_seeds(bank, args, seeds)
    per_seed_metrics = []
    for (config, tensor), seed in zip(results, seeds):
        doc = tensor.to_json(extra={"config": config.to_dict(), "seed": seed})
        _dump(doc, out / f"tensor_seed{seed}.json")
        per_seed_metrics.append(met.compute_all(tensor))
    agg = _aggregate(per_seed_metrics)
    report = {
        "bank": str(args.bank),
        "seeds": seeds,
        "config": _episode_config(args, seeds[0]).to_dict() | {"seed": None},
        "per_seed": {str(s): m for s, m in zip(seeds, per_seed_metrics)},
        "aggregate": agg,
    }
    _dump(report, out / "report.json")
    text = _report_text(agg, "no_dot" if args.no_dot else "dot")
    (out / "report.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_eval(args):
    tensors = [met.load_tensor(p) for p in args.tensors]
    per = [met.compute_all(t) for t in tensors]
    agg = _aggregate(per)
    report = {"tensors": [str(p) for p in args.tensors], "per_tensor": per, "aggregate": agg}
    if args.out:
        _dump(report, Path(args.out) / "report.json")
        (Path(args.out) / "report.txt").write_text(_report_text(agg, "eval") + "\n")
    print(_report_text(agg, "eval"))
    return 0


def cmd_sweep(args):
    bank = read_bank(args.bank)
    seeds = _parse_seeds(args.seeds)
    grids = []
    if args.e_dot_values:
        grids += [("e_dot", int(v)) for v in args.e_dot_values.split(",")]
    if args.k_values:
        grids += [("k_prototypes", int(v)) for v in args.k_values.split(",")]
    if args.lambda_values:
        grids += [("lam", float(v)) for v in args.lambda_values.split(",")]
    if not grids:
        raise CliError("config", "no sweep values given", ["sweep"])
    points = []
    for param, value in grids:
        point_metrics = []
        for seed in seeds:
            setattr(args, {"e_dot": "e_dot", "k_prototypes": "k_prototypes", "lam": "lam"}[param], value)
            config = _episode_config(args, seed)
            _, tensor = run_episode(bank, config)
            point_metrics.append(met.compute_all(tensor))
        agg = _aggregate(point_metrics)
        points.append(
            {
                "param": param,
                "value": value,
                "a_all_mean": agg["a_all"]["mean"],
                "a_all_std": agg["a_all"]["std"],
                "metrics": agg,
            }
        )
    doc = {"bank": str(args.bank), "seeds": seeds, "points": points}
    _dump(doc, Path(args.out) / "sweep.json")
    rows = [
        {"param": p["param"], "value": p["value"], "a_all": p["a_all_mean"]} for p in points
    ]
    print(met.report_table(rows, ["param", "value", "a_all"]))
    return 0


def cmd_inspect(args):
    bank = read_bank(args.bank)
    print(json.dumps(describe(bank), sort_keys=True, indent=2))
    return 0


def _add_run_flags(p):
    d = EpisodeConfig()
    p.add_argument("--e-dot", dest="e_dot", type=int, default=d.e_dot)
    p.add_argument("--e-oa", dest="e_oa", type=int, default=d.e_oa)
    p.add_argument("--k-prototypes", dest="k_prototypes", type=int, default=d.k_prototypes)
    p.add_argument("--lambda", dest="lam", type=float, default=d.lam)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--heads", type=int, default=d.heads)
    p.add_argument("--cov-mode", dest="cov_mode", default=d.cov_mode)
    p.add_argument("--no-dot", dest="no_dot", action="store_true")
    p.add_argument("--align-schedule", dest="align_schedule", default=d.align_schedule)
    p.add_argument("--scale", choices=["per_head", "full_dim"], default=d.scale)
    p.add_argument("--phase1-epochs", dest="phase1_epochs", type=int, default=d.phase1_epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--dot-lr", dest="dot_lr", type=float, default=d.dot_lr,
                   help="transformation-phase learning rate; 0 reuses --lr")
    p.add_argument("--dot-weight-decay", dest="dot_weight_decay", type=float,
                   default=d.dot_weight_decay)
    p.add_argument("--anchors-per-pair", dest="anchors_per_pair", type=int,
                   default=d.anchors_per_pair)
    p.add_argument("--pool-per-class", dest="pool_per_class", type=int,
                   default=d.pool_per_class)
    p.add_argument("--align-samples", dest="align_samples", type=int,
                   default=d.align_samples)
    p.add_argument("--prototype-selection", dest="prototype_selection",
                   choices=["random", "knn"], default=d.prototype_selection)
    p.add_argument(
        "--raw-projections",
        dest="normalize_projections",
        action="store_false",
        help="use raw dot-product similarity instead of L2-normalized projections",
    )
    p.add_argument("--seeds", default="0")


def build_parser():
    parser = argparse.ArgumentParser(prog="dotengine")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate a synthetic feature bank")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="SynthConfig JSON file")
    g.add_argument("--seed", type=int)
    g.add_argument("--unseen-domain", dest="unseen_domain", action="store_true")
    g.set_defaults(func=cmd_gen_synth)

    r = sub.add_parser("run", help="run episodes and report metrics")
    r.add_argument("--bank", required=True)
    r.add_argument("--out", required=True)
    _add_run_flags(r)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="compute metrics from tensor files")
    e.add_argument("tensors", nargs="+")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="one-at-a-time hyperparameter sweeps")
    s.add_argument("--bank", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--e-dot-values", dest="e_dot_values")
    s.add_argument("--k-values", dest="k_values")
    s.add_argument("--lambda-values", dest="lambda_values")
    _add_run_flags(s)
    s.set_defaults(func=cmd_sweep)

    i = sub.add_parser("inspect", help="describe a feature bank")
    i.add_argument("--bank", required=True)
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(
            json.dumps({"error": err.kind, "message": str(err), "fields": err.fields}),
            file=sys.stderr,
        )
        return 2
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(
            json.dumps({"error": type(err).__name__, "message": str(err)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
