"""Command-line wrapper: export a bank or validate an existing one."""

import argparse
import json
import sys

from .export import ExportSpec, export, validate_bank


def cmd_export(args):
    if args.spec:
        spec = ExportSpec.from_json(args.spec)
    else:
        if not (args.manifest and args.out and args.tasks):
            raise SystemExit("either --spec or all of --manifest/--out/--tasks required")
        with open(args.tasks) as f:
            tasks = json.load(f)
        spec = ExportSpec(
            manifest=args.manifest,
            out=args.out,
            task_assignment=tasks,
            weights=args.weights,
            pooling=args.pooling,
            batch_size=args.batch_size,
            seed=args.seed,
        )
    summary = export(spec)
    print(json.dumps({"bank": spec.out, "records": summary["records"],
                      "m": summary["m"], "num_layers": summary["num_layers"]}))
    return 0


def cmd_validate(args):
    print(json.dumps(validate_bank(args.bank), sort_keys=True, indent=2))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ptm-exporter")
    sub = parser.add_subparsers(dest="command", required=True)

    e = sub.add_parser("export", help="extract features and write a DGFB bank")
    e.add_argument("--spec", help="ExportSpec JSON file")
    e.add_argument("--manifest", help="CSV with path,class,domain,split columns")
    e.add_argument("--out")
    e.add_argument("--tasks", help="task assignment JSON file")
    e.add_argument("--weights", choices=["pretrained", "random"], default="pretrained")
    e.add_argument("--pooling", choices=["cls_token", "mean"], default="cls_token")
    e.add_argument("--batch-size", dest="batch_size", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_export)

    v = sub.add_parser("validate", help="re-read a bank and report its contents")
    v.add_argument("--bank", required=True)
    v.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
