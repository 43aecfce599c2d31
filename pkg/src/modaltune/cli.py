"""Batch command-line front end.

Commands: gen-data, train, extract, probe, eval-surv, attribute, report.
One JSON config drives every stage; individual keys can be overridden with
`--set key.path=value`, and MODALTUNE_SEED overrides the seed. All outputs
land under the run directory given by --out, tracked in manifest.json.

Exit codes: 0 ok, 1 other error, 2 missing input, 3 schema mismatch,
4 config-digest mismatch, 5 degenerate task.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import apply_overrides, load_config
from .evaluation import DegenerateTaskError
from .fileio import FileFormatError
from .pipeline import DigestMismatchError, MissingInputError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_INPUT = 2
EXIT_SCHEMA_MISMATCH = 3
EXIT_DIGEST_MISMATCH = 4
EXIT_DEGENERATE_TASK = 5


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON run config (defaults apply)")
    parser.add_argument("--out", required=True, help="run directory")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modaltune",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("gen-data", help="generate the synthetic cohorts"))
    _common(sub.add_parser("train", help="train adapters (per site, or pooled)"))

    p = sub.add_parser("extract", help="extract general-prompt features")
    _common(p)
    p.add_argument("--scope", required=True, help="trained scope (site name or pan_cancer)")
    p.add_argument("--site", required=True)

    p = sub.add_parser("probe", help="linear probe on extracted features")
    _common(p)
    p.add_argument("--scope", required=True)
    p.add_argument("--site", required=True)
    p.add_argument("--features", default=None, help="features CSV (default: run dir)")

    p = sub.add_parser("eval-surv", help="CPH fit, C-index, KM curves, log-rank")
    _common(p)
    p.add_argument("--scope", required=True)
    p.add_argument("--site", required=True)
    p.add_argument("--features", default=None)

    p = sub.add_parser("attribute", help="integrated gradients + attention maps")
    _common(p)
    p.add_argument("--scope", required=True)
    p.add_argument("--site", required=True)
    p.add_argument("--patient", required=True)

    p = sub.add_parser("ood", help="frozen-model evaluation on the held-out site")
    _common(p)
    p.add_argument("--scope", required=True)

    _common(sub.add_parser("report", help="aggregate metrics into a summary"))
    return parser


def _run(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_config(args.config), args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "gen-data":
        outputs = pipeline.gen_data(cfg, out)
        pipeline.update_manifest(out, "gen-data", outputs, cfg)
        print(f"gen-data: wrote {len(outputs)} outputs under {out / 'data'}")
        return EXIT_OK

    if args.command == "train":
        outputs = []
        if cfg["training"]["pan_cancer"]:
            sites = [s["name"] for s in cfg["data"]["sites"]]
            trained = pipeline.run_training(cfg, out, sites, scope="pan_cancer")
            outputs.append(str(out / "train" / "pan_cancer"))
            print(f"train: pan_cancer best epoch {trained.best_epoch}")
        else:
            for s in cfg["data"]["sites"]:
                trained = pipeline.run_training(cfg, out, [s["name"]],
                                                scope=s["name"])
                outputs.append(str(out / "train" / s["name"]))
                print(f"train: {s['name']} best epoch {trained.best_epoch}")
        pipeline.update_manifest(out, "train", outputs, cfg)
        return EXIT_OK

    if args.command == "extract":
        path = pipeline.extract_stage(cfg, out, args.scope, args.site)
        pipeline.update_manifest(out, f"extract:{args.scope}:{args.site}",
                                 [str(path)], cfg)
        print(f"extract: {path}")
        return EXIT_OK

    if args.command == "probe":
        path = pipeline.probe_stage(cfg, out, args.scope, args.site,
                                    Path(args.features) if args.features else None)
        pipeline.update_manifest(out, f"probe:{args.scope}:{args.site}",
                                 [str(path)], cfg)
        print(f"probe: {path}")
        return EXIT_OK

    if args.command == "eval-surv":
        paths = pipeline.eval_surv_stage(cfg, out, args.scope, args.site,
                                         Path(args.features) if args.features else None)
        pipeline.update_manifest(out, f"eval-surv:{args.scope}:{args.site}",
                                 [str(p) for p in paths], cfg)
        print(f"eval-surv: {paths[0]}")
        return EXIT_OK

    if args.command == "attribute":
        paths = pipeline.attribute_stage(cfg, out, args.scope, args.site,
                                         args.patient)
        pipeline.update_manifest(out, f"attribute:{args.scope}:{args.patient}",
                                 [str(p) for p in paths], cfg)
        print(f"attribute: {paths[0]}")
        return EXIT_OK

    if args.command == "ood":
        path = pipeline.ood_stage(cfg, out, args.scope)
        pipeline.update_manifest(out, f"ood:{args.scope}", [str(path)], cfg)
        print(f"ood: {path}")
        return EXIT_OK

    if args.command == "report":
        paths = pipeline.report_stage(cfg, out)
        pipeline.update_manifest(out, "report", [str(p) for p in paths], cfg)
        print(f"report: {paths[0]}")
        return EXIT_OK

    raise AssertionError(f"unhandled command {args.command}")


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)  # bitwise run-to-run reproducibility
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except DigestMismatchError as exc:
        print(f"error code=4 kind=digest-mismatch: {exc}", file=sys.stderr)
        return EXIT_DIGEST_MISMATCH
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"error code=2 kind=missing-input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except DegenerateTaskError as exc:
        print(f"error code=5 kind=degenerate-task: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE_TASK
    except FileFormatError as exc:
        print(f"error code=3 kind=schema-mismatch: {exc}", file=sys.stderr)
        return EXIT_SCHEMA_MISMATCH
    except Exception as exc:  # noqa: BLE001 - single CLI failure funnel
        print(f"error code=1 kind={type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
