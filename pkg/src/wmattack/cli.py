"""Command-line entry point: ``wmattack <command> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import config as cfgmod
from . import experiments as ex

log = logging.getLogger("wmattack")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file merged over the defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry, e.g. attack.tau=0.1 (repeatable)")
    p.add_argument("--out", type=Path, help="output directory (default: <out_dir>/<hash>/<command>)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wmattack", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("gen-data", "write ground-truth rollouts as JSONL"),
                       ("train", "fit the perceptron denoiser and save its parameters"),
                       ("attack", "run the configured attack over N seeded videos"),
                       ("downstream", "detector and planner evaluation with generated augmentation")):
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("ablate", help="sweep tau, stage or channel with fixed seeds")
    p.add_argument("kind", choices=("tau", "stage", "channel"))
    _common(p)
    p = sub.add_parser("report", help="markdown summary of metrics CSV files")
    p.add_argument("paths", nargs="*", type=Path)
    p.add_argument("--out", type=Path)
    sub.add_parser("show-config", help="print the resolved config").add_argument("--config", type=Path)
    return ap


def _stamp(out: Path, cfg: dict) -> None:
    # timestamps live apart from the artifacts so reruns stay byte-identical
    ex.write_text(out / "run_info.json", json.dumps(
        {"config_hash": cfgmod.config_hash(cfg), "finished": datetime.now(timezone.utc).isoformat()}) + "\n")


def run(args: argparse.Namespace) -> int:
    if args.command == "report":
        paths = list(args.paths)
        if not paths:
            paths = sorted(Path(".").glob("runs/**/*metrics*.csv")) + sorted(Path(".").glob("runs/**/ablate_*.csv"))
        text = ex.report(paths)
        if args.out:
            ex.write_text(args.out, text)
        print(text, end="")
        return 0
    cfg = cfgmod.resolve(args.config, getattr(args, "overrides", []))
    if args.command == "show-config":
        print(cfgmod.dump_yaml(cfg), end="")
        return 0
    out = args.out or ex.run_dir(cfg, args.command)
    if args.command == "gen-data":
        text = ex.dataset_jsonl(cfg, ex.dataset(cfg))
        ex.write_text(out / "rollouts.jsonl", text)
        ex.write_text(out / "manifest.json", json.dumps(
            ex.manifest(cfg, [cfg["world"]["data_seed"]], ["rollouts.jsonl"]), sort_keys=True, indent=2) + "\n")
    elif args.command == "train":
        params = ex.train(cfg)
        params.save(out / "denoiser.json")
        ex.write_text(out / "manifest.json", json.dumps(
            ex.manifest(cfg, [cfg["denoiser"]["train"]["seed"]], ["denoiser.json"]), sort_keys=True, indent=2) + "\n")
        print(f"final loss {params.final_loss:.5f}")
    elif args.command == "attack":
        row, _ = ex.attack(cfg, out)
        print(ex.metrics_csv([row]), end="")
    elif args.command == "ablate":
        rows = ex.ablate(cfg, args.kind, out)
        print(ex.metrics_csv(rows), end="")
    elif args.command == "downstream":
        rows = ex.downstream(cfg, out=out)
        print(ex.csv_text(ex.DOWNSTREAM_FIELDS, rows), end="")
    _stamp(out, cfg)
    log.info("wrote %s", out)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (cfgmod.ConfigError, FileNotFoundError, PermissionError, IsADirectoryError, ValueError,
            FloatingPointError) as exc:
        print(f"wmattack {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
