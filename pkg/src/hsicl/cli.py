"""Command-line entry point: ``hsicl <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import save_patchset
from .exceptions import HsiclError
from .harness import AXES, SweepSpec, export_embeddings, report, run_sweep, summarize
from .training import RunConfig, load_patches, read_results, run_experiment

EXIT_CODES = """\
exit codes:
  0  success
  1  unexpected internal error
  2  usage error (unknown command, bad flag)
  3  invalid or missing config
  4  dataset missing or malformed
  5  checkpoint missing or incompatible
  6  non-finite loss or gradient
  7  array shape mismatch

On failure a single line "error: <category>: <message>" is written to stderr.
"""


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: usage: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run config (flags below override it)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: ./out)")
    common.add_argument("--seed", type=_seeds, help="comma-separated seeds, e.g. 0,1,2")
    common.add_argument("--task", choices=("multi", "single"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(
        prog="hsicl",
        description="Contrastive pretraining and fine-tuning for hyperspectral patch classification.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    sub.add_parser("sample-patches", parents=[common], help="sample and save a patch set, print its census")
    sub.add_parser("pretrain", parents=[common], help="contrastive pretraining of the encoder")
    p = sub.add_parser("finetune", parents=[common], help="fine-tune a classifier on a pretrained encoder")
    p.add_argument("--mode", choices=("cl-tune", "cl-freeze"))
    p.add_argument("--checkpoint", help="encoder checkpoint; '{seed}' is replaced by the seed")
    p = sub.add_parser("baseline", parents=[common], help="train an autoencoder baseline scheme")
    p.add_argument("--scheme", choices=("iterative", "joint", "cascade"))
    p = sub.add_parser("sweep", parents=[common], help="run one axis of experiments")
    p.add_argument("--axis", choices=tuple(AXES), required=True)
    p.add_argument("--stage", choices=("finetune", "baseline"))
    p.add_argument("--mode", choices=("cl-tune", "cl-freeze"))
    p.add_argument("--scheme", choices=("iterative", "joint", "cascade"))
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p = sub.add_parser("export-embeddings", parents=[common], help="write per-patch hidden representations")
    p.add_argument("--checkpoint", required=True, help="encoder or classifier checkpoint directory")
    sub.add_parser("report", parents=[common], help="rebuild results from run.json files under --out")
    for cmd in sub.choices.values():
        cmd.epilog = EXIT_CODES
        cmd.formatter_class = argparse.RawDescriptionHelpFormatter
    return parser


def _config(args, **fixed) -> RunConfig:
    overrides = {"task": args.task, "seeds": args.seed}
    for name in ("mode", "scheme", "checkpoint", "stage"):
        overrides[name] = getattr(args, name, None)
    overrides.update(fixed)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.config is not None:
        return RunConfig.from_toml(args.config, **overrides)
    return RunConfig.from_dict(overrides)


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _sample(args) -> None:
    config = _config(args)
    patches = load_patches(config)
    path = save_patchset(patches, args.out / f"patches-{config.task}")
    _print({"dataset": config.dataset, "task": config.task, "path": str(path), **patches.census()})


def _stage(stage):
    def run(args) -> None:
        config = _config(args, stage=stage)
        metrics = run_experiment(config, args.out)
        _print({"stage": stage, "seeds": metrics.seeds, "accuracies": metrics.accuracies, "mean": metrics.mean})

    return run


def _sweep(args) -> None:
    config = _config(args)
    if config.stage == "pretrain":
        config = config.replace(stage="finetune")
    summary = run_sweep(SweepSpec(args.axis, config), args.out, jobs=max(1, args.jobs))
    for row in summary:
        if row["seed"] == "mean":
            _print({"axis": row["axis"], "value": row["value"], "mean": row["accuracy"]})


def _export(args) -> None:
    config = _config(args)
    patches = load_patches(config)
    path = export_embeddings(args.checkpoint, patches, args.out / "embeddings.csv")
    _print({"path": str(path), "rows": len(patches)})


def _report(args) -> None:
    path = report(args.out)
    results = args.out / "results.csv"
    if results.exists():
        same = results.read_text() == path.read_text()
        _print({"report": str(path), "matches_results_csv": same, "rows": len(read_results(path))})
    else:
        _print({"report": str(path), "rows": len(read_results(path))})
    for row in summarize(args.out):
        _print(row)


COMMANDS = {
    "sample-patches": _sample,
    "pretrain": _stage("pretrain"),
    "finetune": _stage("finetune"),
    "baseline": _stage("baseline"),
    "sweep": _sweep,
    "export-embeddings": _export,
    "report": _report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except HsiclError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
