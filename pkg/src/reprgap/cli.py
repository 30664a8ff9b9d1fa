"""``reprgap`` command line: zoo-build | measure | score | report.

Exit codes: 0 success, 1 partial failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .model_io import FormatError
from .pipeline import (RunConfig, RunConfigError, read_results, render_report, run_measures, score_results,
                       write_scores)
from .zoo import ZooConfig, ZooExists, build_zoo

log = logging.getLogger("reprgap")


class ConfigError(Exception):
    pass


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{what}: file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what}: invalid JSON ({exc})") from None


def _run_config(args) -> RunConfig:
    doc = _load_json(args.config, "--config") if args.config else {}
    try:
        cfg = RunConfig.from_dict(doc)
    except RunConfigError as exc:
        raise ConfigError(f"config field {exc}") from None
    if getattr(args, "measures", None):
        wanted = [m.strip() for m in args.measures.split(",") if m.strip()]
        unknown = sorted(set(wanted) - {m.id for m in cfg.measures})
        if unknown:
            raise ConfigError(f"--measures: ids {unknown} not in the run config")
        cfg.measures = [m for m in cfg.measures if m.id in wanted]
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "budget", None) is not None:
        cfg.budget = args.budget
    if getattr(args, "parallel", None) is not None:
        cfg.parallel = args.parallel
    return cfg


def _zoo_dir(args, cfg: RunConfig) -> Path:
    zoo = args.zoo or cfg.zoo
    if not zoo:
        raise ConfigError("--zoo: no zoo directory given")
    if not (Path(zoo) / "manifest.json").exists():
        raise ConfigError(f"--zoo: {zoo} has no manifest.json")
    return Path(zoo)


def cmd_zoo_build(args) -> int:
    doc = _load_json(args.config, "--config")
    try:
        cfg = ZooConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field {exc}") from None
    out = Path(args.out)

    def progress(done, total, rec):
        state = "ok" if rec.saturated else ",".join(rec.flags)
        print(f"[{done}/{total}] {rec.model_id} {rec.config} train={rec.train_accuracy:.4f} "
              f"test={rec.test_accuracy:.4f} gap={rec.gap:.4f} epochs={rec.epochs} {state}", flush=True)

    try:
        build_zoo(cfg, out, parallel=args.parallel or 1, force=args.force, progress=progress)
    except ZooExists as exc:
        print(f"refusing: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_measure(args) -> int:
    cfg = _run_config(args)
    zoo = _zoo_dir(args, cfg)
    out = args.out or cfg.results
    if not out:
        raise ConfigError("--out: no results path given")
    rows, computed, failed = run_measures(zoo, cfg, out, progress=lambda mid: print(f"measured {mid}", flush=True))
    print(f"{len(rows)} results ({computed} computed, {len(rows) - computed} reused, {failed} failed) -> {out}")
    for r in rows:
        if "error" in r:
            print(f"failed: {r['model_id']} {r['measure']}: {r['error']}", file=sys.stderr)
    return 1 if failed else 0


def cmd_score(args) -> int:
    cfg = _run_config(args)
    zoo = _zoo_dir(args, cfg)
    results = args.results or cfg.results
    if not results or not Path(results).exists():
        raise ConfigError(f"--results: results file {results!r} not found")
    scores = score_results(zoo, read_results(results), cfg)
    out = args.out or cfg.scores
    if out:
        write_scores(out, scores)
    report = render_report(scores)
    if args.report or cfg.report:
        Path(args.report or cfg.report).write_text(report)
    sys.stdout.write(report)
    return 0


def cmd_report(args) -> int:
    scores = _load_json(args.scores, "--scores")
    report = render_report(scores)
    if args.out:
        Path(args.out).write_text(report)
    sys.stdout.write(report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reprgap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("zoo-build", help="train a hyperparameter grid of small CNNs")
    p.add_argument("--config", required=True, help="zoo config JSON")
    p.add_argument("--out", required=True, help="zoo directory")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--force", action="store_true", help="overwrite an existing zoo")
    p.set_defaults(func=cmd_zoo_build)

    p = sub.add_parser("measure", help="compute complexity measures for every zoo model")
    p.add_argument("--zoo")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", help="results file (JSON lines)")
    p.add_argument("--measures", help="comma-separated subset of measure ids")
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--parallel", type=int)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("score", help="Kendall tau and conditional-MI score per measure")
    p.add_argument("--zoo")
    p.add_argument("--config")
    p.add_argument("--results")
    p.add_argument("--out", help="scores JSON")
    p.add_argument("--report", help="also write the text table here")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="render a scores JSON as a text table")
    p.add_argument("--scores", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
