"""Build a zoo, measure it, score it, and print the report plus stage timings.

    python scripts/run_pipeline.py --out runs/default
    python scripts/run_pipeline.py --zoo-config configs/zoo_default.json \
        --run-config configs/run_default.json --out runs/default --parallel 8

Re-running with the same --out reuses the zoo (unless --force) and every
measure result whose provenance hash still matches.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from reprgap.cli import main as cli

ROOT = Path(__file__).resolve().parents[1]


def stage(name, argv, timings):
    t0 = time.perf_counter()
    code = cli(argv)
    timings[name] = round(time.perf_counter() - t0, 2)
    print(f"== {name}: exit {code} in {timings[name]:.1f}s", flush=True)
    return code


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--zoo-config", default=str(ROOT / "configs" / "zoo_default.json"))
    ap.add_argument("--run-config", default=str(ROOT / "configs" / "run_default.json"))
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--parallel", type=int, default=1)
    ap.add_argument("--force", action="store_true", help="rebuild the zoo even if it exists")
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    zoo, timings = out / "zoo", {}
    if args.force or not (zoo / "manifest.json").exists():
        build = ["zoo-build", "--config", args.zoo_config, "--out", str(zoo), "--parallel", str(args.parallel)]
        if args.force:
            build.append("--force")
        if stage("zoo-build", build, timings):
            return 2
    code = stage("measure", ["measure", "--zoo", str(zoo), "--config", args.run_config,
                             "--out", str(out / "results.jsonl"), "--parallel", str(args.parallel)], timings)
    if code == 2:
        return 2
    stage("score", ["score", "--zoo", str(zoo), "--config", args.run_config, "--results", str(out / "results.jsonl"),
                    "--out", str(out / "scores.json"), "--report", str(out / "report.txt")], timings)
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    print(f"total {sum(timings.values()):.1f}s -> {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
