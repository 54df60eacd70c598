"""Run every stage against the bundled retail environment.

    python3 scripts/run_pipeline.py --workdir runs/demo            # replay the bundled cassette
    python3 scripts/run_pipeline.py --workdir runs/live --config my.json

Prints each stage's one-line JSON result and stops at the first failure.
"""

import argparse
import sys
from pathlib import Path

from envsynth.cli import STAGES, main

BUNDLED_CONFIG = Path(__file__).resolve().parents[1] / "src" / "envsynth" / "fixtures" / "retail" / "pipeline.json"


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/demo")
    ap.add_argument("--config", default=str(BUNDLED_CONFIG))
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--stages", nargs="*", default=list(STAGES), choices=list(STAGES))
    args = ap.parse_args(argv)
    for stage in args.stages:
        extra = ["--seed", str(args.seed)] if args.seed is not None else []
        code = main([stage, "--workdir", args.workdir, "--config", args.config, "--jobs", str(args.jobs), *extra])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
