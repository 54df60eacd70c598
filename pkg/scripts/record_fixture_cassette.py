"""Re-record the bundled retail cassette with the heuristic backend.

Runs every stage that talks to the generator (environment synthesis,
LLM-judged tool graph, sequence sampling, task generation, rollouts with
a remote-style user and the MEU judge) in record mode.  The bundled
``pipeline.json`` is the config the cassette answers for.

    python3 scripts/record_fixture_cassette.py
"""

import shutil
import sys
import tempfile
from pathlib import Path

from envsynth.cli import main

FIXTURE = Path(__file__).resolve().parents[1] / "src" / "envsynth" / "fixtures" / "retail"
STAGES = ("synth-env", "build-graph", "sample-seqs", "gen-tasks", "rollout")


def record() -> int:
    cassette = FIXTURE / "cassette.jsonl"
    if cassette.exists():
        cassette.unlink()
    work = Path(tempfile.mkdtemp(prefix="envsynth-record-"))
    try:
        for stage in STAGES:
            code = main([stage, "--workdir", str(work), "--config", str(FIXTURE / "pipeline.json"),
                         "--cassette-mode", "record", "--cassette", str(cassette)])
            if code:
                return code
    finally:
        shutil.rmtree(work, ignore_errors=True)
    print(f"recorded {sum(1 for _ in open(cassette))} exchanges to {cassette}")
    return 0


if __name__ == "__main__":
    sys.exit(record())
