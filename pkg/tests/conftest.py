import json
from pathlib import Path

import pytest

from envsynth.cli import bundled_env, main
from envsynth.client import GeneratorClient
from envsynth.graphgen import read_jsonl
from envsynth.heuristic import HeuristicBackend
from envsynth.taskgen import TaskSample

FIXTURE_CONFIG = Path(__file__).resolve().parents[1] / "src" / "envsynth" / "fixtures" / "retail" / "pipeline.json"
PIPELINE = ["synth-env", "build-graph", "sample-seqs", "gen-tasks", "rollout", "advantage"]


def run_pipeline(workdir: Path, stages=PIPELINE, config: Path = FIXTURE_CONFIG, extra=()) -> None:
    for stage in stages:
        code = main([stage, "--workdir", str(workdir), "--config", str(config), *extra])
        assert code == 0, f"stage {stage} exited {code}"


@pytest.fixture(scope="session")
def retail():
    return bundled_env("retail")


@pytest.fixture
def heuristic_client(retail):
    return GeneratorClient(HeuristicBackend(retail))


@pytest.fixture(scope="session")
def pipeline_dir(tmp_path_factory):
    """One full replay-mode pipeline run over the bundled cassette."""
    workdir = tmp_path_factory.mktemp("pipeline")
    run_pipeline(workdir)
    return workdir


@pytest.fixture(scope="session")
def fixture_tasks(pipeline_dir, retail):
    rows = read_jsonl(pipeline_dir / "tasks.jsonl")
    assert rows, "fixture pipeline produced no tasks"
    return [TaskSample.from_json(retail.schema, r) for r in rows]


@pytest.fixture
def write_config(tmp_path):
    def write(**overrides) -> Path:
        cfg = json.loads(FIXTURE_CONFIG.read_text())
        cfg.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        return path

    return write


# -- acceptance summary ------------------------------------------------------

_CRITERIA: dict = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when == "teardown":
        return
    number, title = mark.args
    passed = call.excinfo is None
    if call.when == "setup" and passed:
        return
    _CRITERIA[number] = (title, _CRITERIA.get(number, (title, True))[1] and passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}")
