import json
import math
import shutil
from collections import defaultdict

import pytest

from envsynth import erpo
from envsynth.cli import STAGES, PipelineConfig, _build, build_parser, file_digest, main
from envsynth.graphgen import read_jsonl, write_jsonl

import oracles
from conftest import FIXTURE_CONFIG, PIPELINE


def error_record(capsys) -> dict:
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


def test_every_stage_writes_a_manifest(pipeline_dir):
    for stage in PIPELINE:
        manifest = json.loads((pipeline_dir / f"{stage}.manifest.json").read_text())
        assert manifest["stage"] == stage
        assert manifest["outputs"], stage
        for rel, digest in manifest["outputs"].items():
            assert file_digest(pipeline_dir / rel) == digest, (stage, rel)
        # the recorded config rebuilds to the same digest
        assert _build(PipelineConfig, manifest["config"], "manifest").digest == manifest["config_digest"]


def test_manifests_chain_inputs_to_outputs(pipeline_dir):
    produced = {}
    for stage in PIPELINE:
        manifest = json.loads((pipeline_dir / f"{stage}.manifest.json").read_text())
        for rel, digest in manifest["inputs"].items():
            if rel in produced:
                assert produced[rel] == digest, (stage, rel)
        produced.update(manifest["outputs"])
    assert "tasks.jsonl" in produced and "advantages.jsonl" in produced


def test_missing_input_is_a_machine_readable_error(tmp_path, capsys):
    code = main(["rollout", "--workdir", str(tmp_path), "--config", str(FIXTURE_CONFIG)])
    assert code == 2
    err = error_record(capsys)
    assert err["error"] == "MissingInput" and "tasks" in err["detail"]


def test_missing_config_file(tmp_path, capsys):
    assert main(["build-graph", "--workdir", str(tmp_path), "--config", str(tmp_path / "nope.json")]) == 2
    assert error_record(capsys)["error"] == "MissingInput"


@pytest.mark.parametrize("overrides", [
    {"walk_len": 3},
    {"M": 1},
    {"client": {"backend": "gpt"}},
    {"client": {"token": "x"}},
    {"objective": {"epsilon": 0}},
    {"policy": "greedy"},
])
def test_bad_config_is_rejected(tmp_path, write_config, capsys, overrides):
    code = main(["synth-env", "--workdir", str(tmp_path / "w"), "--config", str(write_config(**overrides))])
    assert code == 2
    assert error_record(capsys)["error"] == "ConfigInvalid"
    assert not (tmp_path / "w" / "synth-env.manifest.json").exists()


def test_unknown_flags_are_hard_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["rollout", "--workdir", str(tmp_path), "--turbo"])
    assert exc.value.code == 2


def test_help_lists_every_flag():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == set(STAGES)
    text = sub["advantage"].format_help()
    for flag in ("--workdir", "--config", "--jobs", "--seed", "--cassette-mode", "--cassette", "--verbose", "--logprobs"):
        assert flag in text


def test_stage_failure_exits_one(tmp_path, pipeline_dir, capsys):
    shutil.copytree(pipeline_dir / "env", tmp_path / "env")
    (tmp_path / "tasks.jsonl").write_text('{"task_id": "broken"}\n')
    code = main(["rollout", "--workdir", str(tmp_path), "--config", str(FIXTURE_CONFIG)])
    assert code == 1
    assert set(error_record(capsys)) == {"error", "detail"}


def test_seed_override_is_recorded(tmp_path, capsys):
    assert main(["synth-env", "--workdir", str(tmp_path), "--config", str(FIXTURE_CONFIG), "--seed", "9"]) == 0
    manifest = json.loads((tmp_path / "synth-env.manifest.json").read_text())
    assert manifest["seed"] == 9 and manifest["config"]["seed"] == 9
    assert json.loads(capsys.readouterr().out)["stage"] == "synth-env"


def test_defaults_are_serialized():
    cfg = PipelineConfig().to_json()
    assert (cfg["M"], cfg["batch_size"], cfg["client"]["cassette_mode"]) == (8, 32, "off")


def test_offline_pipeline_without_cassette(tmp_path):
    from conftest import run_pipeline

    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_walks": 6, "n_merges": 2, "M": 2, "population": 5}))
    run_pipeline(tmp_path / "w", config=cfg)
    assert read_jsonl(tmp_path / "w" / "trajectories.jsonl")


# -- advantage stage ---------------------------------------------------------


def test_advantages_match_exact_oracle(pipeline_dir):
    records = read_jsonl(pipeline_dir / "trajectories.jsonl")
    rows = read_jsonl(pipeline_dir / "advantages.jsonl")
    got = {r["traj_id"]: r["advantage"] for r in rows}
    # oracle: per batch and env, keep questions with mixed valid rewards
    groups = defaultdict(lambda: defaultdict(list))
    for r in records:
        if r.get("failed_infra") or r.get("meu_ok") is False:
            continue
        groups[(r["batch"], r["env_id"])][r["task_id"]].append((r["traj_id"], r["reward"]))
    want = {}
    for qs in groups.values():
        mixed = {q: ts for q, ts in qs.items() if len({r for _, r in ts}) == 2}
        if mixed:
            want.update(oracles.exact_env_advantages(mixed))
    assert want and got.keys() == want.keys()
    assert all(abs(got[t] - float(want[t])) <= 1e-9 for t in want)


def test_logprob_sidecar_feeds_the_objective(tmp_path, pipeline_dir):
    shutil.copy(pipeline_dir / "trajectories.jsonl", tmp_path / "trajectories.jsonl")
    records = read_jsonl(tmp_path / "trajectories.jsonl")
    side = [{"traj_id": r["traj_id"], "logprob_new": math.log(1.5) if i % 2 else 0.0, "logprob_old": 0.0}
            for i, r in enumerate(records)]
    write_jsonl(tmp_path / "lp.jsonl", side)
    assert main(["advantage", "--workdir", str(tmp_path), "--config", str(FIXTURE_CONFIG), "--logprobs", "lp.jsonl"]) == 0
    summary = json.loads((tmp_path / "advantages.summary.json").read_text())["batches"][0]

    by_id = {s["traj_id"]: s for s in side}
    batch = erpo.dynamic_filter(erpo.RewardBatch.from_records([r for r in records if r["batch"] == 0], by_id))
    report = erpo.env_advantages(batch, on_degenerate="drop")
    assert summary["objective"] == pytest.approx(erpo.objective_value(batch, report), abs=1e-12)
    manifest = json.loads((tmp_path / "advantage.manifest.json").read_text())
    assert "lp.jsonl" in manifest["inputs"]


def test_missing_sidecar(tmp_path, pipeline_dir, capsys):
    shutil.copy(pipeline_dir / "trajectories.jsonl", tmp_path / "trajectories.jsonl")
    assert main(["advantage", "--workdir", str(tmp_path), "--logprobs", "lp.jsonl"]) == 2
    assert error_record(capsys)["error"] == "MissingInput"
