import json
import os

import pytest

from conftest import AuthoringGateway, fixture_sources

from storycut import pipeline
from storycut.cli import main
from storycut.gateway import AgentGateway
from storycut.types import StageDependencyError


def write_sources_json(path, sources):
    payload = [{"video_id": s.video_id, "uri": s.uri, "duration": s.duration}
               for s in sources]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def prepare_job(out_dir, config=None):
    """Ingest with deterministic placeholder keyframes."""
    config = config or pipeline.JobConfig()
    clips = pipeline.stage_ingest(fixture_sources(), out_dir, config,
                                  frame_source="placeholder")
    return config, clips


# -- pipeline stages with the synthetic mock -----------------------------------

def test_full_pipeline_with_synthetic_mock(tmp_job_dir):
    config, clips = prepare_job(tmp_job_dir)
    assert len(clips) == 70

    gateway = pipeline.build_gateway(tmp_job_dir, config, backend="mock")
    descs = pipeline.stage_structure(tmp_job_dir, config, gateway)
    assert len(descs) == 70

    verdicts = pipeline.stage_filter(tmp_job_dir)
    assert set(verdicts) == {d.clip_id for d in descs}

    plan = pipeline.stage_compose(tmp_job_dir, config, gateway)
    assert plan.ordered_clip_ids
    assert not any(verdicts[cid].filter_flag for cid in plan.ordered_clip_ids)

    manifest = pipeline.stage_render(tmp_job_dir, do_render=False)
    assert manifest["rendered"] is False
    assert manifest["total_duration"] > 0
    assert os.path.exists(os.path.join(tmp_job_dir, pipeline.PLAN_FILE))
    assert os.path.exists(os.path.join(tmp_job_dir, pipeline.STORYLINE_FILE))

    report = pipeline.stage_evaluate_agent(tmp_job_dir, config, gateway)
    assert report is not None
    assert 1.0 <= report.average <= 5.0


def test_stage_ingest_excludes_clips_on_toolkit_failure(tmp_job_dir):
    calls = []

    def flaky_runner(cmd):
        calls.append(cmd)
        timestamp = float(cmd[cmd.index("-ss") + 1])
        if timestamp >= 72.0:  # the last source-alpha clip fails to decode
            from storycut.media import MediaToolkitError
            raise MediaToolkitError("decode error")
        with open(cmd[-1], "wb") as fh:
            fh.write(b"frame")
        return None

    sources = [fixture_sources()[0]]  # alpha, 75s -> 25 clips
    clips = pipeline.stage_ingest(sources, tmp_job_dir, pipeline.JobConfig(),
                                  frame_source="toolkit", runner=flaky_runner)
    assert len(clips) == 24
    assert 25 not in {c.clip_id for c in clips}
    raw = json.load(open(os.path.join(tmp_job_dir, pipeline.CLIPS_FILE)))
    assert raw["excluded"] == [25]


def test_stage_dependency_errors(tmp_job_dir):
    config = pipeline.JobConfig()
    gateway = pipeline.build_gateway(tmp_job_dir, config, backend="mock")
    with pytest.raises(StageDependencyError):
        pipeline.stage_structure(tmp_job_dir, config, gateway)
    with pytest.raises(StageDependencyError):
        pipeline.stage_filter(tmp_job_dir)
    with pytest.raises(StageDependencyError):
        pipeline.stage_compose(tmp_job_dir, config, gateway)
    with pytest.raises(StageDependencyError):
        pipeline.stage_render(tmp_job_dir)


def test_filter_stage_idempotent(tmp_job_dir):
    config, _ = prepare_job(tmp_job_dir)
    gateway = pipeline.build_gateway(tmp_job_dir, config, backend="mock")
    pipeline.stage_structure(tmp_job_dir, config, gateway)
    pipeline.stage_filter(tmp_job_dir)
    first = open(os.path.join(tmp_job_dir, pipeline.VERDICTS_FILE), "rb").read()
    pipeline.stage_filter(tmp_job_dir)
    second = open(os.path.join(tmp_job_dir, pipeline.VERDICTS_FILE), "rb").read()
    assert first == second


def test_replay_backend_reproduces_recorded_run(tmp_path):
    """A run replayed from a recorded conversation matches it byte for byte.

    The cache and fixture stores share one layout, so a directory authored
    as fixtures serves equally as a replay cache.
    """
    recorded = str(tmp_path / "recorded")
    out_a = str(tmp_path / "job_a")
    out_b = str(tmp_path / "job_b")

    config, _ = prepare_job(out_a)
    pipeline.stage_structure(out_a, config, AuthoringGateway(recorded))
    pipeline.stage_filter(out_a)

    config_b, _ = prepare_job(out_b)
    replay = AgentGateway("replay", cache_dir=recorded)
    pipeline.stage_structure(out_b, config_b, replay)
    pipeline.stage_filter(out_b)

    for name in (pipeline.DESCRIPTIONS_FILE, pipeline.VERDICTS_FILE,
                 pipeline.SALIENCY_FILE):
        a = open(os.path.join(out_a, name), "rb").read()
        b = open(os.path.join(out_b, name), "rb").read()
        assert a == b, f"{name} differs between recorded and replayed runs"


def test_config_loading_and_overrides(tmp_path):
    config_path = tmp_path / "storycut.toml"
    config_path.write_text(
        "[ingest]\nclip_duration = 2.0\n\n"
        "[composition]\ngroup_size = 10\ntarget_duration = 30.0\n\n"
        "[gateway]\nmodel_name = \"gpt-4o-mini\"\n"
    )
    config = pipeline.load_config(str(config_path))
    assert config.ingest.clip_duration == 2.0
    assert config.composition.group_size == 10
    assert config.gateway.model_name == "gpt-4o-mini"
    assert config.structuring.prompt_mode == "unified"

    overridden = pipeline.override_config(config, group_size=5, target_duration=45.0)
    assert overridden.composition.group_size == 5
    assert overridden.composition.target_duration == 45.0


# -- CLI ------------------------------------------------------------------------

def run_cli(*argv):
    return main(list(argv))


def test_cli_stagewise_run(tmp_path, capsys):
    out = str(tmp_path / "job")
    sources_json = str(tmp_path / "sources.json")
    write_sources_json(sources_json, fixture_sources())

    assert run_cli("ingest", "--out", out, "--sources-json", sources_json,
                   "--placeholder-frames") == 0
    assert run_cli("structure", "--out", out, "--backend", "mock") == 0
    assert run_cli("filter", "--out", out) == 0
    assert run_cli("compose", "--out", out, "--backend", "mock") == 0
    assert run_cli("render", "--out", out, "--no-render") == 0

    output = capsys.readouterr().out
    assert "ingest: 70 clips" in output
    assert "filter: kept" in output
    assert "final cut (manifest only)" in output


def test_cli_compose_before_structure_fails(tmp_path, capsys):
    out = str(tmp_path / "job")
    sources_json = str(tmp_path / "sources.json")
    write_sources_json(sources_json, fixture_sources())
    run_cli("ingest", "--out", out, "--sources-json", sources_json, "--no-extract")
    assert run_cli("compose", "--out", out) == 1
    assert "storycut structure" in capsys.readouterr().err


def test_cli_trim_end_to_end(tmp_path, capsys):
    out = str(tmp_path / "job")
    sources_json = str(tmp_path / "sources.json")
    write_sources_json(sources_json, fixture_sources())

    assert run_cli("trim", "--out", out, "--sources-json", sources_json,
                   "--placeholder-frames", "--no-render", "--backend", "mock") == 0
    assert "trim:" in capsys.readouterr().out
    manifest = json.load(open(os.path.join(
        out, pipeline.FINAL_CUT_FILE + ".manifest.json")))
    assert manifest["total_duration"] > 0


def test_cli_missing_inputs(tmp_path, capsys):
    out = str(tmp_path / "job")
    assert run_cli("ingest", "--out", out, "--no-extract") == 1
    assert "no input videos" in capsys.readouterr().err


def test_cli_evaluate_correlation_bundled(capsys, tmp_path):
    assert run_cli("evaluate", "--out", str(tmp_path), "--mode", "correlation") == 0
    output = capsys.readouterr().out
    assert "r=" in output and "rho=" in output and "tau=" in output
    metrics = json.load(open(tmp_path / "metrics_correlation.json"))
    assert 0.99 < metrics["pearson"] <= 1.0  # toy series is near-linear


def test_cli_evaluate_fidelity(tmp_path, capsys):
    final = tmp_path / "final.txt"
    raw = tmp_path / "raw.txt"
    final.write_text("2\n1.0 0.0\n1.0 0.0\n")
    raw.write_text("2\n1.0 0.0\n")
    assert run_cli("evaluate", "--out", str(tmp_path), "--mode", "fidelity",
                   "--final-embeddings", str(final), "--raw-embeddings", str(raw)) == 0
    assert "fidelity: 1.0000" in capsys.readouterr().out


def test_cli_evaluate_hd_and_vt(tmp_path, capsys):
    out = str(tmp_path / "job")
    config, clips = prepare_job(out)
    gateway = pipeline.build_gateway(out, config, backend="mock")
    pipeline.stage_structure(out, config, gateway)
    pipeline.stage_filter(out)
    pipeline.stage_compose(out, config, gateway)

    annotations_path = str(tmp_path / "ann.jsonl")
    per_video_counts = {}
    with open(annotations_path, "w", encoding="utf-8") as fh:
        for clip in clips:
            index = per_video_counts.get(clip.video_id, 0) + 1
            per_video_counts[clip.video_id] = index
            rank = 3 if clip.clip_id % 4 == 0 else (0 if clip.clip_id % 5 == 0 else 2)
            fh.write(json.dumps({"video_id": clip.video_id, "clip_index": index,
                                 "start": clip.interval.start, "end": clip.interval.end,
                                 "rank": rank}) + "\n")

    assert run_cli("evaluate", "--out", out, "--mode", "hd",
                   "--annotations", annotations_path) == 0
    assert run_cli("evaluate", "--out", out, "--mode", "vt",
                   "--annotations", annotations_path) == 0
    output = capsys.readouterr().out
    assert "mAP=" in output
    assert "waste=" in output and "highlight=" in output

    hd_metrics = json.load(open(os.path.join(out, "metrics_hd.json")))
    assert set(hd_metrics["per_video"]) == {"alpha", "bravo", "charlie"}
    assert 0.0 <= hd_metrics["map"] <= 1.0
    vt_metrics = json.load(open(os.path.join(out, "metrics_vt.json")))
    assert vt_metrics["waste_precision"] + vt_metrics["highlight_precision"] <= 1.0


def test_cli_evaluate_agent(tmp_path, capsys):
    out = str(tmp_path / "job")
    config, _ = prepare_job(out)
    gateway = pipeline.build_gateway(out, config, backend="mock")
    pipeline.stage_structure(out, config, gateway)
    pipeline.stage_filter(out)
    pipeline.stage_compose(out, config, gateway)
    assert run_cli("evaluate", "--out", out, "--mode", "agent",
                   "--backend", "mock") == 0
    assert "average=" in capsys.readouterr().out
    assert os.path.exists(os.path.join(out, pipeline.EVAL_FILE))
