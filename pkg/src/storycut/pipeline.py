"""Stage orchestration and the per-job artifact directory.

Every stage reads its inputs from, and writes its outputs to, a fixed layout
under the job directory (see README), so each stage is re-runnable and
idempotent given the same caches:

    job.json            validated sources + config snapshot
    clips.json          segmentation + keyframe references + exclusions
    cost.json           token/dollar estimate
    keyframes/          cached frames, keyed by (video_id, timestamp, side)
    agent_cache/        gateway response cache (live backend)
    descriptions.jsonl  one structured description per clip
    verdicts.json       dynamic-filter verdicts per clip
    saliency.json       per-clip saliency values
    plan.json           composition plan
    storyline.txt       human-readable storyline
    final_cut.mp4       rendered cut (when the media toolkit is available)
    final_cut.mp4.manifest.json
    evaluation.json     evaluation-agent report
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from . import assembly, composition, evaluation, filtering, ingest, media, structuring
from .composition import CompositionConfig
from .gateway import AgentGateway
from .ingest import IngestConfig, Pricing
from .types import (
    Clip,
    CompositionPlan,
    EmptySelection,
    EvaluationReport,
    FilterVerdict,
    KeyframeRef,
    SourceVideo,
    StageDependencyError,
    StructuredDescription,
    TimeInterval,
    validate_job,
)

log = logging.getLogger(__name__)

JOB_FILE = "job.json"
CLIPS_FILE = "clips.json"
COST_FILE = "cost.json"
DESCRIPTIONS_FILE = "descriptions.jsonl"
VERDICTS_FILE = "verdicts.json"
SALIENCY_FILE = "saliency.json"
PLAN_FILE = "plan.json"
STORYLINE_FILE = "storyline.txt"
FINAL_CUT_FILE = "final_cut.mp4"
EVAL_FILE = "evaluation.json"
KEYFRAME_DIR = "keyframes"
AGENT_CACHE_DIR = "agent_cache"

EVAL_FRAME_LIMIT = 16


@dataclass(frozen=True)
class GatewayConfig:
    model_name: str = "gpt-4o"
    temperature: float = 0.0
    max_output: int = 1024
    retry_limit: int = 3
    in_flight: int = 8


@dataclass(frozen=True)
class StructuringConfig:
    prompt_mode: str = "unified"  # unified | isolated
    reask_limit: int = 2
    failure_fraction: float = 0.2

    def __post_init__(self):
        if self.prompt_mode not in ("unified", "isolated"):
            raise ValueError(f"unknown prompt_mode {self.prompt_mode!r}")


@dataclass(frozen=True)
class JobConfig:
    ingest: IngestConfig = field(default_factory=IngestConfig)
    composition: CompositionConfig = field(default_factory=CompositionConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    structuring: StructuringConfig = field(default_factory=StructuringConfig)
    pricing: Pricing = field(default_factory=Pricing)


def load_config(path: Optional[str] = None) -> JobConfig:
    """Load the TOML config file; omitted sections keep their defaults."""
    if path is None:
        return JobConfig()
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return JobConfig(
        ingest=IngestConfig(**raw.get("ingest", {})),
        composition=CompositionConfig(**raw.get("composition", {})),
        gateway=GatewayConfig(**raw.get("gateway", {})),
        structuring=StructuringConfig(**raw.get("structuring", {})),
        pricing=Pricing(**raw.get("pricing", {})),
    )


def override_config(config: JobConfig, *, group_size: Optional[int] = None,
                    target_duration: Optional[float] = None) -> JobConfig:
    comp = config.composition
    if group_size is not None:
        comp = replace(comp, group_size=group_size)
    if target_duration is not None:
        comp = replace(comp, target_duration=target_duration)
    return replace(config, composition=comp)


# -- artifact helpers ---------------------------------------------------

def _path(out_dir: str, name: str) -> str:
    return os.path.join(out_dir, name)


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: str):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _require(out_dir: str, name: str, produced_by: str) -> str:
    path = _path(out_dir, name)
    if not os.path.exists(path):
        raise StageDependencyError(f"missing {name}; run `{produced_by}` first")
    return path


def _clip_to_json(clip: Clip) -> dict:
    return {
        "clip_id": clip.clip_id,
        "video_id": clip.video_id,
        "start": clip.interval.start,
        "end": clip.interval.end,
        "keyframes": [{"timestamp": ref.timestamp, "short_side": ref.short_side}
                      for ref in clip.keyframes],
    }


def _clip_from_json(record: dict) -> Clip:
    return Clip(
        clip_id=int(record["clip_id"]),
        video_id=record["video_id"],
        interval=TimeInterval(float(record["start"]), float(record["end"])),
        keyframes=tuple(
            KeyframeRef(video_id=record["video_id"],
                        timestamp=float(kf["timestamp"]),
                        short_side=int(kf["short_side"]))
            for kf in record["keyframes"]),
    )


def write_clips(out_dir: str, clips: Sequence[Clip], excluded: Sequence[int] = ()) -> None:
    _write_json(_path(out_dir, CLIPS_FILE), {
        "clips": [_clip_to_json(c) for c in clips],
        "excluded": sorted(excluded),
    })


def read_clips(out_dir: str) -> list[Clip]:
    raw = _read_json(_require(out_dir, CLIPS_FILE, "storycut ingest"))
    return [_clip_from_json(r) for r in raw["clips"]]


def write_sources(out_dir: str, sources: Sequence[SourceVideo], config: JobConfig) -> None:
    _write_json(_path(out_dir, JOB_FILE), {
        "sources": [{"video_id": s.video_id, "uri": s.uri, "duration": s.duration,
                     "frame_rate": s.frame_rate} for s in sources],
        "config": {
            "ingest": vars(config.ingest),
            "composition": vars(config.composition),
            "gateway": vars(config.gateway),
            "structuring": vars(config.structuring),
        },
    })


def read_sources(out_dir: str) -> dict[str, SourceVideo]:
    raw = _read_json(_require(out_dir, JOB_FILE, "storycut ingest"))
    sources = [SourceVideo(video_id=s["video_id"], uri=s["uri"],
                           duration=float(s["duration"]),
                           frame_rate=float(s.get("frame_rate", 30.0)))
               for s in raw["sources"]]
    return {s.video_id: s for s in sources}


def build_gateway(out_dir: str, config: JobConfig, *, backend: str = "mock",
                  cache_dir: Optional[str] = None, fixtures_dir: Optional[str] = None,
                  strict: bool = False) -> AgentGateway:
    if cache_dir is None:
        cache_dir = _path(out_dir, AGENT_CACHE_DIR)
    return AgentGateway(backend, cache_dir=cache_dir, fixtures_dir=fixtures_dir,
                        strict=strict, retry_limit=config.gateway.retry_limit,
                        in_flight=config.gateway.in_flight)


# -- stages -------------------------------------------------------------

def stage_ingest(sources: Sequence[SourceVideo], out_dir: str, config: JobConfig, *,
                 frame_source: str = "toolkit", isolated_prompts: bool = False,
                 runner: media.Runner = media.run_checked) -> list[Clip]:
    """Validate, segment, materialize keyframes, estimate cost.

    frame_source: "toolkit" decodes frames from the media files,
    "placeholder" writes deterministic stand-in frames (offline/mock runs),
    "none" records references only.
    """
    if frame_source not in ("toolkit", "placeholder", "none"):
        raise ValueError(f"unknown frame_source {frame_source!r}")
    os.makedirs(out_dir, exist_ok=True)
    job = validate_job(list(sources), config)
    clips = ingest.segment_job(job, config.ingest)
    by_video = {s.video_id: s for s in job.sources}

    excluded: list[int] = []
    cache = _path(out_dir, KEYFRAME_DIR)
    if frame_source == "toolkit":
        for clip in clips:
            try:
                ingest.extract_keyframes(clip, by_video[clip.video_id].uri, cache,
                                         runner=runner)
            except media.MediaToolkitError as exc:
                log.warning("clip %d: defective ingest, excluded (%s)", clip.clip_id, exc)
                excluded.append(clip.clip_id)
        clips = [c for c in clips if c.clip_id not in set(excluded)]
    elif frame_source == "placeholder":
        for clip in clips:
            ingest.write_placeholder_keyframes(clip, cache)

    write_sources(out_dir, job.sources, config)
    write_clips(out_dir, clips, excluded)
    cost = ingest.estimate_cost(clips, config.pricing, isolated_prompts=isolated_prompts)
    _write_json(_path(out_dir, COST_FILE), vars(cost))
    log.info("ingested %d clips (%d excluded), estimated $%.2f",
             len(clips), len(excluded), cost.dollars)
    return clips


def _frames_loader(out_dir: str):
    cache = _path(out_dir, KEYFRAME_DIR)

    def load(clip: Clip) -> list[bytes]:
        try:
            return ingest.load_keyframes(clip, cache)
        except FileNotFoundError:
            return []
    return load


def stage_structure(out_dir: str, config: JobConfig, gateway: AgentGateway, *,
                    prompt_dir: Optional[str] = None) -> list[StructuredDescription]:
    clips = read_clips(out_dir)
    isolated = None
    if config.structuring.prompt_mode == "isolated":
        isolated = [structuring.load_template(f"structuring_{family}", prompt_dir)
                    for family in ("caption", "context", "defects")]
    template = structuring.load_template("structuring", prompt_dir)
    reminder = structuring.load_template("format_reminder", prompt_dir).body
    descs = structuring.structure_job(
        clips, template, gateway,
        frames_loader=_frames_loader(out_dir),
        isolated_templates=isolated,
        reminder=reminder,
        model_name=config.gateway.model_name,
        max_output=config.gateway.max_output,
        reask_limit=config.structuring.reask_limit,
        failure_fraction=config.structuring.failure_fraction,
        max_workers=config.gateway.in_flight,
    )
    structuring.write_descriptions(descs, _path(out_dir, DESCRIPTIONS_FILE))
    log.info("structured %d/%d clips", len(descs), len(clips))
    return descs


def stage_filter(out_dir: str) -> dict[int, FilterVerdict]:
    path = _require(out_dir, DESCRIPTIONS_FILE, "storycut structure")
    descs = structuring.read_descriptions(path)
    verdicts = {d.clip_id: filtering.verdict(d) for d in descs}
    _write_json(_path(out_dir, VERDICTS_FILE), {
        str(cid): {"filter_flag": v.filter_flag, "highlight_flag": v.highlight_flag,
                   "score": v.score}
        for cid, v in sorted(verdicts.items())
    })
    filtering.write_saliency_file(filtering.saliency_track(descs),
                                  _path(out_dir, SALIENCY_FILE))
    kept = sum(1 for v in verdicts.values() if not v.filter_flag)
    log.info("filtering kept %d/%d clips", kept, len(verdicts))
    return verdicts


def read_verdicts(out_dir: str) -> dict[int, FilterVerdict]:
    raw = _read_json(_require(out_dir, VERDICTS_FILE, "storycut filter"))
    return {int(cid): FilterVerdict(filter_flag=v["filter_flag"],
                                    highlight_flag=v["highlight_flag"],
                                    score=float(v["score"]))
            for cid, v in raw.items()}


def stage_compose(out_dir: str, config: JobConfig, gateway: AgentGateway, *,
                  prompt_dir: Optional[str] = None) -> CompositionPlan:
    descs = structuring.read_descriptions(
        _require(out_dir, DESCRIPTIONS_FILE, "storycut structure"))
    verdicts = read_verdicts(out_dir)
    clips = read_clips(out_dir)
    durations = {c.clip_id: c.duration for c in clips}
    model = config.gateway.model_name

    try:
        candidates = filtering.select_valid(descs)
    except EmptySelection:
        log.warning("every clip filtered; falling back to top-saliency selection")
        records = [composition.ClipRecord(clip_id=d.clip_id, highlight_flag=False,
                                          score=filtering.saliency(d),
                                          contextual=d.contextual,
                                          raw_caption=d.raw_caption)
                   for d in descs]
        plan = composition.fallback_plan(records, durations,
                                         config.composition.target_duration)
        _persist_plan(out_dir, plan)
        return plan

    records = composition.make_records(descs, verdicts, candidates)
    preamble = composition.build_cot_preamble(
        structuring.load_template("compose_cot", prompt_dir), gateway,
        enabled=config.composition.cot_enabled, model_name=model)
    selected_ids, _notes = composition.compose_groups(
        records, preamble, structuring.load_template("compose_group", prompt_dir),
        config.composition, gateway, model_name=model,
        max_workers=config.gateway.in_flight)
    selected = [r for r in records if r.clip_id in set(selected_ids)]
    if not selected:
        selected = records
    plan = composition.compose_final(
        selected, preamble, structuring.load_template("compose_final", prompt_dir),
        config.composition, gateway, durations, model_name=model)
    _persist_plan(out_dir, plan)
    log.info("plan selects %d clips (%.1fs)", len(plan.ordered_clip_ids),
             sum(durations[c] for c in plan.ordered_clip_ids))
    return plan


def _persist_plan(out_dir: str, plan: CompositionPlan) -> None:
    with open(_path(out_dir, PLAN_FILE), "w", encoding="utf-8") as fh:
        fh.write(composition.plan_dumps(plan))
    with open(_path(out_dir, STORYLINE_FILE), "w", encoding="utf-8") as fh:
        fh.write(composition.storyline_text(plan))


def read_plan(out_dir: str) -> CompositionPlan:
    raw = _read_json(_require(out_dir, PLAN_FILE, "storycut compose"))
    return composition.plan_from_json(raw)


def stage_render(out_dir: str, *, do_render: Optional[bool] = None,
                 runner: media.Runner = media.run_checked) -> dict:
    """Produce the final cut and its manifest.

    When the media toolkit is unavailable (or do_render=False) only the
    manifest is written, with rendered=false; that is a warning, not an
    error, so desk-scale mock runs stay green.
    """
    plan = read_plan(out_dir)
    clips = read_clips(out_dir)
    sources = read_sources(out_dir)
    intervals = assembly.plan_to_intervals(plan, clips)
    output_path = _path(out_dir, FINAL_CUT_FILE)

    if do_render is None:
        do_render = media.have_toolkit()
        if not do_render:
            log.warning("media toolkit unavailable; writing manifest only")
    if do_render:
        manifest = assembly.render(intervals, sources, output_path, runner=runner)
    else:
        manifest = assembly.build_manifest(intervals, sources, output_path=output_path,
                                           rendered=False)
        assembly.write_manifest(manifest, assembly.manifest_path(output_path))
    return manifest


def stage_evaluate_agent(out_dir: str, config: JobConfig, gateway: AgentGateway, *,
                         prompt_dir: Optional[str] = None) -> Optional[EvaluationReport]:
    """Run the evaluation agent over the final cut's keyframes.

    Frames come from the plan clips' cache (re-sampling the rendered file
    would need the media toolkit); at most EVAL_FRAME_LIMIT frames are
    sampled evenly. Returns None when the report stayed unparseable.
    """
    plan = read_plan(out_dir)
    clips = {c.clip_id: c for c in read_clips(out_dir)}
    loader = _frames_loader(out_dir)
    frames: list[bytes] = []
    for cid in plan.ordered_clip_ids:
        frames.extend(loader(clips[cid]))
    if len(frames) > EVAL_FRAME_LIMIT:
        step = len(frames) / EVAL_FRAME_LIMIT
        frames = [frames[int(i * step)] for i in range(EVAL_FRAME_LIMIT)]
    if not frames:
        raise StageDependencyError("no cached keyframes for the plan's clips")
    template = structuring.load_template("evaluate", prompt_dir)
    reminder = structuring.load_template("format_reminder", prompt_dir).body
    report = evaluation.evaluate_final_cut(frames, template, gateway, reminder=reminder,
                                           model_name=config.gateway.model_name)
    if report is not None:
        _write_json(_path(out_dir, EVAL_FILE), {
            "criteria": {k: {"score": c.score, "reason": c.reason}
                         for k, c in sorted(report.criteria.items())},
            "average": report.average,
        })
    return report


def run_trim(sources: Sequence[SourceVideo], out_dir: str, config: JobConfig,
             gateway: AgentGateway, *, frame_source: str = "toolkit",
             do_render: Optional[bool] = None,
             prompt_dir: Optional[str] = None,
             runner: media.Runner = media.run_checked) -> dict:
    """End-to-end: ingest, structure, filter, compose, render."""
    stage_ingest(sources, out_dir, config, frame_source=frame_source,
                 isolated_prompts=config.structuring.prompt_mode == "isolated",
                 runner=runner)
    stage_structure(out_dir, config, gateway, prompt_dir=prompt_dir)
    stage_filter(out_dir)
    stage_compose(out_dir, config, gateway, prompt_dir=prompt_dir)
    return stage_render(out_dir, do_render=do_render, runner=runner)
