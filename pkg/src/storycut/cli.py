"""Command-line entry point wiring the pipeline stages.

Subcommands mirror the pipeline phases: ingest, structure, filter, compose,
render, trim (end to end) and evaluate. Every subcommand is re-runnable and
idempotent given the same caches; exit code 0 means no job-level error
(warnings never change it).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from . import evaluation, filtering, media, pipeline
from .gateway import GatewayError
from .types import JobValidationError, SourceVideo, StorycutError

log = logging.getLogger("storycut")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", required=True, help="job output directory")
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("-v", "--verbose", action="store_true")


def _add_gateway_opts(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", choices=("live", "mock", "replay"), default="mock",
                        help="agent backend (default: mock)")
    parser.add_argument("--fixtures", help="fixture directory for the mock backend")
    parser.add_argument("--strict-mock", action="store_true",
                        help="error on fixture misses instead of synthesizing")
    parser.add_argument("--cache-dir", help="gateway response cache "
                                            "(default: <out>/agent_cache)")
    parser.add_argument("--prompt-dir", help="directory of prompt template overrides")


def _add_source_opts(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("videos", nargs="*", help="source video files (duration probed)")
    parser.add_argument("--sources-json",
                        help="JSON list of {video_id, uri, duration, frame_rate}")
    parser.add_argument("--no-extract", action="store_true",
                        help="skip keyframe extraction (references only)")
    parser.add_argument("--placeholder-frames", action="store_true",
                        help="write deterministic stand-in frames instead of "
                             "decoding media (offline/mock runs)")
    parser.add_argument("--isolated-prompts", action="store_true",
                        help="cost-estimate for isolated structuring prompts")


def _load_sources(args) -> list[SourceVideo]:
    if args.sources_json:
        with open(args.sources_json, encoding="utf-8") as fh:
            raw = json.load(fh)
        return [SourceVideo(video_id=s["video_id"], uri=s["uri"],
                            duration=float(s["duration"]),
                            frame_rate=float(s.get("frame_rate", 30.0)))
                for s in raw]
    if not args.videos:
        raise JobValidationError(["no input videos (positional paths or --sources-json)"])
    sources = []
    for path in args.videos:
        video_id = os.path.splitext(os.path.basename(path))[0]
        duration = media.probe_duration(path)
        sources.append(SourceVideo(video_id=video_id, uri=path, duration=duration))
    return sources


def _gateway(args, out_dir: str, config) -> "pipeline.AgentGateway":
    return pipeline.build_gateway(out_dir, config, backend=args.backend,
                                  cache_dir=args.cache_dir, fixtures_dir=args.fixtures,
                                  strict=args.strict_mock)


def _config(args) -> "pipeline.JobConfig":
    config = pipeline.load_config(args.config)
    return pipeline.override_config(config,
                                    group_size=getattr(args, "group_size", None),
                                    target_duration=getattr(args, "target_duration", None))


# -- subcommand handlers -------------------------------------------------

def _frame_source(args) -> str:
    if args.placeholder_frames:
        return "placeholder"
    if args.no_extract:
        return "none"
    return "toolkit"


def cmd_ingest(args) -> int:
    config = _config(args)
    isolated = args.isolated_prompts or config.structuring.prompt_mode == "isolated"
    clips = pipeline.stage_ingest(_load_sources(args), args.out, config,
                                  frame_source=_frame_source(args),
                                  isolated_prompts=isolated)
    print(f"ingest: {len(clips)} clips -> {args.out}")
    return 0


def cmd_structure(args) -> int:
    config = _config(args)
    descs = pipeline.stage_structure(args.out, config, _gateway(args, args.out, config),
                                     prompt_dir=args.prompt_dir)
    print(f"structure: {len(descs)} descriptions -> {args.out}")
    return 0


def cmd_filter(args) -> int:
    verdicts = pipeline.stage_filter(args.out)
    kept = sum(1 for v in verdicts.values() if not v.filter_flag)
    print(f"filter: kept {kept}/{len(verdicts)} clips -> {args.out}")
    return 0


def cmd_compose(args) -> int:
    config = _config(args)
    plan = pipeline.stage_compose(args.out, config, _gateway(args, args.out, config),
                                  prompt_dir=args.prompt_dir)
    print(f"compose: plan with {len(plan.ordered_clip_ids)} clips -> {args.out}")
    return 0


def cmd_render(args) -> int:
    manifest = pipeline.stage_render(args.out,
                                     do_render=False if args.no_render else None)
    state = "rendered" if manifest["rendered"] else "manifest only"
    print(f"render: {manifest['total_duration']:.1f}s final cut ({state}) -> {args.out}")
    return 0


def cmd_trim(args) -> int:
    config = _config(args)
    gateway = _gateway(args, args.out, config)
    manifest = pipeline.run_trim(_load_sources(args), args.out, config, gateway,
                                 frame_source=_frame_source(args),
                                 do_render=False if args.no_render else None,
                                 prompt_dir=args.prompt_dir)
    state = "rendered" if manifest["rendered"] else "manifest only"
    print(f"trim: {manifest['total_duration']:.1f}s final cut ({state}) -> {args.out}")
    return 0


def _annotation_ranks_by_global_id(args, out_dir: str) -> dict[int, int]:
    """Map annotation ranks (per-video clip_index) onto global clip ids."""
    annotations = evaluation.load_annotations(args.annotations)
    clips = pipeline.read_clips(out_dir)
    ranks: dict[int, int] = {}
    per_video_index: dict[str, int] = {}
    for clip in clips:
        index = per_video_index.get(clip.video_id, 0) + 1
        per_video_index[clip.video_id] = index
        annotation = annotations.get(clip.video_id)
        if annotation and index in annotation.ranks:
            ranks[clip.clip_id] = annotation.ranks[index]
    return ranks


def _write_metrics(out_dir: str, mode: str, payload: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"metrics_{mode}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def cmd_evaluate(args) -> int:
    if args.mode == "correlation":
        path = args.scores or os.path.join(os.path.dirname(__file__), "data",
                                           "toy_scores.json")
        with open(path, encoding="utf-8") as fh:
            series = json.load(fh)
        result = evaluation.correlations(series["agent"], series["human"])
        _write_metrics(args.out, "correlation", {
            "pearson": result.pearson, "spearman": result.spearman,
            "kendall_tau": result.kendall_tau, "pairs": len(series["agent"]),
        })
        print(f"correlation: r={_fmt(result.pearson)} rho={_fmt(result.spearman)} "
              f"tau={_fmt(result.kendall_tau)}")
        return 0

    if args.mode == "fidelity":
        final = evaluation.load_embeddings(args.final_embeddings)
        raw = evaluation.load_embeddings(args.raw_embeddings)
        value = evaluation.fidelity(final, raw)
        _write_metrics(args.out, "fidelity", {
            "fidelity": value, "final_rows": len(final), "raw_rows": len(raw),
        })
        print(f"fidelity: {value:.4f}")
        return 0

    if args.mode == "hd":
        track = filtering.read_saliency_file(os.path.join(args.out, pipeline.SALIENCY_FILE))
        ground_truth = evaluation.load_hd_dataset(args.annotations)
        clips = pipeline.read_clips(args.out)
        per_video: dict[str, list[float]] = {}
        for clip in sorted(clips, key=lambda c: c.clip_id):
            # clips excluded during structuring have no saliency; rank them last
            score = track.values.get(clip.clip_id, -1.0)
            per_video.setdefault(clip.video_id, []).append(score)
        per_video_ap: dict[str, Optional[float]] = {}
        for video_id, scores in sorted(per_video.items()):
            if video_id not in ground_truth:
                raise evaluation.AnnotationError(f"no annotations for video {video_id!r}")
            highlight, _waste = ground_truth[video_id]
            ranking = evaluation.make_ranking(scores, highlight)
            per_video_ap[video_id] = evaluation.average_precision(ranking.scores,
                                                                  ranking.labels)
        scored = [ap for ap in per_video_ap.values() if ap is not None]
        mean_ap = sum(scored) / len(scored) if scored else None
        _write_metrics(args.out, "hd", {"map": mean_ap, "per_video": per_video_ap})
        for video_id, ap in sorted(per_video_ap.items()):
            print(f"  {video_id:<24} AP={_fmt(ap)}")
        print(f"hd: mAP={_fmt(mean_ap)} over {len(per_video_ap)} videos")
        return 0

    if args.mode == "vt":
        plan = pipeline.read_plan(args.out)
        ranks = _annotation_ranks_by_global_id(args, args.out)
        waste, highlight = evaluation.waste_highlight_precision(
            list(plan.ordered_clip_ids), ranks)
        _write_metrics(args.out, "vt", {
            "waste_precision": waste, "highlight_precision": highlight,
            "selected_clips": len(plan.ordered_clip_ids),
        })
        print(f"vt: waste={waste:.3f} highlight={highlight:.3f}")
        return 0

    if args.mode == "agent":
        config = _config(args)
        report = pipeline.stage_evaluate_agent(args.out, config,
                                               _gateway(args, args.out, config),
                                               prompt_dir=args.prompt_dir)
        if report is None:
            print("agent: evaluation report invalid after retry", file=sys.stderr)
            return 1
        print(f"agent: average={report.average:.2f}")
        return 0

    raise StorycutError(f"unknown evaluate mode {args.mode!r}")


def _fmt(value: Optional[float]) -> str:
    return "skip" if value is None else f"{value:.4f}"


# -- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storycut",
                                     description="Trim long raw videos into short "
                                                 "story-driven final cuts")
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("ingest", help="segment sources and extract keyframes")
    _add_common(p)
    _add_source_opts(p)
    p.set_defaults(handler=cmd_ingest)

    p = subparsers.add_parser("structure", help="caption clips via the agent gateway")
    _add_common(p)
    _add_gateway_opts(p)
    p.set_defaults(handler=cmd_structure)

    p = subparsers.add_parser("filter", help="dynamic-filter verdicts and saliency")
    _add_common(p)
    p.set_defaults(handler=cmd_filter)

    p = subparsers.add_parser("compose", help="arrange surviving clips into a plan")
    _add_common(p)
    _add_gateway_opts(p)
    p.add_argument("--group-size", type=int)
    p.add_argument("--target-duration", type=float)
    p.set_defaults(handler=cmd_compose)

    p = subparsers.add_parser("render", help="cut and concatenate the final video")
    _add_common(p)
    p.add_argument("--no-render", action="store_true",
                   help="write the manifest without invoking the media toolkit")
    p.set_defaults(handler=cmd_render)

    p = subparsers.add_parser("trim", help="run the whole pipeline end to end")
    _add_common(p)
    _add_source_opts(p)
    _add_gateway_opts(p)
    p.add_argument("--group-size", type=int)
    p.add_argument("--target-duration", type=float)
    p.add_argument("--no-render", action="store_true")
    p.set_defaults(handler=cmd_trim)

    p = subparsers.add_parser("evaluate", help="metrics and evaluation-agent reports")
    _add_common(p)
    _add_gateway_opts(p)
    p.add_argument("--mode", required=True,
                   choices=("hd", "vt", "agent", "correlation", "fidelity"))
    p.add_argument("--annotations", help="footage-rank annotation file (JSONL)")
    p.add_argument("--scores", help="correlation mode: JSON with agent/human arrays")
    p.add_argument("--final-embeddings", help="fidelity mode: final-cut embedding file")
    p.add_argument("--raw-embeddings", help="fidelity mode: raw-video embedding file")
    p.set_defaults(handler=cmd_evaluate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except JobValidationError as exc:
        for error in exc.errors:
            print(f"error: {error}", file=sys.stderr)
        return 1
    except (StorycutError, GatewayError, media.MediaToolkitError,
            evaluation.AnnotationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
