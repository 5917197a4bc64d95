"""Map a composition plan back to source time intervals and render the cut.

Consecutive plan entries that sit forward-adjacent in the same source are
coalesced into one interval so the final video has no cut artifact at every
clip boundary.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from typing import Mapping, Sequence

from . import media
from .types import Clip, CompositionPlan, PlanInconsistent, RenderError, SourceVideo, TimeInterval

log = logging.getLogger(__name__)

_ADJACENCY_EPS = 1e-9


def plan_to_intervals(plan: CompositionPlan,
                      clips: Sequence[Clip]) -> list[tuple[str, TimeInterval]]:
    """Emit (video_id, interval) pairs in plan order, coalescing runs.

    Only forward adjacency merges: entry B joins entry A when both come from
    the same source and B starts exactly where A ends, so reversed or
    shuffled orderings keep their separate cuts.
    """
    by_id = {c.clip_id: c for c in clips}
    missing = [cid for cid in plan.ordered_clip_ids if cid not in by_id]
    if missing:
        raise PlanInconsistent(f"plan references unknown clip ids: {missing}")

    out: list[tuple[str, TimeInterval]] = []
    for cid in plan.ordered_clip_ids:
        clip = by_id[cid]
        if out:
            prev_video, prev_interval = out[-1]
            if (prev_video == clip.video_id
                    and abs(prev_interval.end - clip.interval.start) <= _ADJACENCY_EPS):
                out[-1] = (prev_video, TimeInterval(prev_interval.start, clip.interval.end))
                continue
        out.append((clip.video_id, clip.interval))
    return out


def build_manifest(intervals: Sequence[tuple[str, TimeInterval]],
                   sources: Mapping[str, SourceVideo],
                   output_path: str = "", rendered: bool = False) -> dict:
    """Manifest of the final cut: every (source, interval) in order."""
    entries = []
    total = 0.0
    for video_id, interval in intervals:
        source = sources.get(video_id)
        if source is None:
            raise PlanInconsistent(f"interval references unknown source {video_id!r}")
        if interval.end > source.duration + _ADJACENCY_EPS:
            raise PlanInconsistent(
                f"interval [{interval.start}, {interval.end}) exceeds duration "
                f"of source {video_id!r} ({source.duration}s)")
        entries.append({
            "video_id": video_id,
            "uri": source.uri,
            "start": interval.start,
            "end": interval.end,
            "duration": interval.length,
        })
        total += interval.length
    return {
        "entries": entries,
        "total_duration": total,
        "output": output_path,
        "rendered": rendered,
    }


def render(intervals: Sequence[tuple[str, TimeInterval]],
           sources: Mapping[str, SourceVideo],
           output_path: str,
           runner: media.Runner = media.run_checked) -> dict:
    """Cut every interval, concatenate, and write the manifest sidecar.

    Output duration tracks the interval sum within container rounding
    (about a quarter second). Raises RenderError naming the failing
    interval on toolkit errors.
    """
    if not intervals:
        raise RenderError("empty interval list")
    manifest = build_manifest(intervals, sources, output_path=output_path, rendered=True)

    with tempfile.TemporaryDirectory(prefix="storycut_render_") as workdir:
        parts = []
        for i, (video_id, interval) in enumerate(intervals):
            part_path = os.path.join(workdir, f"part{i:04d}.mp4")
            try:
                media.cut_interval(sources[video_id].uri, interval.start, interval.end,
                                   part_path, runner=runner)
            except media.MediaToolkitError as exc:
                raise RenderError(
                    f"failed cutting {video_id} [{interval.start}, {interval.end}): {exc}"
                ) from exc
            parts.append(part_path)
        try:
            media.concat_parts(parts, output_path, runner=runner)
        except media.MediaToolkitError as exc:
            raise RenderError(f"failed concatenating final cut: {exc}") from exc

    write_manifest(manifest, manifest_path(output_path))
    return manifest


def manifest_path(output_path: str) -> str:
    return output_path + ".manifest.json"


def write_manifest(manifest: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, ensure_ascii=False, indent=2, sort_keys=True)
        fh.write("\n")
