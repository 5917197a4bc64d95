import math
import os
import random

import pytest

from storycut import media
from storycut.ingest import (
    CostReport,
    IngestConfig,
    Pricing,
    estimate_cost,
    extract_keyframes,
    keyframe_path,
    load_keyframes,
    segment,
    segment_job,
)
from storycut.types import SourceVideo, validate_job


def src(duration, video_id="v", fps=30.0):
    return SourceVideo(video_id=video_id, uri=f"{video_id}.mp4", duration=duration,
                       frame_rate=fps)


def intervals_of(clips):
    return [(c.interval.start, c.interval.end) for c in clips]


def test_segment_exact_tiling():
    clips = segment(src(9.0), IngestConfig())
    assert intervals_of(clips) == [(0.0, 3.0), (3.0, 6.0), (6.0, 9.0)]


def test_segment_tail_kept_when_long_enough():
    clips = segment(src(10.0), IngestConfig())
    assert intervals_of(clips) == [(0.0, 3.0), (3.0, 6.0), (6.0, 9.0), (9.0, 10.0)]


def test_segment_short_tail_merged():
    clips = segment(src(9.5), IngestConfig())
    assert intervals_of(clips) == [(0.0, 3.0), (3.0, 6.0), (6.0, 9.5)]


def test_segment_degenerate_below_min_tail(caplog):
    with caplog.at_level("WARNING"):
        clips = segment(src(0.5), IngestConfig())
    assert intervals_of(clips) == [(0.0, 0.5)]
    assert clips[0].keyframes == ()  # floor rule gives zero frames
    assert "degenerate" in caplog.text


def test_segment_ids_follow_offset():
    clips = segment(src(9.0), IngestConfig(), id_offset=5)
    assert [c.clip_id for c in clips] == [6, 7, 8]


def test_segment_job_global_sequence():
    job = validate_job([src(9.0, "a"), src(6.0, "b")])
    clips = segment_job(job, IngestConfig())
    assert [c.clip_id for c in clips] == [1, 2, 3, 4, 5]
    assert [c.video_id for c in clips] == ["a", "a", "a", "b", "b"]


def test_keyframe_counts_and_timestamps():
    clips = segment(src(10.0), IngestConfig())
    first = clips[0]
    assert [round(r.timestamp, 6) for r in first.keyframes] == [0.0, 1.0, 2.0]
    tail = clips[-1]
    assert len(tail.keyframes) == 1  # 1s tail at 1 fps

    fast = segment(src(3.0), IngestConfig(sample_rate=4.0))
    assert len(fast[0].keyframes) == 12  # 3s at 4 fps


def test_keyframes_sampled_from_clip_start():
    clips = segment(src(10.0), IngestConfig())
    third = clips[2]
    assert [round(r.timestamp, 6) for r in third.keyframes] == [6.0, 7.0, 8.0]


def test_segmentation_tiling_properties_random():
    rng = random.Random(7)
    cfg = IngestConfig()
    for _ in range(100):
        duration = rng.uniform(0.01, 3600.0)
        clips = segment(src(duration), cfg)
        assert clips[0].interval.start == 0.0
        assert abs(clips[-1].interval.end - duration) <= 1e-9
        for a, b in zip(clips, clips[1:]):
            assert abs(a.interval.end - b.interval.start) <= 1e-9
            assert a.interval.start < b.interval.start
        for c in clips:
            assert len(c.keyframes) == math.floor(c.interval.length * cfg.sample_rate + 1e-9)


def test_segment_is_pure():
    a = segment(src(100.0), IngestConfig())
    b = segment(src(100.0), IngestConfig())
    assert a == b


def test_ingest_config_validation():
    with pytest.raises(ValueError):
        IngestConfig(clip_duration=0)
    with pytest.raises(ValueError):
        IngestConfig(sample_rate=-1)
    with pytest.raises(ValueError):
        IngestConfig(resize_short_side=32)


def test_cost_10min_unified():
    clips = segment(src(600.0), IngestConfig())
    report = estimate_cost(clips)
    assert report.keyframes == 600
    assert report.image_tokens == 153_000
    assert report.dollars == pytest.approx(0.83, abs=0.01)


def test_cost_zero_clips():
    assert estimate_cost([]) == CostReport(0, 0, 0, 0, 0.0)


def test_cost_4fps_isolated():
    clips = segment(src(600.0), IngestConfig(sample_rate=4.0))
    report = estimate_cost(clips, isolated_prompts=True)
    assert report.image_tokens == 2400 * 3 * 255 == 1_836_000
    assert report.dollars == pytest.approx(5.04, abs=0.01)


def test_cost_other_reference_rows():
    clips_1fps = segment(src(600.0), IngestConfig())
    assert estimate_cost(clips_1fps, isolated_prompts=True).dollars == pytest.approx(1.60, abs=0.01)
    clips_4fps = segment(src(600.0), IngestConfig(sample_rate=4.0))
    assert estimate_cost(clips_4fps).dollars == pytest.approx(1.98, abs=0.01)


def test_cost_custom_pricing():
    clips = segment(src(600.0), IngestConfig())
    doubled = estimate_cost(clips, Pricing(input_per_million=5.0, output_per_million=20.0))
    assert doubled.dollars == pytest.approx(2 * 0.8325, abs=1e-6)


def test_keyframe_path_layout(tmp_path):
    clips = segment(src(9.0, "vidA"), IngestConfig())
    ref = clips[1].keyframes[2]
    path = keyframe_path(str(tmp_path), ref)
    assert path.endswith(os.path.join("vidA", "t000005000_s512.png"))


def test_extract_keyframes_with_stub_runner(tmp_path):
    clips = segment(src(3.0, "vidA"), IngestConfig())
    commands = []

    def runner(cmd):
        commands.append(list(cmd))
        with open(cmd[-1], "wb") as fh:
            fh.write(b"png-bytes-" + cmd[6].encode())
        return None

    paths = extract_keyframes(clips[0], "vidA.mp4", str(tmp_path), runner=runner)
    assert len(paths) == 3
    assert all(os.path.exists(p) for p in paths)
    assert all(cmd[0] == "ffmpeg" for cmd in commands)
    seek_args = [cmd[cmd.index("-ss") + 1] for cmd in commands]
    assert seek_args == ["0.000000", "1.000000", "2.000000"]

    # cached frames are not re-extracted
    commands.clear()
    extract_keyframes(clips[0], "vidA.mp4", str(tmp_path), runner=runner)
    assert commands == []

    frames = load_keyframes(clips[0], str(tmp_path))
    assert len(frames) == 3 and all(f.startswith(b"png-bytes-") for f in frames)


def test_extract_keyframes_toolkit_failure(tmp_path):
    clips = segment(src(3.0, "vidA"), IngestConfig())

    def failing(cmd):
        raise media.MediaToolkitError("boom")

    with pytest.raises(media.MediaToolkitError):
        extract_keyframes(clips[0], "vidA.mp4", str(tmp_path), runner=failing)
