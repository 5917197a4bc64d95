"""Thin subprocess wrapper around the ffmpeg/ffprobe toolkit.

Every function takes an injectable `runner` so tests can assert the exact
argument contract without the binaries installed. Contracts:

  probe_duration   ffprobe -v error -show_entries format=duration
                   -of default=nokey=1:noprint_wrappers=1 URI
  extract_frame    ffmpeg -y -v error -ss TS -i URI -frames:v 1
                   -vf scale=<shorter side to N, aspect preserved> OUT.png
  cut_interval     ffmpeg -y -v error -ss START -t DUR -i URI -c:v libx264
                   -preset veryfast -crf 23 -c:a aac -avoid_negative_ts
                   make_zero OUT
  concat_parts     ffmpeg -y -v error -f concat -safe 0 -i LIST -c copy OUT
                   (parts share codec parameters by construction, so the
                   final concat stream-copies)
"""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
from typing import Callable, Sequence

log = logging.getLogger(__name__)

FFMPEG = "ffmpeg"
FFPROBE = "ffprobe"

Runner = Callable[[Sequence[str]], subprocess.CompletedProcess]


class MediaToolkitError(RuntimeError):
    """ffmpeg/ffprobe invocation failed or the toolkit is missing."""


def run_checked(cmd: Sequence[str]) -> subprocess.CompletedProcess:
    """Default runner: run the command, raising MediaToolkitError on failure."""
    try:
        proc = subprocess.run(cmd, capture_output=True, text=True)
    except FileNotFoundError as exc:
        raise MediaToolkitError(f"{cmd[0]} not found on PATH") from exc
    if proc.returncode != 0:
        tail = (proc.stderr or "").strip().splitlines()[-3:]
        raise MediaToolkitError(f"{cmd[0]} failed ({proc.returncode}): {' / '.join(tail)}")
    return proc


def have_toolkit() -> bool:
    return shutil.which(FFMPEG) is not None and shutil.which(FFPROBE) is not None


def probe_duration(uri: str, runner: Runner = run_checked) -> float:
    cmd = [
        FFPROBE, "-v", "error",
        "-show_entries", "format=duration",
        "-of", "default=nokey=1:noprint_wrappers=1",
        uri,
    ]
    proc = runner(cmd)
    try:
        return float(proc.stdout.strip())
    except (TypeError, ValueError) as exc:
        raise MediaToolkitError(f"unparseable duration for {uri}: {proc.stdout!r}") from exc


def scale_filter(short_side: int) -> str:
    """Scale expression that pins the shorter side to `short_side` and keeps
    aspect ratio (-2 rounds the long side to an even pixel count)."""
    return (
        f"scale='if(lt(iw,ih),{short_side},-2)':'if(lt(iw,ih),-2,{short_side})'"
    )


def extract_frame(uri: str, timestamp: float, short_side: int, out_path: str,
                  runner: Runner = run_checked) -> str:
    """Seek to `timestamp`, decode one frame, scale, emit PNG at out_path."""
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    cmd = [
        FFMPEG, "-y", "-v", "error",
        "-ss", f"{timestamp:.6f}",
        "-i", uri,
        "-frames:v", "1",
        "-vf", scale_filter(short_side),
        out_path,
    ]
    runner(cmd)
    return out_path


def cut_interval(uri: str, start: float, end: float, out_path: str,
                 runner: Runner = run_checked) -> str:
    """Extract [start, end) with a re-encode so cuts are frame-accurate at
    arbitrary offsets. All cuts use the same codec parameters so the final
    concat can stream-copy."""
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    cmd = [
        FFMPEG, "-y", "-v", "error",
        "-ss", f"{start:.6f}",
        "-t", f"{end - start:.6f}",
        "-i", uri,
        "-c:v", "libx264", "-preset", "veryfast", "-crf", "23",
        "-c:a", "aac",
        "-avoid_negative_ts", "make_zero",
        out_path,
    ]
    runner(cmd)
    return out_path


def concat_parts(part_paths: Sequence[str], out_path: str,
                 runner: Runner = run_checked) -> str:
    """Concatenate uniformly-encoded parts via the concat demuxer, stream copy."""
    if not part_paths:
        raise MediaToolkitError("nothing to concatenate")
    list_path = out_path + ".parts.txt"
    with open(list_path, "w", encoding="utf-8") as fh:
        for p in part_paths:
            escaped = p.replace("'", "'\\''")
            fh.write(f"file '{escaped}'\n")
    cmd = [
        FFMPEG, "-y", "-v", "error",
        "-f", "concat", "-safe", "0",
        "-i", list_path,
        "-c", "copy",
        "-movflags", "+faststart",
        out_path,
    ]
    runner(cmd)
    return out_path
