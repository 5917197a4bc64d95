"""Shared test helpers: deterministic images, stub gateways, fixture jobs."""

from __future__ import annotations

import math
import re

import pytest

from storycut import ingest
from storycut.gateway import AgentGateway, AgentResponse
from storycut.types import Clip, SourceVideo


def write_clip_keyframes(cache_dir: str, clips: list[Clip]) -> None:
    """Materialize deterministic placeholder PNGs for every keyframe ref."""
    for clip in clips:
        ingest.write_placeholder_keyframes(clip, cache_dir)


class StubGateway:
    """Minimal gateway double: maps requests to canned behavior.

    `responder(req)` returns response text or raises; calls are recorded.
    """

    def __init__(self, responder):
        self.responder = responder
        self.requests = []

    def complete(self, req) -> AgentResponse:
        self.requests.append(req)
        text = self.responder(req)
        return AgentResponse(text=text, backend="mock")


_CLIP_ID_IN_PROMPT = re.compile(r"clip (\d+) of")
_RECORD_LINE = re.compile(r"Clip (\d+), (Highlight|No Highlight) \((\d+\.\d+)\)")


def structuring_clip_id(req) -> int:
    """Recover the clip id from a structuring request's instruction text."""
    text = "\n".join(p.text for p in req.messages if p.kind == "text")
    match = _CLIP_ID_IN_PROMPT.search(text)
    assert match, f"no clip id in prompt: {text[:80]!r}"
    return int(match.group(1))


def records_in_request(req) -> list[tuple[int, bool, float]]:
    text = "\n".join(p.text for p in req.messages if p.kind == "text")
    return [(int(m.group(1)), m.group(2) == "Highlight", float(m.group(3)))
            for m in _RECORD_LINE.finditer(text)]


def authored_attributes(clip_id: int) -> dict[str, float]:
    """Deterministic per-clip score table for fixture jobs.

    Pattern gives roughly 20% filtered clips and varied highlight scores.
    """
    pattern = clip_id % 10
    if pattern == 0:
        return {"occlusion": 0.8, "jittering": 0.1, "overexposure": 0.0,
                "meaningless": 0.0, "highlight": 0.2}
    if pattern == 3:
        return {"occlusion": 0.0, "jittering": 0.0, "overexposure": 0.1,
                "meaningless": 0.7, "highlight": 0.1}
    return {"occlusion": round(0.05 * (clip_id % 3), 2),
            "jittering": round(0.1 * (clip_id % 2), 2),
            "overexposure": 0.0,
            "meaningless": 0.0,
            "highlight": round(0.5 + 0.1 * (clip_id % 5), 2)}


def authored_structuring_response(clip_id: int) -> str:
    a = authored_attributes(clip_id)
    return (
        f"[Caption]: Scene number {clip_id} unfolds outdoors.\n"
        f"[What]: activity {clip_id}; [Where]: location {clip_id % 7}; "
        f"[When]: afternoon; [Who]: the crew\n"
        f"[Occlusion]: {a['occlusion']}; [Jittering]: {a['jittering']}; "
        f"[Overexposure]: {a['overexposure']}; [Meaningless]: {a['meaningless']}; "
        f"[Highlight]: {a['highlight']}"
    )


def authored_group_response(records: list[tuple[int, bool, float]]) -> str:
    ranked = sorted(records, key=lambda r: (-r[2], r[0]))
    take = max(1, math.ceil(len(ranked) * 0.4))
    ids = [cid for cid, _, _ in ranked[:take]]
    listing = ", ".join(f"Clip {cid}" for cid in ids)
    return f"Selected: {listing}\nTheme: strongest moments - {listing}"


def authored_final_response(records: list[tuple[int, bool, float]]) -> str:
    ranked = sorted(records, key=lambda r: (-r[2], r[0]))
    chosen = sorted(cid for cid, _, _ in ranked[:min(len(ranked), 18)])
    lines = [f"Beginning: Clip {chosen[0]} - the story opens here"]
    lines += [f"Development: Clip {cid} - momentum builds" for cid in chosen[1:-1]]
    if len(chosen) > 1:
        lines.append(f"Ending: Clip {chosen[-1]} - the story closes here")
    half = max(1, len(chosen) // 2)
    lines.append("Theme: action - " + ", ".join(f"Clip {c}" for c in chosen[:half]))
    if chosen[half:]:
        lines.append("Theme: scenery - " + ", ".join(f"Clip {c}" for c in chosen[half:]))
    lines.append("Storyline: The authored fixture story arcs across the day.")
    return "\n".join(lines)


COT_FIXTURE_TEXT = ("1. Form the concept.\n2. Select the strongest clips.\n"
                    "3. Arrange beginning, development, ending.")


def author_response(req) -> str:
    """Scripted author: stage-appropriate deterministic fixture content."""
    if req.tag.startswith("structuring"):
        return authored_structuring_response(structuring_clip_id(req))
    if req.tag == "cot":
        return COT_FIXTURE_TEXT
    if req.tag == "compose_group":
        return authored_group_response(records_in_request(req))
    if req.tag == "compose_final":
        return authored_final_response(records_in_request(req))
    if req.tag == "evaluate":
        return ("[Material Richness]: varied scenes (3.5); [Appeal]: easy watch (4.0); "
                "[Exciting Segments]: strong peaks (3.0); "
                "[Amount of Wasted Footage]: little filler (4.5);")
    return "Acknowledged."


class AuthoringGateway:
    """Answers with authored fixture content and records it as mock fixtures,
    so later strict-mock runs replay the identical conversation."""

    def __init__(self, fixtures_dir: str):
        self._store = AgentGateway("mock", fixtures_dir=fixtures_dir, strict=False)

    def complete(self, req) -> AgentResponse:
        text = author_response(req)
        self._store.write_fixture(req, text)
        return AgentResponse(text=text, backend="mock")


def fixture_sources() -> list[SourceVideo]:
    """Three synthetic sources whose default segmentation yields 70 clips."""
    return [
        SourceVideo(video_id="alpha", uri="alpha.mp4", duration=75.0),
        SourceVideo(video_id="bravo", uri="bravo.mp4", duration=66.0),
        SourceVideo(video_id="charlie", uri="charlie.mp4", duration=69.0),
    ]


@pytest.fixture
def tmp_job_dir(tmp_path):
    return str(tmp_path / "job")
