"""Deterministic stand-in for the live multimodal endpoint.

Given a request and its canonical hash, derives a response that is (a) a pure
function of the hash, so repeated runs and any concurrency schedule produce
identical pipelines, and (b) well-formed for the stage that issued it, keyed
by the request's tag. Used by the mock backend whenever no authored fixture
matches and strict mode is off.
"""

from __future__ import annotations

import math
import random
import re
from typing import Sequence

# Record lines rendered by the composition stage, e.g.
#   "Clip 7, Highlight (0.90), what: ...; where: ...; ..., a short caption"
_RECORD_RE = re.compile(r"Clip (\d+), (Highlight|No Highlight) \((\d+\.\d+)\)")

_SUBJECTS = ("a cyclist", "two friends", "the family", "a dog", "the skier",
             "a street performer", "the kids", "a kayaker")
_ACTIONS = ("rides along a mountain trail", "sets up a picnic", "plays fetch",
            "carves through fresh snow", "paddles across the rapids",
            "waits at a crossing", "films the skyline", "laughs at the table")
_PLACES = ("a forest path", "the city square", "a snowy slope", "the river bend",
           "a sunlit beach", "the campsite", "a busy market", "the backyard")
_TIMES = ("morning", "midday", "late afternoon", "dusk", "a cloudy day",
          "golden hour", "night", "early spring")

COT_STEPS = (
    "1. Read every clip record and form a global concept for the final video.\n"
    "2. Select clips that carry the concept, favoring highlights but keeping\n"
    "   an opening and a closing shot.\n"
    "3. Arrange the selected clips into beginning, development and ending,\n"
    "   grouping related clips into themes."
)


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _records_in(text: str) -> list[tuple[int, bool, float]]:
    return [(int(m.group(1)), m.group(2) == "Highlight", float(m.group(3)))
            for m in _RECORD_RE.finditer(text)]


def _request_text(req) -> str:
    return "\n".join(p.text for p in req.messages if p.kind == "text")


def _structuring(rng: random.Random) -> str:
    highlight = round(rng.uniform(0.0, 1.0), 2)
    # most defects absent, so roughly half the clips survive the filter
    defects = [round(max(0.0, rng.uniform(-1.2, 0.8)), 2) for _ in range(4)]
    subject = rng.choice(_SUBJECTS)
    action = rng.choice(_ACTIONS)
    place = rng.choice(_PLACES)
    when = rng.choice(_TIMES)
    return (
        f"[Caption]: {subject.capitalize()} {action} near {place}.\n"
        f"[What]: {action}; [Where]: {place}; [When]: {when}; [Who]: {subject}\n"
        f"[Occlusion]: {_fmt(defects[0])}; [Jittering]: {_fmt(defects[1])}; "
        f"[Overexposure]: {_fmt(defects[2])}; [Meaningless]: {_fmt(defects[3])}; "
        f"[Highlight]: {_fmt(highlight)}"
    )


def _compose_group(records: Sequence[tuple[int, bool, float]]) -> str:
    flagged = [r for r in records if r[1]] or list(records)
    flagged.sort(key=lambda r: (-r[2], r[0]))
    take = max(1, math.ceil(len(flagged) / 2))
    chosen = flagged[:take]
    listing = ", ".join(f"Clip {cid}" for cid, _, _ in chosen)
    return (f"Selected: {listing}\n"
            f"Theme: standout moments - {listing}")


def _compose_final(records: Sequence[tuple[int, bool, float]], tighten_rounds: int) -> str:
    ranked = sorted(records, key=lambda r: (-r[2], r[0]))
    count = min(len(ranked), 20)
    for _ in range(tighten_rounds):
        count = max(1, int(math.ceil(count * 0.6)))
    chosen = ranked[:count]
    ids = sorted(cid for cid, _, _ in chosen)
    first, last = ids[0], ids[-1]
    middle = [cid for cid, _, _ in sorted(chosen, key=lambda r: (-r[2], r[0]))
              if cid not in (first, last)]

    lines = [f"Beginning: Clip {first} - the opening shot sets the scene"]
    lines += [f"Development: Clip {cid} - the action continues" for cid in middle]
    if last != first:
        lines.append(f"Ending: Clip {last} - the day winds down")
    ordered = [first] + middle + ([last] if last != first else [])
    half = max(1, len(ordered) // 2)
    lines.append("Theme: main action - " + ", ".join(f"Clip {c}" for c in ordered[:half]))
    if ordered[half:]:
        lines.append("Theme: surroundings - " + ", ".join(f"Clip {c}" for c in ordered[half:]))
    lines.append("Storyline: A compact arc that opens on the setting, follows the "
                 "strongest moments, and closes where the action settles.")
    return "\n".join(lines)


def _evaluate(rng: random.Random) -> str:
    scores = [round((1.0 + 4.0 * rng.random()) * 2) / 2 for _ in range(4)]
    return (
        f"[Material Richness]: varied settings and subjects ({scores[0]:.1f}); "
        f"[Appeal]: watchable pacing for a short cut ({scores[1]:.1f}); "
        f"[Exciting Segments]: several strong moments ({scores[2]:.1f}); "
        f"[Amount of Wasted Footage]: little filler remains ({scores[3]:.1f});"
    )


def synthesize(req, request_hash: str) -> str:
    """Derive a deterministic, stage-appropriate response for a request."""
    rng = random.Random(request_hash)
    tag = req.tag or ""
    text = _request_text(req)

    if tag.startswith("structuring"):
        return _structuring(rng)
    if tag == "cot":
        return COT_STEPS
    if tag == "compose_group":
        records = _records_in(text)
        if not records:
            return "Selected: none"
        return _compose_group(records)
    if tag == "compose_final":
        records = _records_in(text)
        if not records:
            return "Storyline: nothing to arrange"
        tighten_rounds = text.lower().count("too long")
        return _compose_final(records, tighten_rounds)
    if tag == "evaluate":
        return _evaluate(rng)
    return "Acknowledged."
