"""Story composition: group clips, call the arrangement agent, parse plans.

Two stages: grouped shortlisting calls run in parallel over contiguous
chunks of the candidate set, then one global call arranges the surviving
clips into a storyline. Every agent failure mode has a deterministic
fallback so a batch run always ends with a plan.
"""

from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .gateway import AgentGateway, AgentRequest, GatewayError, text_part
from .structuring import PromptTemplate, load_template, with_format_reminder
from .types import CompositionPlan, ContextualAttributes, ParseFailure, StructuredDescription

log = logging.getLogger(__name__)

DURATION_TOLERANCE = 1.25

_CLIP_TOKEN_RE = re.compile(r"\bClip\s+(\d+)\b", re.IGNORECASE)
# Bare integer not adjacent to a digit or dot (so "(0.90)" contributes nothing).
_BARE_INT_RE = re.compile(r"(?<![\d.])(\d+)(?![\d.])")
_ROLE_RE = re.compile(r"^\s*(beginning|development|ending)\s*[:\-]\s*(.*)$", re.IGNORECASE)
_THEME_RE = re.compile(r"^\s*themes?\s*[:\-]\s*(.*)$", re.IGNORECASE)
_STORY_RE = re.compile(r"^\s*(?:global\s+)?story(?:line)?\s*[:\-]\s*(.*)$", re.IGNORECASE)

TIGHTEN_NOTE = ("The previous selection was too long: about {current:.0f} seconds "
                "of footage against a {target:.0f} second target. Compose again "
                "with fewer clips, keeping only what the story needs.")

# Used whenever the steps-planning call is disabled or fails.
STATIC_COMPOSITION_STEPS = (
    "1. Read every clip record and settle on one global concept for the video.\n"
    "2. Select the clips that carry that concept: favor high scores, keep an\n"
    "   opening and a closing shot, allow quieter clips as transitions.\n"
    "3. Arrange the selection into beginning, development and ending, grouping\n"
    "   related clips into themes."
)


@dataclass(frozen=True)
class ClipRecord:
    """One candidate clip as the arrangement agent sees it."""

    clip_id: int
    highlight_flag: bool
    score: float
    contextual: ContextualAttributes
    raw_caption: str


@dataclass(frozen=True)
class CompositionConfig:
    group_size: int = 20
    target_duration: float = 60.0
    max_iterations: int = 4
    cot_enabled: bool = True

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.target_duration <= 0:
            raise ValueError("target_duration must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def make_records(descs: Sequence[StructuredDescription],
                 verdicts: Mapping[int, object],
                 candidate_ids: Sequence[int]) -> list[ClipRecord]:
    by_id = {d.clip_id: d for d in descs}
    records = []
    for cid in candidate_ids:
        desc = by_id[cid]
        verdict = verdicts[cid]
        records.append(ClipRecord(clip_id=cid,
                                  highlight_flag=verdict.highlight_flag,
                                  score=verdict.score,
                                  contextual=desc.contextual,
                                  raw_caption=desc.raw_caption))
    return records


def render_record(record: ClipRecord) -> str:
    flag = "Highlight" if record.highlight_flag else "No Highlight"
    c = record.contextual
    context = f"what: {c.what}; where: {c.where}; when: {c.when}; who: {c.who}"
    return f"Clip {record.clip_id}, {flag} ({record.score:.2f}), {context}, {record.raw_caption}"


def render_input(records: Sequence[ClipRecord]) -> str:
    """One line per clip in id order: id, flag (score), context, caption."""
    if not records:
        raise ValueError("no clip records to render")
    ordered = sorted(records, key=lambda r: r.clip_id)
    return "\n".join(render_record(r) for r in ordered)


def extract_clip_ids(text: str) -> list[int]:
    """Ids in order of appearance; 'Clip 12' tokens win, bare ints otherwise."""
    ids = [int(m.group(1)) for m in _CLIP_TOKEN_RE.finditer(text)]
    if ids:
        return ids
    return [int(m.group(1)) for m in _BARE_INT_RE.finditer(text)]


def _dedup_keep_first(ids: Sequence[int]) -> list[int]:
    seen: set[int] = set()
    out = []
    for cid in ids:
        if cid not in seen:
            seen.add(cid)
            out.append(cid)
    return out


def _validated_ids(raw_ids: Sequence[int], candidates: set[int], where: str) -> list[int]:
    kept = []
    for cid in _dedup_keep_first(raw_ids):
        if cid in candidates:
            kept.append(cid)
        else:
            log.warning("%s: dropping hallucinated clip id %d", where, cid)
    return kept


def group(candidates: Sequence[int], cfg: CompositionConfig) -> list[list[int]]:
    """Contiguous chunks of at most group_size, in clip-id order."""
    if not candidates:
        raise ValueError("no candidates to group")
    ordered = sorted(candidates)
    return [list(ordered[i:i + cfg.group_size])
            for i in range(0, len(ordered), cfg.group_size)]


def _simple_request(text: str, tag: str, *, model_name: str, max_output: int) -> AgentRequest:
    return AgentRequest(messages=(text_part(text),), model_name=model_name,
                        max_output=max_output, tag=tag)


def build_cot_preamble(template: PromptTemplate, gateway: AgentGateway, *,
                       enabled: bool = True, model_name: str = "gpt-4o",
                       max_output: int = 512) -> str:
    """One agent call producing the composition step plan; static fallback."""
    if not enabled:
        return STATIC_COMPOSITION_STEPS
    req = _simple_request(template.render(), "cot", model_name=model_name,
                          max_output=max_output)
    try:
        return gateway.complete(req).text
    except GatewayError as exc:
        log.warning("composition-steps call failed (%s); using static steps", exc)
        return STATIC_COMPOSITION_STEPS


def compose_group(records: Sequence[ClipRecord], preamble: str,
                  template: PromptTemplate, gateway: AgentGateway, *,
                  model_name: str = "gpt-4o",
                  max_output: int = 1024) -> tuple[list[int], str]:
    """Shortlist one group; returns (selected ids, theme notes).

    Empty or failed selections fall back to the group's top quarter by score.
    """
    group_ids = {r.clip_id for r in records}
    req = _simple_request(
        template.render(preamble=preamble, clip_records=render_input(records)),
        "compose_group", model_name=model_name, max_output=max_output)
    notes = ""
    try:
        response_text = gateway.complete(req).text
        selected = _validated_ids(extract_clip_ids(response_text), group_ids, "group stage")
        notes = "\n".join(line.strip() for line in response_text.splitlines()
                          if _THEME_RE.match(line))
    except GatewayError as exc:
        log.warning("group call failed (%s); falling back to top-score quarter", exc)
        selected = []
    if not selected:
        take = math.ceil(len(records) / 4)
        ranked = sorted(records, key=lambda r: (-r.score, r.clip_id))[:take]
        selected = sorted(r.clip_id for r in ranked)
    return selected, notes


def compose_groups(records: Sequence[ClipRecord], preamble: str,
                   template: PromptTemplate, cfg: CompositionConfig,
                   gateway: AgentGateway, *, model_name: str = "gpt-4o",
                   max_output: int = 1024, max_workers: int = 8) -> tuple[list[int], str]:
    """Stage 1: shortlist every group concurrently, merged in group order.

    With a single group the stage is skipped and all candidates pass through.
    """
    by_id = {r.clip_id: r for r in records}
    groups = group([r.clip_id for r in records], cfg)
    if len(groups) == 1:
        return [r.clip_id for r in sorted(records, key=lambda r: r.clip_id)], ""

    def run(ids: list[int]) -> tuple[list[int], str]:
        return compose_group([by_id[c] for c in ids], preamble, template, gateway,
                             model_name=model_name, max_output=max_output)

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        outcomes = list(pool.map(run, groups))
    selected: list[int] = []
    notes: list[str] = []
    for ids, note in outcomes:
        selected.extend(ids)
        if note:
            notes.append(note)
    return selected, "\n".join(notes)


def parse_plan(text: str, candidate_ids: Sequence[int]) -> CompositionPlan:
    """Extract the ordered id sequence, per-clip roles, themes and storyline.

    Ids are filtered to the candidate set and deduplicated. Raises
    ParseFailure when no candidate id can be recovered at all.
    """
    candidates = set(candidate_ids)
    ordered: list[int] = []
    roles: dict[int, str] = {}
    themes: list[tuple[str, list[int]]] = []
    storyline = ""

    for line in text.splitlines():
        role_match = _ROLE_RE.match(line)
        if role_match:
            role_name = role_match.group(1).lower()
            rest = role_match.group(2).strip()
            for cid in extract_clip_ids(rest):
                if cid in candidates and cid not in roles:
                    ordered.append(cid)
                    roles[cid] = f"{role_name}: {re.sub(_CLIP_TOKEN_RE, '', rest).strip(' -–:')}"
            continue
        theme_match = _THEME_RE.match(line)
        if theme_match:
            rest = theme_match.group(1).strip()
            member_ids = extract_clip_ids(rest)
            title = _CLIP_TOKEN_RE.split(rest)[0].strip(" -–:,") or f"theme {len(themes) + 1}"
            themes.append((title, member_ids))
            continue
        story_match = _STORY_RE.match(line)
        if story_match:
            storyline = story_match.group(1).strip()

    ordered = _validated_ids(ordered, candidates, "final stage")
    if not ordered:
        ordered = _validated_ids(extract_clip_ids(text), candidates, "final stage")
    if not ordered:
        raise ParseFailure("no clip ids found in composition output")

    in_plan = set(ordered)
    assigned: set[int] = set()
    clean_themes: list[tuple[str, tuple[int, ...]]] = []
    for title, member_ids in themes:
        members = tuple(cid for cid in _dedup_keep_first(member_ids)
                        if cid in in_plan and cid not in assigned)
        assigned.update(members)
        if members:
            clean_themes.append((title, members))

    return CompositionPlan(ordered_clip_ids=tuple(ordered),
                           clip_roles=roles,
                           themes=tuple(clean_themes),
                           global_storyline=storyline)


def fallback_plan(records: Sequence[ClipRecord], durations: Mapping[int, float],
                  target_duration: float) -> CompositionPlan:
    """Deterministic plan: top-scored clips, chronological order, within target."""
    ranked = sorted(records, key=lambda r: (-r.score, r.clip_id))
    chosen: list[ClipRecord] = []
    total = 0.0
    for record in ranked:
        length = durations[record.clip_id]
        if not chosen or total + length <= target_duration:
            chosen.append(record)
            total += length
    ids = tuple(sorted(r.clip_id for r in chosen))
    roles = {}
    for i, cid in enumerate(ids):
        if i == 0:
            roles[cid] = "beginning: earliest selected moment opens the cut"
        elif i == len(ids) - 1:
            roles[cid] = "ending: latest selected moment closes the cut"
        else:
            roles[cid] = "development: high-scoring moment"
    return CompositionPlan(ordered_clip_ids=ids, clip_roles=roles, themes=(),
                           global_storyline="Top-scored clips in chronological order "
                                            "(deterministic fallback).")


def _plan_duration(plan: CompositionPlan, durations: Mapping[int, float]) -> float:
    return sum(durations[cid] for cid in plan.ordered_clip_ids)


def _truncate_to_budget(plan: CompositionPlan, records_by_id: Mapping[int, ClipRecord],
                        durations: Mapping[int, float], budget: float) -> CompositionPlan:
    """Drop lowest-score clips (later position first on ties) until within budget."""
    ids = list(plan.ordered_clip_ids)
    while len(ids) > 1 and sum(durations[c] for c in ids) > budget:
        worst = min(reversed(ids), key=lambda c: records_by_id[c].score)
        ids.remove(worst)
    kept = set(ids)
    return CompositionPlan(
        ordered_clip_ids=tuple(ids),
        clip_roles={c: r for c, r in plan.clip_roles.items() if c in kept},
        themes=tuple((title, tuple(m for m in members if m in kept))
                     for title, members in plan.themes
                     if any(m in kept for m in members)),
        global_storyline=plan.global_storyline,
    )


def compose_final(records: Sequence[ClipRecord], preamble: str,
                  template: PromptTemplate, cfg: CompositionConfig,
                  gateway: AgentGateway, durations: Mapping[int, float], *,
                  model_name: str = "gpt-4o", max_output: int = 2048,
                  reminder: Optional[str] = None) -> CompositionPlan:
    """Stage 2: arrange the shortlist into a plan within the duration budget.

    Re-invokes with a tightening note while the mapped duration exceeds
    target x 1.25, up to max_iterations total calls, then truncates by score.
    Unparseable or failed calls fall back to the deterministic plan.
    """
    if not records:
        raise ValueError("compose_final needs at least one record")
    if reminder is None:
        reminder = load_template("format_reminder").body
    records_by_id = {r.clip_id: r for r in records}
    candidate_ids = sorted(records_by_id)
    budget = cfg.target_duration * DURATION_TOLERANCE
    base_text = template.render(preamble=preamble,
                                clip_records=render_input(records),
                                target_duration=f"{cfg.target_duration:g}")

    plan: Optional[CompositionPlan] = None
    notes: list[str] = []
    for iteration in range(cfg.max_iterations):
        if plan is not None:
            notes.append(TIGHTEN_NOTE.format(current=_plan_duration(plan, durations),
                                             target=cfg.target_duration))
        text = base_text if not notes else base_text + "\n\n" + "\n".join(notes)
        req = _simple_request(text, "compose_final", model_name=model_name,
                              max_output=max_output)
        try:
            response = gateway.complete(req)
            try:
                candidate_plan = parse_plan(response.text, candidate_ids)
            except ParseFailure:
                response = gateway.complete(with_format_reminder(req, reminder))
                candidate_plan = parse_plan(response.text, candidate_ids)
        except (GatewayError, ParseFailure) as exc:
            log.warning("final composition call failed (%s)", exc)
            if plan is None:
                return fallback_plan(records, durations, cfg.target_duration)
            break
        plan = candidate_plan
        if _plan_duration(plan, durations) <= budget:
            return plan
    if plan is None:
        return fallback_plan(records, durations, cfg.target_duration)
    if _plan_duration(plan, durations) > budget:
        log.warning("plan still over budget after %d iterations; truncating",
                    cfg.max_iterations)
        plan = _truncate_to_budget(plan, records_by_id, durations, budget)
    return plan


# -- persistence -------------------------------------------------------

def plan_to_json(plan: CompositionPlan) -> dict:
    return {
        "ordered_clip_ids": list(plan.ordered_clip_ids),
        "clip_roles": {str(cid): role for cid, role in sorted(plan.clip_roles.items())},
        "themes": [{"title": title, "clip_ids": list(members)}
                   for title, members in plan.themes],
        "global_storyline": plan.global_storyline,
    }


def plan_from_json(record: dict) -> CompositionPlan:
    return CompositionPlan(
        ordered_clip_ids=tuple(int(c) for c in record["ordered_clip_ids"]),
        clip_roles={int(c): r for c, r in record.get("clip_roles", {}).items()},
        themes=tuple((t["title"], tuple(int(c) for c in t["clip_ids"]))
                     for t in record.get("themes", [])),
        global_storyline=record.get("global_storyline", ""),
    )


def plan_dumps(plan: CompositionPlan) -> str:
    return json.dumps(plan_to_json(plan), ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def storyline_text(plan: CompositionPlan) -> str:
    """Human-readable multi-level storyline rendering of a plan."""
    lines = ["Storyline", "=========", plan.global_storyline or "(none)", ""]
    if plan.themes:
        lines.append("Themes")
        lines.append("------")
        for title, members in plan.themes:
            lines.append(f"- {title}: " + ", ".join(f"clip {m}" for m in members))
        lines.append("")
    lines.append("Sequence")
    lines.append("--------")
    for cid in plan.ordered_clip_ids:
        role = plan.clip_roles.get(cid, "")
        lines.append(f"{cid:>6}  {role}".rstrip())
    return "\n".join(lines) + "\n"
