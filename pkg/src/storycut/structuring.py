"""Captioning stage: prompt construction, output parsing, fan-out over clips.

The downstream pipeline runs on text only, so this stage's one job is to
turn keyframes into one StructuredDescription per clip and persist them as
JSON records (schema documented in the README).
"""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from .gateway import AgentGateway, AgentRequest, GatewayError, AgentUnavailable, \
    MessagePart, image_part, text_part
from .types import (
    ATTRIBUTE_KEYS,
    CONTEXT_FIELD_LIMIT,
    Clip,
    ContextualAttributes,
    DefectScores,
    ParseFailure,
    StructuredDescription,
)

log = logging.getLogger(__name__)

DEFAULT_REASK_LIMIT = 2
DEFAULT_FAILURE_FRACTION = 0.2

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")
# One bracketed pair: key, then a value running to the next ';', '[' or line end.
_PAIR_RE = re.compile(r"\[([^\[\]]+)\]\s*:\s*([^;\[\n]*)")
_DECIMAL_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)$")

_TEXT_KEYS = {"caption": "raw_caption", "raw caption": "raw_caption",
              "what": "what", "where": "where", "when": "when", "who": "who"}
_SCORE_KEYS = {k.lower(): k.lower() for k in ATTRIBUTE_KEYS}


class TemplateError(ValueError):
    """A required placeholder was left unbound at render time."""


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    required: tuple[str, ...]

    def render(self, **values) -> str:
        missing = [p for p in self.required if p not in values]
        if missing:
            raise TemplateError(f"template {self.name!r} missing placeholders: {missing}")
        try:
            return self.body.format(**values)
        except (KeyError, IndexError) as exc:
            raise TemplateError(f"template {self.name!r} render failed: {exc}") from exc


def load_template(name: str, prompt_dir: Optional[str] = None) -> PromptTemplate:
    """Load `<name>.txt` from prompt_dir (default: the packaged prompts)."""
    directory = prompt_dir or os.path.join(os.path.dirname(__file__), "prompts")
    path = os.path.join(directory, f"{name}.txt")
    with open(path, encoding="utf-8") as fh:
        body = fh.read()
    required = tuple(sorted(set(_PLACEHOLDER_RE.findall(body))))
    return PromptTemplate(name=name, body=body, required=required)


def build_structuring_request(clip: Clip, template: PromptTemplate,
                              frames: Sequence[bytes], *,
                              model_name: str = "gpt-4o",
                              temperature: float = 0.0,
                              max_output: int = 1024,
                              tag: str = "structuring") -> AgentRequest:
    """Instruction text followed by the clip's keyframes in temporal order."""
    if not frames:
        raise ValueError(f"clip {clip.clip_id} has no keyframes to structure")
    text = template.render(clip_id=clip.clip_id,
                           duration=f"{clip.duration:g}",
                           frame_count=len(frames))
    parts: list[MessagePart] = [text_part(text)]
    parts.extend(image_part(data) for data in frames)
    return AgentRequest(messages=tuple(parts), temperature=temperature,
                        max_output=max_output, model_name=model_name, tag=tag)


def build_isolated_requests(clip: Clip, templates: Sequence[PromptTemplate],
                            frames: Sequence[bytes], **kwargs) -> list[AgentRequest]:
    """Isolated-prompt mode: one request per attribute family, each carrying
    all keyframes (three times the visual content of the unified prompt)."""
    return [
        build_structuring_request(clip, tpl, frames,
                                  tag=f"structuring_{tpl.name.rsplit('_', 1)[-1]}",
                                  **kwargs)
        for tpl in templates
    ]


def parse_attribute_line(text: str) -> list[tuple[str, object]]:
    """Parse `[Key]: value; [Key]: value ...` pairs, preserving input order.

    A value that is entirely a decimal parses as a float clamped to [0, 1];
    anything else stays free text. Raises ParseFailure when no pair matches.
    """
    pairs: list[tuple[str, object]] = []
    for match in _PAIR_RE.finditer(text):
        key = match.group(1).strip()
        raw = match.group(2).strip()
        if _DECIMAL_RE.match(raw):
            value: object = min(1.0, max(0.0, float(raw)))
        else:
            value = raw
        pairs.append((key, value))
    if not pairs:
        raise ParseFailure("no [key]: value pair found")
    return pairs


def parse_structured_description(text: str, clip_id: int) -> StructuredDescription:
    """Extract caption, contextual attributes, defect scores and highlight.

    Missing numeric keys default to 0.0 with a warning; missing text keys
    default to empty. Raises ParseFailure when no recognized key parses at
    all (the caller re-asks with a format reminder).
    """
    pairs = parse_attribute_line(text)
    texts: dict[str, str] = {}
    scores: dict[str, float] = {}
    recognized = 0
    for key, value in pairs:
        lowered = key.lower()
        if lowered in _TEXT_KEYS and _TEXT_KEYS[lowered] not in texts:
            texts[_TEXT_KEYS[lowered]] = str(value)
            recognized += 1
        elif lowered in _SCORE_KEYS and lowered not in scores:
            if isinstance(value, float):
                scores[lowered] = value
                recognized += 1
            else:
                log.warning("clip %d: non-numeric %s value %r", clip_id, key, value)
    if not recognized:
        raise ParseFailure(f"clip {clip_id}: no recognized attribute key in response")

    for key in _SCORE_KEYS:
        if key not in scores:
            log.warning("clip %d: missing [%s]; defaulting to 0.0", clip_id, key.capitalize())
            scores[key] = 0.0

    def _ctx(name: str) -> str:
        return texts.get(name, "")[:CONTEXT_FIELD_LIMIT]

    return StructuredDescription(
        clip_id=clip_id,
        raw_caption=texts.get("raw_caption", "")[:CONTEXT_FIELD_LIMIT],
        contextual=ContextualAttributes(what=_ctx("what"), where=_ctx("where"),
                                        when=_ctx("when"), who=_ctx("who")),
        defects=DefectScores(occlusion=scores["occlusion"], jittering=scores["jittering"],
                             overexposure=scores["overexposure"],
                             meaningless=scores["meaningless"]),
        highlight=scores["highlight"],
    )


def format_structured_description(desc: StructuredDescription) -> str:
    """Serialize back to the attribute-line grammar; round-trips through
    parse_structured_description as long as text fields avoid ';' and '['."""
    c = desc.contextual
    d = desc.defects
    return (
        f"[Caption]: {desc.raw_caption}\n"
        f"[What]: {c.what}; [Where]: {c.where}; [When]: {c.when}; [Who]: {c.who}\n"
        f"[Occlusion]: {d.occlusion!r}; [Jittering]: {d.jittering!r}; "
        f"[Overexposure]: {d.overexposure!r}; [Meaningless]: {d.meaningless!r}; "
        f"[Highlight]: {desc.highlight!r}"
    )


def with_format_reminder(req: AgentRequest, reminder: str) -> AgentRequest:
    """Re-ask variant of a request: same content plus a trailing reminder."""
    return AgentRequest(messages=req.messages + (text_part(reminder),),
                        temperature=req.temperature, max_output=req.max_output,
                        model_name=req.model_name, tag=req.tag)


def _merge_isolated(parts: Sequence[StructuredDescription], clip_id: int) -> StructuredDescription:
    caption, context, defects = parts
    return StructuredDescription(clip_id=clip_id, raw_caption=caption.raw_caption,
                                 contextual=context.contextual, defects=defects.defects,
                                 highlight=defects.highlight)


def structure_job(clips: Sequence[Clip], template: PromptTemplate, gateway: AgentGateway, *,
                  frames_loader: Callable[[Clip], list[bytes]],
                  isolated_templates: Optional[Sequence[PromptTemplate]] = None,
                  reminder: Optional[str] = None,
                  model_name: str = "gpt-4o",
                  max_output: int = 1024,
                  reask_limit: int = DEFAULT_REASK_LIMIT,
                  failure_fraction: float = DEFAULT_FAILURE_FRACTION,
                  max_workers: int = 8) -> list[StructuredDescription]:
    """Structure every clip concurrently; output sorted by clip_id.

    Per-clip failures (no keyframes, transport errors, unparseable output
    after `reask_limit` re-asks) exclude the clip with a warning. When more
    than `failure_fraction` of clips fail, the whole job raises
    AgentUnavailable instead of returning a silently thin result.
    """
    if not clips:
        return []
    if reminder is None:
        reminder = load_template("format_reminder").body

    def one_clip(clip: Clip) -> Optional[StructuredDescription]:
        frames = frames_loader(clip)
        if not frames:
            log.warning("clip %d: no keyframes (defective ingest); excluded", clip.clip_id)
            return None
        if isolated_templates:
            requests = build_isolated_requests(clip, isolated_templates, frames,
                                               model_name=model_name, max_output=max_output)
        else:
            requests = [build_structuring_request(clip, template, frames,
                                                  model_name=model_name, max_output=max_output)]
        parsed: list[StructuredDescription] = []
        for req in requests:
            attempt_req = req
            for attempt in range(reask_limit + 1):
                response = gateway.complete(attempt_req)
                try:
                    parsed.append(parse_structured_description(response.text, clip.clip_id))
                    break
                except ParseFailure:
                    if attempt == reask_limit:
                        log.warning("clip %d: invalid-structuring after %d re-asks; excluded",
                                    clip.clip_id, reask_limit)
                        return None
                    attempt_req = with_format_reminder(attempt_req, reminder)
        if isolated_templates:
            return _merge_isolated(parsed, clip.clip_id)
        return parsed[0]

    results: dict[int, StructuredDescription] = {}
    failures = 0
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for clip, outcome in zip(clips, pool.map(_guarded(one_clip), clips)):
            if isinstance(outcome, GatewayError):
                log.warning("clip %d: agent call failed: %s", clip.clip_id, outcome)
                failures += 1
            elif outcome is None:
                failures += 1
            else:
                results[clip.clip_id] = outcome

    if failures and failures / len(clips) > failure_fraction:
        raise AgentUnavailable(f"{failures}/{len(clips)} clips failed structuring")
    return [results[cid] for cid in sorted(results)]


def _guarded(fn):
    """Wrap per-clip work so gateway failures surface as values, keeping the
    fan-out's completion order irrelevant to the outcome."""
    def wrapper(clip):
        try:
            return fn(clip)
        except GatewayError as exc:
            return exc
    return wrapper


# -- persistence -------------------------------------------------------

def desc_to_json(desc: StructuredDescription) -> dict:
    return {
        "clip_id": desc.clip_id,
        "raw_caption": desc.raw_caption,
        "what": desc.contextual.what,
        "where": desc.contextual.where,
        "when": desc.contextual.when,
        "who": desc.contextual.who,
        "occlusion": desc.defects.occlusion,
        "jittering": desc.defects.jittering,
        "overexposure": desc.defects.overexposure,
        "meaningless": desc.defects.meaningless,
        "highlight": desc.highlight,
    }


def desc_from_json(record: dict) -> StructuredDescription:
    return StructuredDescription(
        clip_id=int(record["clip_id"]),
        raw_caption=record.get("raw_caption", ""),
        contextual=ContextualAttributes(what=record.get("what", ""),
                                        where=record.get("where", ""),
                                        when=record.get("when", ""),
                                        who=record.get("who", "")),
        defects=DefectScores(occlusion=float(record.get("occlusion", 0.0)),
                             jittering=float(record.get("jittering", 0.0)),
                             overexposure=float(record.get("overexposure", 0.0)),
                             meaningless=float(record.get("meaningless", 0.0))),
        highlight=float(record.get("highlight", 0.0)),
    )


def write_descriptions(descs: Iterable[StructuredDescription], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for desc in descs:
            fh.write(json.dumps(desc_to_json(desc), ensure_ascii=False) + "\n")


def read_descriptions(path) -> list[StructuredDescription]:
    descs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                descs.append(desc_from_json(json.loads(line)))
    return descs
