"""Shared domain model for the trimming pipeline.

All types are immutable after construction and safe to share across
concurrent tasks. Score-carrying types validate their ranges; the parsers
clamp before constructing, so a ValueError here always means a programming
error, not bad model output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

# Canonical attribute order. The highlight key comes last on purpose: the
# dynamic filter resolves score ties in favor of the later key.
ATTRIBUTE_KEYS = ("Occlusion", "Jittering", "Overexposure", "Meaningless", "Highlight")

CONTEXT_FIELD_LIMIT = 256

EVAL_CRITERIA = ("material_richness", "appeal", "exciting_segments", "wasted_footage")


class StorycutError(Exception):
    """Base class for all pipeline errors."""


class JobValidationError(StorycutError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


class ParseFailure(StorycutError):
    """Agent output did not match the expected grammar."""


class EmptySelection(StorycutError):
    """Every clip was filtered out; caller falls back to top-saliency selection."""


class PlanInconsistent(StorycutError):
    """A composition plan references a clip id that does not exist."""


class RenderError(StorycutError):
    """The media toolkit failed while producing the final cut."""


class StageDependencyError(StorycutError):
    """A pipeline stage was invoked before the stage it depends on."""


def _check_unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value!r}")


@dataclass(frozen=True)
class SourceVideo:
    """One raw input video. Invariants are enforced by validate_job, not here,
    so that a job with several bad sources reports every problem at once."""

    video_id: str
    uri: str
    duration: float
    frame_rate: float = 30.0


@dataclass(frozen=True)
class TimeInterval:
    start: float
    end: float

    def __post_init__(self):
        if not (0.0 <= self.start < self.end):
            raise ValueError(f"invalid interval [{self.start}, {self.end})")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class KeyframeRef:
    """Reference to one sampled frame. Identifies the cached image by
    (video_id, timestamp, short_side); the file itself may not exist yet."""

    video_id: str
    timestamp: float  # seconds, absolute in the source video
    short_side: int


@dataclass(frozen=True)
class Clip:
    """Atomic pipeline unit: a contiguous slice of one source video.

    clip_id is a single global sequence across all sources of a job,
    consecutive from 1 in source input order.
    """

    clip_id: int
    video_id: str
    interval: TimeInterval
    keyframes: tuple[KeyframeRef, ...] = ()

    def __post_init__(self):
        if self.clip_id < 1:
            raise ValueError(f"clip_id must be >= 1, got {self.clip_id}")

    @property
    def duration(self) -> float:
        return self.interval.length


@dataclass(frozen=True)
class DefectScores:
    """Per-clip filming defect scores, each in [0, 1]; 0 means the defect
    is absent."""

    occlusion: float = 0.0
    jittering: float = 0.0
    overexposure: float = 0.0
    meaningless: float = 0.0

    def __post_init__(self):
        for name in ("occlusion", "jittering", "overexposure", "meaningless"):
            _check_unit(name, getattr(self, name))

    def worst(self) -> float:
        return max(self.occlusion, self.jittering, self.overexposure, self.meaningless)

    def in_key_order(self) -> tuple[float, float, float, float]:
        """Scores in canonical attribute order (highlight excluded)."""
        return (self.occlusion, self.jittering, self.overexposure, self.meaningless)


@dataclass(frozen=True)
class ContextualAttributes:
    """Short what/where/when/who summaries; any field may be empty."""

    what: str = ""
    where: str = ""
    when: str = ""
    who: str = ""

    def __post_init__(self):
        for name in ("what", "where", "when", "who"):
            if len(getattr(self, name)) > CONTEXT_FIELD_LIMIT:
                raise ValueError(f"{name} exceeds {CONTEXT_FIELD_LIMIT} characters")


@dataclass(frozen=True)
class StructuredDescription:
    """Everything the captioning stage knows about one clip."""

    clip_id: int
    raw_caption: str = ""
    contextual: ContextualAttributes = field(default_factory=ContextualAttributes)
    defects: DefectScores = field(default_factory=DefectScores)
    highlight: float = 0.0

    def __post_init__(self):
        _check_unit("highlight", self.highlight)


@dataclass(frozen=True)
class FilterVerdict:
    """Dynamic-filter output. filter_flag marks a clip for discard,
    highlight_flag marks it valid for composition; never both."""

    filter_flag: bool
    highlight_flag: bool
    score: float

    def __post_init__(self):
        if self.filter_flag and self.highlight_flag:
            raise ValueError("filter_flag and highlight_flag cannot both be true")


@dataclass(frozen=True)
class SaliencyTrack:
    """Per-clip signed saliency, in [-1, 1]. Non-negative exactly for clips
    the dynamic filter kept."""

    values: dict[int, float]

    def __post_init__(self):
        for clip_id, value in self.values.items():
            if not -1.0 <= value <= 1.0:
                raise ValueError(f"saliency for clip {clip_id} out of [-1, 1]: {value!r}")


@dataclass(frozen=True)
class CompositionPlan:
    """Ordered final-cut selection plus the narrative the arranger produced.

    The order is the playback order and need not be chronological. Themes
    partition a subset of the ordered ids.
    """

    ordered_clip_ids: tuple[int, ...]
    clip_roles: dict[int, str] = field(default_factory=dict)
    themes: tuple[tuple[str, tuple[int, ...]], ...] = ()
    global_storyline: str = ""

    def __post_init__(self):
        ids = self.ordered_clip_ids
        if len(set(ids)) != len(ids):
            raise ValueError("ordered_clip_ids contains duplicates")
        id_set = set(ids)
        seen: set[int] = set()
        for title, members in self.themes:
            for m in members:
                if m not in id_set:
                    raise ValueError(f"theme {title!r} references unselected clip {m}")
                if m in seen:
                    raise ValueError(f"clip {m} appears in more than one theme")
                seen.add(m)


@dataclass(frozen=True)
class Annotation:
    """Ground-truth footage ranks for one video: 0 wasted, 1 ambiguous,
    2 normal, 3 highlight; keyed by per-video clip index (1-based)."""

    video_id: str
    ranks: dict[int, int]

    def __post_init__(self):
        for index, rank in self.ranks.items():
            if rank not in (0, 1, 2, 3):
                raise ValueError(f"rank for clip {index} must be in 0..3, got {rank!r}")


@dataclass(frozen=True)
class CriterionScore:
    score: float
    reason: str = ""

    def __post_init__(self):
        if not 1.0 <= self.score <= 5.0:
            raise ValueError(f"criterion score must be in [1, 5], got {self.score!r}")


@dataclass(frozen=True)
class EvaluationReport:
    """Four criterion scores with reasons, plus their arithmetic mean."""

    criteria: dict[str, CriterionScore]
    average: float

    def __post_init__(self):
        if tuple(sorted(self.criteria)) != tuple(sorted(EVAL_CRITERIA)):
            raise ValueError(f"criteria keys must be exactly {EVAL_CRITERIA}")
        mean = sum(c.score for c in self.criteria.values()) / len(self.criteria)
        if abs(mean - self.average) > 1e-9:
            raise ValueError(f"average {self.average!r} does not match criterion mean {mean!r}")

    @classmethod
    def from_criteria(cls, criteria: dict[str, CriterionScore]) -> "EvaluationReport":
        average = sum(c.score for c in criteria.values()) / len(criteria)
        return cls(criteria=dict(criteria), average=average)


@dataclass(frozen=True)
class Job:
    """A validated trimming job: ordered sources sharing one global clip-id
    namespace (ids are assigned in source input order during segmentation)."""

    sources: tuple[SourceVideo, ...]


def validate_job(sources: list[SourceVideo] | tuple[SourceVideo, ...], config=None) -> Job:
    """Check job-level invariants and fix the clip-id namespace order.

    Raises JobValidationError carrying every violation found, so callers can
    report all input problems in one pass.
    """
    errors: list[str] = []
    if not sources:
        errors.append("job needs at least one source video")
    seen: set[str] = set()
    for src in sources:
        if not src.video_id:
            errors.append("source with empty video_id")
        elif src.video_id in seen:
            errors.append(f"duplicate id {src.video_id!r}")
        else:
            seen.add(src.video_id)
        if src.duration <= 0:
            errors.append(f"source {src.video_id!r} has non-positive duration {src.duration!r}")
        if src.frame_rate <= 0:
            errors.append(f"source {src.video_id!r} has non-positive frame_rate {src.frame_rate!r}")
    if errors:
        raise JobValidationError(errors)
    return Job(sources=tuple(sources))
