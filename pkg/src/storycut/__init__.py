"""storycut: trim long raw videos into short story-driven final cuts.

The pipeline structures clips into text with a captioning agent, discards
wasted footage with a dynamic filter, arranges the survivors into a
storyline with an arrangement agent, and renders the result.
"""

__version__ = "0.1.0"

from .types import (  # noqa: F401
    Annotation,
    Clip,
    CompositionPlan,
    ContextualAttributes,
    DefectScores,
    EvaluationReport,
    FilterVerdict,
    SaliencyTrack,
    SourceVideo,
    StructuredDescription,
    TimeInterval,
    validate_job,
)
