"""Quantitative evaluation: ranked-retrieval metrics over saliency scores,
precision against footage-rank annotations, agent-vs-human correlations,
the final-cut evaluation agent, and embedding-fidelity aggregation.

Metric functions are pure and thread-safe. Ties in every ranking are broken
by ascending clip id (list position), which keeps results deterministic.
"""

from __future__ import annotations

import json
import logging
import math
import re
from typing import Mapping, NamedTuple, Optional, Sequence

from .gateway import AgentGateway, AgentRequest, GatewayError, image_part, text_part
from .structuring import PromptTemplate, with_format_reminder
from .types import Annotation, CriterionScore, EvaluationReport, ParseFailure

log = logging.getLogger(__name__)

DEFAULT_TOP_FRACTION = 0.5

# Parse "[Criterion]: reason (score)" chunks; the score is the last
# parenthesized decimal before the next bracketed criterion.
_CRITERION_NAMES = {
    "material richness": "material_richness",
    "appeal": "appeal",
    "exciting segments": "exciting_segments",
    "amount of wasted footage": "wasted_footage",
    "wasted footage": "wasted_footage",
}
_CHUNK_RE = re.compile(r"\[([^\[\]]+)\]\s*:\s*([^\[]*)")
_SCORE_SUFFIX_RE = re.compile(r"\(\s*(\d+(?:\.\d+)?)\s*\)\s*[;.]?\s*$")


class AnnotationError(ValueError):
    """Annotation file violates the documented schema."""


class SaliencyRanking(NamedTuple):
    """Aligned per-clip predictions and binary ground truth for one video."""

    scores: tuple[float, ...]
    labels: tuple[int, ...]


# -- ranked retrieval ---------------------------------------------------

def average_precision(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """Ranked-retrieval AP: mean of precision-at-k over the positive ranks.

    Items are ranked by score descending, ties broken by ascending position
    (positions follow clip-id order). Returns None when there is no positive
    label; callers report that as a skip.
    """
    if len(scores) != len(labels):
        raise ValueError("scores and labels length mismatch")
    if not any(labels):
        return None
    # stable sort: equal scores keep ascending position order under reverse=True
    order = sorted(range(len(scores)), key=scores.__getitem__, reverse=True)
    hits = 0
    precision_sum = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            precision_sum += hits / rank
    return precision_sum / hits


def map_over_videos(rankings: Sequence[tuple[Sequence[float], Sequence[int]]]) -> Optional[float]:
    """Mean AP over videos; videos without positives are skipped."""
    aps = []
    for scores, labels in rankings:
        ap = average_precision(scores, labels)
        if ap is None:
            log.warning("video without positive labels skipped in mAP")
        else:
            aps.append(ap)
    if not aps:
        return None
    return sum(aps) / len(aps)


def binarize_top_fraction(values: Sequence[float], fraction: float) -> list[int]:
    """1 for the ceil(n*fraction) highest values, ties to earlier positions."""
    k = math.ceil(len(values) * fraction)
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    top = set(order[:k])
    return [1 if i in top else 0 for i in range(len(values))]


def top5_map(videos: Sequence[tuple[Sequence[float], Sequence[Sequence[float]]]],
             fraction: float = DEFAULT_TOP_FRACTION) -> Optional[float]:
    """Multi-annotator protocol: per video, binarize each annotator's shot
    scores at the top `fraction`, compute AP per annotator against the
    predictions, average the five highest APs, then mean over videos."""
    per_video = []
    for predictions, annotator_matrix in videos:
        if not annotator_matrix:
            raise AnnotationError("video without annotator scores")
        aps = []
        for annotator_scores in annotator_matrix:
            if len(annotator_scores) != len(predictions):
                raise AnnotationError("annotator score length mismatch")
            labels = binarize_top_fraction(annotator_scores, fraction)
            ap = average_precision(predictions, labels)
            if ap is not None:
                aps.append(ap)
        if not aps:
            log.warning("video with no positive annotator labels skipped in Top-5 mAP")
            continue
        best = sorted(aps, reverse=True)[:5]
        per_video.append(sum(best) / len(best))
    if not per_video:
        return None
    return sum(per_video) / len(per_video)


def waste_highlight_precision(selected_ids: Sequence[int],
                              ranks: Mapping[int, int]) -> tuple[float, float]:
    """Fractions of the selection annotated wasted (rank 0) / highlight (rank 3)."""
    if not selected_ids:
        raise ValueError("empty selection")
    missing = [cid for cid in selected_ids if cid not in ranks]
    if missing:
        raise AnnotationError(f"unannotated clip ids: {missing}")
    waste = sum(1 for cid in selected_ids if ranks[cid] == 0) / len(selected_ids)
    highlight = sum(1 for cid in selected_ids if ranks[cid] == 3) / len(selected_ids)
    return waste, highlight


# -- correlations -------------------------------------------------------

class Correlations(NamedTuple):
    pearson: Optional[float]
    spearman: Optional[float]
    kendall_tau: Optional[float]


def _pearson(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    n = len(x)
    mean_x = sum(x) / n
    mean_y = sum(y) / n
    dx = [v - mean_x for v in x]
    dy = [v - mean_y for v in y]
    var_x = sum(v * v for v in dx)
    var_y = sum(v * v for v in dy)
    if var_x == 0 or var_y == 0:
        return None
    return sum(a * b for a, b in zip(dx, dy)) / math.sqrt(var_x * var_y)


def rank_with_ties(values: Sequence[float]) -> list[float]:
    """1-based ranks, tied values sharing the average of their rank span."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg_rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = avg_rank
        i = j + 1
    return ranks


def _kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    n = len(x)
    concordant = discordant = 0
    ties_x = ties_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            sx = (x[i] > x[j]) - (x[i] < x[j])
            sy = (y[i] > y[j]) - (y[i] < y[j])
            if sx == 0 and sy == 0:
                ties_x += 1
                ties_y += 1
            elif sx == 0:
                ties_x += 1
            elif sy == 0:
                ties_y += 1
            elif sx == sy:
                concordant += 1
            else:
                discordant += 1
    n0 = n * (n - 1) // 2
    denom = math.sqrt((n0 - ties_x) * (n0 - ties_y))
    if denom == 0:
        return None
    return (concordant - discordant) / denom


def correlations(agent_scores: Sequence[float], human_scores: Sequence[float]) -> Correlations:
    """Pearson r, Spearman rho (Pearson of tie-averaged ranks), Kendall tau-b.

    Constant inputs make r and rho (and tau-b's denominator) undefined;
    those come back as None and are reported as skips.
    """
    if len(agent_scores) != len(human_scores):
        raise ValueError("score series length mismatch")
    if len(agent_scores) < 3:
        raise ValueError("need at least 3 paired scores")
    pearson = _pearson(agent_scores, human_scores)
    spearman = _pearson(rank_with_ties(agent_scores), rank_with_ties(human_scores))
    tau = _kendall_tau_b(agent_scores, human_scores)
    return Correlations(pearson=pearson, spearman=spearman, kendall_tau=tau)


# -- evaluation agent ---------------------------------------------------

def build_eval_request(frames: Sequence[bytes], template: PromptTemplate, *,
                       model_name: str = "gpt-4o", max_output: int = 1024) -> AgentRequest:
    if not frames:
        raise ValueError("no frames to evaluate")
    parts = [text_part(template.render(frame_count=len(frames)))]
    parts.extend(image_part(data) for data in frames)
    return AgentRequest(messages=tuple(parts), model_name=model_name,
                        max_output=max_output, tag="evaluate")


def parse_eval_report(text: str) -> EvaluationReport:
    """Parse the bracketed-criterion grammar with trailing (score).

    Scores clamp to [1, 5]; the average is the arithmetic mean of the four
    criteria. Raises ParseFailure when any criterion is missing.
    """
    criteria: dict[str, CriterionScore] = {}
    for match in _CHUNK_RE.finditer(text):
        name = match.group(1).strip().lower()
        if name not in _CRITERION_NAMES:
            continue
        key = _CRITERION_NAMES[name]
        if key in criteria:
            continue
        chunk = match.group(2).strip()
        score_match = _SCORE_SUFFIX_RE.search(chunk)
        if not score_match:
            raise ParseFailure(f"criterion {match.group(1)!r} has no trailing (score)")
        score = min(5.0, max(1.0, float(score_match.group(1))))
        reason = chunk[:score_match.start()].strip()
        criteria[key] = CriterionScore(score=score, reason=reason)
    missing = [k for k in ("material_richness", "appeal", "exciting_segments",
                           "wasted_footage") if k not in criteria]
    if missing:
        raise ParseFailure(f"evaluation report missing criteria: {missing}")
    return EvaluationReport.from_criteria(criteria)


def evaluate_final_cut(frames: Sequence[bytes], template: PromptTemplate,
                       gateway: AgentGateway, *, reminder: str = "",
                       model_name: str = "gpt-4o") -> Optional[EvaluationReport]:
    """Run the evaluation agent; one format-reminder retry, then None (invalid)."""
    req = build_eval_request(frames, template, model_name=model_name)
    try:
        try:
            return parse_eval_report(gateway.complete(req).text)
        except ParseFailure as exc:
            log.warning("evaluation report unparseable (%s); re-asking", exc)
            retry = with_format_reminder(req, reminder or "Answer again in the exact "
                                                          "bracketed format requested.")
            return parse_eval_report(gateway.complete(retry).text)
    except (GatewayError, ParseFailure) as exc:
        log.error("evaluation report invalid after retry: %s", exc)
        return None


# -- fidelity -----------------------------------------------------------

def _mean_pool(embeddings: Sequence[Sequence[float]]) -> list[float]:
    if not embeddings:
        raise ValueError("empty embedding set")
    dim = len(embeddings[0])
    pooled = [0.0] * dim
    for row in embeddings:
        if len(row) != dim:
            raise ValueError("inconsistent embedding dimensionality")
        for i, v in enumerate(row):
            pooled[i] += v
    return [v / len(embeddings) for v in pooled]


def fidelity(final_embeddings: Sequence[Sequence[float]],
             raw_embeddings: Sequence[Sequence[float]]) -> float:
    """Cosine similarity between mean-pooled final-cut and raw embeddings."""
    a = _mean_pool(final_embeddings)
    b = _mean_pool(raw_embeddings)
    if len(a) != len(b):
        raise ValueError(f"embedding dimension mismatch: {len(a)} vs {len(b)}")
    norm_a = math.sqrt(sum(v * v for v in a))
    norm_b = math.sqrt(sum(v * v for v in b))
    if norm_a == 0 or norm_b == 0:
        raise ValueError("zero-norm pooled embedding")
    return sum(x * y for x, y in zip(a, b)) / (norm_a * norm_b)


def load_embeddings(path) -> list[list[float]]:
    """Rows-of-floats file with a leading dimension header line."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"empty embedding file {path}")
    try:
        dim = int(lines[0])
    except ValueError as exc:
        raise ValueError(f"{path}: first line must be the dimension") from exc
    rows = []
    for ln in lines[1:]:
        row = [float(tok) for tok in ln.split()]
        if len(row) != dim:
            raise ValueError(f"{path}: row of length {len(row)}, expected {dim}")
        rows.append(row)
    return rows


# -- annotations --------------------------------------------------------

def load_annotations(path) -> dict[str, Annotation]:
    """Read one-JSON-record-per-clip annotation files.

    Schema per line: {video_id, clip_index, start, end, rank} with rank in
    0..3 and per-video clip_index contiguous from 1.
    """
    per_video: dict[str, dict[int, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            try:
                video_id = record["video_id"]
                clip_index = int(record["clip_index"])
                rank = int(record["rank"])
            except (KeyError, TypeError, ValueError) as exc:
                raise AnnotationError(f"{path}:{line_no}: malformed record") from exc
            if rank not in (0, 1, 2, 3):
                raise AnnotationError(f"{path}:{line_no}: rank {rank} out of 0..3")
            ranks = per_video.setdefault(video_id, {})
            if clip_index in ranks:
                raise AnnotationError(f"{path}:{line_no}: duplicate clip_index {clip_index}")
            ranks[clip_index] = rank
    out = {}
    for video_id, ranks in per_video.items():
        expected = set(range(1, len(ranks) + 1))
        if set(ranks) != expected:
            raise AnnotationError(f"{video_id}: clip indices not contiguous from 1")
        out[video_id] = Annotation(video_id=video_id, ranks=ranks)
    return out


def highlight_labels(annotation: Annotation) -> list[int]:
    """Ground truth for highlight-detection metrics: rank 3 is positive."""
    return [1 if annotation.ranks[i] == 3 else 0
            for i in range(1, len(annotation.ranks) + 1)]


def waste_labels(annotation: Annotation) -> list[int]:
    """Rank 0 (wasted footage) as the positive class."""
    return [1 if annotation.ranks[i] == 0 else 0
            for i in range(1, len(annotation.ranks) + 1)]


def load_hd_dataset(path) -> dict[str, tuple[list[int], list[int]]]:
    """Highlight-detection ground truth per video: (highlight, waste) labels
    in clip-index order. Pair them with per-clip predicted scores to form
    SaliencyRanking inputs for mAP."""
    annotations = load_annotations(path)
    return {video_id: (highlight_labels(a), waste_labels(a))
            for video_id, a in annotations.items()}


def make_ranking(scores: Sequence[float], labels: Sequence[int]) -> SaliencyRanking:
    if len(scores) != len(labels):
        raise AnnotationError(f"{len(scores)} scores vs {len(labels)} labels")
    return SaliencyRanking(scores=tuple(scores), labels=tuple(labels))
