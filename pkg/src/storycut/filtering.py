"""Dynamic clip filtering and saliency scoring.

The filter scans the five attribute scores of a clip and keeps the clip only
when the highlight score is at least as large as every defect score. Ties go
to the later key, which is why the canonical key order puts Highlight last:
a clip whose best defect merely equals its highlight score is still kept.
"""

from __future__ import annotations

import json
import logging
from typing import Iterable, Sequence

from .types import (
    ATTRIBUTE_KEYS,
    EmptySelection,
    FilterVerdict,
    SaliencyTrack,
    StructuredDescription,
)

log = logging.getLogger(__name__)


def _is_highlight_key(key: str) -> bool:
    return key.strip().strip("[]").lower() == "highlight"


def dynamic_filter(keys: Sequence[str], nums: Sequence[float]) -> FilterVerdict:
    """Scan (key, score) pairs and decide whether the clip survives.

    Literal scan semantics: score starts at 0 and each pair with num >= score
    takes over as the running maximum, so the last key wins ties. With the
    canonical key order this reduces to the closed form
        highlight_flag  <=>  highlight >= max(defects)
        filter_flag     <=>  max(defects) > highlight
        score            =   max(all five scores)
    """
    if len(keys) != len(nums):
        raise ValueError(f"keys/nums length mismatch: {len(keys)} vs {len(nums)}")
    if not keys:
        raise ValueError("dynamic_filter needs at least one (key, num) pair")
    if any(n < 0 for n in nums):
        raise ValueError("attribute scores must be non-negative")

    score = 0.0
    max_key = None
    for key, num in zip(keys, nums):
        if num >= score:
            score = num
            max_key = key

    if max_key is not None and _is_highlight_key(max_key):
        return FilterVerdict(filter_flag=False, highlight_flag=True, score=score)
    return FilterVerdict(filter_flag=score != 0, highlight_flag=False, score=score)


def verdict(desc: StructuredDescription) -> FilterVerdict:
    """Run the dynamic filter on a structured description, canonical key order."""
    nums = desc.defects.in_key_order() + (desc.highlight,)
    return dynamic_filter(ATTRIBUTE_KEYS, nums)


def saliency(desc: StructuredDescription) -> float:
    """Signed saliency: the highlight score when it beats the worst defect,
    otherwise highlight minus worst defect (negative or zero)."""
    worst = desc.defects.worst()
    if desc.highlight > worst:
        return desc.highlight
    return desc.highlight - worst


def saliency_track(descs: Iterable[StructuredDescription]) -> SaliencyTrack:
    return SaliencyTrack(values={d.clip_id: saliency(d) for d in descs})


def select_valid(descs: Iterable[StructuredDescription]) -> list[int]:
    """Candidate set for composition: clip ids the filter kept, in id order.

    Raises EmptySelection when everything was discarded; the pipeline then
    falls back to top-saliency selection.
    """
    kept = [d.clip_id for d in sorted(descs, key=lambda d: d.clip_id)
            if not verdict(d).filter_flag]
    if not kept:
        raise EmptySelection("dynamic filter discarded every clip")
    return kept


def write_saliency_file(track: SaliencyTrack, path) -> None:
    """Persist clip_id -> saliency as JSON; consumed by evaluation and reports."""
    payload = {str(cid): track.values[cid] for cid in sorted(track.values)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_saliency_file(path) -> SaliencyTrack:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return SaliencyTrack(values={int(cid): float(v) for cid, v in raw.items()})
