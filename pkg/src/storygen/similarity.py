"""Bag-of-words cosine similarity between consecutive outlines, and the
twist/plain gate built on it.

High similarity between the latest two outlines means the story is treading
water, so the gate asks for a twist. ``invert=True`` flips the direction for
experiments that want the opposite reading.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any

from storygen.models import Outline

DEFAULT_THRESHOLD = 0.7

_STRIP_RE = re.compile(r"[^\w\s]")

TermVector = dict[str, float]


class EmptyOutline(ValueError):
    pass


class Strategy(str, Enum):
    TWIST = "twist"
    PLAIN = "plain"


@dataclass(frozen=True)
class GateDecision:
    score: float
    threshold: float
    strategy: Strategy
    inverted: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "score": self.score,
            "threshold": self.threshold,
            "strategy": self.strategy.value,
            "inverted": self.inverted,
        }


def tokenize(text: str) -> list[str]:
    return _STRIP_RE.sub("", text.lower()).split()


def vectorize(tokens: Sequence[str], idf: Mapping[str, float] | None = None) -> TermVector:
    """Term-frequency vector, optionally IDF-scaled. Zero weights are dropped."""
    counts = Counter(tokens)
    if idf is None:
        return {tok: float(n) for tok, n in counts.items()}
    vec = {}
    for tok, n in counts.items():
        w = n * idf.get(tok, 1.0)
        if w < 0:
            raise ValueError(f"negative idf for {tok!r}")
        if w > 0:
            vec[tok] = w
    return vec


def cosine(u: Mapping[str, float], v: Mapping[str, float]) -> float:
    if not u or not v:
        return 0.0
    if len(v) < len(u):
        u, v = v, u
    dot = sum(w * v[t] for t, w in u.items() if t in v)
    if dot == 0:
        return 0.0
    nu = sum(w * w for w in u.values())
    nv = sum(w * w for w in v.values())
    # sqrt of the product keeps cosine(u, u) == 1.0 exactly for integer counts
    return min(1.0, dot / math.sqrt(nu * nv))


def text_similarity(a: str, b: str) -> float:
    return cosine(vectorize(tokenize(a)), vectorize(tokenize(b)))


def decide_strategy(
    latest: Outline | str,
    previous: Outline | str,
    threshold: float = DEFAULT_THRESHOLD,
    *,
    invert: bool = False,
) -> GateDecision:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    latest_text = latest.text if isinstance(latest, Outline) else latest
    previous_text = previous.text if isinstance(previous, Outline) else previous
    if not latest_text.strip() or not previous_text.strip():
        raise EmptyOutline("both outlines must be non-empty")
    score = text_similarity(latest_text, previous_text)
    above = score > threshold
    twist = above != invert
    return GateDecision(score, threshold, Strategy.TWIST if twist else Strategy.PLAIN, invert)
