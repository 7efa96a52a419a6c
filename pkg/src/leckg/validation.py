"""Dynamic percentile thresholds and tri-partition routing.

Percentiles use the nearest-rank method: for level p over n ascending
scores, the threshold is the value at 1-indexed rank ceil(p/100 * n),
clamped to at least 1.  No interpolation, so every threshold is an observed
score and a brute-force oracle can reproduce it exactly.

Routing is the closed-boundary case split: Accept iff s >= theta_high,
Feedback iff theta_low <= s < theta_high, Reject iff s < theta_low.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import EmptyScores, InvalidParams
from .kge import KgeModel, rank_relations
from .ontology import Ontology

ROUTE_ACCEPT = "Accept"
ROUTE_FEEDBACK = "Feedback"
ROUTE_REJECT = "Reject"

DEFAULT_LOW_PCT = 25.0
DEFAULT_HIGH_PCT = 70.0
DEFAULT_WARMUP = 1


@dataclass(frozen=True)
class Thresholds:
    theta_low: float
    theta_high: float
    iteration: int
    low_pct: float = DEFAULT_LOW_PCT
    high_pct: float = DEFAULT_HIGH_PCT

    def __post_init__(self):
        if self.theta_low > self.theta_high:
            raise InvalidParams("theta_low must be <= theta_high")


@dataclass(frozen=True)
class RoutingDecision:
    triple_key: tuple
    score: float
    route: str
    diagnostics: list[tuple[str, float]] | None = None


def nearest_rank(sorted_scores: list[float], pct: float) -> float:
    """Value at 1-indexed rank ceil(pct/100 * n) of an ascending list."""
    n = len(sorted_scores)
    if n == 0:
        raise EmptyScores("no scores")
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_scores[min(rank, n) - 1]


def compute_thresholds(
    scores: list[float],
    iteration: int,
    low_pct: float = DEFAULT_LOW_PCT,
    high_pct: float = DEFAULT_HIGH_PCT,
) -> Thresholds:
    if not scores:
        raise EmptyScores("cannot compute thresholds over zero scores")
    if not (0 <= low_pct <= 100 and 0 <= high_pct <= 100 and low_pct <= high_pct):
        raise InvalidParams("need 0 <= low_pct <= high_pct <= 100")
    ordered = sorted(scores)
    return Thresholds(
        theta_low=nearest_rank(ordered, low_pct),
        theta_high=nearest_rank(ordered, high_pct),
        iteration=iteration,
        low_pct=low_pct,
        high_pct=high_pct,
    )


def route(triple_key: tuple, s: float, th: Thresholds) -> RoutingDecision:
    if s >= th.theta_high:
        verdict = ROUTE_ACCEPT
    elif s >= th.theta_low:
        verdict = ROUTE_FEEDBACK
    else:
        verdict = ROUTE_REJECT
    return RoutingDecision(triple_key=triple_key, score=s, route=verdict)


def diagnose(
    h: str,
    t: str,
    relation: str,
    category: str,
    m: KgeModel,
    o: Ontology,
    iteration: int,
    warmup: int = DEFAULT_WARMUP,
    h_vec=None,
    t_vec=None,
) -> list[tuple[str, float]] | None:
    """Alternative relations for a Feedback-routed triple.

    During warm-up iterations the model is too raw to suggest relations, so
    feedback carries only the numeric score (returns None).  Afterwards:
    top-3 of the triple's own category, the original relation excluded.
    """
    if iteration <= warmup:
        return None
    ranked = rank_relations(m, h, t, category, o, k=4, h_vec=h_vec, t_vec=t_vec)
    return [(r, s) for r, s in ranked if r != relation][:3]
