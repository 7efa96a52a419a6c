"""Two refinement channels between the language model and the structural
validator.

Channel 1 sends a mid-band triple back to the model with its structural
score, ranked in-category alternatives, and retrieved evidence; the reply
either corrects the triple (it re-enters the pool with the retry counter
bumped), confirms it unchanged (same), or rejects it.  A triple gets at most
3 feedback attempts over its lifetime; the limit check happens before any
gateway call, so the fourth attempt never leaves the process.

Channel 2 tiers the scored pool with an independent percentile pair: the top
tier feeds training directly, the middle queues for Channel-1 verification
in priority order, the bottom is dropped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .corpus import Sentence
from .errors import EmptyInput
from .extraction import (
    STATUS_PENDING,
    STATUS_REJECTED,
    CandidateTriple,
    infer_entity_type,
)
from .gateway import ChatRequest
from .ontology import Ontology, check_schema
from .validation import nearest_rank

RETRY_LIMIT = 3
DEFAULT_TIER_LOW_PCT = 30.0
DEFAULT_TIER_HIGH_PCT = 75.0
DEFAULT_FEEDBACK_BUDGET = 200

OUTCOME_CORRECTED = "Corrected"
OUTCOME_CONFIRMED = "Confirmed"
OUTCOME_REJECTED = "Rejected"

COT_SYSTEM = "You are an SDG knowledge extraction expert."


@dataclass(frozen=True)
class FeedbackPacket:
    triple: CandidateTriple
    score: float
    threshold: float
    alternatives: list[tuple[str, float]]  # at most 3
    evidence: list[Sentence]
    attempt: int


@dataclass(frozen=True)
class FeedbackOutcome:
    kind: str  # Corrected | Confirmed | Rejected
    triple: CandidateTriple | None = None
    diagnostic: str | None = None


@dataclass
class Channel2Batch:
    direct: list[CandidateTriple]
    to_verify: list[CandidateTriple]  # ordered verification queue
    bottom: list[CandidateTriple]
    uncertainty: dict = field(default_factory=dict)


def build_cot_prompt(p: FeedbackPacket) -> ChatRequest:
    """Re-evaluation prompt: triple, structural score, alternatives, evidence,
    then the four reasoning steps.  Empty evidence renders as "(none found)";
    with no alternatives the whole section is omitted (cold-start rounds)."""
    lines = ["A triple requires re-evaluation."]
    t = p.triple
    lines.append(f"Original Triple: ({t.h}, {t.r}, {t.t})")
    lines.append(f"Structural Score: {p.score:.6f} (threshold: {p.threshold:.6f})")
    if p.alternatives:
        lines.append("Alternative Relations (from KGE):")
        lines.append(
            "  " + "  ".join(f"{i}. {r}" for i, (r, _) in enumerate(p.alternatives[:3], 1))
        )
    lines.append("Retrieved Evidence:")
    if p.evidence:
        for i, s in enumerate(p.evidence, 1):
            lines.append(f'  E{i}: "{s.text}"')
    else:
        lines.append("  (none found)")
    lines.append("Instruction: Reason step by step:")
    lines.append("1. Is the original relation supported by evidence?")
    lines.append("2. Do alternative relations have implicit support?")
    lines.append("3. Are schema constraints satisfied?")
    lines.append('4. Output: corrected triple as JSON, or "reject".')
    return ChatRequest(system=COT_SYSTEM, user="\n".join(lines), tag="Feedback")


def process_feedback_reply(
    reply: str, original: CandidateTriple, o: Ontology
) -> FeedbackOutcome:
    """Classify a Channel-1 reply.

    A corrected relation must stay inside the original's category and pass
    the schema check, otherwise the correction counts as a rejection.  A
    correction identical to the original is a confirmation.  Unparseable
    replies reject with a diagnostic; this function never raises.
    """
    stripped = "\n".join(
        line for line in (reply or "").splitlines() if not line.strip().startswith("```")
    ).strip()
    low = stripped.lower()
    if low == "reject":
        return FeedbackOutcome(kind=OUTCOME_REJECTED)
    if low in ("confirm", "confirmed"):
        return FeedbackOutcome(kind=OUTCOME_CONFIRMED)

    record = _parse_triple_json(stripped)
    if record is None:
        return FeedbackOutcome(
            kind=OUTCOME_REJECTED, diagnostic="unparseable feedback reply"
        )
    h = o.canonical_mention(str(record.get("head") or record.get("h") or ""))
    r = str(record.get("relation") or record.get("r") or "").strip()
    t = o.canonical_mention(str(record.get("tail") or record.get("t") or ""))
    if not (h and r and t):
        return FeedbackOutcome(
            kind=OUTCOME_REJECTED, diagnostic="feedback reply missing triple fields"
        )
    rel = o.relations.get(r)
    if rel is None or rel.category != original.c:
        return FeedbackOutcome(
            kind=OUTCOME_REJECTED, diagnostic=f"relation {r!r} outside category"
        )
    h_type, h_low = infer_entity_type(o, h, rel.domain_types)
    t_type, t_low = infer_entity_type(o, t, rel.range_types)
    if not check_schema(o, h_type, r, t_type):
        return FeedbackOutcome(
            kind=OUTCOME_REJECTED, diagnostic="corrected triple violates schema"
        )
    if (h, r, t) == original.key:
        return FeedbackOutcome(kind=OUTCOME_CONFIRMED)
    conf = record.get("confidence", original.p_llm)
    try:
        conf = min(1.0, max(0.0, float(conf)))
    except (TypeError, ValueError):
        conf = original.p_llm
    corrected = CandidateTriple(
        h=h,
        r=r,
        t=t,
        e=str(record.get("evidence") or original.e),
        c=original.c,
        p_llm=conf,
        h_type=h_type,
        t_type=t_type,
        low_type_confidence=h_low or t_low,
        provenance=list(original.provenance),
        retries=original.retries + 1,
        status=STATUS_PENDING,
    )
    return FeedbackOutcome(kind=OUTCOME_CORRECTED, triple=corrected)


def _parse_triple_json(text: str) -> dict | None:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        lo, hi = text.find("{"), text.rfind("}")
        if lo == -1 or hi <= lo:
            return None
        try:
            doc = json.loads(text[lo : hi + 1])
        except json.JSONDecodeError:
            return None
    if isinstance(doc, list) and doc:
        doc = doc[0]
    return doc if isinstance(doc, dict) else None


def enforce_retry_limit(t: CandidateTriple) -> bool:
    """True while another attempt is allowed; at the limit the triple flips
    to permanently Rejected and must never reach the gateway again."""
    if t.retries < RETRY_LIMIT:
        return True
    t.status = STATUS_REJECTED
    return False


def order_feedback_queue(
    triples: list[CandidateTriple], uncertainty: dict | None = None
) -> list[CandidateTriple]:
    """Priority-flagged first, then most uncertain, then least confident."""
    unc = uncertainty or {}
    return sorted(
        triples,
        key=lambda c: (not c.priority, -unc.get(c.key, 0.0), c.p_llm, c.key),
    )


def select_channel2(
    scored: list[tuple[CandidateTriple, float]],
    low_pct: float = DEFAULT_TIER_LOW_PCT,
    high_pct: float = DEFAULT_TIER_HIGH_PCT,
    uncertainty: dict | None = None,
) -> Channel2Batch:
    """Tier the scored pool for training-set augmentation.

    Same nearest-rank machinery as routing but an independent percentile
    pair; the tiers partition the input exactly.
    """
    if not scored:
        raise EmptyInput("nothing to tier")
    ordered = sorted(s for _, s in scored)
    p_low = nearest_rank(ordered, low_pct)
    p_high = nearest_rank(ordered, high_pct)
    direct, middle, bottom = [], [], []
    for triple, s in scored:
        if s >= p_high:
            direct.append(triple)
        elif s >= p_low:
            middle.append(triple)
        else:
            bottom.append(triple)
    return Channel2Batch(
        direct=direct,
        to_verify=order_feedback_queue(middle, uncertainty),
        bottom=bottom,
        uncertainty=dict(uncertainty or {}),
    )
