"""Graph-vs-gold scoring: one-to-one triple matching (exact or
embedding-similarity), micro and macro F1, relation-frequency buckets, and
per-round convergence tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParams
from .ontology import Ontology

MODE_EXACT = "Exact"
MODE_SEMANTIC = "Semantic"
DEFAULT_SIM_THRESHOLD = 0.85

BUCKET_HEAD = "Head"
BUCKET_MEDIUM = "Medium"
BUCKET_TAIL = "Tail"


@dataclass(frozen=True)
class MatchConfig:
    mode: str = MODE_EXACT
    sim_threshold: float = DEFAULT_SIM_THRESHOLD
    similarity: object | None = None  # mention-pair scorer, Semantic mode only

    def __post_init__(self):
        if self.mode not in (MODE_EXACT, MODE_SEMANTIC):
            raise InvalidParams(f"unknown match mode {self.mode!r}")
        if not 0.0 <= self.sim_threshold <= 1.0:
            raise InvalidParams("sim_threshold must lie in [0, 1]")
        if self.mode == MODE_SEMANTIC and self.similarity is None:
            raise InvalidParams("Semantic mode needs a similarity scorer")


class TableSimilarity:
    """Mention-pair similarity from a fixed symmetric table.

    Identical strings score 1.0 without a lookup; absent pairs score 0.0.
    """

    def __init__(self, table: dict[tuple[str, str], float] | None = None):
        self._table = {}
        for (a, b), v in (table or {}).items():
            self._table[(a, b)] = float(v)
            self._table[(b, a)] = float(v)

    def similarity(self, a: str, b: str) -> float:
        if a == b:
            return 1.0
        return self._table.get((a, b), 0.0)


class EncoderSimilarity:
    """Cosine similarity of encoder vectors, cached per mention."""

    def __init__(self, encoder):
        self._encoder = encoder
        self._cache: dict[str, np.ndarray] = {}

    def _vec(self, mention: str) -> np.ndarray:
        v = self._cache.get(mention)
        if v is None:
            v = np.asarray(self._encoder.encode(mention), dtype=np.float64)
            self._cache[mention] = v
        return v

    def similarity(self, a: str, b: str) -> float:
        if a == b:
            return 1.0
        va, vb = self._vec(a), self._vec(b)
        denom = float(np.linalg.norm(va) * np.linalg.norm(vb))
        if denom == 0.0:
            return 0.0
        return float(np.dot(va, vb) / denom)


def _pair_similarity(pred: tuple, gold: tuple, cfg: MatchConfig) -> float:
    """0.0 unless the relations agree; entity agreement is the min of the
    head and tail similarities so both must clear the threshold together."""
    if pred[1] != gold[1]:
        return 0.0
    if pred == gold:
        return 1.0
    if cfg.mode == MODE_EXACT:
        return 0.0
    h_sim = cfg.similarity.similarity(pred[0], gold[0])
    t_sim = cfg.similarity.similarity(pred[2], gold[2])
    return min(h_sim, t_sim)


def match_triples(
    pred: list[tuple], gold: list[tuple], cfg: MatchConfig | None = None
) -> list[tuple[int, int, float]]:
    """One-to-one alignment of predictions to gold triples.

    Greedy over candidate pairs in descending similarity, ties broken by
    (pred position, gold position) so the alignment is deterministic.  Each
    side is consumed at most once.  Returns (pred_idx, gold_idx, sim) rows.
    """
    cfg = cfg or MatchConfig()
    cut = cfg.sim_threshold if cfg.mode == MODE_SEMANTIC else 1.0
    pairs = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gold):
            s = _pair_similarity(p, g, cfg)
            if s >= cut:
                pairs.append((-s, i, j))
    pairs.sort()
    used_pred, used_gold = set(), set()
    matches = []
    for neg_s, i, j in pairs:
        if i in used_pred or j in used_gold:
            continue
        used_pred.add(i)
        used_gold.add(j)
        matches.append((i, j, -neg_s))
    return matches


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class EvalReport:
    precision: float
    recall: float
    micro_f1: float
    macro_f1: float
    per_relation: dict[str, tuple[int, int, int, float]]  # (tp, fp, fn, f1)
    buckets: dict[str, float] = field(default_factory=dict)
    n_pred: int = 0
    n_gold: int = 0

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "micro_f1": self.micro_f1,
            "macro_f1": self.macro_f1,
            "per_relation": {
                r: {"tp": tp, "fp": fp, "fn": fn, "f1": f1}
                for r, (tp, fp, fn, f1) in sorted(self.per_relation.items())
            },
            "buckets": dict(sorted(self.buckets.items())),
            "n_pred": self.n_pred,
            "n_gold": self.n_gold,
        }


def evaluate(
    pred: list[tuple],
    gold: list[tuple],
    cfg: MatchConfig | None = None,
    macro_over: Ontology | None = None,
) -> EvalReport:
    """Confusion counts from the one-to-one alignment.

    Macro-F1 averages over relations present in gold; passing an ontology
    widens the average to every schema relation, with relations absent from
    both sides contributing zero.
    """
    cfg = cfg or MatchConfig()
    matches = match_triples(pred, gold, cfg)
    matched_pred = {i for i, _, _ in matches}
    matched_gold = {j for _, j, _ in matches}

    rel_counts: dict[str, list[int]] = {}  # relation -> [tp, fp, fn]
    for i, p in enumerate(pred):
        row = rel_counts.setdefault(p[1], [0, 0, 0])
        if i in matched_pred:
            row[0] += 1
        else:
            row[1] += 1
    for j, g in enumerate(gold):
        if j not in matched_gold:
            rel_counts.setdefault(g[1], [0, 0, 0])[2] += 1

    tp = sum(r[0] for r in rel_counts.values())
    fp = sum(r[1] for r in rel_counts.values())
    fn = sum(r[2] for r in rel_counts.values())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0

    per_relation = {}
    for rel, (rtp, rfp, rfn) in rel_counts.items():
        rp = rtp / (rtp + rfp) if rtp + rfp else 0.0
        rr = rtp / (rtp + rfn) if rtp + rfn else 0.0
        per_relation[rel] = (rtp, rfp, rfn, _f1(rp, rr))

    if macro_over is not None:
        macro_set = list(macro_over.relations)
    else:
        macro_set = sorted({g[1] for g in gold})
    if macro_set:
        macro_f1 = sum(per_relation.get(r, (0, 0, 0, 0.0))[3] for r in macro_set) / len(
            macro_set
        )
    else:
        macro_f1 = 0.0

    gold_rel_counts: dict[str, int] = {}
    for g in gold:
        gold_rel_counts[g[1]] = gold_rel_counts.get(g[1], 0) + 1
    bucket_of = {r: bucket_for_count(c) for r, c in gold_rel_counts.items()}
    buckets = {}
    for bucket in (BUCKET_HEAD, BUCKET_MEDIUM, BUCKET_TAIL):
        rels = [r for r, b in bucket_of.items() if b == bucket]
        if not rels:
            continue
        btp = sum(rel_counts.get(r, [0, 0, 0])[0] for r in rels)
        bfp = sum(rel_counts.get(r, [0, 0, 0])[1] for r in rels)
        bfn = sum(rel_counts.get(r, [0, 0, 0])[2] for r in rels)
        bp = btp / (btp + bfp) if btp + bfp else 0.0
        br = btp / (btp + bfn) if btp + bfn else 0.0
        buckets[bucket] = _f1(bp, br)

    return EvalReport(
        precision=precision,
        recall=recall,
        micro_f1=_f1(precision, recall),
        macro_f1=macro_f1,
        per_relation=per_relation,
        buckets=buckets,
        n_pred=len(pred),
        n_gold=len(gold),
    )


def bucket_for_count(n: int) -> str:
    if n > 100:
        return BUCKET_HEAD
    if n >= 20:
        return BUCKET_MEDIUM
    return BUCKET_TAIL


def bucket_relations(gold: list[tuple]) -> dict[str, str]:
    """Relation frequency tier from gold occurrence counts."""
    counts: dict[str, int] = {}
    for g in gold:
        counts[g[1]] = counts.get(g[1], 0) + 1
    return {r: bucket_for_count(c) for r, c in counts.items()}


@dataclass(frozen=True)
class RoundRow:
    round: int
    n_valid: int
    precision_pct: float


def convergence_report(
    history: list[dict], gold: list[tuple] | None = None, cfg: MatchConfig | None = None
) -> list[RoundRow]:
    """Per-round table of validated-set size and precision against gold.

    Each history entry carries the round number and that round's validated
    triples; precision comes from the same one-to-one matcher.  Entries that
    already carry a precision (re-rendered tables) pass through untouched.
    """
    rows = []
    for entry in history:
        rnd = int(entry["round"])
        if "precision_pct" in entry:
            rows.append(
                RoundRow(
                    round=rnd,
                    n_valid=int(entry["n_valid"]),
                    precision_pct=float(entry["precision_pct"]),
                )
            )
            continue
        triples = list(entry["triples"])
        if gold:
            matches = match_triples(triples, gold, cfg)
            precision = 100.0 * len(matches) / len(triples) if triples else 0.0
        else:
            precision = float("nan")
        rows.append(RoundRow(round=rnd, n_valid=len(triples), precision_pct=precision))
    return rows


def render_convergence_table(rows: list[RoundRow]) -> str:
    """Fixed-width text table; NaN precision renders as a dash."""
    out = [f"{'round':>5}  {'validated':>9}  {'precision%':>10}"]
    for r in rows:
        prec = "-" if math.isnan(r.precision_pct) else f"{r.precision_pct:.1f}"
        out.append(f"{r.round:>5}  {r.n_valid:>9}  {prec:>10}")
    return "\n".join(out)


def render_report(report: EvalReport) -> str:
    lines = [
        f"precision {report.precision:.4f}  recall {report.recall:.4f}",
        f"micro-F1  {report.micro_f1:.4f}  macro-F1 {report.macro_f1:.4f}",
        f"({report.n_pred} predicted, {report.n_gold} gold)",
    ]
    if report.buckets:
        tiers = "  ".join(f"{b} {f1:.4f}" for b, f1 in sorted(report.buckets.items()))
        lines.append(f"bucket F1: {tiers}")
    width = max((len(r) for r in report.per_relation), default=0)
    for rel in sorted(report.per_relation):
        tp, fp, fn, f1 = report.per_relation[rel]
        lines.append(f"  {rel:<{width}}  tp={tp:<4} fp={fp:<4} fn={fn:<4} f1={f1:.4f}")
    return "\n".join(lines)
