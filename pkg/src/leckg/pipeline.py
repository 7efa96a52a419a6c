"""Bidirectional construction loop.

Cold start extracts a seed set and trains the structural model on it; each
iteration then scores the candidate pool (projected embeddings for mentions
the model has no row for), routes by dynamic percentile thresholds, runs
the two refinement channels, warm-starts the model on the augmentation set,
and stops when validated-set growth falls under epsilon or the round budget
runs out.

Two bookkeeping modes share the loop body:
  normal:   accepted triples leave the pool and accumulate append-only;
  analysis: nothing leaves the pool except permanent rejections, the
              validated set is replaced by each round's accepts, and there
              is no early stop, so late rounds can shrink.

Determinism contract: every random draw is seeded through derive_seed from
(run seed, iteration, phase label), never from shared RNG state, and no
artifact written here carries a timestamp.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .corpus import Document, build_sentence_index, load_relation_keywords, retrieve_evidence
from .errors import EmptySeed, InsufficientEntities, InvalidParams, ParseError
from .extraction import (
    STATUS_ACCEPTED,
    STATUS_FEEDBACK,
    STATUS_PENDING,
    STATUS_REJECTED,
    CandidateTriple,
    extract_corpus,
)
from .feedback import (
    OUTCOME_CONFIRMED,
    OUTCOME_CORRECTED,
    OUTCOME_REJECTED,
    FeedbackPacket,
    build_cot_prompt,
    enforce_retry_limit,
    order_feedback_queue,
    process_feedback_reply,
    select_channel2,
)
from .gateway import prompt_hash
from .kge import KgeModel, TrainConfig, load_model, new_model, save_model, train, warm_start
from .ontology import Ontology
from .semantic_init import fit_alignment, project, stochastic_embeddings
from .validation import ROUTE_ACCEPT, ROUTE_FEEDBACK, ROUTE_REJECT, compute_thresholds, diagnose, route


@dataclass(frozen=True)
class RunConfig:
    # extraction
    chunk_size: int = 2000
    chunk_overlap: int = 200
    cold_start_docs: int | None = None  # None trains the seed model on the whole corpus
    # routing percentiles and the acceptance cut ("high" or the looser "low")
    route_low_pct: float = 25.0
    route_high_pct: float = 70.0
    accept_at: str = "high"
    # training-set tier percentiles, independent of routing
    tier_low_pct: float = 30.0
    tier_high_pct: float = 75.0
    # loop control
    t_max: int = 4
    epsilon: float = 0.01
    analysis_rounds: int = 9
    warmup: int = 1
    feedback_budget: int = 200
    evidence_k: int = 2
    mc_runs: int = 5
    drop_rate: float = 0.1
    # structural model
    kge_dim: int = 64
    kge_margin: float = 12.0
    kge_adv_temperature: float = 1.0
    kge_negatives: int = 64
    kge_batch_size: int = 256
    kge_epochs: int = 500
    kge_learning_rate: float = 1e-4
    warm_epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.accept_at not in ("high", "low"):
            raise InvalidParams("accept_at must be 'high' or 'low'")
        if self.t_max < 0 or self.analysis_rounds < 1:
            raise InvalidParams("t_max must be >= 0 and analysis_rounds >= 1")
        if self.epsilon < 0 or self.feedback_budget < 0:
            raise InvalidParams("epsilon and feedback_budget must be >= 0")
        if self.mc_runs < 1 or self.evidence_k < 1:
            raise InvalidParams("mc_runs and evidence_k must be >= 1")

    def train_config(self, seed: int, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            margin=self.kge_margin,
            adv_temperature=self.kge_adv_temperature,
            negatives=self.kge_negatives,
            batch_size=self.kge_batch_size,
            epochs=self.kge_epochs if epochs is None else epochs,
            learning_rate=self.kge_learning_rate,
            seed=seed,
        )

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidParams(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"config {path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ParseError(f"config {path}: expected a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PipelineState:
    seed: int
    t: int = 0
    valid: dict[tuple, dict] = field(default_factory=dict)
    candidates: list[CandidateTriple] = field(default_factory=list)
    seed_keys: list[tuple] = field(default_factory=list)
    rejected_keys: set[tuple] = field(default_factory=set)
    thresholds_history: list[dict | None] = field(default_factory=list)
    growth_history: list[float] = field(default_factory=list)
    valid_counts: list[int] = field(default_factory=list)
    converged: bool = False
    analysis_mode: bool = False


@dataclass
class RunContext:
    """Everything an iteration touches that is not loop state."""

    o: Ontology
    gw: object
    enc: object
    cfg: RunConfig
    corpus: list[Document]
    keywords: dict[str, list[str]] = field(default_factory=dict)
    routing_log: list[dict] = field(default_factory=list)
    feedback_log: list[dict] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)


@dataclass
class RunResult:
    state: PipelineState
    model: KgeModel
    routing_log: list[dict]
    feedback_log: list[dict]
    diagnostics: list[str]


def derive_seed(*parts) -> int:
    """Stable integer seed from mixed int/str parts; no shared RNG state."""
    entropy = []
    for p in parts:
        if isinstance(p, str):
            digest = hashlib.sha256(p.encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:4], "little"))
        else:
            entropy.append(int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def cold_start(ctx: RunContext) -> tuple[KgeModel, list[CandidateTriple]]:
    """Extract, schema-filter, and train the initial structural model.

    The model registers every schema relation up front (category-restricted
    ranking must be able to score all of them); entities come from the seeds.
    """
    cfg = ctx.cfg
    docs = sorted(ctx.corpus, key=lambda d: d.id)
    if cfg.cold_start_docs is not None:
        docs = docs[: cfg.cold_start_docs]
    seeds = extract_corpus(
        docs,
        ctx.o,
        ctx.gw,
        chunk_size=cfg.chunk_size,
        chunk_overlap=cfg.chunk_overlap,
        diagnostics=ctx.diagnostics,
    )
    if not seeds:
        raise EmptySeed("no extraction survived schema filtering; cannot bootstrap")
    entities = sorted({m for c in seeds for m in (c.h, c.t)})
    model = new_model(
        entities,
        list(ctx.o.relations),
        dim=cfg.kge_dim,
        seed=derive_seed(cfg.seed, 0, "init"),
        margin=cfg.kge_margin,
    )
    model = train(
        model,
        [c.key for c in seeds],
        cfg.train_config(derive_seed(cfg.seed, 0, "cold")),
    )
    return model, seeds


class _Projector:
    """Per-iteration bridge from mentions to embedding vectors.

    Known mentions use their learned rows; everything else goes through the
    semantic projection fit on this iteration's model.  The alignment fit is
    lazy so iterations whose pool is fully known never pay for it.
    """

    def __init__(self, m: KgeModel, enc, seed: int):
        self._m = m
        self._enc = enc
        self._seed = seed
        self._amap = None

    @property
    def amap(self):
        if self._amap is None:
            self._amap = fit_alignment(
                self._enc, self._m, holdout=0.0, seed=self._seed
            )
        return self._amap

    def vector(self, mention: str) -> np.ndarray:
        known = self._m.embedding_of(mention)
        if known is not None:
            return known
        return project(self.amap, self._enc.encode(mention))

    def init_fn(self, mention: str) -> np.ndarray | None:
        try:
            return project(self.amap, self._enc.encode(mention))
        except InsufficientEntities:
            return None


def _triple_score(m: KgeModel, proj: _Projector, c: CandidateTriple) -> float:
    return m.score_vectors(proj.vector(c.h), c.r, proj.vector(c.t))


def _score_spread(
    m: KgeModel, proj: _Projector, c: CandidateTriple, cfg: RunConfig, iteration: int
) -> float:
    """Uncertainty: spread of the triple score under stochastic embeddings."""
    h_samples = stochastic_embeddings(
        proj.amap, proj._enc, c.h, runs=cfg.mc_runs, drop_rate=cfg.drop_rate,
        seed=derive_seed(cfg.seed, iteration, "mc", c.h),
    )
    t_samples = stochastic_embeddings(
        proj.amap, proj._enc, c.t, runs=cfg.mc_runs, drop_rate=cfg.drop_rate,
        seed=derive_seed(cfg.seed, iteration, "mc", c.t),
    )
    scores = [
        m.score_vectors(h_samples[i], c.r, t_samples[i]) for i in range(cfg.mc_runs)
    ]
    return float(np.std(scores))


def _insert_candidate(pool: list[CandidateTriple], seen: set, state: PipelineState,
                      c: CandidateTriple) -> None:
    # permanently rejected keys never re-enter, whatever produced them
    if c.key in state.rejected_keys or c.key in seen:
        return
    seen.add(c.key)
    pool.append(c)


def run_iteration(state: PipelineState, m: KgeModel, ctx: RunContext) -> KgeModel:
    """One score/route/feedback/augment/warm-start round; mutates state."""
    cfg, o, gw = ctx.cfg, ctx.o, ctx.gw
    iteration = state.t + 1
    pool = [c for c in state.candidates if c.status != STATUS_REJECTED]
    for c in pool:
        c.status = STATUS_PENDING

    prev_valid = len(state.valid)
    if not pool:
        # nothing to score; the round is a no-op and the loop can stop
        state.t = iteration
        state.thresholds_history.append(None)
        state.growth_history.append(0.0)
        state.valid_counts.append(len(state.valid))
        state.converged = True
        return m

    proj = _Projector(m, ctx.enc, derive_seed(cfg.seed, iteration, "align"))
    scores = {c.key: _triple_score(m, proj, c) for c in pool}
    spread = {c.key: _score_spread(m, proj, c, cfg, iteration) for c in pool}
    th = compute_thresholds(
        sorted(scores.values()), iteration, cfg.route_low_pct, cfg.route_high_pct
    )
    state.thresholds_history.append(
        {"iteration": iteration, "theta_low": th.theta_low, "theta_high": th.theta_high}
    )

    accepts: list[CandidateTriple] = []
    feedbacks: list[CandidateTriple] = []
    routes: dict[tuple, str] = {}
    for c in pool:
        decision = route(c.key, scores[c.key], th)
        verdict = decision.route
        if verdict == ROUTE_FEEDBACK and cfg.accept_at == "low":
            verdict = ROUTE_ACCEPT  # looser single-threshold ablation
        routes[c.key] = verdict
        if verdict == ROUTE_ACCEPT:
            c.status = STATUS_ACCEPTED
            accepts.append(c)
        elif verdict == ROUTE_REJECT:
            c.status = STATUS_REJECTED
            state.rejected_keys.add(c.key)
        else:
            c.status = STATUS_FEEDBACK
            feedbacks.append(c)

    new_valid: dict[tuple, dict] = {}
    for c in accepts:
        new_valid[c.key] = {
            "h": c.h,
            "r": c.r,
            "t": c.t,
            "category": c.c,
            "score": scores[c.key],
            "iteration": iteration,
            "evidence": c.e,
            "provenance": [list(p) for p in c.provenance],
        }

    # Channel 1: evidence-guided re-extraction on the mid band
    corrected: list[CandidateTriple] = []
    confirmed_keys: set[tuple] = set()
    alternatives_shown: dict[tuple, list] = {}
    if feedbacks:
        sent_idx = build_sentence_index(
            ctx.corpus, o,
            extra_mentions=sorted({x for c in pool for x in (c.h, c.t)}),
        )
        queue = order_feedback_queue(feedbacks, spread)
        calls = 0
        for c in queue:
            if calls >= cfg.feedback_budget:
                c.status = STATUS_PENDING  # stays in the pool, no attempt consumed
                continue
            if not enforce_retry_limit(c):  # flips status to Rejected
                state.rejected_keys.add(c.key)
                ctx.feedback_log.append(
                    {"iteration": iteration, "h": c.h, "r": c.r, "t": c.t,
                     "attempt": c.retries, "outcome": OUTCOME_REJECTED,
                     "reason": "retry limit", "prompt_hash": None}
                )
                continue
            alts = diagnose(
                c.h, c.t, c.r, c.c, m, o, iteration, warmup=cfg.warmup,
                h_vec=proj.vector(c.h), t_vec=proj.vector(c.t),
            )
            alternatives_shown[c.key] = alts or []
            evidence = retrieve_evidence(
                sent_idx, c.h, c.t, ctx.keywords.get(c.c, []), k=cfg.evidence_k
            )
            packet = FeedbackPacket(
                triple=c,
                score=scores[c.key],
                threshold=th.theta_high,
                alternatives=alts or [],
                evidence=evidence,
                attempt=c.retries + 1,
            )
            req = build_cot_prompt(packet)
            reply = gw.complete(
                req, meta={"triple_key": list(c.key), "attempt": c.retries + 1}
            )
            calls += 1
            outcome = process_feedback_reply(reply, c, o)
            ctx.feedback_log.append(
                {"iteration": iteration, "h": c.h, "r": c.r, "t": c.t,
                 "attempt": c.retries + 1, "outcome": outcome.kind,
                 "reason": outcome.diagnostic, "prompt_hash": prompt_hash(req)}
            )
            if outcome.kind == OUTCOME_REJECTED:
                c.status = STATUS_REJECTED
                state.rejected_keys.add(c.key)
            elif outcome.kind == OUTCOME_CONFIRMED:
                c.retries += 1
                c.status = STATUS_PENDING
                confirmed_keys.add(c.key)
            else:
                c.status = STATUS_REJECTED  # replaced by its correction
                corrected.append(outcome.triple)

    for c in pool:
        ctx.routing_log.append(
            {"iteration": iteration, "h": c.h, "r": c.r, "t": c.t,
             "score": scores[c.key], "route": routes[c.key],
             "diagnostics": alternatives_shown.get(c.key)}
        )

    # Channel 2: tier the scored pool into the augmentation set
    batch = select_channel2(
        [(c, scores[c.key]) for c in pool],
        low_pct=cfg.tier_low_pct,
        high_pct=cfg.tier_high_pct,
        uncertainty=spread,
    )
    approved = {c.key for c in accepts} | confirmed_keys
    augmentation: list[tuple] = []
    aug_seen: set[tuple] = set()
    for c in batch.direct:
        if c.status != STATUS_REJECTED and c.key not in aug_seen:
            aug_seen.add(c.key)
            augmentation.append(c.key)
    for c in batch.to_verify:
        if c.key in approved and c.key not in aug_seen:
            aug_seen.add(c.key)
            augmentation.append(c.key)

    if augmentation:
        m = warm_start(
            m,
            augmentation,
            epochs=cfg.warm_epochs,
            cfg=cfg.train_config(derive_seed(cfg.seed, iteration, "warm")),
            init_fn=proj.init_fn,
        )

    # rebuild the pool deterministically: survivors in pool order, then
    # corrections in arrival order
    next_pool: list[CandidateTriple] = []
    seen: set[tuple] = set()
    for c in pool:
        keep = c.status not in (STATUS_REJECTED,) and (
            state.analysis_mode or c.status != STATUS_ACCEPTED
        )
        if keep:
            c.status = STATUS_PENDING
            _insert_candidate(next_pool, seen, state, c)
    for c in corrected:
        _insert_candidate(next_pool, seen, state, c)
    state.candidates = next_pool

    if state.analysis_mode:
        state.valid = new_valid
    else:
        state.valid.update(new_valid)
    growth = (len(state.valid) - prev_valid) / max(1, prev_valid)
    state.growth_history.append(growth)
    state.valid_counts.append(len(state.valid))
    state.converged = growth < cfg.epsilon
    state.t = iteration
    return m


# ------------------------------------------------------------- persistence


def _candidate_to_dict(c: CandidateTriple) -> dict:
    return {
        "h": c.h, "r": c.r, "t": c.t, "e": c.e, "c": c.c, "p_llm": c.p_llm,
        "h_type": c.h_type, "t_type": c.t_type,
        "low_type_confidence": c.low_type_confidence,
        "provenance": [list(p) for p in c.provenance],
        "retries": c.retries, "status": c.status,
    }


def _candidate_from_dict(d: dict) -> CandidateTriple:
    return CandidateTriple(
        h=d["h"], r=d["r"], t=d["t"], e=d["e"], c=d["c"], p_llm=d["p_llm"],
        h_type=d.get("h_type"), t_type=d.get("t_type"),
        low_type_confidence=d.get("low_type_confidence", False),
        provenance=[tuple(p) for p in d.get("provenance", [])],
        retries=d.get("retries", 0), status=d.get("status", STATUS_PENDING),
    )


def save_state(state: PipelineState, path: str | Path, gw=None) -> None:
    """State snapshot as canonical JSON; mock-gateway cursors ride along so a
    resumed run replays scripted replies from the same position."""
    doc = {
        "format": "pipeline-state",
        "version": 1,
        "seed": state.seed,
        "t": state.t,
        "converged": state.converged,
        "analysis_mode": state.analysis_mode,
        "valid": [state.valid[k] for k in sorted(state.valid)],
        "candidates": [_candidate_to_dict(c) for c in state.candidates],
        "seed_keys": [list(k) for k in state.seed_keys],
        "rejected_keys": [list(k) for k in sorted(state.rejected_keys)],
        "thresholds_history": state.thresholds_history,
        "growth_history": state.growth_history,
        "valid_counts": state.valid_counts,
        "gateway": gw.export_state() if hasattr(gw, "export_state") else None,
    }
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(
        json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=1) + "\n",
        encoding="utf-8",
    )
    tmp.replace(path)


def load_state(path: str | Path, gw=None) -> PipelineState:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"state {path}: invalid JSON: {exc}") from exc
    if doc.get("format") != "pipeline-state":
        raise ParseError(f"state {path}: not a pipeline state file")
    state = PipelineState(
        seed=doc["seed"],
        t=doc["t"],
        valid={(r["h"], r["r"], r["t"]): r for r in doc["valid"]},
        candidates=[_candidate_from_dict(d) for d in doc["candidates"]],
        seed_keys=[tuple(k) for k in doc["seed_keys"]],
        rejected_keys={tuple(k) for k in doc["rejected_keys"]},
        thresholds_history=doc["thresholds_history"],
        growth_history=doc["growth_history"],
        valid_counts=doc.get("valid_counts", []),
        converged=doc["converged"],
        analysis_mode=doc.get("analysis_mode", False),
    )
    if gw is not None and doc.get("gateway") and hasattr(gw, "restore_state"):
        gw.restore_state(doc["gateway"])
    return state


def _state_path(ckpt_dir: Path, t: int) -> Path:
    return ckpt_dir / f"state_{t:03d}.json"


def _model_path(ckpt_dir: Path, t: int) -> Path:
    return ckpt_dir / f"model_{t:03d}.ckpt"


def save_checkpoint_pair(state: PipelineState, m: KgeModel, ckpt_dir: str | Path,
                         gw=None) -> None:
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_model(m, _model_path(d, state.t))
    save_state(state, _state_path(d, state.t), gw)


def latest_checkpoint(ckpt_dir: str | Path) -> int | None:
    """Highest iteration with both state and model files present."""
    d = Path(ckpt_dir)
    if not d.is_dir():
        return None
    best = None
    for p in d.glob("state_*.json"):
        m = re.fullmatch(r"state_(\d{3})\.json", p.name)
        if m and _model_path(d, int(m.group(1))).exists():
            t = int(m.group(1))
            best = t if best is None else max(best, t)
    return best


def load_checkpoint_pair(ckpt_dir: str | Path, t: int, gw=None
                         ) -> tuple[PipelineState, KgeModel]:
    d = Path(ckpt_dir)
    return load_state(_state_path(d, t), gw), load_model(_model_path(d, t))


# ------------------------------------------------------------- orchestration


def run(
    corpus: list[Document],
    o: Ontology,
    gw,
    enc,
    cfg: RunConfig,
    checkpoint_dir: str | Path | None = None,
    resume: bool = False,
    analysis_mode: bool = False,
    keywords: dict[str, list[str]] | None = None,
) -> RunResult:
    """Full loop per the construction algorithm; see module docstring.

    With ``resume`` and a checkpoint directory holding earlier rounds, the
    run continues from the latest complete pair instead of cold-starting.
    """
    ctx = RunContext(
        o=o, gw=gw, enc=enc, cfg=cfg, corpus=corpus,
        keywords=load_relation_keywords() if keywords is None else keywords,
    )
    resumed = None
    if resume and checkpoint_dir is not None:
        t = latest_checkpoint(checkpoint_dir)
        if t is not None:
            resumed = load_checkpoint_pair(checkpoint_dir, t, gw)
    if resumed is not None:
        state, model = resumed
    else:
        model, seeds = cold_start(ctx)
        state = PipelineState(
            seed=cfg.seed,
            candidates=seeds,
            seed_keys=[c.key for c in seeds],
            analysis_mode=analysis_mode,
        )
        if checkpoint_dir is not None:
            save_checkpoint_pair(state, model, checkpoint_dir, gw)

    limit = cfg.analysis_rounds if state.analysis_mode else cfg.t_max
    while state.t < limit and (state.analysis_mode or not state.converged):
        model = run_iteration(state, model, ctx)
        if checkpoint_dir is not None:
            save_checkpoint_pair(state, model, checkpoint_dir, gw)
    return RunResult(
        state=state,
        model=model,
        routing_log=ctx.routing_log,
        feedback_log=ctx.feedback_log,
        diagnostics=ctx.diagnostics,
    )


# ------------------------------------------------------------- exports


def graph_rows(state: PipelineState) -> list[dict]:
    return [state.valid[k] for k in sorted(state.valid)]


def write_jsonl(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


_TSV_CLEAN = re.compile(r"[\t\n\r]")


def export_graph(state: PipelineState, jsonl_path: str | Path,
                 tsv_path: str | Path | None = None) -> None:
    rows = graph_rows(state)
    write_jsonl(rows, jsonl_path)
    if tsv_path is None:
        return
    with open(tsv_path, "w", encoding="utf-8") as fh:
        fh.write("h\tr\tt\tscore\tevidence\tprovenance\n")
        for row in rows:
            prov = ";".join(f"{d}:{i}" for d, i in row["provenance"])
            cells = [
                row["h"], row["r"], row["t"], f"{row['score']:.6f}",
                _TSV_CLEAN.sub(" ", row["evidence"]), prov,
            ]
            fh.write("\t".join(cells) + "\n")


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def build_manifest(
    cfg: RunConfig,
    inputs: dict[str, str | Path],
    outputs: dict[str, str | Path],
    package_version: str,
) -> dict:
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "package_version": package_version,
        "inputs": {
            name: {"path": str(p), "sha256": sha256_file(p)}
            for name, p in sorted(inputs.items())
        },
        "outputs": {name: str(p) for name, p in sorted(outputs.items())},
    }
