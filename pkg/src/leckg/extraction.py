"""Hierarchical extraction over chunks, category/schema validation, and
out-of-schema remapping.

The conservative rule throughout: a tuple reaches the candidate pool only if
its relation belongs to its claimed category and the inferred entity types
satisfy the relation's constraints.  Everything else is either remapped
within the claimed category or dropped; precision beats recall here because
downstream training amplifies whatever gets through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .corpus import Chunk, Document, chunk_document
from .errors import TransportError
from .gateway import RawTuple, build_extraction_prompt, build_remap_prompt, load_default_demos, parse_tuples
from .ontology import Ontology, check_schema, relations_in_category

STATUS_PENDING = "Pending"
STATUS_ACCEPTED = "Accepted"
STATUS_FEEDBACK = "Feedback"
STATUS_REJECTED = "Rejected"

PRIORITY_CONFIDENCE = 0.5  # self-assessed confidence below this flags priority review


@dataclass
class CandidateTriple:
    h: str
    r: str
    t: str
    e: str
    c: str
    p_llm: float
    h_type: str | None = None
    t_type: str | None = None
    low_type_confidence: bool = False
    provenance: list = field(default_factory=list)  # (doc_id, chunk_index) pairs
    retries: int = 0
    status: str = STATUS_PENDING

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.h, self.r, self.t)

    @property
    def priority(self) -> bool:
        return self.p_llm < PRIORITY_CONFIDENCE


def infer_entity_type(
    o: Ontology, mention: str, constraints: frozenset
) -> tuple[str | None, bool]:
    """Entity type for a mention: alias tag, else a constraint-guided guess.

    An alias-table hit is trusted as-is.  Otherwise the guess is the most
    general type compatible with the relation's constraint set (shallowest in
    the hierarchy, schema order breaking ties), flagged low-confidence; with
    no constraints there is nothing to guess from.
    """
    tagged = o.entity_type_of(mention)
    if tagged is not None:
        return tagged, False
    if not constraints:
        return None, True
    compatible = [
        t
        for t in o.entity_types
        if any(o.is_subtype(t, c) for c in constraints)
    ]
    if not compatible:
        return None, True
    order = list(o.entity_types)
    best = min(compatible, key=lambda t: (len(o.ancestors(t)), order.index(t)))
    return best, True


def extract_chunk(
    chunk: Chunk,
    o: Ontology,
    gw,
    shots: list[dict] | None = None,
    diagnostics: list[str] | None = None,
) -> list[RawTuple]:
    """One prompt per chunk; evidence must be a verbatim substring.

    Tuples whose evidence span does not occur in the chunk are hallucinations
    by definition and never become candidates.
    """
    if not chunk.text:
        return []
    req = build_extraction_prompt(chunk.text, o, shots or load_default_demos())
    reply = gw.complete(req, meta={"doc_id": chunk.doc_id, "chunk_index": chunk.index})
    tuples, diags = parse_tuples(reply)
    if diagnostics is not None:
        diagnostics.extend(f"{chunk.doc_id}#{chunk.index}: {d}" for d in diags)
    kept = []
    for tup in tuples:
        if tup.e in chunk.text:
            kept.append(tup)
        elif diagnostics is not None:
            diagnostics.append(
                f"{chunk.doc_id}#{chunk.index}: evidence not in chunk for "
                f"({tup.h}, {tup.r}, {tup.t})"
            )
    return kept


def validate_category_membership(
    tuples: list[RawTuple], o: Ontology
) -> tuple[list[CandidateTriple], list[RawTuple]]:
    """Exhaustive, disjoint partition into candidates and out-of-schema.

    Candidate: relation exists, belongs to the claimed category, and the
    inferred entity types pass the relation's constraints.  Everything else
    (unknown relation, wrong category, type violation) goes to the OOS side
    for remapping or dropping.
    """
    candidates, oos = [], []
    for tup in tuples:
        rel = o.relations.get(tup.r)
        if rel is None or tup.c not in o.categories or rel.category != tup.c:
            oos.append(tup)
            continue
        h_type, h_low = infer_entity_type(o, tup.h, rel.domain_types)
        t_type, t_low = infer_entity_type(o, tup.t, rel.range_types)
        if not check_schema(o, h_type, tup.r, t_type):
            oos.append(tup)
            continue
        candidates.append(
            CandidateTriple(
                h=tup.h,
                r=tup.r,
                t=tup.t,
                e=tup.e,
                c=tup.c,
                p_llm=tup.p_llm,
                h_type=h_type,
                t_type=t_type,
                low_type_confidence=h_low or t_low,
            )
        )
    return candidates, oos


def remap_oos(
    oos: RawTuple, o: Ontology, gw, meta: dict | None = None
) -> CandidateTriple | None:
    """Ask for the closest in-category relation; accept only exact members.

    Unknown claimed category drops immediately without a gateway call.  The
    reply is accepted as a bare relation id or {"relation": ...} JSON; any
    other reply, any relation outside the category, and any type violation
    drops the tuple.
    """
    if oos.c not in o.categories:
        return None
    reply = gw.complete(build_remap_prompt(oos, o), meta=meta)
    proposed = _parse_remap_reply(reply)
    if proposed is None:
        return None
    allowed = {r.id for r in relations_in_category(o, oos.c)}
    if proposed not in allowed:
        return None
    rel = o.relations[proposed]
    h_type, h_low = infer_entity_type(o, oos.h, rel.domain_types)
    t_type, t_low = infer_entity_type(o, oos.t, rel.range_types)
    if not check_schema(o, h_type, proposed, t_type):
        return None
    return CandidateTriple(
        h=oos.h,
        r=proposed,
        t=oos.t,
        e=oos.e,
        c=oos.c,
        p_llm=oos.p_llm,
        h_type=h_type,
        t_type=t_type,
        low_type_confidence=h_low or t_low,
    )


def _parse_remap_reply(reply: str) -> str | None:
    import json

    stripped = reply.strip().strip("`")
    if stripped and "\n" not in stripped and " " not in stripped and stripped not in ("{", "["):
        return stripped
    try:
        doc = json.loads(stripped)
    except json.JSONDecodeError:
        return None
    if isinstance(doc, dict) and isinstance(doc.get("relation"), str):
        return doc["relation"].strip()
    return None


def canonicalize_tuple(tup: RawTuple, o: Ontology) -> RawTuple:
    """Normalize head and tail mentions; evidence stays verbatim."""
    return RawTuple(
        h=o.canonical_mention(tup.h),
        r=tup.r,
        t=o.canonical_mention(tup.t),
        e=tup.e,
        c=tup.c,
        p_llm=tup.p_llm,
    )


def extract_corpus(
    corpus: list[Document],
    o: Ontology,
    gw,
    shots: list[dict] | None = None,
    chunk_size: int = 2000,
    chunk_overlap: int = 200,
    diagnostics: list[str] | None = None,
) -> list[CandidateTriple]:
    """Extraction over every chunk of every document.

    Failed chunks are logged and skipped, never fatal.  Duplicates (same
    canonical h, r, t) merge into one candidate keeping the maximum
    self-assessed confidence and the union of provenance records; output
    order follows first occurrence at (doc_id, chunk_index, reply position).
    """
    staged: list[tuple[CandidateTriple, tuple[str, int]]] = []
    for doc in sorted(corpus, key=lambda d: d.id):
        for chunk in chunk_document(doc, size=chunk_size, overlap=chunk_overlap):
            source = (chunk.doc_id, chunk.index)
            try:
                raw = extract_chunk(chunk, o, gw, shots, diagnostics)
            except TransportError as exc:
                if diagnostics is not None:
                    diagnostics.append(f"{chunk.doc_id}#{chunk.index}: {exc}")
                continue
            canonical = [canonicalize_tuple(t, o) for t in raw]
            candidates, oos = validate_category_membership(canonical, o)
            for cand in candidates:
                staged.append((cand, source))
            for tup in oos:
                remapped = remap_oos(
                    tup, o, gw, meta={"doc_id": source[0], "chunk_index": source[1]}
                )
                if remapped is not None:
                    staged.append((remapped, source))
                elif diagnostics is not None:
                    diagnostics.append(
                        f"{source[0]}#{source[1]}: dropped OOS "
                        f"({tup.h}, {tup.r}, {tup.t})"
                    )

    merged: dict[tuple, CandidateTriple] = {}
    for cand, source in staged:
        prior = merged.get(cand.key)
        if prior is None:
            cand.provenance = [source]
            merged[cand.key] = cand
        else:
            prior.p_llm = max(prior.p_llm, cand.p_llm)
            if source not in prior.provenance:
                prior.provenance.append(source)
    return list(merged.values())
