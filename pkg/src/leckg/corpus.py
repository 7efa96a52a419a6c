"""Document ingestion, overlapping chunking, and sentence-level evidence index.

Offsets are Unicode scalar values (Python string indices), never bytes: the
target corpora are Chinese and byte offsets would split code points.  All of
this is deterministic: chunk boundaries and retrieval order are identical
across runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidParams, ParseError
from .ontology import Ontology

# sentence terminators: CJK and ASCII terminal punctuation; newline also splits
SENTENCE_TERMINATORS = "。！？.!?"

DEFAULT_CHUNK_SIZE = 2000
DEFAULT_CHUNK_OVERLAP = 200


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    index: int
    start: int
    end: int
    text: str


@dataclass(frozen=True)
class Sentence:
    doc_id: str
    start: int
    end: int
    text: str


def load_corpus(path: str | Path) -> list[Document]:
    """Read a JSON-lines corpus: one document per line with id, text, metadata."""
    docs = []
    seen = set()
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if "id" not in row or "text" not in row:
            raise ParseError(f"{path}:{lineno}: document needs 'id' and 'text'")
        if row["id"] in seen:
            raise ParseError(f"{path}:{lineno}: duplicate document id {row['id']!r}")
        seen.add(row["id"])
        docs.append(
            Document(id=row["id"], text=row["text"], metadata=row.get("metadata", {}))
        )
    return docs


def chunk_document(
    d: Document,
    size: int = DEFAULT_CHUNK_SIZE,
    overlap: int = DEFAULT_CHUNK_OVERLAP,
) -> list[Chunk]:
    """Split into chunks of ``size`` chars starting every ``size - overlap``.

    Consecutive chunks overlap by exactly ``overlap`` characters; the final
    chunk ends at the document end and may be shorter.  Empty documents yield
    no chunks.
    """
    if not (0 <= overlap < size):
        raise InvalidParams(f"need 0 <= overlap < size, got {overlap} >= {size}")
    n = len(d.text)
    if n == 0:
        return []
    stride = size - overlap
    chunks = []
    start = 0
    while True:
        end = min(start + size, n)
        chunks.append(
            Chunk(doc_id=d.id, index=len(chunks), start=start, end=end,
                  text=d.text[start:end])
        )
        if start + size >= n:
            break
        start += stride
    return chunks


def split_sentences(d: Document) -> list[Sentence]:
    """Rule-based split on terminal punctuation and newlines; offsets exact."""
    out = []
    start = 0
    i = 0
    n = len(d.text)

    def emit(lo: int, hi: int) -> None:
        # trim whitespace by shrinking offsets so they still address the text
        while lo < hi and d.text[lo].isspace():
            lo += 1
        while hi > lo and d.text[hi - 1].isspace():
            hi -= 1
        if lo < hi:
            out.append(Sentence(doc_id=d.id, start=lo, end=hi, text=d.text[lo:hi]))

    while i < n:
        ch = d.text[i]
        if ch in SENTENCE_TERMINATORS:
            emit(start, i + 1)
            start = i + 1
        elif ch == "\n":
            emit(start, i)
            start = i + 1
        i += 1
    emit(start, n)
    return out


class SentenceIndex:
    """Sentences plus exact-match postings from canonical mentions to sentences.

    A sentence enters a mention's posting list iff the mention, or any alias
    resolving to it, occurs verbatim in the sentence text.  Built once,
    immutable afterwards; concurrent reads are safe.
    """

    def __init__(self, sentences: list[Sentence], surfaces: dict[str, list[str]]):
        self.sentences = sentences
        # canonical mention -> surface forms to scan for (includes itself)
        self._surfaces = surfaces
        self.entity_postings: dict[str, list[int]] = {}
        for canon, forms in surfaces.items():
            hits = [
                i
                for i, s in enumerate(sentences)
                if any(f in s.text for f in forms)
            ]
            self.entity_postings[canon] = hits

    def postings(self, mention: str) -> list[int]:
        return self.entity_postings.get(mention, [])

    def surfaces_of(self, mention: str) -> list[str]:
        return self._surfaces.get(mention, [mention])


def build_sentence_index(
    corpus: list[Document],
    ontology: Ontology | None = None,
    extra_mentions: list[str] | None = None,
) -> SentenceIndex:
    """Index every alias-table mention plus any extra entities observed so far."""
    sentences = []
    for d in sorted(corpus, key=lambda d: d.id):
        sentences.extend(split_sentences(d))

    surfaces: dict[str, list[str]] = {}

    def add(canonical: str, surface: str) -> None:
        forms = surfaces.setdefault(canonical, [])
        if surface not in forms:
            forms.append(surface)

    if ontology is not None:
        for surface, entry in ontology.alias_table.items():
            add(entry.canonical, entry.canonical)
            add(entry.canonical, surface)
    for m in extra_mentions or []:
        canon = ontology.canonical_mention(m) if ontology else m
        add(canon, canon)
        add(canon, m)
    return SentenceIndex(sentences, surfaces)


def retrieve_evidence(
    idx: SentenceIndex,
    h: str,
    t: str,
    keywords: list[str],
    k: int,
) -> list[Sentence]:
    """Evidence sentences for an entity pair.

    Sentences containing both mentions come first, in document order.  If
    fewer than ``k``, single-entity sentences follow, ranked ascending by the
    character distance between the entity occurrence and the nearest keyword
    occurrence (sentences without any keyword rank last).  Ties break on
    (doc_id, sentence start).
    """
    if k < 1:
        raise InvalidParams("k must be >= 1")
    h_hits = set(idx.postings(h))
    t_hits = set(idx.postings(t))
    order = lambda i: (idx.sentences[i].doc_id, idx.sentences[i].start)

    both = sorted(h_hits & t_hits, key=order)
    results = [idx.sentences[i] for i in both[:k]]
    if len(results) >= k:
        return results

    single = sorted((h_hits | t_hits) - (h_hits & t_hits), key=order)
    h_forms, t_forms = idx.surfaces_of(h), idx.surfaces_of(t)

    def keyword_distance(i: int) -> float:
        s = idx.sentences[i]
        ent_pos = [
            p
            for form in (h_forms if i in h_hits else t_forms)
            for p in _occurrences(s.text, form)
        ]
        kw_pos = [p for kw in keywords for p in _occurrences(s.text, kw)]
        if not ent_pos or not kw_pos:
            return float("inf")
        return min(abs(e - w) for e in ent_pos for w in kw_pos)

    ranked = sorted(single, key=lambda i: (keyword_distance(i),) + order(i))
    results.extend(idx.sentences[i] for i in ranked[: k - len(results)])
    return results


def load_relation_keywords(path: str | Path | None = None) -> dict[str, list[str]]:
    """Per-category cue words used to rank single-entity evidence sentences."""
    if path is None:
        from importlib import resources

        src = resources.files("leckg.data").joinpath("relation_keywords.json")
        raw = src.read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")
    try:
        table = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"keyword table: invalid JSON: {exc}") from exc
    if not isinstance(table, dict) or not all(
        isinstance(v, list) and all(isinstance(w, str) for w in v)
        for v in table.values()
    ):
        raise ParseError("keyword table must map category -> list of strings")
    return table


def _occurrences(text: str, needle: str) -> list[int]:
    if not needle:
        return []
    out = []
    pos = text.find(needle)
    while pos != -1:
        out.append(pos)
        pos = text.find(needle, pos + 1)
    return out
