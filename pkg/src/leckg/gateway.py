"""Single boundary to the language model.

Prompt assembly, HTTP transport with bounded retry, lenient reply parsing,
and a deterministic scripted mock.  Everything downstream talks to a gateway
object exposing ``complete(req, meta=None) -> str``; nothing else in the
package performs network IO.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from .errors import (
    AuthError,
    InvalidParams,
    PromptConfigError,
    RateLimited,
    TransportError,
)
from .ontology import Ontology, relations_in_category

TAGS = ("Extract", "Remap", "Feedback")

# unscripted prompts in the mock fall back to the most conservative reply
MOCK_TAG_DEFAULTS = {"Extract": "[]", "Remap": "no suitable match", "Feedback": "reject"}


@dataclass(frozen=True)
class ChatRequest:
    system: str
    user: str
    tag: str
    temperature: float = 0.0
    max_tokens: int = 2048

    def __post_init__(self):
        if self.tag not in TAGS:
            raise InvalidParams(f"tag must be one of {TAGS}, got {self.tag!r}")
        if self.temperature < 0:
            raise InvalidParams("temperature must be >= 0")


@dataclass(frozen=True)
class RawTuple:
    h: str
    r: str
    t: str
    e: str
    c: str
    p_llm: float


@dataclass(frozen=True)
class CallRecord:
    tag: str
    prompt_hash: str
    meta: dict | None


def prompt_hash(req: ChatRequest) -> str:
    digest = hashlib.sha256()
    digest.update(req.system.encode("utf-8"))
    digest.update(b"\0")
    digest.update(req.user.encode("utf-8"))
    return digest.hexdigest()


EXTRACTION_SYSTEM = (
    "You are an information extraction assistant for sustainable development "
    "knowledge graphs. You read Chinese and English source text and emit "
    "relation tuples that are grounded in the text."
)

# surface phrasings that must be normalised onto schema relation ids
MAPPING_GUIDELINES = [
    ('"sourced from" / "来源于"', "dataSourceOf"),
    ('"located at" / "位于"', "locatedIn"),
]

OUTPUT_CONTRACT = (
    "Output a JSON array. Each element is an object with exactly these keys:\n"
    '  "head": head entity mention (verbatim from the text)\n'
    '  "relation": one relation id from the schema above\n'
    '  "tail": tail entity mention (verbatim from the text)\n'
    '  "evidence": the sentence span supporting the tuple, copied verbatim\n'
    '  "category": the coarse category you chose in step 1\n'
    '  "confidence": your self-assessed probability in [0, 1]\n'
    "Output [] if the text contains no extractable relation."
)


def load_default_demos() -> list[dict]:
    from importlib import resources

    src = resources.files("leckg.data").joinpath("fewshot_demos.json")
    return json.loads(src.read_text(encoding="utf-8"))


def build_extraction_prompt(
    chunk_text: str, o: Ontology, shots: list[dict]
) -> ChatRequest:
    """Two-stage instruction: pick a category first, then a relation inside it.

    The prompt carries the complete schema so the model never has to guess
    relation ids; demos are rendered one per line like the worked examples.
    """
    if not 3 <= len(shots) <= 5:
        raise PromptConfigError(f"need 3-5 demos, got {len(shots)}")

    lines = ["## Relation schema (8 categories)"]
    for cat_id, cat in o.categories.items():
        rel_ids = [r.id for r in relations_in_category(o, cat_id)]
        lines.append(f"- {cat.label}: {', '.join(rel_ids)}")

    lines.append("\n## Instruction")
    lines.append(
        "For each relation you find: first determine which of the 8 categories "
        "it belongs to, then select the single best fine-grained relation id "
        "within that category."
    )
    lines.append("\n## Normalisation guidelines")
    for surface, rel in MAPPING_GUIDELINES:
        lines.append(f"- map {surface} to {rel}")

    lines.append("\n## Examples")
    for demo in shots:
        tr = demo["triple"]
        lines.append(
            f"{demo['sentence']} | {demo['category']} | "
            f"({tr['head']}, {tr['relation']}, {tr['tail']})"
        )

    lines.append("\n## Output format")
    lines.append(OUTPUT_CONTRACT)
    lines.append("\n## Text")
    lines.append(chunk_text)
    return ChatRequest(system=EXTRACTION_SYSTEM, user="\n".join(lines), tag="Extract")


def build_remap_prompt(raw: RawTuple, o: Ontology) -> ChatRequest:
    """Offer exactly the claimed category's relations as remap targets."""
    rel_ids = [r.id for r in relations_in_category(o, raw.c)]
    user = (
        f"An extracted tuple uses the relation {raw.r!r}, which is not part of "
        f"the schema. Its claimed category is {raw.c!r}.\n"
        f"Tuple: ({raw.h}, {raw.r}, {raw.t})\n"
        f"Evidence: {raw.e}\n\n"
        f"Candidate relations in this category: {', '.join(rel_ids)}\n\n"
        "If one of the candidates expresses the same meaning, answer with that "
        "relation id alone. If none fits, answer exactly: no suitable match"
    )
    return ChatRequest(system=EXTRACTION_SYSTEM, user=user, tag="Remap")


class CallLog:
    """Thread-safe append-only record of every gateway call."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[CallRecord] = []

    def append(self, rec: CallRecord) -> None:
        with self._lock:
            self._records.append(rec)

    def records(self) -> list[CallRecord]:
        with self._lock:
            return list(self._records)

    def count(self, tag: str | None = None, meta_key: tuple | None = None) -> int:
        with self._lock:
            return sum(
                1
                for r in self._records
                if (tag is None or r.tag == tag)
                and (
                    meta_key is None
                    or (r.meta is not None and r.meta.get("triple_key") == meta_key)
                )
            )


class MockGateway:
    """Scripted gateway: reply chosen by prompt hash, bit-deterministic.

    The scenario maps sha256(system + NUL + user) hex digests to replies.  A
    reply may be a single string or a list of strings consumed in call order
    (the last entry repeats once exhausted), which lets a test script a triple
    that answers differently on successive feedback rounds.  Unscripted
    prompts get the conservative per-tag default.
    """

    def __init__(self, scenario: dict[str, object] | None = None):
        self.scenario = dict(scenario or {})
        self.log = CallLog()
        self._lock = threading.Lock()
        self._cursor: dict[str, int] = {}

    @classmethod
    def from_file(cls, path: str | Path) -> "MockGateway":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, req: ChatRequest, meta: dict | None = None) -> str:
        key = prompt_hash(req)
        self.log.append(CallRecord(tag=req.tag, prompt_hash=key, meta=meta))
        entry = self.scenario.get(key)
        if entry is None:
            return MOCK_TAG_DEFAULTS[req.tag]
        if isinstance(entry, list):
            with self._lock:
                i = self._cursor.get(key, 0)
                self._cursor[key] = i + 1
            return str(entry[min(i, len(entry) - 1)])
        return str(entry)

    def export_state(self) -> dict:
        """List-reply cursors, so a resumed run replays from the same point."""
        with self._lock:
            return {"cursor": dict(self._cursor)}

    def restore_state(self, state: dict) -> None:
        with self._lock:
            self._cursor = dict(state.get("cursor", {}))


class HttpGateway:
    """Chat-completion transport over httpx with bounded retry.

    Transient failures (connection errors, 429, 5xx) are retried up to
    ``max_attempts`` with exponential backoff; 401/403 raise immediately.
    ``sleep_fn`` is injectable so tests never wait.
    """

    def __init__(
        self,
        base_url: str,
        model: str = "default",
        api_key: str | None = None,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        sleep_fn=time.sleep,
    ):
        if max_attempts < 1:
            raise InvalidParams("max_attempts must be >= 1")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.sleep_fn = sleep_fn
        self.log = CallLog()
        self._client = httpx.Client(timeout=timeout)
        self._sem = threading.Semaphore(max_in_flight)

    def close(self) -> None:
        self._client.close()

    def complete(self, req: ChatRequest, meta: dict | None = None) -> str:
        self.log.append(CallRecord(tag=req.tag, prompt_hash=prompt_hash(req), meta=meta))
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
        }
        last_error: Exception | None = None
        last_status: int | None = None
        for attempt in range(self.max_attempts):
            if attempt > 0:
                self.sleep_fn(self.backoff_base * 2 ** (attempt - 1))
            try:
                with self._sem:
                    resp = self._client.post(
                        f"{self.base_url}/chat/completions", json=body, headers=headers
                    )
            except httpx.HTTPError as exc:
                last_error, last_status = exc, None
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"endpoint returned {resp.status_code}")
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error, last_status = None, resp.status_code
                continue
            if resp.status_code != 200:
                raise TransportError(f"unexpected status {resp.status_code}")
            return self._extract_text(resp)
        if last_status == 429:
            raise RateLimited(f"rate limited after {self.max_attempts} attempts")
        detail = last_error if last_error is not None else f"status {last_status}"
        raise TransportError(f"gave up after {self.max_attempts} attempts: {detail}")

    @staticmethod
    def _extract_text(resp: httpx.Response) -> str:
        try:
            doc = resp.json()
            return doc["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc


_FENCE_RE = re.compile(r"^```[a-zA-Z0-9]*\s*$")
_TRAILING_COMMA_RE = re.compile(r",\s*([\]}])")

# canonical keys with their tolerated single-letter forms
_KEY_ALIASES = {
    "head": ("head", "h"),
    "relation": ("relation", "r"),
    "tail": ("tail", "t"),
    "evidence": ("evidence", "e"),
    "category": ("category", "c"),
    "confidence": ("confidence", "p_llm", "p"),
}


def parse_tuples(raw: str) -> tuple[list[RawTuple], list[str]]:
    """Lenient, total parse of a model reply into tuples plus diagnostics.

    Tolerates code fences, prose around the array, trailing commas, and
    single-letter key spellings.  Malformed records are skipped with a
    diagnostic; nothing ever raises.
    """
    diagnostics: list[str] = []
    data = _coerce_json_array(raw, diagnostics)
    if data is None:
        return [], diagnostics

    tuples: list[RawTuple] = []
    for i, rec in enumerate(data):
        if not isinstance(rec, dict):
            diagnostics.append(f"record {i}: not an object")
            continue
        fields = {}
        for canon, names in _KEY_ALIASES.items():
            for name in names:
                if name in rec:
                    fields[canon] = rec[name]
                    break
        missing = [
            k for k in ("head", "relation", "tail", "category") if not fields.get(k)
        ]
        if missing:
            diagnostics.append(f"record {i}: missing {', '.join(missing)}")
            continue
        conf = fields.get("confidence", 1.0)
        if conf is None:
            conf = 1.0
        try:
            conf = float(conf)
        except (TypeError, ValueError):
            diagnostics.append(f"record {i}: non-numeric confidence, defaulting 1.0")
            conf = 1.0
        if not 0.0 <= conf <= 1.0:
            clamped = min(1.0, max(0.0, conf))
            diagnostics.append(f"record {i}: confidence {conf} clamped to {clamped}")
            conf = clamped
        tuples.append(
            RawTuple(
                h=str(fields["head"]).strip(),
                r=str(fields["relation"]).strip(),
                t=str(fields["tail"]).strip(),
                e=str(fields.get("evidence") or ""),
                c=str(fields["category"]).strip(),
                p_llm=conf,
            )
        )
    return tuples, diagnostics


def _coerce_json_array(raw: str, diagnostics: list[str]):
    if not isinstance(raw, str) or not raw.strip():
        diagnostics.append("empty reply")
        return None
    text = "\n".join(
        line for line in raw.splitlines() if not _FENCE_RE.match(line.strip())
    ).strip()
    for candidate in (text, _TRAILING_COMMA_RE.sub(r"\1", text)):
        try:
            data = json.loads(candidate)
            break
        except json.JSONDecodeError:
            data = None
    if data is None:
        # last resort: widest bracketed span
        lo, hi = text.find("["), text.rfind("]")
        if lo != -1 and hi > lo:
            snippet = _TRAILING_COMMA_RE.sub(r"\1", text[lo : hi + 1])
            try:
                data = json.loads(snippet)
            except json.JSONDecodeError:
                pass
    if data is None:
        diagnostics.append("reply is not JSON")
        return None
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        diagnostics.append(f"top-level JSON is {type(data).__name__}, not array")
        return None
    return data
