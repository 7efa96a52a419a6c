"""Hierarchical schema: entity types, coarse relation categories, fine relations.

The schema is a plain JSON document with top-level keys ``entity_types``,
``categories``, ``relations`` and ``aliases``.  It is loaded once, fully
cross-checked, and immutable afterwards, so concurrent reads need no locking.
An empty domain or range set on a relation means "no constraint" (wildcard).
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import IntegrityError, ParseError, UnknownCategory, UnknownRelation

DEFAULT_SCHEMA_RESOURCE = "sdg_schema.json"


@dataclass(frozen=True)
class EntityType:
    id: str
    label: str
    parent: str | None = None
    examples: tuple[str, ...] = ()


@dataclass(frozen=True)
class RelationCategory:
    id: str
    label: str
    description: str = ""


@dataclass(frozen=True)
class RelationType:
    id: str
    category: str
    domain_types: frozenset[str] = frozenset()
    range_types: frozenset[str] = frozenset()
    long_tail_flag: bool = False


@dataclass(frozen=True)
class AliasEntry:
    canonical: str
    entity_type: str | None = None


@dataclass
class Ontology:
    """Fully cross-checked schema; safe for unrestricted concurrent reads."""

    entity_types: dict[str, EntityType]
    categories: dict[str, RelationCategory]
    relations: dict[str, RelationType]
    alias_table: dict[str, AliasEntry]
    # relation ids per category, in schema-file order
    _by_category: dict[str, list[str]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._by_category:
            by_cat: dict[str, list[str]] = {c: [] for c in self.categories}
            for rid, rel in self.relations.items():
                by_cat[rel.category].append(rid)
            self._by_category = by_cat

    # -- hierarchy -------------------------------------------------------

    def ancestors(self, type_id: str) -> list[str]:
        """Chain of parents from ``type_id`` upward, excluding itself."""
        chain = []
        cur = self.entity_types[type_id].parent
        while cur is not None:
            chain.append(cur)
            cur = self.entity_types[cur].parent
        return chain

    def is_subtype(self, type_id: str, of: str) -> bool:
        """True if ``type_id`` equals ``of`` or descends from it."""
        if type_id == of:
            return True
        return of in self.ancestors(type_id)

    # -- canonicalization ------------------------------------------------

    def canonical_mention(self, surface: str) -> str:
        """Trim, NFC-normalize, then substitute through the alias table."""
        norm = unicodedata.normalize("NFC", surface).strip()
        entry = self.alias_table.get(norm)
        return entry.canonical if entry else norm

    def entity_type_of(self, surface: str) -> str | None:
        """Tagged entity type for a mention, via the alias table; None if unknown."""
        norm = unicodedata.normalize("NFC", surface).strip()
        entry = self.alias_table.get(norm)
        if entry is None:
            return None
        if entry.entity_type is not None:
            return entry.entity_type
        # alias of an alias-table canonical: look up the canonical itself
        canon = self.alias_table.get(entry.canonical)
        return canon.entity_type if canon else None


def relations_in_category(o: Ontology, category_id: str) -> list[RelationType]:
    """Fine-grained relations of one coarse category, in schema-file order."""
    if category_id not in o.categories:
        raise UnknownCategory(category_id)
    return [o.relations[rid] for rid in o._by_category[category_id]]


def check_schema(
    o: Ontology, h_type: str | None, r: str, t_type: str | None
) -> bool:
    """Domain/range check with hierarchy inheritance.

    A constraint naming a parent type accepts every descendant.  An empty
    constraint set is a wildcard and accepts anything, including mentions
    whose type could not be inferred (``None``); a non-empty set rejects
    ``None``.
    """
    if r not in o.relations:
        raise UnknownRelation(r)
    rel = o.relations[r]

    def side_ok(type_id: str | None, allowed: frozenset[str]) -> bool:
        if not allowed:
            return True
        if type_id is None or type_id not in o.entity_types:
            return False
        return any(o.is_subtype(type_id, a) for a in allowed)

    return side_ok(h_type, rel.domain_types) and side_ok(t_type, rel.range_types)


# -- serialization ---------------------------------------------------------


def load_schema(path: str | Path) -> Ontology:
    """Load and fully cross-check a schema file; fails atomically."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read schema file {path}: {exc}") from exc
    return parse_schema(raw, source=str(path))


def parse_schema(raw: str, source: str = "<string>") -> Ontology:
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: top level must be an object")

    entity_types: dict[str, EntityType] = {}
    for row in doc.get("entity_types", []):
        et = EntityType(
            id=row["id"],
            label=row.get("label", row["id"]),
            parent=row.get("parent"),
            examples=tuple(row.get("examples", [])),
        )
        if et.id in entity_types:
            raise IntegrityError(f"duplicate entity type id {et.id!r}")
        entity_types[et.id] = et

    for et in entity_types.values():
        if et.parent is not None and et.parent not in entity_types:
            raise IntegrityError(
                f"entity type {et.id!r} names unknown parent {et.parent!r}"
            )
    _reject_cycles(entity_types)

    categories: dict[str, RelationCategory] = {}
    for row in doc.get("categories", []):
        cat = RelationCategory(
            id=row["id"],
            label=row.get("label", row["id"]),
            description=row.get("description", ""),
        )
        if cat.id in categories:
            raise IntegrityError(f"duplicate category id {cat.id!r}")
        categories[cat.id] = cat

    relations: dict[str, RelationType] = {}
    for row in doc.get("relations", []):
        rel = RelationType(
            id=row["id"],
            category=row["category"],
            domain_types=frozenset(row.get("domain_types", [])),
            range_types=frozenset(row.get("range_types", [])),
            long_tail_flag=bool(row.get("long_tail_flag", False)),
        )
        if rel.id in relations:
            raise IntegrityError(f"duplicate relation id {rel.id!r}")
        if rel.category not in categories:
            raise IntegrityError(
                f"relation {rel.id!r} cites unknown category {rel.category!r}"
            )
        for tid in sorted(rel.domain_types | rel.range_types):
            if tid not in entity_types:
                raise IntegrityError(
                    f"relation {rel.id!r} constrains unknown entity type {tid!r}"
                )
        relations[rel.id] = rel

    alias_table: dict[str, AliasEntry] = {}
    for surface, row in doc.get("aliases", {}).items():
        if isinstance(row, str):
            entry = AliasEntry(canonical=row)
        else:
            entry = AliasEntry(
                canonical=row["canonical"], entity_type=row.get("entity_type")
            )
        if entry.entity_type is not None and entry.entity_type not in entity_types:
            raise IntegrityError(
                f"alias {surface!r} names unknown entity type {entry.entity_type!r}"
            )
        alias_table[unicodedata.normalize("NFC", surface)] = entry

    return Ontology(
        entity_types=entity_types,
        categories=categories,
        relations=relations,
        alias_table=alias_table,
    )


def _reject_cycles(entity_types: dict[str, EntityType]) -> None:
    for start in entity_types:
        seen = {start}
        cur = entity_types[start].parent
        while cur is not None:
            if cur in seen:
                raise IntegrityError(f"cyclic entity-type hierarchy at {cur!r}")
            seen.add(cur)
            cur = entity_types[cur].parent


def schema_to_dict(o: Ontology) -> dict:
    """Canonical dict form; ``save_schema . load_schema`` is the identity."""
    return {
        "entity_types": [
            {
                "id": et.id,
                "label": et.label,
                **({"parent": et.parent} if et.parent is not None else {}),
                **({"examples": list(et.examples)} if et.examples else {}),
            }
            for et in o.entity_types.values()
        ],
        "categories": [
            {"id": c.id, "label": c.label, "description": c.description}
            for c in o.categories.values()
        ],
        "relations": [
            {
                "id": r.id,
                "category": r.category,
                "domain_types": sorted(r.domain_types),
                "range_types": sorted(r.range_types),
                "long_tail_flag": r.long_tail_flag,
            }
            for r in o.relations.values()
        ],
        "aliases": {
            surface: {
                "canonical": e.canonical,
                **({"entity_type": e.entity_type} if e.entity_type else {}),
            }
            for surface, e in sorted(o.alias_table.items())
        },
    }


def save_schema(o: Ontology, path: str | Path) -> None:
    text = json.dumps(schema_to_dict(o), ensure_ascii=False, indent=2, sort_keys=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def default_schema_path() -> Path:
    return Path(str(resources.files("leckg").joinpath("data", DEFAULT_SCHEMA_RESOURCE)))


def load_default_schema() -> Ontology:
    raw = resources.files("leckg").joinpath("data", DEFAULT_SCHEMA_RESOURCE).read_text(
        encoding="utf-8"
    )
    return parse_schema(raw, source=DEFAULT_SCHEMA_RESOURCE)
