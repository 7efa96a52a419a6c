import json

import pytest

from leckg.errors import IntegrityError, ParseError, UnknownCategory, UnknownRelation
from leckg.ontology import (
    check_schema,
    load_default_schema,
    load_schema,
    parse_schema,
    relations_in_category,
    save_schema,
    schema_to_dict,
)

EXPECTED_CATEGORY_SIZES = {
    "Definition & Naming": 4,
    "Hierarchy & Composition": 4,
    "Spatiotemporal": 11,
    "Quantitative": 14,
    "Trend & Change": 6,
    "Provenance & Method": 17,
    "Causality & Impact": 10,
    "Application & Status": 23,
}


@pytest.fixture(scope="module")
def schema():
    return load_default_schema()


def test_bundled_schema_shape(schema):
    assert len(schema.categories) == 8
    assert len(schema.relations) == 89
    assert len(schema.entity_types) == 12
    for cat, n in EXPECTED_CATEGORY_SIZES.items():
        assert len(relations_in_category(schema, cat)) == n, cat


def test_every_relation_belongs_to_a_known_category(schema):
    for r in schema.relations.values():
        assert r.category in schema.categories


def test_long_tail_flags_present(schema):
    flagged = {r.id for r in schema.relations.values() if r.long_tail_flag}
    assert "aliasOf" in flagged
    assert "usesAlgorithm" in flagged
    assert "correspondsToSDG" in flagged
    assert "locatedIn" not in flagged


def test_relations_in_category_unknown(schema):
    with pytest.raises(UnknownCategory):
        relations_in_category(schema, "Misc")


def test_hierarchy_queries(schema):
    assert schema.is_subtype("City", "GeographicEntity")
    assert schema.is_subtype("City", "City")
    assert not schema.is_subtype("GeographicEntity", "City")
    assert schema.ancestors("SubBasin") == ["Basin", "GeographicEntity"]


def test_check_schema_typed_constraint(schema):
    # locatedIn restricts both slots to geographic entities; subtypes inherit
    assert check_schema(schema, "Province", "locatedIn", "Country")
    assert check_schema(schema, "City", "locatedIn", "Basin")
    assert not check_schema(schema, "Indicator", "locatedIn", "Indicator")
    assert not check_schema(schema, "Province", "locatedIn", "Goal")


def test_check_schema_wildcard_accepts_any_type(schema):
    # hasValue has no declared constraints: every type and even None passes
    for t in list(schema.entity_types) + [None]:
        assert check_schema(schema, t, "hasValue", t)


def test_check_schema_none_rejected_by_constrained_slot(schema):
    assert not check_schema(schema, None, "locatedIn", "Country")
    assert not check_schema(schema, "City", "locatedIn", None)


def test_check_schema_unknown_relation(schema):
    with pytest.raises(UnknownRelation):
        check_schema(schema, "City", "orbits", "Country")


def test_canonical_mention_alias_and_normalisation(schema):
    assert schema.canonical_mention("  云南 ") == "云南省"
    assert schema.canonical_mention("Random Forest") == "随机森林"
    assert schema.canonical_mention("unseen mention") == "unseen mention"


def test_entity_type_of(schema):
    assert schema.entity_type_of("云南省") == "Province"
    assert schema.entity_type_of("云南") == "Province"  # via alias chain
    assert schema.entity_type_of("nonexistent") is None


def test_round_trip_identity(schema, tmp_path):
    p = tmp_path / "schema.json"
    save_schema(schema, p)
    again = load_schema(p)
    assert schema_to_dict(again) == schema_to_dict(schema)


def test_parse_rejects_duplicate_relation_ids():
    raw = {
        "entity_types": [],
        "categories": [{"id": "C", "label": "C"}],
        "relations": [
            {"id": "r", "category": "C"},
            {"id": "r", "category": "C"},
        ],
        "alias_table": {},
    }
    with pytest.raises(IntegrityError):
        parse_schema(json.dumps(raw), source="inline")


def test_parse_rejects_unknown_category_reference():
    raw = {
        "entity_types": [],
        "categories": [{"id": "C", "label": "C"}],
        "relations": [{"id": "r", "category": "Misc"}],
        "alias_table": {},
    }
    with pytest.raises(IntegrityError):
        parse_schema(json.dumps(raw), source="inline")


def test_parse_rejects_type_cycle():
    raw = {
        "entity_types": [
            {"id": "A", "label": "A", "parent": "B"},
            {"id": "B", "label": "B", "parent": "A"},
        ],
        "categories": [],
        "relations": [],
        "alias_table": {},
    }
    with pytest.raises(IntegrityError):
        parse_schema(json.dumps(raw), source="inline")


def test_parse_rejects_constraint_on_unknown_type():
    raw = {
        "entity_types": [{"id": "A", "label": "A"}],
        "categories": [{"id": "C", "label": "C"}],
        "relations": [{"id": "r", "category": "C", "domain_types": ["Ghost"]}],
        "alias_table": {},
    }
    with pytest.raises(IntegrityError):
        parse_schema(json.dumps(raw), source="inline")


def test_empty_relation_list_is_valid():
    raw = {
        "entity_types": [{"id": "A", "label": "A"}],
        "categories": [{"id": "C", "label": "C"}],
        "relations": [],
        "alias_table": {},
    }
    o = parse_schema(json.dumps(raw), source="inline")
    assert o.relations == {}


def test_load_schema_bad_json(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json", encoding="utf-8")
    with pytest.raises(ParseError):
        load_schema(p)


def test_schema_file_is_sorted_canonical(schema, tmp_path):
    # save twice, byte-identical output
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_schema(schema, a)
    save_schema(schema, b)
    assert a.read_bytes() == b.read_bytes()
    json.loads(a.read_text(encoding="utf-8"))  # stays parseable
