import json
import warnings

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ehrfuse.errors import DuplicateConflict, EmptyDefinitionSet, EmptyDescription, MalformedDefinition, MalformedRow
from ehrfuse.ontology import (
    Concept,
    MatchCode,
    OntologyCatalog,
    PhenotypeDefinition,
    UnresolvedCodeWarning,
    indicator,
    load_catalog,
    load_phenotype_definitions,
    write_catalog,
    write_phenotype_definitions,
)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_single_row(tmp_path):
    p = write(tmp_path, "c.tsv", "ICD10\tE11.9\tType 2 diabetes mellitus without complications\n")
    cat = load_catalog(p)
    assert len(cat) == 1
    assert cat[("ICD10", "E11.9")].description.startswith("Type 2")


def test_identical_rows_dedup(tmp_path):
    p = write(tmp_path, "c.tsv", "ICD10\tE11.9\tdesc\nICD10\tE11.9\tdesc\n")
    assert len(load_catalog(p)) == 1


def test_conflicting_rows(tmp_path):
    p = write(tmp_path, "c.tsv", "ICD10\tE11.9\tdesc A\nICD10\tE11.9\tdesc B\n")
    with pytest.raises(DuplicateConflict):
        load_catalog(p)


def test_malformed_and_empty(tmp_path):
    with pytest.raises(MalformedRow):
        load_catalog(write(tmp_path, "a.tsv", "ICD10\tE11\n"))
    with pytest.raises(EmptyDescription):
        load_catalog(write(tmp_path, "b.tsv", "ICD10\tE11\t   \n"))


def test_whitespace_trimmed(tmp_path):
    cat = load_catalog(write(tmp_path, "c.tsv", " ICD10 \t E11 \t Diabetes \n"))
    assert ("ICD10", "E11") in cat
    assert cat[("ICD10", "E11")].description == "Diabetes"


def test_catalog_roundtrip(tmp_path, small_catalog):
    write_catalog(small_catalog, tmp_path / "c.tsv")
    assert load_catalog(tmp_path / "c.tsv") == small_catalog
    assert small_catalog.ontologies == {"ICD10", "READ2"}


@given(st.permutations(list(range(10))))
def test_catalog_order_independent(perm):
    concepts = [Concept("X", f"C{i}", f"d{i}") for i in range(10)]
    assert OntologyCatalog([concepts[i] for i in perm]) == OntologyCatalog(concepts)


def test_definitions_in_file_order(tmp_path, small_catalog):
    defs = [
        PhenotypeDefinition(f"p{i}", f"P{i}", (MatchCode("ICD10", "J45", False),)) for i in (3, 1, 2, 0)
    ]
    write_phenotype_definitions(defs, tmp_path / "d.json")
    loaded = load_phenotype_definitions(tmp_path / "d.json", small_catalog)
    assert [d.phenotype_id for d in loaded] == ["p3", "p1", "p2", "p0"]


def test_unresolved_code_warns(tmp_path, small_catalog):
    data = [{"phenotype_id": "x", "name": "X", "codes": [
        {"ontology_id": "ICD10", "code": "Z99", "include_descendants": False},
        {"ontology_id": "ICD10", "code": "J45", "include_descendants": False},
    ]}]
    p = write(tmp_path, "d.json", json.dumps(data))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        defs = load_phenotype_definitions(p, small_catalog)
    assert len([w for w in caught if issubclass(w.category, UnresolvedCodeWarning)]) == 1
    assert len(defs) == 1 and len(defs[0].codes) == 2
    assert defs[0].unresolved == (MatchCode("ICD10", "Z99", False),)


def test_definition_errors(tmp_path, small_catalog):
    with pytest.raises(EmptyDefinitionSet):
        load_phenotype_definitions(write(tmp_path, "a.json", ""), small_catalog)
    with pytest.raises(EmptyDefinitionSet):
        load_phenotype_definitions(write(tmp_path, "b.json", "[]"), small_catalog)
    with pytest.raises(MalformedDefinition):
        load_phenotype_definitions(write(tmp_path, "c.json", '[{"name": "no id"}]'), small_catalog)
    dup = [{"phenotype_id": "a", "codes": []}, {"phenotype_id": "a", "codes": []}]
    with pytest.raises(MalformedDefinition):
        load_phenotype_definitions(write(tmp_path, "d.json", json.dumps(dup)), small_catalog)


def test_indicator_descendants(small_defs):
    t2dm = small_defs[0]
    assert indicator(t2dm, Concept("ICD10", "E11.9", "x"))
    assert not indicator(t2dm, Concept("ICD10", "I50.0", "x"))


def test_indicator_exact_over_toy_hierarchy():
    defn = PhenotypeDefinition("t2dm", "T2DM", (MatchCode("READ2", "C10F.", False),))
    codes = ["C10F.", "C10F1", "C10F2", "C10F3", "C10FA", "C10E.", "C10..", "C1...", "C10F7", "C10G."]
    hits = {c for c in codes if indicator(defn, Concept("READ2", c, "x"))}
    assert hits == {"C10F."}
    # the same code in another terminology never matches
    assert not indicator(defn, Concept("ICD10", "C10F.", "x"))


def test_indicator_case_sensitive():
    defn = PhenotypeDefinition("a", "A", (MatchCode("ICD10", "E11", True),))
    assert not indicator(defn, Concept("ICD10", "e11.9", "x"))


code_text = st.text(alphabet="ABCE0123456789.", min_size=1, max_size=6)


@given(prefix=code_text, suffix=st.text(alphabet="0123456789.", max_size=3))
def test_descendant_monotone(prefix, suffix):
    defn = PhenotypeDefinition("a", "A", (MatchCode("ICD10", prefix, True),))
    assert indicator(defn, Concept("ICD10", prefix + suffix, "x"))


@given(a=code_text, b=code_text)
def test_exact_match_is_equality(a, b):
    defn = PhenotypeDefinition("a", "A", (MatchCode("READ2", a, False),))
    c = Concept("READ2", b, "x")
    assert indicator(defn, c) == (a == b) == indicator(defn, c)
