import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from conftest import day
from ehrfuse.labeling import build_label_matrix, tag_history
from ehrfuse.records import FusedEntry, Source


def entry(catalog, ont, code, d=0):
    return FusedEntry(catalog[(ont, code)], day(d), Source.GP if ont == "READ2" else Source.HOSPITAL)


def test_single_match(small_catalog, small_defs):
    t = tag_history([entry(small_catalog, "ICD10", "E11.9")], small_defs)
    assert t.y.tolist() == [1, 0]
    assert t.tags == (frozenset({"t2dm"}),)


def test_no_matches(small_catalog, small_defs):
    t = tag_history([entry(small_catalog, "ICD10", "J45"), entry(small_catalog, "READ2", "1371.")], small_defs)
    assert t.y.tolist() == [0, 0]
    assert t.positives() == []


def test_empty_history(small_defs):
    assert tag_history([], small_defs).y.tolist() == [0, 0]


def test_exact_read_code_only(small_catalog, small_defs):
    # C10F. is matched without descendants, so C10F1 does not fire
    t = tag_history([entry(small_catalog, "READ2", "C10F1")], small_defs)
    assert t.y.tolist() == [0, 0]


def _brute(codes):
    t2dm = {("ICD10", "E11"), ("ICD10", "E11.9"), ("READ2", "C10F.")}
    hf = {("ICD10", "I50"), ("ICD10", "I50.0"), ("READ2", "G58..")}
    return [int(any(c in t2dm for c in codes)), int(any(c in hf for c in codes))]


def test_brute_force_twenty(small_catalog, small_defs):
    keys = sorted(c.key for c in small_catalog)
    rng = np.random.default_rng(7)
    codes = [keys[i] for i in rng.integers(0, len(keys), 20)]
    seq = [entry(small_catalog, *k, d=i) for i, k in enumerate(codes)]
    t = tag_history(seq, small_defs)
    assert t.y.tolist() == _brute(codes)
    for e, tags, k in zip(seq, t.tags, codes):
        assert [int("t2dm" in tags), int("hf" in tags)] == _brute([k])


def _histories(small_catalog):
    keys = sorted(c.key for c in small_catalog)
    return st.dictionaries(
        st.text("abcdef", min_size=1, max_size=4),
        st.lists(st.sampled_from(keys), max_size=8).map(
            lambda ks: [entry(small_catalog, *k, d=i) for i, k in enumerate(ks)]
        ),
        max_size=8,
    )


def test_matrix_shape_and_order(small_catalog, small_defs):
    hs = {
        "c": [entry(small_catalog, "ICD10", "I50.0")],
        "a": [entry(small_catalog, "ICD10", "E11")],
        "b": [entry(small_catalog, "ICD10", "J45")],
    }
    m = build_label_matrix(hs, small_defs + [small_defs[0]])
    assert m.values.shape == (3, 3)
    assert m.patient_ids == ("c", "a", "b")
    assert m.values.tolist() == [[0, 1, 0], [1, 0, 1], [0, 0, 0]]
    m2 = build_label_matrix({k: hs[k] for k in ("a", "b", "c")}, small_defs)
    assert m2.values.tolist() == [[1, 0], [0, 0], [0, 1]]


def test_matrix_write(tmp_path, small_catalog, small_defs):
    m = build_label_matrix({"p": [entry(small_catalog, "READ2", "G58..")]}, small_defs)
    m.write(tmp_path / "l.tsv")
    assert (tmp_path / "l.tsv").read_text() == "patient_id\tt2dm\thf\np\t0\t1\n"


def test_empty_cohort(small_defs):
    m = build_label_matrix({}, small_defs)
    assert m.values.shape == (0, 2)


@given(st.data())
def test_column_sums_and_permutation(small_catalog, small_defs, data):
    hs = data.draw(_histories(small_catalog))
    m = build_label_matrix(hs, small_defs)
    manual = np.array([sum(tag_history(s, small_defs).y[j] for s in hs.values()) for j in range(2)])
    assert (m.case_counts() == manual).all() if hs else True
    perm = data.draw(st.permutations(list(hs)))
    mp = build_label_matrix({k: hs[k] for k in perm}, small_defs)
    idx = [list(hs).index(k) for k in perm]
    assert (mp.values == m.values[idx]).all()


@given(st.data())
def test_removing_tagged_entries_flips_one_label(small_catalog, small_defs, data):
    seq = data.draw(_histories(small_catalog).filter(bool)).popitem()[1]
    t = tag_history(seq, small_defs)
    for j, pid in enumerate(t.phenotype_ids):
        kept = [e for e, tags in zip(seq, t.tags) if pid not in tags]
        y = tag_history(kept, small_defs).y
        assert y[j] == 0
        others = [i for i in range(len(y)) if i != j]
        # other labels only change when their evidence was shared with d
        for i in others:
            shared = any(pid in tags and t.phenotype_ids[i] in tags for tags in t.tags)
            if not shared:
                assert y[i] == t.y[i]
