import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dictenc.report_model import (
    KeyValuePair,
    LabDictionary,
    LabReportSet,
    LabValue,
    MedicalLabel,
    SchemaError,
    UnmappableValueError,
    bin_value,
    parse_report,
    perturb,
    report_to_obj,
    serialize_report,
)

from conftest import num, qual, report


def test_label_set_is_closed_and_distinct():
    assert len(MedicalLabel) == 12
    assert len({m.token for m in MedicalLabel}) == 12


@pytest.mark.parametrize(
    "x,label",
    [(5.0, MedicalLabel.NORMAL), (9.0, MedicalLabel.HI_NORMAL), (1.0, MedicalLabel.LT_NORMAL)],
)
def test_bin_numeric_examples(x, label):
    assert bin_value(LabValue.numeric(x, 3.0, 7.0)) is label


def test_bin_numeric_sweep_across_boundaries():
    lo, hi = 3.0, 7.0
    for x in np.linspace(0.0, 10.0, 2001):
        got = bin_value(LabValue.numeric(x, lo, hi))
        if x < lo:
            assert got is MedicalLabel.LT_NORMAL
        elif x > hi:
            assert got is MedicalLabel.HI_NORMAL
        else:
            assert got is MedicalLabel.NORMAL
    # closed interval
    assert bin_value(LabValue.numeric(lo, lo, hi)) is MedicalLabel.NORMAL
    assert bin_value(LabValue.numeric(hi, lo, hi)) is MedicalLabel.NORMAL
    assert bin_value(LabValue.numeric(np.nextafter(hi, 99), lo, hi)) is MedicalLabel.HI_NORMAL


def test_bin_one_sided_and_unbounded():
    assert bin_value(LabValue.numeric(8.0, hi=7.0)) is MedicalLabel.HI_NORMAL
    assert bin_value(LabValue.numeric(2.0, lo=3.0)) is MedicalLabel.LT_NORMAL
    assert bin_value(LabValue.numeric(100.0)) is MedicalLabel.NORMAL
    assert bin_value(LabValue.numeric(100.0, flagged=True)) is MedicalLabel.ABNORMAL


@pytest.mark.parametrize(
    "text,label",
    [
        ("positive", MedicalLabel.POSITIVE),
        ("resistant", MedicalLabel.RESISTANT),
        ("  Negative ", MedicalLabel.NEGATIVE),
        ("++", MedicalLabel.POSITIVE_PLUS_PLUS),
        ("[POSITIVE_MINUS]", MedicalLabel.POSITIVE_MINUS),
        ("senstive", MedicalLabel.SENSITIVE),
    ],
)
def test_bin_qualitative(text, label):
    assert bin_value(LabValue.qualitative(text)) is label


def test_bin_unmappable_names_string():
    with pytest.raises(UnmappableValueError, match="cloudy"):
        bin_value(LabValue.qualitative("cloudy"))
    custom = {"cloudy": MedicalLabel.ABNORMAL}
    assert bin_value(LabValue.qualitative("cloudy"), custom) is MedicalLabel.ABNORMAL


def test_value_invariants():
    with pytest.raises(ValueError):
        LabValue.numeric(1.0, 5.0, 2.0)
    with pytest.raises(ValueError):
        LabValue("numeric", numeric_value=1.0, qualitative_text="x")
    with pytest.raises(ValueError):
        KeyValuePair("   ", LabValue.numeric(1.0))
    with pytest.raises(ValueError):
        LabDictionary(())


def test_parse_examples():
    assert parse_report('{"dictionaries": []}').dictionaries == ()
    r = parse_report('{"dictionaries":[{"pairs":[{"key":"glucose","num":5.0,"lo":3.0,"hi":7.0}]}]}')
    assert len(r.dictionaries) == 1 and len(r.dictionaries[0].pairs) == 1
    assert r.dictionaries[0].pairs[0].value.reference_high == 7.0


@pytest.mark.parametrize(
    "doc,path",
    [
        ({"dictionaries": [{"pairs": [{"key": "a", "num": 1.0, "text": "x"}]}]}, "$.dictionaries[0].pairs[0].text"),
        ({"dictionaries": [{"pairs": [{"key": "", "num": 1.0}]}]}, "$.dictionaries[0].pairs[0].key"),
        ({"dictionaries": [{"pairs": []}]}, "$.dictionaries[0].pairs"),
        ({"dictionaries": [{"pairs": [{"key": "a", "num": "1"}]}]}, "$.dictionaries[0].pairs[0].num"),
        ({"dictionaries": [{"pairs": [{"key": "a"}]}]}, "$.dictionaries[0].pairs[0].num"),
        ({"dicts": []}, "$.dictionaries"),
    ],
)
def test_parse_schema_errors_carry_path(doc, path):
    with pytest.raises(SchemaError) as info:
        parse_report(json.dumps(doc))
    assert info.value.path == path


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def lab_values(draw):
    if draw(st.booleans()):
        return LabValue.qualitative(draw(st.sampled_from(["positive", "negative", "+", "resistant", "odd text"])))
    x = draw(finite)
    bounds = draw(st.one_of(st.none(), st.tuples(finite, finite)))
    if bounds is None:
        return LabValue.numeric(x, flagged=draw(st.booleans()))
    lo, hi = sorted(bounds)
    return LabValue.numeric(x, lo, hi)


keys = st.text(st.characters(codec="utf-8", exclude_categories=["Cs"]), min_size=1, max_size=8).filter(
    lambda s: s.strip()
)
dictionaries = st.builds(
    LabDictionary,
    st.lists(st.builds(KeyValuePair, keys, lab_values()), min_size=1, max_size=5).map(tuple),
    st.one_of(st.none(), st.sampled_from(["blood", "urine"])),
)
reports = st.lists(dictionaries, max_size=4).map(lambda ds: LabReportSet(tuple(ds)))


@settings(max_examples=1000, deadline=None)
@given(reports)
def test_json_round_trip(r):
    text = serialize_report(r)
    assert parse_report(text) == r
    assert json.loads(serialize_report(parse_report(text))) == json.loads(text)


def test_perturb_examples():
    empty = LabReportSet()
    assert perturb(empty, 3) == empty
    single = report([num("a", 1.0)])
    assert perturb(single, 3) == single
    r = report([num("a", 1.0), num("b", 2.0), num("c", 9.0)], [qual("d", "positive")])
    assert perturb(r, 11) == perturb(r, 11)


def _triples(r):
    return sorted(
        (d.kind_tag or "", p.key, json.dumps(report_to_obj(LabReportSet((LabDictionary((p,)),)))))
        for d in r.dictionaries
        for p in d.pairs
    )


@settings(max_examples=200, deadline=None)
@given(reports, st.integers(0, 2**32 - 1))
def test_perturb_preserves_multiset(r, seed):
    assert _triples(perturb(r, seed)) == _triples(r)


def test_perturb_actually_shuffles():
    r = report([num(f"k{i}", float(i)) for i in range(8)], [num("x", 1.0)], [num("y", 1.0)])
    assert any(perturb(r, s) != r for s in range(5))
