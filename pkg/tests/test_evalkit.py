import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ontoext.deid import DeidentifiedNote
from ontoext.entities import CandidateEntitySet
from ontoext.evalkit import (
    JudgeLabel,
    build_reference,
    fuzzy_ratio,
    judge_extension,
    judge_precision,
    match_at,
    prf_at,
    scan_occurrence,
    tally,
    windows,
    words,
)
from ontoext.gateway import ScriptedBackend, ScriptedMissError

from conftest import scripted_gateway


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ("pneumonia", "pneumonias", 90),  # 1 edit / 10
        ("Asthma", "asthma", 100),
        ("type 2  diabetes", "Type 2 Diabetes", 100),
        ("cancer", "cancers", 86),  # 1 / 7 = 85.71
        ("abc", "xyz", 0),
    ],
)
def test_fuzzy_ratio(a, b, expected):
    assert fuzzy_ratio(a, b) == expected


def test_words_and_windows():
    assert words("Dx: (pneumonia), [PERSON] ok.") == ["dx", "pneumonia", "person", "ok"]
    assert windows(["a", "b", "c"], 1) == ["a", "b", "c", "a b", "b c"]
    assert windows(["a", "b"], 2) == ["a", "b", "a b"]


def test_scan_occurrence():
    assert scan_occurrence("lung cancer", "Lung cancers diagnosed in 2019.") >= 90
    assert scan_occurrence("lung cancer", "No acute distress, afebrile.") < 60
    assert scan_occurrence("asthma", "history of asthma.") == 100
    with pytest.raises(ValueError):
        scan_occurrence("  ...", "x")


def test_build_reference(three_layer):
    note = DeidentifiedNote("n", "Pt with tuberculosis and breast cancers. [PERSON] denies influenza.")
    ref = build_reference(note, three_layer)
    # "cancer" vs "cancers" is 86, below the bar; "breast cancers" reaches 93
    assert ref.terms == ["tuberculosis", "influenza", "breast cancer"]


def test_build_reference_ignores_inserted_and_obsolete(three_layer):
    three_layer.insert_child(three_layer.roots[0], "sepsis")
    note = DeidentifiedNote("n", "sepsis again")
    assert build_reference(note, three_layer).terms == []


def test_build_reference_threshold_bounds(three_layer):
    with pytest.raises(ValueError):
        build_reference(DeidentifiedNote("n", "x"), three_layer, threshold=101)


def test_prf_at_counts():
    s = prf_at(["pneumonia", "gout"], ["pneumonias", "asthma", "anemia", "migraine"], 80)
    assert s.precision == 0.5 and s.recall == 0.25
    assert s.f1 == pytest.approx(1 / 3)


def test_prf_at_accepts_candidate_sets():
    preds = CandidateEntitySet.from_strings("n", ["Asthma"])
    assert prf_at(preds, ["asthma"], 80).f1 == 1.0


def test_match_is_one_to_one():
    r = match_at(["asthma", "asthmas"], ["asthma"], 60)
    assert r.tp == 1
    assert r.pairs == [("asthma", "asthma", 100)]


def test_empty_sides():
    both = match_at([], [], 60)
    assert both.scores.f1 == 1.0 and not both.flagged
    preds_only = match_at(["x"], [], 60)
    assert preds_only.scores.precision == 0.0 and preds_only.flagged


phrase = st.text(alphabet="abcdef ", min_size=1, max_size=10).filter(str.strip)


@settings(max_examples=150, deadline=None)
@given(st.lists(phrase, max_size=6), st.lists(phrase, max_size=6))
def test_tp_count_monotone_in_threshold(preds, refs):
    tps = [match_at(preds, refs, t).tp for t in range(0, 101, 10)]
    assert tps == sorted(tps, reverse=True)


# --------------------------------------------------------------------------
# judge
# --------------------------------------------------------------------------


def judge_gw(reply):
    return scripted_gateway(ScriptedBackend(responder=lambda ex: reply))


@pytest.mark.parametrize(
    "reply, label",
    [("Correct", JudgeLabel.CORRECT), ("incorrect.", JudgeLabel.INCORRECT),
     ("I am not sure.", JudgeLabel.NOT_SURE), ("Verdict: Correct - it is a subtype", JudgeLabel.CORRECT)],
)
def test_judge_labels(reply, label):
    (v,) = judge_extension([("nephritis", "disease of anatomical entity", "is-a")], judge_gw(reply))
    assert v.label is label and not v.error


def test_judge_unparseable_is_not_sure():
    (v,) = judge_extension([("x", "y", "is-a")], judge_gw("hmm"))
    assert v.label is JudgeLabel.NOT_SURE


def test_judge_failure_is_recorded(tiny):
    def boom(ex):
        raise ScriptedMissError("no fixture")

    rec = tiny.insert_child("DOID:162", "sarcoma")
    (v,) = judge_extension([rec], scripted_gateway(ScriptedBackend(responder=boom)), tiny)
    assert v.parent_name == "cancer"
    assert v.error
    assert tally([v])["Failed"] == 1 and tally([v])["Not Sure"] == 0


def test_judge_records_need_ontology(tiny):
    rec = tiny.insert_child("DOID:162", "sarcoma")
    with pytest.raises(ValueError):
        judge_extension([rec], judge_gw("Correct"))


def test_judge_precision_examples():
    assert judge_precision(correct=8, incorrect=2) == 80.0
    assert judge_precision(correct=0, incorrect=0) is None
    assert judge_precision(correct=617, incorrect=158) == pytest.approx(79.613, abs=1e-3)


def test_judge_precision_ignores_not_sure():
    verdicts = judge_extension([("a b", "b", "is-a")] * 3, judge_gw("Correct"))
    verdicts += judge_extension([("x", "y", "is-a")] * 5, judge_gw("Not Sure"))
    verdicts += judge_extension([("x", "z", "is-a")], judge_gw("Incorrect"))
    assert judge_precision(verdicts) == 75.0
    with pytest.raises(TypeError):
        judge_precision(correct=1)
