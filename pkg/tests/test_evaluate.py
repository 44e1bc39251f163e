import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcs2snd.core import DiarizationResult
from mcs2snd.evaluate import UndefinedDER, score_corpus, score_der


def _grid(res, speakers, total):
    # independent rasterization: frame t is active if its centre lies inside a segment
    out = np.zeros((len(speakers), total), dtype=int)
    centres = (np.arange(total) + 0.5) * 0.01
    for s in res.segments:
        out[speakers.index(s.speaker)] |= (centres >= s.onset) & (centres < s.end)
    return out


def brute_force_der(ref, hyp):
    """Minimum error over every injective hyp->ref assignment (unmapped allowed)."""
    rs, hs = ref.speakers, hyp.speakers
    total = int(np.ceil(max(ref.end_time, hyp.end_time) / 0.01)) + 2
    r, h = _grid(ref, rs, total), _grid(hyp, hs, total)
    n_ref, n_hyp = r.sum(0), h.sum(0)
    slots = list(range(len(rs))) + [None] * len(hs)
    best = None
    for perm in set(itertools.permutations(slots, len(hs))):
        correct = np.zeros(total, dtype=int)
        for i, j in enumerate(perm):
            if j is not None:
                correct += h[i] & r[j]
        err = (np.maximum(n_ref, n_hyp) - correct).sum()
        best = err if best is None else min(best, err)
    return best / n_ref.sum()


def test_perfect_and_relabelled():
    ref = DiarizationResult([("A", 0.0, 3.0), ("B", 2.0, 4.0)])
    assert score_der(ref, ref).der == 0.0
    hyp = DiarizationResult([("x", 0.0, 3.0), ("y", 2.0, 4.0)])
    rep = score_der(ref, hyp)
    assert rep.der == 0.0 and rep.mapping == {"x": "A", "y": "B"}


def test_twenty_percent_miss():
    ref = DiarizationResult([("A", 0.0, 10.0)])
    hyp = DiarizationResult([("h", 0.0, 8.0)])
    rep = score_der(ref, hyp)
    assert rep.der == pytest.approx(0.2) and rep.missed == pytest.approx(0.2)
    assert rep.false_alarm == 0 and rep.confusion == 0
    assert rep.line() == "DER=20.00 MISS=20.00 FA=0.00 CONF=0.00"


def test_empty_hypothesis_is_all_miss():
    ref = DiarizationResult([("A", 0.0, 2.0), ("B", 1.0, 2.0)])
    rep = score_der(ref, DiarizationResult([]))
    assert rep.der == pytest.approx(1.0) and rep.missed == pytest.approx(1.0)


def test_overlap_counts_per_speaker():
    ref = DiarizationResult([("A", 0.0, 2.0), ("B", 0.0, 2.0)])
    hyp = DiarizationResult([("x", 0.0, 2.0)])
    rep = score_der(ref, hyp)
    assert rep.der == pytest.approx(0.5) and rep.scored_time == pytest.approx(4.0)


def test_confusion_and_false_alarm():
    ref = DiarizationResult([("A", 0.0, 4.0), ("B", 4.0, 4.0)])
    hyp = DiarizationResult([("x", 0.0, 6.0), ("y", 6.0, 2.0), ("z", 8.0, 2.0)])
    rep = score_der(ref, hyp)
    assert rep.confusion == pytest.approx(2 / 8)
    assert rep.false_alarm == pytest.approx(2 / 8)
    assert rep.der == pytest.approx(brute_force_der(ref, hyp))


def test_undefined_without_reference_speech():
    with pytest.raises(UndefinedDER):
        score_der(DiarizationResult([]), DiarizationResult([("x", 0.0, 1.0)]))


def _results(labels):
    return st.lists(st.tuples(st.sampled_from(labels), st.integers(0, 300), st.integers(1, 200)),
                    min_size=1, max_size=6).map(
        lambda raw: DiarizationResult([(s, a * 0.01, d * 0.01) for s, a, d in raw]))


@settings(max_examples=150, deadline=None)
@given(_results(["A", "B", "C"]), st.one_of(st.just(None), _results(["p", "q", "r", "s"])))
def test_matches_brute_force(ref, hyp):
    hyp = hyp if hyp is not None else DiarizationResult([])
    rep = score_der(ref, hyp)
    assert rep.der == pytest.approx(brute_force_der(ref, hyp), abs=1e-12)
    assert rep.der == pytest.approx(rep.missed + rep.false_alarm + rep.confusion)


@settings(max_examples=50, deadline=None)
@given(_results(["A", "B"]), _results(["p", "q"]), _results(["A", "C"]), _results(["x"]))
def test_corpus_is_time_weighted(r1, h1, r2, h2):
    r1.recording_id, r2.recording_id = "one", "two"
    a, b = score_der(r1, h1), score_der(r2, h2)
    corpus = score_corpus([(r1, h1), (r2, h2)])
    expected = (a.der * a.ref_frames + b.der * b.ref_frames) / (a.ref_frames + b.ref_frames)
    assert corpus.der == pytest.approx(expected)
