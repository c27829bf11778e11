import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memgat.errors import AlignmentError, ConfigError, DegenerateBatchError
from memgat.evaluation import (
    bleu,
    chrf,
    corpus_chrf,
    corpus_ter,
    default_metrics,
    edit_distance,
    evaluate_corpus,
    lcs_length,
    paired_bootstrap,
    rouge_l,
    slot_answer_accuracy,
    ter,
    ter_edits_exact,
    ter_edits_greedy,
)

WORDS = st.sampled_from(list("abcdefgh"))
SENTENCES = st.lists(WORDS, min_size=1, max_size=8).map(" ".join)


# ---- hand oracles


def test_bleu_examples():
    assert bleu(["the cat sat on the mat"], ["the cat sat on the mat"]) == pytest.approx(100.0)
    # unigram precision 1, brevity penalty exp(1 - 3/2)
    assert bleu(["the cat"], ["the cat sat"], max_n=1) == pytest.approx(100 * math.exp(-0.5), abs=1e-4)
    assert bleu(["x y z w"], ["a b c d"], smoothing="none") == 0.0


def test_bleu_empty_corpus_is_degenerate():
    with pytest.raises(DegenerateBatchError):
        bleu([], [])


def test_rouge_examples():
    assert rouge_l("a b c", "a b c") == 1.0
    assert rouge_l("a b c", "a c") == pytest.approx(0.8)
    assert rouge_l("a b", "c d") == 0.0
    with pytest.raises(DegenerateBatchError):
        rouge_l("", "a")


def test_lcs_and_edit_distance():
    assert lcs_length("abcbdab", "bdcaba") == 4
    assert edit_distance("kitten", "sitting") == 3


def test_ter_examples():
    assert ter("a b c", "a b c") == 0.0
    assert ter("a b x d", "a b c d") == 25.0
    assert ter("", "a b c") == 100.0
    # one block shift fixes the order
    assert ter("c d a b", "a b c d") == 25.0
    with pytest.raises(DegenerateBatchError):
        ter("a", "")


def test_chrf_examples():
    assert chrf("abc def", "abc def") == pytest.approx(100.0)
    assert chrf("abc", "xyz") == 0.0
    assert chrf("abc", "abd", char_n=1) == pytest.approx(200 / 3, abs=1e-4)


def test_slot_answer_accuracy_examples():
    pred = "your poievent activity is on poidate at poitime"
    gold = "you have a poievent activity on poidate at poitime"
    assert slot_answer_accuracy([pred], [gold]) == 1.0
    assert slot_answer_accuracy(["poi is at poiaddress"], ["poi is poidistance away"]) == 0.0
    assert slot_answer_accuracy(["hello there"], ["goodbye"]) == 1.0
    with pytest.raises(DegenerateBatchError):
        slot_answer_accuracy([], [])


def test_bootstrap_examples():
    refs = [f"w{i} a b c d" for i in range(30)]
    assert paired_bootstrap(refs, refs, refs) > 0.9
    worse = [f"x{i} a q c z" for i in range(30)]
    assert paired_bootstrap(refs, worse, refs) < 0.01
    assert paired_bootstrap(refs, worse, refs, seed=4) == paired_bootstrap(refs, worse, refs, seed=4)


def test_bootstrap_errors():
    with pytest.raises(AlignmentError):
        paired_bootstrap(["a"], ["a", "b"], ["a"])
    with pytest.raises(ConfigError):
        paired_bootstrap(["a"], ["a"], ["a"], resamples=50)


def test_report_contains_p_values_with_baseline():
    refs = ["a b c d", "e f g h", "poi is poidistance away"]
    report = evaluate_corpus(refs, refs, baseline=("base", ["a x c d", "e f", "poi"]), resamples=100)
    assert report.scores["bleu4"] == pytest.approx(100.0)
    assert report.scores["ter"] == 0.0
    assert set(report.comparison["p_values"]) == set(report.scores)
    assert "p-value" in report.table()
    assert '"settings"' in report.to_json()


# ---- properties


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(SENTENCES, SENTENCES), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_corpus_scores_are_permutation_consistent(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    for metric in default_metrics():
        a = metric.score([c for c, _ in pairs], [r for _, r in pairs])
        b = metric.score([c for c, _ in shuffled], [r for _, r in shuffled])
        assert a == pytest.approx(b, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(SENTENCES, SENTENCES), min_size=1, max_size=6), SENTENCES)
def test_bleu_never_drops_when_an_exact_pair_is_added(pairs, extra):
    cands, refs = [c for c, _ in pairs], [r for _, r in pairs]
    before = bleu(cands, refs)
    if before < 100.0:
        assert bleu(cands + [extra], refs + [extra]) >= before - 1e-9


@settings(max_examples=60, deadline=None)
@given(SENTENCES, SENTENCES)
def test_ter_is_zero_on_identity_and_nonnegative(x, y):
    assert ter(x, x) == 0.0
    assert ter(x, y) >= 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(st.lists(WORDS, min_size=n, max_size=n), st.lists(WORDS, min_size=n, max_size=n))))
def test_rouge_symmetric_for_equal_lengths(pair):
    a, b = (" ".join(p) for p in pair)
    assert rouge_l(a, b) == pytest.approx(rouge_l(b, a))


@settings(max_examples=60, deadline=None)
@given(st.lists(WORDS, max_size=6), st.lists(WORDS, min_size=1, max_size=6))
def test_ter_edits_bounded_by_plain_edit_distance(hyp, ref):
    exact = ter_edits_exact(hyp, ref)
    assert exact <= ter_edits_greedy(hyp, ref) <= edit_distance(hyp, ref)


def test_corpus_ter_and_chrf_aggregate_statistics():
    assert corpus_ter(["a b", "c"], ["a b", "d e"]) == pytest.approx(100 * 2 / 4)
    assert corpus_chrf(["abc"], ["abc"]) == pytest.approx(100.0)

