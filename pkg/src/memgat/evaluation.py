"""String-overlap metrics (BLEU, chrF, TER, ROUGE-L), slot-answer accuracy and
paired-bootstrap significance.

Every corpus metric is computed from summed per-sentence sufficient statistics,
so bootstrap resamples only re-sum rows of a statistics matrix.
"""

from __future__ import annotations

import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .conditions import SlotLexicon, extract_slot_names
from .errors import AlignmentError, ConfigError, DegenerateBatchError

Text = str | Sequence[str]


def _words(text: Text) -> list[str]:
    return text.split() if isinstance(text, str) else list(text)


def _check_corpus(candidates: Sequence, references: Sequence) -> None:
    if len(candidates) != len(references):
        raise AlignmentError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise DegenerateBatchError("empty corpus")


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------- BLEU


def bleu_stats(candidate: Text, reference: Text, max_n: int = 4) -> np.ndarray:
    """``[matches_1..n, totals_1..n, candidate_length, reference_length]``."""
    c, r = _words(candidate), _words(reference)
    stats = np.zeros(2 * max_n + 2)
    for n in range(1, max_n + 1):
        cand, ref = _ngrams(c, n), _ngrams(r, n)
        stats[n - 1] = sum(min(k, ref[g]) for g, k in cand.items())
        stats[max_n + n - 1] = max(len(c) - n + 1, 0)
    stats[-2], stats[-1] = len(c), len(r)
    return stats


def bleu_from_stats(stats: np.ndarray, max_n: int = 4, smoothing: str = "epsilon", epsilon: float = 1e-9) -> float:
    matches, totals = stats[:max_n], stats[max_n : 2 * max_n]
    cand_len, ref_len = stats[-2], stats[-1]
    if cand_len == 0 or np.any(totals == 0):
        return 0.0
    if smoothing == "epsilon":
        matches = np.where(matches == 0, epsilon, matches)
    elif smoothing != "none":
        raise ConfigError(f"unknown BLEU smoothing {smoothing!r}")
    if np.any(matches == 0):
        return 0.0
    log_precision = float(np.mean(np.log(matches / totals)))
    brevity = 0.0 if cand_len >= ref_len else 1.0 - ref_len / cand_len
    return 100.0 * math.exp(log_precision + brevity)


def bleu(candidates: Sequence[Text], references: Sequence[Text], max_n: int = 4, smoothing: str = "epsilon") -> float:
    """Corpus BLEU from aggregated clipped n-gram counts, in [0, 100]."""
    _check_corpus(candidates, references)
    stats = sum(bleu_stats(c, r, max_n) for c, r in zip(candidates, references))
    return bleu_from_stats(stats, max_n, smoothing)


# ---------------------------------------------------------------- ROUGE-L


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Text, reference: Text, beta: float = 1.0) -> float:
    """LCS F-score in [0, 1]."""
    c, r = _words(candidate), _words(reference)
    if not c or not r:
        raise DegenerateBatchError("ROUGE-L needs non-empty candidate and reference")
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return (1 + beta**2) * p * rec / (rec + beta**2 * p)


def _rouge_stats(candidate: Text, reference: Text, beta: float = 1.0) -> np.ndarray:
    c, r = _words(candidate), _words(reference)
    # an empty candidate scores 0 inside a corpus; an empty reference is an error
    if not r:
        raise DegenerateBatchError("ROUGE-L needs a non-empty reference")
    return np.array([rouge_l(c, r, beta) if c else 0.0, 1.0])


# ---------------------------------------------------------------- TER


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Word-level Levenshtein distance (insert, delete, substitute)."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _shifts(hyp: tuple, ref: tuple, max_phrase: int):
    """All block moves of a hypothesis phrase that also occurs in the reference."""
    ref_phrases = {ref[j : j + n] for n in range(1, max_phrase + 1) for j in range(len(ref) - n + 1)}
    seen = set()
    # longer phrases first, so ties in the greedy search favour longer shifts
    for n in range(min(max_phrase, len(hyp)), 0, -1):
        for i in range(len(hyp) - n + 1):
            phrase = hyp[i : i + n]
            if phrase not in ref_phrases:
                continue
            rest = hyp[:i] + hyp[i + n :]
            for dest in range(len(rest) + 1):
                if dest == i:
                    continue
                moved = rest[:dest] + phrase + rest[dest:]
                if moved not in seen:
                    seen.add(moved)
                    yield moved


def ter_edits_greedy(hyp: Sequence, ref: Sequence, max_phrase: int = 10, max_shifts: int = 50) -> int:
    """Shifts plus edit distance along a greedy shift path.

    Each round applies the shift with the largest edit-distance reduction, as
    long as it reduces the distance at all; ties go to the order sharing more
    bigrams with the reference.  The result is the lowest ``shifts + distance``
    seen on the path (a break-even shift may enable a profitable one later).
    """
    current = tuple(hyp)
    ref = tuple(ref)
    ref_bigrams = _ngrams(ref, 2)
    distance = edit_distance(current, ref)
    shifts = 0
    best_total = distance
    while shifts < max_shifts and distance > 0:
        best, best_key = None, (distance, 0)
        for moved in _shifts(current, ref, max_phrase):
            d = edit_distance(moved, ref)
            if d > best_key[0]:
                continue
            key = (d, -sum((_ngrams(moved, 2) & ref_bigrams).values()))
            if key < best_key:
                best, best_key = moved, key
        if best is None or best_key[0] >= distance:
            break
        best_distance = best_key[0]
        current, distance = best, best_distance
        shifts += 1
        best_total = min(best_total, shifts + distance)
    return best_total


def _bag_bound(hyp: Sequence, ref: Sequence) -> int:
    common = sum((Counter(hyp) & Counter(ref)).values())
    return max(len(hyp), len(ref)) - common


def ter_edits_exact(hyp: Sequence, ref: Sequence, max_phrase: int = 10) -> int:
    """Minimum of shifts + edit distance over all sequences of phrase shifts.

    Breadth-first over word orders; a branch is cut once its shift count plus
    the bag-of-words lower bound cannot beat the best total found.
    """
    start, ref = tuple(hyp), tuple(ref)
    best = edit_distance(start, ref)
    floor = _bag_bound(start, ref)  # shifts never change the bag of words
    seen = {start}
    frontier = deque([(start, 0)])
    while frontier:
        order, depth = frontier.popleft()
        if depth + 1 + floor >= best:
            continue
        for moved in _shifts(order, ref, max_phrase):
            if moved in seen:
                continue
            seen.add(moved)
            best = min(best, depth + 1 + edit_distance(moved, ref))
            frontier.append((moved, depth + 1))
    return best


def ter_stats(candidate: Text, reference: Text, exact_limit: int = 10, exact: bool | None = None) -> np.ndarray:
    c, r = _words(candidate), _words(reference)
    if not r:
        raise DegenerateBatchError("TER needs a non-empty reference")
    use_exact = len(r) <= exact_limit if exact is None else exact
    edits = ter_edits_exact(c, r) if use_exact else ter_edits_greedy(c, r)
    return np.array([edits, len(r)], dtype=float)


def ter(candidate: Text, reference: Text, exact_limit: int = 10) -> float:
    """Translation edit rate in percent; exact search for references up to ``exact_limit`` words."""
    edits, length = ter_stats(candidate, reference, exact_limit)
    return 100.0 * edits / length


def corpus_ter(candidates: Sequence[Text], references: Sequence[Text], exact_limit: int = 10) -> float:
    _check_corpus(candidates, references)
    stats = sum(ter_stats(c, r, exact_limit) for c, r in zip(candidates, references))
    return 100.0 * stats[0] / stats[1]


# ---------------------------------------------------------------- chrF


def _char_ngrams(text: str, n: int) -> Counter:
    s = "".join(text.split())
    return Counter(s[i : i + n] for i in range(len(s) - n + 1))


def chrf_stats(candidate: Text, reference: Text, char_n: int = 6, word_n: int = 0) -> np.ndarray:
    """Per order ``[matches, candidate_count, reference_count]``, characters then words."""
    c = candidate if isinstance(candidate, str) else " ".join(candidate)
    r = reference if isinstance(reference, str) else " ".join(reference)
    rows = []
    for n in range(1, char_n + 1):
        a, b = _char_ngrams(c, n), _char_ngrams(r, n)
        rows.append((sum((a & b).values()), sum(a.values()), sum(b.values())))
    cw, rw = c.split(), r.split()
    for n in range(1, word_n + 1):
        a, b = _ngrams(cw, n), _ngrams(rw, n)
        rows.append((sum((a & b).values()), sum(a.values()), sum(b.values())))
    return np.array(rows, dtype=float).reshape(-1)


def chrf_from_stats(stats: np.ndarray, beta: float = 2.0) -> float:
    rows = stats.reshape(-1, 3)
    # orders with no n-grams on either side carry no evidence and are skipped
    usable = (rows[:, 1] > 0) & (rows[:, 2] > 0)
    if not usable.any():
        return 0.0
    rows = rows[usable]
    precision = float(np.mean(rows[:, 0] / rows[:, 1]))
    recall = float(np.mean(rows[:, 0] / rows[:, 2]))
    if precision + recall == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * precision * recall / (b2 * precision + recall)


def chrf(candidate: Text, reference: Text, char_n: int = 6, word_n: int = 0, beta: float = 2.0) -> float:
    c = candidate if isinstance(candidate, str) else " ".join(candidate)
    r = reference if isinstance(reference, str) else " ".join(reference)
    if not c.strip() or not r.strip():
        raise DegenerateBatchError("chrF needs non-empty candidate and reference")
    return chrf_from_stats(chrf_stats(c, r, char_n, word_n), beta)


def corpus_chrf(candidates, references, char_n: int = 6, word_n: int = 0, beta: float = 2.0) -> float:
    _check_corpus(candidates, references)
    stats = sum(chrf_stats(c, r, char_n, word_n) for c, r in zip(candidates, references))
    return chrf_from_stats(stats, beta)


# ---------------------------------------------------------------- slot accuracy


def slot_answer_accuracy(predictions: Sequence[Text], golds: Sequence[Text], lexicon: SlotLexicon | None = None) -> float:
    """Fraction of pairs whose slot-name sets are equal."""
    _check_corpus(predictions, golds)
    lexicon = lexicon or SlotLexicon.default()
    hits = sum(extract_slot_names(_words(p), lexicon) == extract_slot_names(_words(g), lexicon) for p, g in zip(predictions, golds))
    return hits / len(predictions)


# ---------------------------------------------------------------- metric registry and bootstrap


@dataclass(frozen=True)
class Metric:
    name: str
    sentence_stats: Callable[[Text, Text], np.ndarray]
    corpus_score: Callable[[np.ndarray], float]
    higher_is_better: bool = True

    def stats_matrix(self, candidates, references) -> np.ndarray:
        _check_corpus(candidates, references)
        return np.stack([self.sentence_stats(c, r) for c, r in zip(candidates, references)])

    def score(self, candidates, references) -> float:
        return self.corpus_score(self.stats_matrix(candidates, references).sum(axis=0))


def bleu_metric(max_n: int = 4) -> Metric:
    return Metric(f"bleu{max_n}", lambda c, r: bleu_stats(c, r, max_n), lambda s: bleu_from_stats(s, max_n))


def chrf_metric(char_n: int = 6, word_n: int = 4, beta: float = 2.0) -> Metric:
    return Metric("chrf", lambda c, r: chrf_stats(c, r, char_n, word_n), lambda s: chrf_from_stats(s, beta))


TER_METRIC = Metric("ter", ter_stats, lambda s: 100.0 * s[0] / s[1], higher_is_better=False)
ROUGE_METRIC = Metric("rouge_l", _rouge_stats, lambda s: float(s[0] / s[1]))


def slot_metric(lexicon: SlotLexicon | None = None) -> Metric:
    lexicon = lexicon or SlotLexicon.default()

    def stats(c, r):
        return np.array([float(extract_slot_names(_words(c), lexicon) == extract_slot_names(_words(r), lexicon)), 1.0])

    return Metric("slot_accuracy", stats, lambda s: float(s[0] / s[1]))


def default_metrics(lexicon: SlotLexicon | None = None) -> list[Metric]:
    return [bleu_metric(1), bleu_metric(2), bleu_metric(3), bleu_metric(4), chrf_metric(), TER_METRIC, ROUGE_METRIC, slot_metric(lexicon)]


def _bootstrap_p(stats_a: np.ndarray, stats_b: np.ndarray, score: Callable, resamples: int, seed: int) -> tuple[float, float]:
    full = score(stats_a.sum(axis=0)) - score(stats_b.sum(axis=0))
    if full == 0:
        return 0.0, 1.0
    rng = np.random.default_rng(seed)
    n = stats_a.shape[0]
    flips = 0
    for _ in range(resamples):
        idx = rng.integers(0, n, size=n)
        delta = score(stats_a[idx].sum(axis=0)) - score(stats_b[idx].sum(axis=0))
        # a resample whose delta is zero or of opposite sign does not support the full-corpus ordering
        if delta * full <= 0:
            flips += 1
    return full, flips / resamples


def paired_bootstrap(
    system_a: Sequence[Text],
    system_b: Sequence[Text],
    references: Sequence[Text],
    metric: Metric | str = "bleu4",
    resamples: int = 1000,
    seed: int = 0,
) -> float:
    """Fraction of resampled corpora in which the sign of the score delta flips."""
    if not (len(system_a) == len(system_b) == len(references)):
        raise AlignmentError(f"system sizes {len(system_a)}, {len(system_b)} and reference size {len(references)} differ")
    if resamples < 100:
        raise ConfigError(f"at least 100 resamples are needed, got {resamples}")
    if isinstance(metric, str):
        metric = {m.name: m for m in default_metrics()}[metric]
    stats_a = metric.stats_matrix(system_a, references)
    stats_b = metric.stats_matrix(system_b, references)
    return _bootstrap_p(stats_a, stats_b, metric.corpus_score, resamples, seed)[1]


# ---------------------------------------------------------------- report


@dataclass
class MetricsReport:
    system: str
    scores: dict[str, float]
    sentence_scores: dict[str, list[float]] = field(default_factory=dict)
    comparison: dict | None = None
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "system": self.system,
            "scores": self.scores,
            "sentence_scores": self.sentence_scores,
            "comparison": self.comparison,
            "settings": self.settings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        """One header row and one score row per system, with p-values under the baseline comparison."""
        names = list(self.scores)
        lines = ["system\t" + "\t".join(names), self.system + "\t" + "\t".join(f"{self.scores[n]:.2f}" for n in names)]
        if self.comparison:
            cmp = self.comparison
            lines.append(cmp["baseline"] + "\t" + "\t".join(f"{cmp['scores'][n]:.2f}" for n in names))
            lines.append("p-value\t" + "\t".join(f"{cmp['p_values'][n]:.4f}" for n in names))
        return "\n".join(lines)


def evaluate_corpus(
    candidates: Sequence[Text],
    references: Sequence[Text],
    system: str = "system",
    lexicon: SlotLexicon | None = None,
    baseline: tuple[str, Sequence[Text]] | None = None,
    resamples: int = 1000,
    seed: int = 0,
    metrics: Sequence[Metric] | None = None,
) -> MetricsReport:
    metrics = list(metrics or default_metrics(lexicon))
    scores, sentences, matrices = {}, {}, {}
    for m in metrics:
        mat = m.stats_matrix(candidates, references)
        matrices[m.name] = mat
        scores[m.name] = m.corpus_score(mat.sum(axis=0))
        sentences[m.name] = [m.corpus_score(row) for row in mat]
    comparison = None
    if baseline is not None:
        name, base = baseline
        if len(base) != len(candidates):
            raise AlignmentError(f"baseline has {len(base)} outputs, system has {len(candidates)}")
        base_scores, deltas, p_values = {}, {}, {}
        for m in metrics:
            base_mat = m.stats_matrix(base, references)
            base_scores[m.name] = m.corpus_score(base_mat.sum(axis=0))
            deltas[m.name], p_values[m.name] = _bootstrap_p(matrices[m.name], base_mat, m.corpus_score, resamples, seed)
        comparison = {"baseline": name, "scores": base_scores, "deltas": deltas, "p_values": p_values}
    settings = {
        "bleu_smoothing": "add-epsilon 1e-9 on zero n-gram matches",
        "chrf": {"char_order": 6, "word_order": 4, "beta": 2},
        "ter": "exact shift search for references up to 10 words, greedy shifts beyond",
        "rouge_l_beta": 1.0,
        "bootstrap": {"resamples": resamples, "seed": seed},
    }
    return MetricsReport(system, scores, sentences, comparison, settings)
