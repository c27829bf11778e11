"""Self-verification: gradient checks, metric and POI oracles, empty-memory equivalence."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .conditions import SlotLexicon, poi_loss
from .data import EncodedTurn, collate
from .evaluation import bleu, chrf, rouge_l, ter, ter_edits_exact, ter_edits_greedy
from .tensor import Tensor, finite_difference_check
from .transformer import MemoryAugmentedTransformer, ModelConfig

FD_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


def primitive_cases(seed: int = 1234) -> dict[str, Callable[[], tuple[Callable, list[Tensor]]]]:
    """One scalar-valued probe per registered primitive."""
    rng = np.random.default_rng(seed)
    P = Tensor.parameter

    def normal(*shape):
        return P(rng.normal(size=shape))

    def positive(*shape):
        return P(rng.uniform(0.5, 2.0, size=shape))

    w = lambda *shape: Tensor(np.arange(float(np.prod(shape))).reshape(shape))  # noqa: E731
    return {
        "add": lambda: (lambda a, b: (a + b).sum() * 1.5, [normal(2, 3), normal(3)]),
        "sub": lambda: (lambda a, b: ((a - b) ** 2).sum(), [normal(2, 3), normal(1, 3)]),
        "mul": lambda: (lambda a, b: (a * b).sum(), [normal(2, 3), normal(2, 1)]),
        "div": lambda: (lambda a, b: (a / b).sum(), [normal(2, 3), positive(3)]),
        "neg": lambda: (lambda a: (-a * a).sum(), [normal(3)]),
        "power": lambda: (lambda a: (a**3.0).sum(), [normal(3)]),
        "exp": lambda: (lambda a: a.exp().sum(), [normal(2, 2)]),
        "log": lambda: (lambda a: a.log().sum(), [positive(2, 2)]),
        "relu": lambda: (lambda a: (a.relu() * a).sum(), [P(np.array([-1.3, -0.4, 0.6, 1.7]))]),
        "sigmoid": lambda: (lambda a: a.sigmoid().sum(), [P(rng.normal(size=4) * 3)]),
        "clip": lambda: (lambda a: (T.clip(a, -0.5, 0.5) ** 2).sum(), [P(np.array([-0.9, -0.2, 0.3, 0.8]))]),
        "masked_fill": lambda: (lambda a: (T.masked_fill(a, np.array([[True, False, True]]), -3.0) ** 2).sum(), [normal(2, 3)]),
        "sum": lambda: (lambda a: (a.sum(axis=1) ** 2).sum(), [normal(2, 3)]),
        "max": lambda: (lambda a: (a.max(axis=0) ** 2).sum(), [P(np.array([[1.0, -2.0], [0.3, 4.0], [-1.0, 0.5]]))]),
        "reshape": lambda: (lambda a: (a.reshape(3, 2) ** 2 * w(3, 2)).sum(), [normal(2, 3)]),
        "transpose": lambda: (lambda a: (a.transpose(1, 0) * w(3, 2)).sum(), [normal(2, 3)]),
        "matmul": lambda: (lambda a, b: (T.matmul(a, b) ** 2).sum(), [normal(2, 2, 3), normal(3, 4)]),
        "softmax": lambda: (lambda a: (T.softmax(a, -1) * w(2, 4)).sum(), [normal(2, 4)]),
        "log_softmax": lambda: (lambda a: (T.log_softmax(a, 0) * w(2, 4)).sum(), [normal(2, 4)]),
        "layer_norm": lambda: (lambda x, g, b: (T.layer_norm(x, g, b, 1e-5) * w(2, 5)).sum(), [normal(2, 5), normal(5), normal(5)]),
        "embedding_lookup": lambda: (lambda t: (T.embedding_lookup(t, [[1, 3, 1]]) ** 2).sum(), [normal(4, 3)]),
        "cross_entropy": lambda: (lambda z: T.cross_entropy(z, [[2, 0, 4]], pad_id=0), [normal(1, 3, 5)]),
    }


def check_primitives(eps: float = 1e-5) -> list[CheckResult]:
    cases = primitive_cases()
    results = []
    for name in sorted(T.GRAD_RULES):
        if name not in cases:
            results.append(CheckResult(f"gradient {name}", False, "no probe registered"))
            continue
        fn, params = cases[name]()
        try:
            err = finite_difference_check(lambda: fn(*params), params, eps=eps)
        except Exception as exc:  # a broken rule may also crash outright
            results.append(CheckResult(f"gradient {name}", False, f"{type(exc).__name__}: {exc}"))
            continue
        results.append(CheckResult(f"gradient {name}", err < FD_TOLERANCE, f"max relative error {err:.2e}"))
    return results


def small_generator(seed: int = 7) -> MemoryAugmentedTransformer:
    return MemoryAugmentedTransformer(ModelConfig(vocab_size=20, d_model=8, num_heads=2, num_layers=1, max_seq_len=16, max_memory_len=16), seed=seed)


def check_model_gradient(eps: float = 1e-5) -> CheckResult:
    model = small_generator()
    batch = collate([EncodedTurn([4, 5, 6], [7, 8], [1, 9, 10, 2]), EncodedTurn([11, 12], [], [1, 13, 2])])
    err = finite_difference_check(lambda: T.cross_entropy(model.forward(batch), batch.tgt_out, 0), model.params, eps=eps)
    return CheckResult("gradient full generator", err < FD_TOLERANCE, f"max relative error {err:.2e}")


def check_metric_oracles() -> list[CheckResult]:
    cases = [
        ("bleu-1 brevity", bleu(["the cat"], ["the cat sat"], max_n=1), 100 * np.exp(1 - 1.5)),
        ("rouge-l lcs", rouge_l("a b c", "a c"), 0.8),
        ("ter substitution", ter("a b x d", "a b c d"), 25.0),
        ("ter empty candidate", ter("", "a b c"), 100.0),
        ("chrf unigram", chrf("abc", "abd", char_n=1), 200 / 3),
    ]
    out = [CheckResult(f"metric {n}", abs(got - want) < 1e-4, f"{got:.6f} vs {want:.6f}") for n, got, want in cases]
    rng = np.random.default_rng(0)
    vocab = list("abcdef")
    mismatches = 0
    for _ in range(100):
        ref = list(rng.choice(vocab, size=int(rng.integers(1, 7))))
        hyp = list(rng.choice(vocab, size=int(rng.integers(0, 7))))
        mismatches += ter_edits_greedy(hyp, ref) != ter_edits_exact(hyp, ref)
    out.append(CheckResult("metric ter greedy vs exact", mismatches == 0, f"{mismatches}/100 mismatches"))
    return out


def _brute_poi(pred: set, mem: set) -> float:
    if not mem:
        return 0.0
    tp = sum(1 for s in pred if s in mem)
    if tp == 0:
        return 1.0
    p, r = tp / len(pred), tp / len(mem)
    return 1.0 - 2 * p * r / (p + r)


def check_poi_oracle(pairs: int = 200) -> CheckResult:
    lexicon = SlotLexicon.default()
    names = list(lexicon.names)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(pairs):
        pred = {n for n in names if rng.random() < 0.3}
        mem = {n for n in names if rng.random() < 0.3}
        pred_tokens = list(itertools.chain.from_iterable(["the", n] for n in sorted(pred)))
        mem_tokens = list(itertools.chain.from_iterable([n, ":", "x", "|"] for n in sorted(mem)))[:-1]
        worst = max(worst, abs(poi_loss(pred_tokens, mem_tokens, lexicon) - _brute_poi(pred, mem)))
    return CheckResult("poi loss oracle", worst <= 1e-12, f"max deviation {worst:.1e} over {pairs} pairs")


def check_empty_memory(inputs: int = 100) -> CheckResult:
    model = small_generator(seed=3)
    bare = model.without_memory_branch()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(inputs):
        ids = rng.integers(3, 20, size=int(rng.integers(1, 12))).tolist()
        worst = max(worst, float(np.max(np.abs(model.encode(ids, []).data - bare.encode(ids).data))))
    return CheckResult("empty-memory equivalence", worst <= 1e-9, f"max deviation {worst:.1e} over {inputs} inputs")


def run_selfcheck() -> list[CheckResult]:
    start = time.perf_counter()
    results = check_primitives()
    results.append(check_model_gradient())
    results.extend(check_metric_oracles())
    results.append(check_poi_oracle())
    results.append(check_empty_memory())
    results.append(CheckResult("runtime", True, f"{time.perf_counter() - start:.1f} s"))
    return results
