"""Three-stage factual question answering: slot detection, knowledge-base
resolution, slot mapping and slot filling."""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

from .conditions import SlotLexicon
from .data import SUPERLATIVES, KnowledgeBase, memory_from_entry, tokenize
from .errors import AlignmentError, CompatibilityError, QueryError, ResolutionError
from .training import generate_texts
from .transformer import MemoryAugmentedTransformer

EQUALS = "equals"
SUPERLATIVE = "superlative"
FALLBACK_ANSWER = "sorry , i could not find that information"

_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


@dataclass(frozen=True)
class Constraint:
    slot: str
    comparator: str
    operand: str


@dataclass(frozen=True)
class KbQuery:
    constraints: tuple[Constraint, ...]

    def __post_init__(self) -> None:
        if not self.constraints:
            raise QueryError("a query needs at least one constraint")

    def to_dict(self) -> dict:
        return {"constraints": [[c.slot, c.comparator, c.operand] for c in self.constraints]}


def construct_kb_query(
    attenuated_utterance: str | Sequence[str],
    alignment: Sequence[tuple[str, str]] | Mapping[str, str],
    lexicon: SlotLexicon | None = None,
    superlatives: Mapping[str, str] = SUPERLATIVES,
) -> KbQuery:
    """One constraint per aligned (source phrase, slot) pair, in lexicon order.

    Superlative source words become superlative constraints; everything else
    is an equality on the slot's value.
    """
    lexicon = lexicon or SlotLexicon.default()
    pairs = list(alignment.items()) if isinstance(alignment, Mapping) else list(alignment)
    if not pairs:
        raise QueryError("the question has no resolvable slots")
    constraints = []
    for phrase, slot in pairs:
        if slot not in lexicon:
            raise QueryError(f"aligned slot {slot!r} is not in the slot lexicon")
        phrase = " ".join(tokenize(phrase))
        comparator = SUPERLATIVE if phrase in superlatives else EQUALS
        constraint = Constraint(slot, comparator, phrase)
        if constraint not in constraints:
            constraints.append(constraint)
    rank = {s: i for i, s in enumerate(lexicon.names)}
    constraints.sort(key=lambda c: rank[c.slot])
    return KbQuery(tuple(constraints))


def _sort_key(value: str):
    match = _NUMBER.search(value)
    # numeric values (units stripped) order before non-numeric ones
    return (0, float(match.group()), value) if match else (1, 0.0, value)


def resolve_query(query: KbQuery, kb: KnowledgeBase, lexicon: SlotLexicon | None = None) -> list[str]:
    """``name:value`` items of the entry selected by the query.

    Equality constraints filter entries; a superlative constraint then picks
    the entry with the smallest value of its slot (numeric where parseable).
    Among several remaining entries the first listed one wins.
    """
    lexicon = lexicon or SlotLexicon.default()
    candidates = list(kb.entries)
    for c in query.constraints:
        if c.comparator == EQUALS:
            candidates = [e for e in candidates if c.slot in e and " ".join(tokenize(e[c.slot])) == c.operand]
    for c in query.constraints:
        if c.comparator == SUPERLATIVE:
            candidates = [e for e in candidates if c.slot in e]
            if candidates:
                candidates = [min(candidates, key=lambda e: _sort_key(e[c.slot]))]
    if not candidates:
        raise ResolutionError(f"no entry of scenario {kb.scenario} satisfies {query.to_dict()['constraints']}")
    return list(memory_from_entry(candidates[0], lexicon))


def parse_memory_items(items: Sequence[str]) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for item in items:
        name, sep, value = item.partition(":")
        if sep:
            out[name.strip()] = tokenize(value)
    return out


class FillResult(NamedTuple):
    text: str
    missing: int


def fill_slots_deterministic(template: str | Sequence[str], memory_items: Sequence[str], lexicon: SlotLexicon | None = None) -> FillResult:
    """Replace every slot token by its memory value; unknown slots stay and are counted."""
    lexicon = lexicon or SlotLexicon.default()
    tokens = template.split() if isinstance(template, str) else list(template)
    values = parse_memory_items(memory_items)
    out: list[str] = []
    missing = 0
    for tok in tokens:
        if tok in values:
            out.extend(values[tok])
        else:
            if tok in lexicon:
                missing += 1
            out.append(tok)
    return FillResult(" ".join(out), missing)


def _segment(span: list[str], slots: list[str], known: Mapping[str, set[str]]) -> list[tuple[str, str]] | None:
    """Split ``span`` into consecutive phrases, one per slot, each a known value of its slot."""
    if not slots:
        return [] if not span else None
    for cut in range(1, len(span) - len(slots) + 2):
        phrase = " ".join(span[:cut])
        if phrase in known.get(slots[0], set()):
            rest = _segment(span[cut:], slots[1:], known)
            if rest is not None:
                return [(phrase, slots[0])] + rest
    return None


def recover_alignment(
    question: str,
    stage1_output: str,
    kb: KnowledgeBase | None = None,
    lexicon: SlotLexicon | None = None,
    superlatives: Mapping[str, str] = SUPERLATIVES,
) -> list[tuple[str, str]]:
    """Align slot tokens of the stage-1 output to phrases of the question.

    Token-level diff: each replaced block whose output side is a single slot
    token maps that slot to the whole input span; blocks with several slots are
    split using the knowledge base's values and the superlative table.
    """
    lexicon = lexicon or SlotLexicon.default()
    src, out = tokenize(question), stage1_output.split()
    known: dict[str, set[str]] = {}
    if kb is not None:
        for slot, values in kb.slot_values().items():
            known.setdefault(slot, set()).update(" ".join(tokenize(v)) for v in values)
    for word, slot in superlatives.items():
        known.setdefault(slot, set()).add(word)
    alignment: list[tuple[str, str]] = []
    matcher = difflib.SequenceMatcher(a=src, b=out, autojunk=False)
    for op, i1, i2, j1, j2 in matcher.get_opcodes():
        if op not in ("replace", "insert"):
            continue
        slots = [t for t in out[j1:j2] if t in lexicon]
        if not slots:
            continue
        if len(slots) != j2 - j1:
            raise AlignmentError(f"stage-1 block {' '.join(out[j1:j2])!r} mixes slot names and words")
        span = src[i1:i2]
        if not span:
            raise AlignmentError(f"slot {slots[0]} has no source phrase in the question")
        if len(slots) == 1:
            alignment.append((" ".join(span), slots[0]))
            continue
        pieces = _segment(span, slots, known)
        if pieces is None:
            raise AlignmentError(f"cannot split {' '.join(span)!r} over slots {slots}")
        alignment.extend(pieces)
    return alignment


@dataclass
class StageModels:
    stage1: MemoryAugmentedTransformer
    stage2: MemoryAugmentedTransformer
    stage3: MemoryAugmentedTransformer
    vocab: object

    def __post_init__(self) -> None:
        sizes = {m.config.vocab_size for m in (self.stage1, self.stage2, self.stage3)}
        if sizes != {len(self.vocab)}:
            raise CompatibilityError("the three stage models must share one vocabulary")


@dataclass
class PipelineResult:
    question: str
    answer: str
    artifacts: list[dict] = field(default_factory=list)
    error: dict | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return {"question": self.question, "answer": self.answer, "artifacts": self.artifacts, "error": self.error}


def run_three_stage(
    question: str,
    kb: KnowledgeBase,
    models: StageModels,
    lexicon: SlotLexicon | None = None,
    superlatives: Mapping[str, str] = SUPERLATIVES,
    max_len: int | None = None,
) -> PipelineResult:
    """Detect slots, resolve the knowledge-base query, map and fill the answer.

    Query, alignment and resolution failures end the run with a fallback
    answer and the error recorded in the trace.
    """
    lexicon = lexicon or SlotLexicon.default()
    result = PipelineResult(question, FALLBACK_ANSWER)
    vocab = models.vocab

    def generate(model, text: str, memory: Sequence[str]) -> str:
        return generate_texts(model, vocab, [text], [list(memory)], max_len)[0]

    stage1 = generate(models.stage1, question, [])
    result.artifacts.append({"name": "stage1", "output": stage1})
    try:
        alignment = recover_alignment(question, stage1, kb, lexicon, superlatives)
        query = construct_kb_query(stage1, alignment, lexicon, superlatives)
        result.artifacts.append({"name": "query", "alignment": [list(p) for p in alignment], **query.to_dict()})
        resolved = resolve_query(query, kb, lexicon)
    except (AlignmentError, QueryError, ResolutionError) as exc:
        result.error = {"type": type(exc).__name__, "message": str(exc)}
        return result
    result.artifacts.append({"name": "resolution", "memory": resolved})
    emphasis = lexicon.order(stage1.split())
    stage2 = generate(models.stage2, stage1, emphasis)
    result.artifacts.append({"name": "stage2", "memory": emphasis, "output": stage2})
    answer = generate(models.stage3, stage2, resolved)
    result.artifacts.append({"name": "stage3", "memory": resolved, "output": answer})
    result.answer = answer
    return result
