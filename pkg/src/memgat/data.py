"""Corpus ingestion: tokenization, vocabulary, knowledge bases, slot attenuation,
three-stage dataset construction, the style corpus, splitting and batching."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .conditions import SlotLexicon
from .errors import ConfigError, IngestionError
from .transformer import pad_sequences

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
MEMORY_SEPARATOR = "|"
STAGES = ("1", "2", "3", "style")

GENDERS = ("female", "male")
AGES = ("young", "middle-aged", "elderly")

SUPERLATIVES = {
    "fastest": "poidistance",
    "quickest": "poidistance",
    "nearest": "poidistance",
    "closest": "poidistance",
    "shortest": "poidistance",
}

_TOKEN_RE = re.compile(r"[\w'\-]+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split off punctuation, split on whitespace."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


def memory_tokens(items: Sequence[str]) -> list[str]:
    """Tokens for a memory list: each item tokenized, items joined by the separator."""
    out: list[str] = []
    for i, item in enumerate(items):
        if i:
            out.append(MEMORY_SEPARATOR)
        out.extend(tokenize(item))
    return out


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class DialogueTurn:
    input_text: str
    memory_items: tuple[str, ...]
    target_text: str
    stage: str
    scenario: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "memory_items", tuple(self.memory_items))
        if self.stage not in STAGES:
            raise IngestionError(f"unknown stage tag {self.stage!r}")
        if self.stage == "1" and self.memory_items:
            raise IngestionError("stage 1 turns carry an empty memory")
        if self.stage == "3" and any(":" not in item for item in self.memory_items):
            raise IngestionError(f"stage 3 memory items must be name:value, got {self.memory_items}")

    def to_record(self) -> dict:
        return {
            "input": self.input_text,
            "memory": list(self.memory_items),
            "target": self.target_text,
            "stage": self.stage,
            "scenario": self.scenario,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "DialogueTurn":
        return cls(rec["input"], tuple(rec.get("memory") or ()), rec["target"], str(rec["stage"]), rec.get("scenario"))

    def ablated(self) -> "DialogueTurn":
        return DialogueTurn(self.input_text, (), self.target_text, self.stage, self.scenario)


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                yield index, json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}: record {index} is not valid JSON ({exc.msg})") from exc


def write_jsonl(path: str | Path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_turns(path: str | Path) -> list[DialogueTurn]:
    turns = []
    for index, rec in read_jsonl(path):
        try:
            turns.append(DialogueTurn.from_record(rec))
        except (KeyError, TypeError, IngestionError) as exc:
            raise IngestionError(f"{path}: record {index} is malformed: {exc}") from exc
    return turns


def write_turns(path: str | Path, turns: Iterable[DialogueTurn]) -> None:
    write_jsonl(path, (t.to_record() for t in turns))


# ---------------------------------------------------------------- knowledge base


@dataclass
class KnowledgeBase:
    """Entries of one dialogue scenario, each a slot -> value association."""

    scenario: str
    entries: list[dict[str, str]] = field(default_factory=list)

    def validate(self, lexicon: SlotLexicon) -> None:
        for i, entry in enumerate(self.entries):
            for slot, value in entry.items():
                if slot not in lexicon:
                    raise IngestionError(f"scenario {self.scenario}: entry {i} uses unknown slot {slot!r}")
                if not str(value).strip():
                    raise IngestionError(f"scenario {self.scenario}: entry {i} has an empty value for {slot}")

    def slot_values(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for entry in self.entries:
            for slot, value in entry.items():
                bucket = out.setdefault(slot, [])
                if value not in bucket:
                    bucket.append(value)
        return out

    def to_record(self) -> dict:
        return {"scenario": self.scenario, "entries": self.entries}


def load_knowledge_bases(path: str | Path, lexicon: SlotLexicon | None = None) -> dict[str, KnowledgeBase]:
    lexicon = lexicon or SlotLexicon.default()
    kbs: dict[str, KnowledgeBase] = {}
    for index, rec in read_jsonl(path):
        try:
            kb = KnowledgeBase(str(rec["scenario"]), [dict((str(k), str(v)) for k, v in e.items()) for e in rec["entries"]])
        except (KeyError, TypeError, AttributeError) as exc:
            raise IngestionError(f"{path}: knowledge-base record {index} is malformed: {exc}") from exc
        kb.validate(lexicon)
        kbs[kb.scenario] = kb
    return kbs


# ---------------------------------------------------------------- attenuation


@dataclass
class Attenuation:
    text: str
    alignment: list[tuple[str, str]]

    @property
    def tokens(self) -> list[str]:
        return self.text.split()

    def as_dict(self) -> dict[str, str]:
        return dict(self.alignment)

    def slots(self) -> list[str]:
        seen: list[str] = []
        for _, slot in self.alignment:
            if slot not in seen:
                seen.append(slot)
        return seen


def _phrase_table(kb, keywords: Mapping[str, str] | None) -> dict[tuple[str, ...], str]:
    if isinstance(kb, KnowledgeBase):
        slot_values = kb.slot_values()
    else:
        slot_values = {slot: [vals] if isinstance(vals, str) else list(vals) for slot, vals in kb.items()}
    table: dict[tuple[str, ...], str] = {}
    pairs = [(value, slot) for slot, values in slot_values.items() for value in values]
    pairs += [(word, slot) for word, slot in (keywords or {}).items()]
    for value, slot in pairs:
        key = tuple(tokenize(value))
        if not key:
            continue
        # ties between slots resolve alphabetically
        if key not in table or slot < table[key]:
            table[key] = slot
    return table


def attenuate(utterance: str, kb, keywords: Mapping[str, str] | None = None) -> Attenuation:
    """Replace knowledge-base value phrases by their slot names, longest match first.

    ``kb`` is a :class:`KnowledgeBase` or a mapping slot -> value(s);
    ``keywords`` adds phrase -> slot pairs such as superlatives.
    """
    table = _phrase_table(kb, keywords)
    longest = max((len(k) for k in table), default=0)
    tokens = tokenize(utterance)
    out: list[str] = []
    alignment: list[tuple[str, str]] = []
    i = 0
    while i < len(tokens):
        for width in range(min(longest, len(tokens) - i), 0, -1):
            slot = table.get(tuple(tokens[i : i + width]))
            if slot is not None:
                out.append(slot)
                alignment.append((" ".join(tokens[i : i + width]), slot))
                i += width
                break
        else:
            out.append(tokens[i])
            i += 1
    return Attenuation(" ".join(out), alignment)


# ---------------------------------------------------------------- stage datasets


@dataclass
class DataQualityReport:
    dialogues: int = 0
    turns: int = 0
    missing_kb: int = 0
    unmatched_questions: int = 0
    unmatched_answers: int = 0
    unfillable_templates: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StageDatasets:
    stage1: list[DialogueTurn]
    stage2: list[DialogueTurn]
    stage3: list[DialogueTurn]
    report: DataQualityReport

    def by_stage(self) -> dict[str, list[DialogueTurn]]:
        return {"1": self.stage1, "2": self.stage2, "3": self.stage3}


def _unique_sorted(turns: Iterable[DialogueTurn]) -> list[DialogueTurn]:
    unique = {(t.input_text, t.memory_items, t.target_text): t for t in turns}
    return [unique[k] for k in sorted(unique)]


def memory_from_entry(entry: Mapping[str, str], lexicon: SlotLexicon) -> tuple[str, ...]:
    """``name:value`` items of an entry in lexicon order."""
    return tuple(f"{slot}:{entry[slot]}" for slot in lexicon.order(entry))


def build_stage_datasets(
    dialogues: Sequence[Mapping],
    kbs: Mapping[str, KnowledgeBase],
    lexicon: SlotLexicon | None = None,
    keywords: Mapping[str, str] | None = None,
) -> StageDatasets:
    """Derive the slot-detection, slot-mapping and slot-filling datasets.

    Each dialogue record is ``{"scenario": id, "turns": [{"user", "assistant",
    optional "kb_entry"}]}``.  A turn whose question aligns no slot (or whose
    scenario has no knowledge base) becomes an identity stage-1 row only.
    """
    lexicon = lexicon or SlotLexicon.default()
    keywords = SUPERLATIVES if keywords is None else keywords
    report = DataQualityReport(dialogues=len(dialogues))
    s1: list[DialogueTurn] = []
    s2: list[DialogueTurn] = []
    s3: list[DialogueTurn] = []
    for index, dialogue in enumerate(dialogues):
        try:
            scenario = str(dialogue["scenario"])
            turns = list(dialogue["turns"])
            pairs = [(str(t["user"]), str(t["assistant"]), t.get("kb_entry")) for t in turns]
        except (KeyError, TypeError, AttributeError) as exc:
            raise IngestionError(f"dialogue record {index} is malformed: {exc}") from exc
        kb = kbs.get(scenario)
        if kb is None or not kb.entries:
            report.missing_kb += 1
        for user, assistant, entry in pairs:
            report.turns += 1
            question = normalize(user)
            if kb is None or not kb.entries:
                s1.append(DialogueTurn(question, (), question, "1", scenario))
                continue
            q = attenuate(user, kb, keywords)
            s1.append(DialogueTurn(question, (), q.text, "1", scenario))
            if not q.alignment:
                report.unmatched_questions += 1
                continue
            a = attenuate(assistant, kb)
            if not a.alignment:
                report.unmatched_answers += 1
            if entry is not None:
                facts = {str(k): str(v) for k, v in entry.items()}
            else:
                facts = {slot: value for value, slot in q.alignment + a.alignment if value not in keywords}
            memory3 = memory_from_entry(facts, lexicon)
            if any(tok in lexicon and tok not in facts for tok in a.tokens):
                report.unfillable_templates += 1
            s2.append(DialogueTurn(q.text, tuple(lexicon.order(q.slots())), a.text, "2", scenario))
            s3.append(DialogueTurn(a.text, memory3, normalize(assistant), "3", scenario))
    return StageDatasets(_unique_sorted(s1), _unique_sorted(s2), _unique_sorted(s3), report)


def load_style_corpus(path: str | Path) -> list[DialogueTurn]:
    """Profile-conditioned turns: ``{"question", "gender", "age", "answer"}`` per line."""
    turns = []
    for index, rec in read_jsonl(path):
        try:
            question, answer = rec["question"], rec["answer"]
            gender, age = rec["gender"], rec["age"]
        except (KeyError, TypeError) as exc:
            raise IngestionError(f"{path}: style record {index} lacks field {exc}") from exc
        if gender not in GENDERS or age not in AGES:
            raise IngestionError(f"{path}: style record {index} has unknown profile ({gender!r}, {age!r})")
        turns.append(DialogueTurn(normalize(question), (gender, age), normalize(answer), "style", rec.get("scenario")))
    return turns


def split_train_test(dataset: Sequence, test_fraction: float = 0.2, seed: int = 0) -> tuple[list, list]:
    """Fixed random partition; ``round(test_fraction * N)`` items go to the test side."""
    n = len(dataset)
    if n < 5:
        raise ConfigError(f"dataset of size {n} is too small to split (need at least 5)")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(np.floor(test_fraction * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(order[:n_test].tolist())
    train = [item for i, item in enumerate(dataset) if i not in test_idx]
    test = [item for i, item in enumerate(dataset) if i in test_idx]
    return train, test


# ---------------------------------------------------------------- vocabulary and batching


class Vocabulary:
    """Token <-> id bijection with reserved ids 0..3 for pad, bos, eos, unk."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str], stats: "EncodingStats | None" = None) -> list[int]:
        ids = []
        for tok in tokens:
            i = self.stoi.get(tok, UNK)
            if i == UNK and stats is not None:
                stats.unknown += 1
            ids.append(i)
        return ids

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if skip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    @classmethod
    def build(cls, turns: Iterable[DialogueTurn]) -> "Vocabulary":
        counts: Counter[str] = Counter()
        for t in turns:
            counts.update(tokenize(t.input_text))
            counts.update(tokenize(t.target_text))
            counts.update(memory_tokens(t.memory_items))
        # frequency order, ties alphabetical, so the bijection is reproducible
        return cls(tok for tok, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise IngestionError("vocabulary must start with the reserved tokens <pad> <bos> <eos> <unk>")
        vocab = cls()
        for tok in tokens[len(SPECIAL_TOKENS):]:
            if tok in vocab:
                raise IngestionError(f"duplicate vocabulary token {tok!r}")
            vocab.add(tok)
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.itos, indent=0), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_list(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class EncodingStats:
    unknown: int = 0
    truncated: int = 0


@dataclass
class EncodedTurn:
    input_ids: list[int]
    memory_ids: list[int]
    target_ids: list[int]


def encode_turn(turn: DialogueTurn, vocab: Vocabulary, config, stats: EncodingStats | None = None) -> EncodedTurn:
    """Token ids for one turn; the target is wrapped in bos/eos and fits ``max_seq_len``."""
    stats = stats if stats is not None else EncodingStats()
    src = vocab.encode(tokenize(turn.input_text), stats)
    mem = vocab.encode(memory_tokens(turn.memory_items), stats)
    tgt = vocab.encode(tokenize(turn.target_text), stats)
    limits = ((src, config.max_seq_len), (mem, config.max_memory_len), (tgt, config.max_seq_len - 1))
    for seq, limit in limits:
        if len(seq) > limit:
            stats.truncated += 1
            log.warning("truncating sequence of length %d to %d", len(seq), limit)
            del seq[limit:]
    return EncodedTurn(src, mem, [config.bos_id] + tgt + [config.eos_id])


@dataclass
class Batch:
    src: np.ndarray
    src_mask: np.ndarray
    mem: np.ndarray
    mem_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_mask: np.ndarray

    def __len__(self) -> int:
        return self.src.shape[0]


def collate(encoded: Sequence[EncodedTurn], pad_id: int = PAD) -> Batch:
    src, src_mask = pad_sequences([e.input_ids for e in encoded], pad_id)
    mem, mem_mask = pad_sequences([e.memory_ids for e in encoded], pad_id)
    tgt_in, tgt_mask = pad_sequences([e.target_ids[:-1] for e in encoded], pad_id)
    tgt_out, _ = pad_sequences([e.target_ids[1:] for e in encoded], pad_id)
    return Batch(src, src_mask, mem, mem_mask, tgt_in, tgt_out, tgt_mask)
