"""Generator condition losses.

A condition loss maps the generator's teacher-forced output and the batch memory
to a scalar that is added to the composed generator loss.  The default condition
is the zero function; the POI condition penalizes slot names that are present in
the memory but missing from the prediction (and vice versa) as ``1 - F1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

DEFAULT_SLOT_NAMES = (
    "poitype",
    "poi",
    "poidistance",
    "poiaddress",
    "poitrafficinfo",
    "poievent",
    "poidate",
    "poitime",
    "poiparty",
    "poiagenda",
)

COLON = ":"
SEPARATOR = "|"


class SlotLexicon:
    """Ordered set of slot-name tokens; the order is the canonical memory order."""

    def __init__(self, names: Iterable[str]):
        ordered: list[str] = []
        for name in names:
            name = name.strip()
            if not name:
                continue
            if name != name.lower() or any(ch.isspace() or ch in ":|" for ch in name):
                raise ConfigError(f"slot name {name!r} is not a single lowercase token")
            if name not in ordered:
                ordered.append(name)
        if not ordered:
            raise ConfigError("slot lexicon must not be empty")
        self.names = tuple(ordered)
        self._rank = {n: i for i, n in enumerate(self.names)}

    @classmethod
    def default(cls) -> "SlotLexicon":
        return cls(DEFAULT_SLOT_NAMES)

    @classmethod
    def from_file(cls, path: str | Path) -> "SlotLexicon":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.names) + "\n", encoding="utf-8")

    def __contains__(self, token: object) -> bool:
        return token in self._rank

    def __iter__(self):
        return iter(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def order(self, slots: Iterable[str]) -> list[str]:
        """Lexicon members of ``slots`` in canonical order, deduplicated."""
        return sorted({s for s in slots if s in self._rank}, key=self._rank.__getitem__)


def extract_slot_names(tokens: Sequence[str], lexicon: SlotLexicon, memory: bool = False) -> set[str]:
    """Slot names occurring in a token sequence.

    With ``memory=True`` the sequence is read as ``name : value | name : value``
    and only tokens in name position count.
    """
    found: set[str] = set()
    in_value = False
    for tok in tokens:
        if memory and tok == COLON:
            in_value = True
        elif memory and tok == SEPARATOR:
            in_value = False
        elif not in_value and tok in lexicon:
            found.add(tok)
    return found


def poi_f1(predicted: set, memory: set) -> tuple[float, float, float]:
    tp = len(predicted & memory)
    fp = len(predicted - memory)
    fn = len(memory - predicted)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def poi_loss(predicted_tokens: Sequence[str], memory_tokens: Sequence[str], lexicon: SlotLexicon) -> float:
    """``1 - F1`` between slot names in the prediction and in the memory; 0 for slot-free memory."""
    mem = extract_slot_names(memory_tokens, lexicon, memory=True)
    if not mem:
        return 0.0
    return 1.0 - poi_f1(extract_slot_names(predicted_tokens, lexicon), mem)[2]


def zero_condition(*args, **kwargs) -> float:
    return 0.0


# ---------------------------------------------------------------- batch-level conditions


@dataclass
class ConditionContext:
    """Vocabulary-specific ids a batch-level condition needs."""

    slot_ids: np.ndarray
    colon_id: int
    separator_id: int
    pad_id: int
    eos_id: int
    vocab_size: int

    @classmethod
    def build(cls, vocab, lexicon: SlotLexicon, eos_id: int = 2, pad_id: int = 0) -> "ConditionContext":
        # slot names absent from the vocabulary can never be generated or stored
        ids = np.array([vocab.stoi[s] for s in lexicon if s in vocab.stoi], dtype=np.int64)
        return cls(ids, vocab.stoi.get(COLON, -1), vocab.stoi.get(SEPARATOR, -1), pad_id, eos_id, len(vocab))

    def memory_slots(self, mem_row: np.ndarray, mask_row: np.ndarray) -> np.ndarray:
        """Boolean ``[S]`` presence of each lexicon slot in one memory row (name positions only)."""
        present = np.zeros(len(self.slot_ids), dtype=bool)
        lookup = {int(i): k for k, i in enumerate(self.slot_ids)}
        in_value = False
        for tok, ok in zip(mem_row.tolist(), mask_row.tolist()):
            if not ok:
                break
            if tok == self.colon_id:
                in_value = True
            elif tok == self.separator_id:
                in_value = False
            elif not in_value and tok in lookup:
                present[lookup[tok]] = True
        return present


class ConditionLoss:
    name = "condition"
    differentiable = False

    def __call__(self, logits: Tensor, batch, context: ConditionContext) -> Tensor:
        raise NotImplementedError


class ZeroCondition(ConditionLoss):
    name = "zero"

    def __call__(self, logits: Tensor, batch, context: ConditionContext) -> Tensor:
        return Tensor(0.0)


class PoiCondition(ConditionLoss):
    """Batch mean of ``1 - F1`` over slot-name sets.

    The default reads greedy argmax ids at the teacher-forced positions and
    returns a constant (no gradient).  ``differentiable=True`` replaces each
    slot's presence by its maximum softmax mass over positions, giving a soft F1
    ``2 TP / (|pred| + |mem|)`` that gradients flow through.
    """

    name = "poi"

    def __init__(self, differentiable: bool = False):
        self.differentiable = differentiable

    def memory_matrix(self, batch, context: ConditionContext) -> np.ndarray:
        return np.stack([context.memory_slots(m, k) for m, k in zip(batch.mem, batch.mem_mask)]) if len(batch) else np.zeros((0, len(context.slot_ids)), dtype=bool)

    def __call__(self, logits: Tensor, batch, context: ConditionContext) -> Tensor:
        if batch.mem.shape[1] == 0 or len(context.slot_ids) == 0:
            return Tensor(0.0)
        mem = self.memory_matrix(batch, context)
        if self.differentiable:
            return self._soft(logits, batch, context, mem)
        return Tensor(self._hard(logits.data, batch, context, mem))

    @staticmethod
    def _hard(logits: np.ndarray, batch, context: ConditionContext, mem: np.ndarray) -> float:
        ids = np.argmax(logits, axis=-1)
        losses = []
        for row in range(ids.shape[0]):
            memory = set(np.flatnonzero(mem[row]).tolist())
            if not memory:
                losses.append(0.0)
                continue
            valid = ids[row][batch.tgt_mask[row]]
            predicted = {k for k, sid in enumerate(context.slot_ids) if np.any(valid == sid)}
            losses.append(1.0 - poi_f1(predicted, memory)[2])
        return float(np.mean(losses))

    @staticmethod
    def _soft(logits: Tensor, batch, context: ConditionContext, mem: np.ndarray) -> Tensor:
        select = np.zeros((context.vocab_size, len(context.slot_ids)))
        select[context.slot_ids, np.arange(len(context.slot_ids))] = 1.0
        mass = T.matmul(T.softmax(logits, -1), select)  # [B, T, S]
        mass = T.masked_fill(mass, batch.tgt_mask[:, :, None], 0.0)
        presence = T.tmax(mass, axis=1)  # [B, S]
        mem_f = mem.astype(float)
        size = mem_f.sum(axis=1)
        active = (size > 0).astype(float)
        tp = T.tsum(presence * mem_f, axis=1)
        denominator = T.tsum(presence, axis=1) + (size + (1.0 - active))
        f1 = tp * 2.0 / denominator
        return T.mean((1.0 - f1) * active)


CONDITIONS = {"zero": ZeroCondition, "poi": PoiCondition}


def make_condition(name: str, differentiable: bool = False) -> ConditionLoss:
    if name == "poi":
        return PoiCondition(differentiable)
    if name == "zero":
        return ZeroCondition()
    raise ConfigError(f"unknown condition loss {name!r}; known: {sorted(CONDITIONS)}")
