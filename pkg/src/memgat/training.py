"""Run configuration, dataset encoding, training runs and greedy inference on text."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .adversarial import GatConfig, GatModel, fit
from .conditions import ConditionContext, SlotLexicon
from .data import (
    Batch,
    DialogueTurn,
    EncodedTurn,
    EncodingStats,
    Vocabulary,
    collate,
    encode_turn,
    memory_tokens,
    read_turns,
    split_train_test,
    tokenize,
)
from .errors import CompatibilityError, ConfigError, IngestionError
from .transformer import MemoryAugmentedTransformer, ModelConfig, load_checkpoint

log = logging.getLogger(__name__)

TASK_STAGES = {"car-stage1": "1", "car-stage2": "2", "car-stage3": "3", "style": "style"}


@dataclass
class RunConfig:
    task: str
    train_path: str
    output_dir: str
    test_path: str | None = None
    lexicon_path: str | None = None
    model: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    standard_weight: float = 1.0
    adversarial_weight: float = 0.0
    conditions: list[str] = field(default_factory=list)
    condition_weights: list[float] | None = None
    differentiable_conditions: bool = False
    saturating_generator_loss: bool = False
    discriminator_layers: int | None = None
    epochs: int = 200
    batch_size: int = 8
    max_steps: int | None = None
    validation_fraction: float = 0.1
    seed: int = 0
    ablate_memory: bool = False

    def __post_init__(self) -> None:
        if self.task not in TASK_STAGES:
            raise ConfigError(f"task: unknown task {self.task!r}; expected one of {sorted(TASK_STAGES)}")
        for name in ("train_path", "test_path", "lexicon_path"):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{name}: path {value} does not exist")
        for name in ("standard_weight", "adversarial_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be nonnegative, got {getattr(self, name)}")
        if self.condition_weights is not None:
            if len(self.condition_weights) != len(self.conditions):
                raise ConfigError("condition_weights: needs one weight per condition")
            if any(w < 0 for w in self.condition_weights):
                raise ConfigError("condition_weights: must be nonnegative")
        if self.epochs <= 0:
            raise ConfigError("epochs: must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size: must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction: must lie in [0, 1)")
        unknown_opt = set(self.optimizer) - {"generator_lr", "discriminator_lr", "beta1", "beta2", "adam_epsilon", "max_grad_norm"}
        if unknown_opt:
            raise ConfigError(f"optimizer: unknown fields {sorted(unknown_opt)}")
        unknown_model = set(self.model) - ({f.name for f in fields(ModelConfig)} - {"vocab_size"})
        if unknown_model:
            raise ConfigError(f"model: unknown fields {sorted(unknown_model)}")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown run config field")
        missing = [n for n in ("task", "train_path", "output_dir") if n not in data]
        if missing:
            raise ConfigError(f"{missing[0]}: required run config field is missing")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        """Read YAML (or JSON, which YAML accepts); relative paths resolve against the file."""
        path = Path(path)
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping of run config fields")
        for key in ("train_path", "test_path", "lexicon_path", "output_dir"):
            if data.get(key) is not None and not Path(data[key]).is_absolute():
                data[key] = str(path.parent / data[key])
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def gat_config(self) -> GatConfig:
        return GatConfig(
            standard_weight=self.standard_weight,
            adversarial_weight=self.adversarial_weight,
            conditions=list(self.conditions),
            condition_weights=None if self.condition_weights is None else list(self.condition_weights),
            differentiable_conditions=self.differentiable_conditions,
            saturating_generator_loss=self.saturating_generator_loss,
            discriminator_layers=self.discriminator_layers,
            **self.optimizer,
        )

    def lexicon(self) -> SlotLexicon:
        return SlotLexicon.from_file(self.lexicon_path) if self.lexicon_path else SlotLexicon.default()


def encode_turns(turns: Sequence[DialogueTurn], vocab: Vocabulary, config: ModelConfig, stats: EncodingStats | None = None) -> list[EncodedTurn]:
    stats = stats if stats is not None else EncodingStats()
    return [encode_turn(t, vocab, config, stats) for t in turns]


def batch_maker(encoded: Sequence[EncodedTurn], batch_size: int, pad_id: int = 0, shuffle: bool = True):
    """``make_batches(rng)`` for :func:`fit`: a fresh permutation per epoch."""

    def make(rng: np.random.Generator) -> list[Batch]:
        order = rng.permutation(len(encoded)) if shuffle else np.arange(len(encoded))
        return [collate([encoded[i] for i in order[k : k + batch_size]], pad_id) for k in range(0, len(order), batch_size)]

    return make


def fixed_batches(encoded: Sequence[EncodedTurn], batch_size: int, pad_id: int = 0) -> list[Batch]:
    return [collate(list(encoded[k : k + batch_size]), pad_id) for k in range(0, len(encoded), batch_size)]


def model_config_for(run: RunConfig, vocab: Vocabulary) -> ModelConfig:
    return ModelConfig.from_dict({**run.model, "vocab_size": len(vocab)})


def load_task_turns(path: str | Path, task: str, ablate_memory: bool = False) -> list[DialogueTurn]:
    turns = read_turns(path)
    if not turns:
        raise IngestionError(f"{path}: no records")
    stage = TASK_STAGES[task]
    wrong = [i for i, t in enumerate(turns) if t.stage != stage]
    if wrong:
        raise IngestionError(f"{path}: record {wrong[0]} has stage {turns[wrong[0]].stage!r}, task {task} needs {stage!r}")
    return [t.ablated() for t in turns] if ablate_memory else turns


@dataclass
class RunResult:
    model: GatModel
    vocab: Vocabulary
    history: list[dict]
    output_dir: Path
    stats: EncodingStats


def run_training(run: RunConfig) -> RunResult:
    """Train one stage/task model and write config echo, vocabulary, metrics log,
    best and final checkpoints, and a manifest under ``run.output_dir``."""
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    turns = load_task_turns(run.train_path, run.task, run.ablate_memory)
    if run.validation_fraction > 0 and len(turns) >= 5:
        train_turns, val_turns = split_train_test(turns, run.validation_fraction, run.seed)
    else:
        train_turns, val_turns = list(turns), []
    vocab = Vocabulary.build(train_turns)
    vocab.save(out / "vocab.json")
    model_config = model_config_for(run, vocab)
    lexicon = run.lexicon()
    context = ConditionContext.build(vocab, lexicon, model_config.eos_id, model_config.pad_id)
    gat = GatModel.build(model_config, run.gat_config(), context, seed=run.seed, use_memory=not run.ablate_memory)
    stats = EncodingStats()
    encoded = encode_turns(train_turns, vocab, model_config, stats)
    validation = fixed_batches(encode_turns(val_turns, vocab, model_config, stats), run.batch_size, model_config.pad_id)
    metadata = {"vocab": vocab.to_list(), "task": run.task, "ablate_memory": run.ablate_memory, "lexicon": list(lexicon.names)}
    history = fit(
        gat,
        batch_maker(encoded, run.batch_size, model_config.pad_id),
        run.epochs,
        seed=run.seed,
        validation=validation,
        log_path=out / "metrics.jsonl",
        checkpoint_dir=out / "checkpoints",
        metadata=metadata,
        max_steps=run.max_steps,
    )
    manifest = {
        "task": run.task,
        "files": sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()),
        "train_rows": len(train_turns),
        "validation_rows": len(val_turns),
        "unknown_tokens": stats.unknown,
        "truncated_sequences": stats.truncated,
        "parameters": gat.generator.parameter_count(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return RunResult(gat, vocab, history, out, stats)


# ---------------------------------------------------------------- inference on text


def load_generator(path: str | Path, vocab_path: str | Path | None = None) -> tuple[MemoryAugmentedTransformer, Vocabulary]:
    """Generator checkpoint plus its vocabulary (from the checkpoint metadata)."""
    model, meta = load_checkpoint(path)
    if "vocab" not in meta:
        raise CompatibilityError(f"checkpoint {path} carries no vocabulary")
    vocab = Vocabulary.from_list(meta["vocab"])
    if len(vocab) != model.config.vocab_size:
        raise CompatibilityError(f"checkpoint vocabulary has {len(vocab)} tokens, model expects {model.config.vocab_size}")
    if vocab_path is not None and Vocabulary.load(vocab_path) != vocab:
        raise CompatibilityError(f"vocabulary {vocab_path} does not match the checkpoint vocabulary")
    if meta.get("ablate_memory"):
        model.use_memory = False
    return model, vocab


def generate_texts(
    model: MemoryAugmentedTransformer,
    vocab: Vocabulary,
    inputs: Sequence[str],
    memories: Sequence[Sequence[str]],
    max_len: int | None = None,
    batch_size: int = 32,
) -> list[str]:
    """Greedy outputs as space-joined tokens; inputs and memories are truncated to the model's limits."""
    c = model.config
    outputs: list[str] = []
    for k in range(0, len(inputs), batch_size):
        src = [vocab.encode(tokenize(t))[: c.max_seq_len] or [vocab.id("<unk>")] for t in inputs[k : k + batch_size]]
        mem = [vocab.encode(memory_tokens(m))[: c.max_memory_len] for m in memories[k : k + batch_size]]
        for ids in model.generate_batch(src, mem, max_len):
            outputs.append(" ".join(vocab.decode(ids)))
    return outputs
