"""Adversarial training of a memory-augmented generator against a memory-augmented discriminator.

The generator's teacher-forced output distributions reach the discriminator as
expected embeddings (``soft_embed``), which keeps the whole game differentiable.
Each step first updates the discriminator on real targets versus the (detached)
generator distributions, then updates the generator on the composed loss

    w_std * standard + sum_i w_i * condition_i + w_adv * adversarial

using the just-updated discriminator.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .conditions import ConditionContext, ConditionLoss, make_condition
from .errors import ConfigError, DegenerateBatchError, DistributionError, LengthError
from .tensor import AdamState, Tensor
from .transformer import (
    MODEL_KINDS,
    MemoryAugmentedTransformer,
    MemoryContext,
    ModelConfig,
    _dense,
    encoder_block,
    encoder_block_parameters,
    save_checkpoint,
    sinusoidal_positions,
    sub_params,
)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7


def soft_embed(distributions: Tensor, embedding_table: Tensor) -> Tensor:
    """Expected embedding ``distributions @ table``; every row must sum to 1 within 1e-6."""
    distributions = T.as_tensor(distributions)
    sums = distributions.data.sum(axis=-1)
    if distributions.data.size and not np.all(np.abs(sums - 1.0) <= 1e-6):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise DistributionError(f"distribution rows must sum to 1 (largest deviation {worst:.3g})")
    return T.matmul(distributions, embedding_table)


class Discriminator:
    """Memory-augmented encoder, masked mean-pool, affine readout and sigmoid."""

    kind = "discriminator"

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, v = config.d_model, config.vocab_size
        params = {"embedding": Tensor.parameter(rng.normal(0.0, d**-0.5, size=(v, d)), name="embedding")}
        if not config.share_memory_embedding:
            params["memory_embedding"] = Tensor.parameter(rng.normal(0.0, d**-0.5, size=(v, d)), name="memory_embedding")
        for layer in range(config.num_layers):
            params.update(encoder_block_parameters(rng, f"encoder.{layer}", config))
        params["head.w"] = Tensor.parameter(_dense(rng, d, 1), name="head.w")
        params["head.b"] = Tensor.parameter(np.zeros(1), name="head.b")
        self.params = params
        self._positions = sinusoidal_positions(config.max_seq_len, d)
        self._weights = [sub_params(params, f"encoder.{i}") for i in range(config.num_layers)]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _memory(self, mem: np.ndarray | None, mem_mask: np.ndarray | None) -> MemoryContext:
        if mem is None or mem_mask is None or not mem_mask.any():
            return MemoryContext(None)
        table = self.params.get("memory_embedding", self.params["embedding"])
        embedded = T.embedding_lookup(table, mem) * math.sqrt(self.config.d_model)
        return MemoryContext.build(embedded, mem_mask)

    def _score(self, embedded: Tensor, mask: np.ndarray, mem, mem_mask) -> Tensor:
        length = embedded.shape[1]
        if length == 0 or not mask.any(axis=1).all():
            raise LengthError("the discriminator needs a non-empty sequence for every item")
        if length > self.config.max_seq_len:
            raise LengthError(f"sequence length {length} exceeds max_seq_len={self.config.max_seq_len}")
        c = self.config
        x = embedded * math.sqrt(c.d_model) + self._positions[:length]
        memory = self._memory(mem, mem_mask)
        self_mask = mask[:, None, None, :]
        for w in self._weights:
            x = encoder_block(w, x, self_mask, memory, c.num_heads, c.layer_norm_eps)
        weights = mask / mask.sum(axis=1, keepdims=True)
        pooled = T.tsum(x * weights[:, :, None], axis=1)
        logit = T.linear(pooled, self.params["head.w"], self.params["head.b"])
        return T.sigmoid(logit.reshape(logit.shape[0]))

    def score_ids(self, ids: np.ndarray, mask: np.ndarray, mem=None, mem_mask=None) -> Tensor:
        """Probability ``[B]`` that each real token sequence is real."""
        return self._score(T.embedding_lookup(self.params["embedding"], ids), mask, mem, mem_mask)

    def score_distributions(self, distributions: Tensor, mask: np.ndarray, mem=None, mem_mask=None) -> Tensor:
        """Probability ``[B]`` for sequences of vocabulary distributions ``[B, T, V]``."""
        return self._score(soft_embed(distributions, self.params["embedding"]), mask, mem, mem_mask)


MODEL_KINDS["discriminator"] = Discriminator


def discriminator_score(discriminator: Discriminator, tokens, memory_ids: Sequence[int] = ()) -> Tensor:
    """Score one sequence given as token ids (real) or a ``[T, V]`` distribution tensor (fake)."""
    mem = np.asarray(list(memory_ids), dtype=np.int64).reshape(1, -1)
    mem_mask = np.ones(mem.shape, dtype=bool)
    if isinstance(tokens, Tensor):
        if tokens.ndim != 2 or tokens.shape[0] == 0:
            raise LengthError("expected a non-empty [T, V] distribution sequence")
        mask = np.ones((1, tokens.shape[0]), dtype=bool)
        out = discriminator.score_distributions(tokens.reshape(1, *tokens.shape), mask, mem, mem_mask)
    else:
        ids = np.asarray(list(tokens), dtype=np.int64).reshape(1, -1)
        if ids.shape[1] == 0:
            raise LengthError("cannot score an empty sequence")
        out = discriminator.score_ids(ids, np.ones(ids.shape, dtype=bool), mem, mem_mask)
    return out.reshape(())


def _scores(scores) -> Tensor:
    if isinstance(scores, Tensor):
        out = scores.reshape(-1)
    else:
        items = list(scores)
        if items and all(isinstance(s, Tensor) for s in items):
            out = _stack(items)
        else:
            out = Tensor(np.asarray(items, dtype=np.float64).reshape(-1))
    if out.size == 0:
        raise DegenerateBatchError("score list is empty")
    return out


def _stack(items: list[Tensor]) -> Tensor:
    total = None
    n = len(items)
    for i, s in enumerate(items):
        onehot = np.zeros(n)
        onehot[i] = 1.0
        term = s.reshape(()) * onehot
        total = term if total is None else total + term
    return total


def _clamped_log(p: Tensor) -> Tensor:
    return T.log(T.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR))


def discriminator_loss(real_scores, fake_scores) -> Tensor:
    """``-mean(log D(real)) - mean(log(1 - D(fake)))`` with clamped probabilities."""
    real, fake = _scores(real_scores), _scores(fake_scores)
    return -T.mean(_clamped_log(real)) - T.mean(_clamped_log(1.0 - fake))


def generator_adversarial_loss(fake_scores, saturating: bool = False) -> Tensor:
    """Non-saturating ``-mean(log D(fake))``; ``saturating=True`` gives ``mean(log(1 - D(fake)))``."""
    fake = _scores(fake_scores)
    if saturating:
        return T.mean(_clamped_log(1.0 - fake))
    return -T.mean(_clamped_log(fake))


def compose_generator_loss(standard, conditions: Sequence = (), adversarial=0.0, weights: Sequence[float] | None = None) -> Tensor:
    """Weighted sum ``[standard, *conditions, adversarial]``; zero-weight terms are left out."""
    terms = [standard, *conditions, adversarial]
    weights = [1.0] * len(terms) if weights is None else [float(w) for w in weights]
    if len(weights) != len(terms):
        raise ConfigError(f"expected {len(terms)} loss weights (standard, {len(conditions)} conditions, adversarial), got {len(weights)}")
    total = None
    for w, term in zip(weights, terms):
        if w == 0.0:
            continue
        term = T.as_tensor(term)
        scaled = term if w == 1.0 else term * w
        total = scaled if total is None else total + scaled
    return Tensor(0.0) if total is None else total


# ---------------------------------------------------------------- model and training step


@dataclass
class GatConfig:
    standard_weight: float = 1.0
    adversarial_weight: float = 1.0
    conditions: list[str] = field(default_factory=list)
    condition_weights: list[float] | None = None
    differentiable_conditions: bool = False
    saturating_generator_loss: bool = False
    generator_lr: float = 1e-4
    discriminator_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_grad_norm: float | None = 1.0
    discriminator_layers: int | None = None
    train_unused_discriminator: bool = False

    def __post_init__(self) -> None:
        if self.condition_weights is None:
            self.condition_weights = [1.0] * len(self.conditions)
        if len(self.condition_weights) != len(self.conditions):
            raise ConfigError("condition_weights must have one entry per condition")
        for name in ("standard_weight", "adversarial_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if any(w < 0 for w in self.condition_weights):
            raise ConfigError("condition_weights must be nonnegative")

    @property
    def weights(self) -> list[float]:
        return [self.standard_weight, *self.condition_weights, self.adversarial_weight]

    def to_dict(self) -> dict:
        return asdict(self)


def _adam(lr: float, config: GatConfig) -> AdamState:
    return AdamState(lr=lr, beta1=config.beta1, beta2=config.beta2, epsilon=config.adam_epsilon, max_grad_norm=config.max_grad_norm)


@dataclass
class GatModel:
    generator: MemoryAugmentedTransformer
    discriminator: Discriminator
    generator_state: AdamState
    discriminator_state: AdamState
    conditions: list[ConditionLoss]
    config: GatConfig
    context: ConditionContext | None = None

    def __post_init__(self) -> None:
        if self.generator.config.vocab_size != self.discriminator.config.vocab_size:
            raise ConfigError("generator and discriminator vocabularies differ")
        if self.conditions and self.context is None:
            raise ConfigError("condition losses need a ConditionContext")

    @classmethod
    def build(
        cls,
        model_config: ModelConfig,
        config: GatConfig | None = None,
        context: ConditionContext | None = None,
        seed: int = 0,
        use_memory: bool = True,
    ) -> "GatModel":
        config = config or GatConfig()
        disc_config = model_config
        if config.discriminator_layers is not None:
            disc_config = ModelConfig.from_dict({**model_config.to_dict(), "num_layers": config.discriminator_layers})
        return cls(
            MemoryAugmentedTransformer(model_config, seed=seed, use_memory=use_memory),
            Discriminator(disc_config, seed=seed + 1),
            _adam(config.generator_lr, config),
            _adam(config.discriminator_lr, config),
            [make_condition(name, config.differentiable_conditions) for name in config.conditions],
            config,
            context,
        )

    @property
    def uses_discriminator(self) -> bool:
        return self.config.adversarial_weight > 0 or self.config.train_unused_discriminator

    def save(self, directory: str | Path, tag: str, metadata: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(directory / f"{tag}.generator.npz", self.generator, metadata)
        save_checkpoint(directory / f"{tag}.discriminator.npz", self.discriminator, metadata)


def _step(params: dict[str, Tensor], state: AdamState) -> None:
    # parameters without a gradient path this step (e.g. memory attention on a
    # memory-free batch) are left untouched, as are their moment estimates
    T.adam_step({n: p for n, p in params.items() if p.grad is not None}, state)


def _masked_memory(batch, use_memory: bool):
    return (batch.mem, batch.mem_mask) if use_memory else (None, None)


def discriminator_accuracy(real: np.ndarray, fake: np.ndarray) -> float:
    return float((np.sum(real > 0.5) + np.sum(fake < 0.5)) / (real.size + fake.size))


def discriminator_update(model: GatModel, batch, distributions: np.ndarray) -> dict[str, float]:
    """One discriminator step on real targets versus fixed generator distributions."""
    disc = model.discriminator
    mem, mem_mask = _masked_memory(batch, model.generator.use_memory)
    real = disc.score_ids(batch.tgt_out, batch.tgt_mask, mem, mem_mask)
    fake = disc.score_distributions(Tensor(distributions), batch.tgt_mask, mem, mem_mask)
    loss = discriminator_loss(real, fake)
    loss.backward()
    _step(disc.params, model.discriminator_state)
    return {"discriminator_loss": loss.item(), "discriminator_accuracy": discriminator_accuracy(real.data, fake.data)}


def evaluate_discriminator(model: GatModel, batch) -> float:
    """Held-out accuracy of the discriminator against the current generator."""
    with T.no_grad():
        logits = model.generator.forward(batch)
        mem, mem_mask = _masked_memory(batch, model.generator.use_memory)
        real = model.discriminator.score_ids(batch.tgt_out, batch.tgt_mask, mem, mem_mask)
        fake = model.discriminator.score_distributions(T.softmax(logits, -1), batch.tgt_mask, mem, mem_mask)
    return discriminator_accuracy(real.data, fake.data)


def gat_train_step(model: GatModel, batch, train_generator: bool = True) -> dict:
    """Discriminator update, then generator update on the composed loss."""
    if len(batch) == 0:
        raise DegenerateBatchError("empty batch")
    gen, cfg = model.generator, model.config
    logits = gen.forward(batch)
    standard = T.sparse_categorical_cross_entropy(logits, batch.tgt_out, gen.config.pad_id)
    metrics: dict = {"standard": standard.item()}

    if model.uses_discriminator:
        probs = T.softmax(logits, -1)
        metrics.update(discriminator_update(model, batch, probs.data.copy()))
    else:
        metrics.update({"discriminator_loss": None, "discriminator_accuracy": None})

    conditions = [c(logits, batch, model.context) for c in model.conditions]
    metrics["conditions"] = {c.name: v.item() for c, v in zip(model.conditions, conditions)}

    adversarial = Tensor(0.0)
    if cfg.adversarial_weight > 0:
        mem, mem_mask = _masked_memory(batch, gen.use_memory)
        fake = model.discriminator.score_distributions(probs, batch.tgt_mask, mem, mem_mask)
        adversarial = generator_adversarial_loss(fake, cfg.saturating_generator_loss)
    metrics["adversarial"] = adversarial.item() if cfg.adversarial_weight > 0 else None

    composed = compose_generator_loss(standard, conditions, adversarial, cfg.weights)
    metrics["composed"] = composed.item()
    if train_generator:
        composed.backward()
        _step(gen.params, model.generator_state)
    T.zero_grad(gen.params)
    T.zero_grad(model.discriminator.params)
    return metrics


def seq2seq_train_step(generator: MemoryAugmentedTransformer, state: AdamState, batch) -> dict:
    """Plain maximum-likelihood step (the non-adversarial baseline)."""
    loss = T.sparse_categorical_cross_entropy(generator.forward(batch), batch.tgt_out, generator.config.pad_id)
    loss.backward()
    _step(generator.params, state)
    return {"standard": loss.item()}


# ---------------------------------------------------------------- evaluation helpers


def token_accuracy(generator: MemoryAugmentedTransformer, batches: Iterable) -> float:
    """Teacher-forced argmax accuracy over non-pad target positions."""
    hits = total = 0
    with T.no_grad():
        for batch in batches:
            pred = np.argmax(generator.forward(batch).data, axis=-1)
            hits += int(np.sum((pred == batch.tgt_out) & batch.tgt_mask))
            total += int(batch.tgt_mask.sum())
    return hits / total if total else 0.0


def validation_losses(model: GatModel, batches: Sequence) -> dict:
    """Mean standard loss and condition losses; ``selection`` weights them like training."""
    if not batches:
        return {}
    gen, cfg = model.generator, model.config
    weights = np.array([len(b) for b in batches], dtype=float)
    standard, conds = [], []
    with T.no_grad():
        for batch in batches:
            logits = gen.forward(batch)
            standard.append(T.sparse_categorical_cross_entropy(logits, batch.tgt_out, gen.config.pad_id).item())
            conds.append([c(logits, batch, model.context).item() for c in model.conditions])
    standard_mean = float(np.average(standard, weights=weights))
    cond_means = {c.name: float(np.average([row[i] for row in conds], weights=weights)) for i, c in enumerate(model.conditions)}
    selection = cfg.standard_weight * standard_mean + sum(w * v for w, v in zip(cfg.condition_weights, cond_means.values()))
    return {"standard": standard_mean, "conditions": cond_means, "selection": selection}


def _mean_metrics(records: list[dict]) -> dict:
    out: dict = {}
    for key in ("standard", "adversarial", "discriminator_loss", "discriminator_accuracy", "composed"):
        vals = [r[key] for r in records if r.get(key) is not None]
        out[key] = float(np.mean(vals)) if vals else None
    names = records[0]["conditions"].keys() if records else ()
    out["conditions"] = {n: float(np.mean([r["conditions"][n] for r in records])) for n in names}
    return out


def fit(
    model: GatModel,
    make_batches: Callable[[np.random.Generator], list],
    epochs: int,
    seed: int = 0,
    validation: Sequence = (),
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    metadata: dict | None = None,
    max_steps: int | None = None,
    on_epoch: Callable[[dict], bool | None] | None = None,
) -> list[dict]:
    """Train for ``epochs`` epochs, one JSON metrics line per epoch.

    ``make_batches(rng)`` returns the epoch's batches in order.  When a
    checkpoint directory is given, ``best`` (lowest validation selection loss)
    and ``final`` checkpoints are written for both sub-models.  ``on_epoch`` may
    return True to stop early.
    """
    rng = np.random.default_rng(seed)
    history: list[dict] = []
    best = math.inf
    steps = 0
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, epochs + 1):
            records = []
            for batch in make_batches(rng):
                records.append(gat_train_step(model, batch))
                steps += 1
                if max_steps is not None and steps >= max_steps:
                    break
            record = {"epoch": epoch, "steps": steps, "train": _mean_metrics(records)}
            if validation:
                val = validation_losses(model, validation)
                record["validation"] = val
                record["best"] = val["selection"] < best
                if record["best"]:
                    best = val["selection"]
                    if checkpoint_dir is not None:
                        model.save(checkpoint_dir, "best", metadata)
            history.append(record)
            if sink:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
                sink.flush()
            stop = on_epoch(record) if on_epoch else False
            if stop or (max_steps is not None and steps >= max_steps):
                break
    finally:
        if sink:
            sink.close()
    if checkpoint_dir is not None:
        model.save(checkpoint_dir, "final", metadata)
        if not validation:
            model.save(checkpoint_dir, "best", metadata)
    return history
