"""Encoder-decoder Transformer with a second attention stream over an external memory.

Every encoder and decoder block owns an extra multi-head attention layer whose
queries come from the block's input and whose keys and values are the embedded
memory tokens.  Its output is added to the primary attention (self-attention in
the encoder, cross-attention in the decoder) before the residual normalization.
An empty memory contributes exactly nothing, so emptying the memory is a
within-model ablation switch.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import CompatibilityError, ConfigError, DimensionError, LengthError, MaskingError, ProtocolError
from .tensor import Tensor

NEG_INF = -1e30
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 256
    num_heads: int = 8
    num_layers: int = 2
    max_seq_len: int = 64
    max_memory_len: int = 64
    feedforward_dim: int | None = None
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    share_memory_embedding: bool = True
    layer_norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.feedforward_dim is None:
            self.feedforward_dim = 4 * self.d_model
        for name in ("vocab_size", "d_model", "num_heads", "num_layers", "max_seq_len", "feedforward_dim"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_memory_len < 0:
            raise ConfigError(f"max_memory_len must be nonnegative, got {self.max_memory_len}")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        special = (self.pad_id, self.bos_id, self.eos_id)
        if len(set(special)) != 3:
            raise ConfigError(f"pad/bos/eos ids must be distinct, got {special}")
        if any(not 0 <= s < self.vocab_size for s in special):
            raise ConfigError(f"pad/bos/eos ids {special} must be below vocab_size={self.vocab_size}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**dict(data))


def expected_parameter_count(config: ModelConfig) -> int:
    d, v, f, layers = config.d_model, config.vocab_size, config.feedforward_dim, config.num_layers
    attention = 4 * d * d + 3 * d
    norm = 2 * d
    feedforward = d * f + f + f * d + d
    encoder = 2 * attention + 2 * norm + feedforward
    decoder = 3 * attention + 3 * norm + feedforward
    embeddings = v * d * (1 if config.share_memory_embedding else 2)
    return embeddings + d * v + v + layers * (encoder + decoder)


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def pad_sequences(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences into an ``[B, T]`` id array plus a validity mask."""
    width = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for row, seq in enumerate(seqs):
        ids[row, : len(seq)] = seq
        mask[row, : len(seq)] = True
    return ids, mask


# ---------------------------------------------------------------- parameters


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def attention_parameters(rng: np.random.Generator, prefix: str, d: int) -> dict[str, Tensor]:
    # no key bias: it shifts every score of a query row equally, which softmax ignores
    out = {}
    for proj in ("q", "k", "v", "o"):
        out[f"{prefix}.w{proj}"] = Tensor.parameter(_dense(rng, d, d), name=f"{prefix}.w{proj}")
        if proj != "k":
            out[f"{prefix}.b{proj}"] = Tensor.parameter(np.zeros(d), name=f"{prefix}.b{proj}")
    return out


def norm_parameters(prefix: str, d: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.gamma": Tensor.parameter(np.ones(d), name=f"{prefix}.gamma"),
        f"{prefix}.beta": Tensor.parameter(np.zeros(d), name=f"{prefix}.beta"),
    }


def feedforward_parameters(rng: np.random.Generator, prefix: str, d: int, hidden: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.w1": Tensor.parameter(_dense(rng, d, hidden), name=f"{prefix}.w1"),
        f"{prefix}.b1": Tensor.parameter(np.zeros(hidden), name=f"{prefix}.b1"),
        f"{prefix}.w2": Tensor.parameter(_dense(rng, hidden, d), name=f"{prefix}.w2"),
        f"{prefix}.b2": Tensor.parameter(np.zeros(d), name=f"{prefix}.b2"),
    }


def encoder_block_parameters(rng: np.random.Generator, prefix: str, config: ModelConfig) -> dict[str, Tensor]:
    d = config.d_model
    params = {}
    params.update(attention_parameters(rng, f"{prefix}.self_attn", d))
    params.update(attention_parameters(rng, f"{prefix}.mem_attn", d))
    params.update(norm_parameters(f"{prefix}.norm1", d))
    params.update(feedforward_parameters(rng, f"{prefix}.ff", d, config.feedforward_dim))
    params.update(norm_parameters(f"{prefix}.norm2", d))
    return params


def decoder_block_parameters(rng: np.random.Generator, prefix: str, config: ModelConfig) -> dict[str, Tensor]:
    d = config.d_model
    params = {}
    params.update(attention_parameters(rng, f"{prefix}.self_attn", d))
    params.update(norm_parameters(f"{prefix}.norm1", d))
    params.update(attention_parameters(rng, f"{prefix}.cross_attn", d))
    params.update(attention_parameters(rng, f"{prefix}.mem_attn", d))
    params.update(norm_parameters(f"{prefix}.norm2", d))
    params.update(feedforward_parameters(rng, f"{prefix}.ff", d, config.feedforward_dim))
    params.update(norm_parameters(f"{prefix}.norm3", d))
    return params


def sub_params(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    cut = len(prefix) + 1
    return {name[cut:]: p for name, p in params.items() if name.startswith(prefix + ".")}


# ---------------------------------------------------------------- functional layers


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    weights: Mapping[str, Tensor],
    num_heads: int,
    mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``num_heads`` heads.

    ``query`` is ``[Tq, d]`` or ``[B, Tq, d]``; ``key``/``value`` likewise with
    ``Tk``.  ``weights`` holds ``wq, bq, wk, wv, bv, wo, bo`` and optionally ``bk``.  ``mask`` is a
    boolean array (True = may attend) broadcastable to ``[B, H, Tq, Tk]``; a
    3-d mask is read as ``[B, Tq, Tk]``.
    """
    single = query.ndim == 2
    if single:
        query = query.reshape(1, *query.shape)
        key = key.reshape(1, *key.shape)
        value = value.reshape(1, *value.shape)
    batch, tq, d = query.shape
    tk = key.shape[1]
    if d % num_heads:
        raise DimensionError(f"model width {d} is not divisible by {num_heads} heads")
    if key.shape[-1] != d or value.shape[-1] != d or value.shape[1] != tk:
        raise DimensionError(f"query {query.shape}, key {key.shape}, value {value.shape} are incompatible")
    dh = d // num_heads

    def heads(x: Tensor, length: int) -> Tensor:
        return T.transpose(x.reshape(batch, length, num_heads, dh), (0, 2, 1, 3))

    q = heads(T.linear(query, weights["wq"], weights["bq"]), tq)
    k = heads(T.linear(key, weights["wk"], weights.get("bk")), tk)
    v = heads(T.linear(value, weights["wv"], weights["bv"]), tk)
    scores = T.matmul(q, T.swap_last(k)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 3:
            mask = mask[:, None]
        if not np.broadcast_to(mask, (batch, num_heads, tq, tk)).any(axis=-1).all():
            raise MaskingError("a query row has every key masked")
        scores = T.masked_fill(scores, mask, NEG_INF)
    attn = T.softmax(scores, -1)
    out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3)).reshape(batch, tq, d)
    out = T.linear(out, weights["wo"], weights["bo"])
    if single:
        out = out.reshape(tq, d)
        attn = attn.reshape(num_heads, tq, tk)
    return (out, attn) if return_weights else out


def feedforward(x: Tensor, w: Mapping[str, Tensor]) -> Tensor:
    return T.linear(T.relu(T.linear(x, w["w1"], w["b1"])), w["w2"], w["b2"])


def _norm(x: Tensor, w: Mapping[str, Tensor], prefix: str, eps: float) -> Tensor:
    return T.layer_norm(x, w[f"{prefix}.gamma"], w[f"{prefix}.beta"], eps)


@dataclass
class MemoryContext:
    """Embedded memory plus masks; ``None`` embedding means no memory anywhere in the batch."""

    embedded: Tensor | None
    mask: np.ndarray | None = None
    scale: np.ndarray | None = None

    @classmethod
    def build(cls, embedded: Tensor | None, mem_mask: np.ndarray | None) -> "MemoryContext":
        if embedded is None or mem_mask is None or mem_mask.shape[1] == 0 or not mem_mask.any():
            return cls(None)
        has = mem_mask.any(axis=1)
        # items without memory attend to their padding and are then zeroed
        keys = mem_mask | ~has[:, None]
        scale = None if has.all() else has.astype(float)[:, None, None]
        return cls(embedded, keys[:, None, None, :], scale)


def memory_attention(x: Tensor, weights: Mapping[str, Tensor], memory: MemoryContext, heads: int) -> Tensor:
    out = multi_head_attention(x, memory.embedded, memory.embedded, weights, heads, memory.mask)
    return out if memory.scale is None else out * memory.scale


def encoder_block(
    w: Mapping[str, Tensor],
    x: Tensor,
    self_mask: np.ndarray,
    memory: MemoryContext,
    heads: int,
    eps: float,
    use_memory: bool = True,
) -> Tensor:
    h = x + multi_head_attention(x, x, x, sub_params(w, "self_attn"), heads, self_mask)
    if use_memory and memory.embedded is not None:
        h = h + memory_attention(x, sub_params(w, "mem_attn"), memory, heads)
    x = _norm(h, w, "norm1", eps)
    return _norm(x + feedforward(x, sub_params(w, "ff")), w, "norm2", eps)


def decoder_block(
    w: Mapping[str, Tensor],
    x: Tensor,
    self_mask: np.ndarray,
    encoder_out: Tensor,
    cross_mask: np.ndarray,
    memory: MemoryContext,
    heads: int,
    eps: float,
    use_memory: bool = True,
) -> Tensor:
    x = _norm(x + multi_head_attention(x, x, x, sub_params(w, "self_attn"), heads, self_mask), w, "norm1", eps)
    h = x + multi_head_attention(x, encoder_out, encoder_out, sub_params(w, "cross_attn"), heads, cross_mask)
    if use_memory and memory.embedded is not None:
        h = h + memory_attention(x, sub_params(w, "mem_attn"), memory, heads)
    x = _norm(h, w, "norm2", eps)
    return _norm(x + feedforward(x, sub_params(w, "ff")), w, "norm3", eps)


# ---------------------------------------------------------------- model


class MemoryAugmentedTransformer:
    """Sequence-to-sequence generator with memory attention in every block."""

    kind = "generator"

    def __init__(self, config: ModelConfig, seed: int = 0, use_memory: bool = True):
        self.config = config
        self.use_memory = use_memory
        rng = np.random.default_rng(seed)
        d, v = config.d_model, config.vocab_size
        params: dict[str, Tensor] = {
            "embedding": Tensor.parameter(rng.normal(0.0, d**-0.5, size=(v, d)), name="embedding"),
        }
        if not config.share_memory_embedding:
            params["memory_embedding"] = Tensor.parameter(rng.normal(0.0, d**-0.5, size=(v, d)), name="memory_embedding")
        for layer in range(config.num_layers):
            params.update(encoder_block_parameters(rng, f"encoder.{layer}", config))
        for layer in range(config.num_layers):
            params.update(decoder_block_parameters(rng, f"decoder.{layer}", config))
        params["output.w"] = Tensor.parameter(_dense(rng, d, v), name="output.w")
        params["output.b"] = Tensor.parameter(np.zeros(v), name="output.b")
        self.params = params
        self._positions = sinusoidal_positions(config.max_seq_len, d)
        self._encoder_weights = [sub_params(params, f"encoder.{i}") for i in range(config.num_layers)]
        self._decoder_weights = [sub_params(params, f"decoder.{i}") for i in range(config.num_layers)]

    # -- bookkeeping

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def without_memory_branch(self) -> "MemoryAugmentedTransformer":
        """A view sharing every weight but never running memory attention."""
        view = copy.copy(self)
        view.use_memory = False
        return view

    def clone(self) -> "MemoryAugmentedTransformer":
        twin = copy.copy(self)
        twin.params = {n: Tensor.parameter(p.data.copy(), name=n) for n, p in self.params.items()}
        twin._encoder_weights = [sub_params(twin.params, f"encoder.{i}") for i in range(self.config.num_layers)]
        twin._decoder_weights = [sub_params(twin.params, f"decoder.{i}") for i in range(self.config.num_layers)]
        return twin

    # -- embeddings

    def embed(self, ids: np.ndarray) -> Tensor:
        """Token embeddings scaled by sqrt(d) plus sinusoidal positions."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1] > self.config.max_seq_len:
            raise LengthError(f"sequence length {ids.shape[-1]} exceeds max_seq_len={self.config.max_seq_len}")
        scaled = T.embedding_lookup(self.params["embedding"], ids) * math.sqrt(self.config.d_model)
        return scaled + self._positions[: ids.shape[-1]]

    def embed_memory(self, mem_ids: np.ndarray) -> Tensor:
        mem_ids = np.asarray(mem_ids, dtype=np.int64)
        if mem_ids.shape[-1] > self.config.max_memory_len:
            raise LengthError(
                f"memory length {mem_ids.shape[-1]} exceeds max_memory_len={self.config.max_memory_len}"
            )
        table = self.params.get("memory_embedding", self.params["embedding"])
        return T.embedding_lookup(table, mem_ids) * math.sqrt(self.config.d_model)

    def memory_context(self, mem_ids: np.ndarray | None, mem_mask: np.ndarray | None) -> MemoryContext:
        if not self.use_memory or mem_ids is None or mem_mask is None or not mem_mask.any():
            return MemoryContext(None)
        return MemoryContext.build(self.embed_memory(mem_ids), mem_mask)

    # -- batched forward

    def encode_batch(self, src: np.ndarray, src_mask: np.ndarray, memory: MemoryContext) -> Tensor:
        if src.shape[1] == 0:
            raise LengthError("cannot encode an empty input sequence")
        c = self.config
        x = self.embed(src)
        self_mask = src_mask[:, None, None, :]
        for w in self._encoder_weights:
            x = encoder_block(w, x, self_mask, memory, c.num_heads, c.layer_norm_eps, self.use_memory)
        return x

    def decode_batch(
        self,
        tgt_in: np.ndarray,
        tgt_mask: np.ndarray,
        encoder_out: Tensor,
        src_mask: np.ndarray,
        memory: MemoryContext,
    ) -> Tensor:
        c = self.config
        length = tgt_in.shape[1]
        causal = np.tril(np.ones((length, length), dtype=bool))
        self_mask = causal[None, None] & tgt_mask[:, None, None, :]
        cross_mask = src_mask[:, None, None, :]
        x = self.embed(tgt_in)
        for w in self._decoder_weights:
            x = decoder_block(w, x, self_mask, encoder_out, cross_mask, memory, c.num_heads, c.layer_norm_eps, self.use_memory)
        return T.linear(x, self.params["output.w"], self.params["output.b"])

    def forward(self, batch) -> Tensor:
        """Teacher-forced logits ``[B, T, V]`` for a collated batch."""
        memory = self.memory_context(batch.mem, batch.mem_mask)
        enc = self.encode_batch(batch.src, batch.src_mask, memory)
        return self.decode_batch(batch.tgt_in, batch.tgt_mask, enc, batch.src_mask, memory)

    # -- single-sequence interface

    def _single_memory(self, memory_ids: Sequence[int]) -> MemoryContext:
        mem = np.asarray(list(memory_ids), dtype=np.int64).reshape(1, -1)
        return self.memory_context(mem, np.ones(mem.shape, dtype=bool))

    def encode(self, input_ids: Sequence[int], memory_ids: Sequence[int] = ()) -> Tensor:
        src = np.asarray(list(input_ids), dtype=np.int64).reshape(1, -1)
        out = self.encode_batch(src, np.ones(src.shape, dtype=bool), self._single_memory(memory_ids))
        return out.reshape(src.shape[1], self.config.d_model)

    def decode(self, target_prefix_ids: Sequence[int], encoder_out: Tensor, memory_ids: Sequence[int] = ()) -> Tensor:
        prefix = np.asarray(list(target_prefix_ids), dtype=np.int64).reshape(1, -1)
        if prefix.shape[1] == 0 or prefix[0, 0] != self.config.bos_id:
            raise ProtocolError("decoder prefix must begin with the bos token")
        enc = encoder_out.reshape(1, *encoder_out.shape)
        src_mask = np.ones((1, enc.shape[1]), dtype=bool)
        logits = self.decode_batch(prefix, np.ones(prefix.shape, dtype=bool), enc, src_mask, self._single_memory(memory_ids))
        return logits.reshape(prefix.shape[1], self.config.vocab_size)

    def generate(self, input_ids: Sequence[int], memory_ids: Sequence[int] = (), max_len: int | None = None) -> list[int]:
        return self.generate_batch([list(input_ids)], [list(memory_ids)], max_len)[0]

    def generate_batch(
        self,
        inputs: Sequence[Sequence[int]],
        memories: Sequence[Sequence[int]],
        max_len: int | None = None,
    ) -> list[list[int]]:
        """Greedy decoding from bos; each output stops at eos (excluded) or ``max_len``."""
        c = self.config
        max_len = c.max_seq_len if max_len is None else max_len
        if not 0 < max_len <= c.max_seq_len:
            raise LengthError(f"max_len={max_len} must lie in [1, {c.max_seq_len}]")
        with T.no_grad():
            src, src_mask = pad_sequences(inputs, c.pad_id)
            mem, mem_mask = pad_sequences(memories, c.pad_id)
            memory = self.memory_context(mem, mem_mask)
            enc = self.encode_batch(src, src_mask, memory)
            outputs: list[list[int]] = [[] for _ in inputs]
            done = np.zeros(len(inputs), dtype=bool)
            prefix = np.full((len(inputs), 1), c.bos_id, dtype=np.int64)
            for _ in range(max_len):
                logits = self.decode_batch(prefix, np.ones(prefix.shape, dtype=bool), enc, src_mask, memory)
                nxt = np.argmax(logits.data[:, -1, :], axis=-1)
                for row, token in enumerate(nxt):
                    if done[row]:
                        continue
                    if token == c.eos_id:
                        done[row] = True
                    else:
                        outputs[row].append(int(token))
                if done.all():
                    break
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        return outputs


# ---------------------------------------------------------------- checkpoints

MODEL_KINDS: dict[str, type] = {"generator": MemoryAugmentedTransformer}


def save_checkpoint(path: str | Path, model, metadata: Mapping | None = None) -> None:
    """Write config, named float64 parameters and a format version to one ``.npz`` file."""
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "config": model.config.to_dict(),
        "parameters": {name: list(p.shape) for name, p in model.params.items()},
        "metadata": dict(metadata or {}),
    }
    arrays = {f"param:{name}": np.ascontiguousarray(p.data, dtype=np.float64) for name, p in model.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path):
    """Rebuild a model from ``save_checkpoint`` output; returns ``(model, metadata)``."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
            arrays = {k[len("param:"):]: archive[k] for k in archive.files if k.startswith("param:")}
    except Exception as exc:  # zip, json and key errors all mean an unusable file
        raise CompatibilityError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CompatibilityError(f"unsupported checkpoint format version {meta.get('format_version')}")
    cls = MODEL_KINDS.get(meta.get("kind"))
    if cls is None:
        raise CompatibilityError(f"unknown checkpoint kind {meta.get('kind')!r}")
    try:
        config = ModelConfig.from_dict(meta["config"])
    except (ConfigError, TypeError) as exc:
        raise CompatibilityError(f"checkpoint config is invalid: {exc}") from exc
    model = cls(config)
    if set(arrays) != set(model.params):
        missing = sorted(set(model.params) - set(arrays))
        extra = sorted(set(arrays) - set(model.params))
        raise CompatibilityError(f"checkpoint parameters differ from config: missing={missing} extra={extra}")
    for name, p in model.params.items():
        if arrays[name].shape != p.shape:
            raise CompatibilityError(f"parameter {name} has shape {arrays[name].shape}, config implies {p.shape}")
        p.data[...] = arrays[name]
    return model, meta.get("metadata", {})
