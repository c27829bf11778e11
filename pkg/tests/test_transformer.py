import numpy as np
import pytest

from memgat import tensor as T
from memgat.data import EncodedTurn, collate
from memgat.errors import CompatibilityError, ConfigError, LengthError, MaskingError, ProtocolError
from memgat.tensor import Tensor
from memgat.transformer import (
    MemoryAugmentedTransformer,
    ModelConfig,
    expected_parameter_count,
    load_checkpoint,
    multi_head_attention,
    save_checkpoint,
)


def identity_weights(d):
    w = {}
    for p in "qkvo":
        w[f"w{p}"] = Tensor(np.eye(d))
        w[f"b{p}"] = Tensor(np.zeros(d))
    return w


def small_model(seed=0, **kw):
    cfg = dict(vocab_size=20, d_model=8, num_heads=2, num_layers=1, max_seq_len=12, max_memory_len=12)
    cfg.update(kw)
    return MemoryAugmentedTransformer(ModelConfig(**cfg), seed=seed)


def test_equal_scores_give_uniform_average():
    d = 4
    q = Tensor(np.zeros((1, d)))
    values = np.arange(12.0).reshape(3, d)
    out, attn = multi_head_attention(q, Tensor(np.ones((3, d))), Tensor(values), identity_weights(d), 2, return_weights=True)
    np.testing.assert_allclose(out.data[0], values.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(attn.data, 1 / 3, atol=1e-12)


def test_single_key_gets_full_weight():
    rng = np.random.default_rng(0)
    _, attn = multi_head_attention(
        Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4))),
        identity_weights(4), 2, return_weights=True,
    )
    np.testing.assert_array_equal(attn.data, 1.0)


def test_causal_mask_zeroes_future_positions():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(5, 4)))
    causal = np.tril(np.ones((5, 5), dtype=bool))
    _, attn = multi_head_attention(x, x, x, identity_weights(4), 2, mask=causal, return_weights=True)
    assert np.all(attn.data[:, ~causal] == 0.0)
    np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-12)


def test_fully_masked_row_is_rejected():
    x = Tensor(np.ones((2, 4)))
    with pytest.raises(MaskingError):
        multi_head_attention(x, x, x, identity_weights(4), 2, mask=np.array([[True, False], [False, False]]))


def test_empty_memory_matches_branch_free_model_exactly():
    model = small_model()
    bare = model.without_memory_branch()
    rng = np.random.default_rng(3)
    for _ in range(20):
        ids = rng.integers(3, 20, size=rng.integers(1, 10)).tolist()
        np.testing.assert_array_equal(model.encode(ids, []).data, bare.encode(ids).data)


def test_memory_changes_the_encoding():
    model = small_model()
    ids = [5, 6, 7, 8]
    assert not np.allclose(model.encode(ids, ids).data, model.encode(ids, []).data)


def test_batch_items_with_empty_memory_match_single_encoding():
    model = small_model()
    batch = collate([EncodedTurn([5, 6], [], [1, 7, 2]), EncodedTurn([8, 9, 10], [11, 12], [1, 7, 2])])
    logits = model.forward(batch)
    alone = model.decode([1, 7], model.encode([5, 6], []), [])
    np.testing.assert_allclose(logits.data[0, :2], alone.data, atol=1e-12)


def test_length_one_input_shape():
    assert small_model().encode([4]).shape == (1, 8)


def test_decode_logits_shape_and_bos_protocol():
    model = small_model()
    enc = model.encode([4, 5, 6], [7])
    assert model.decode([1, 4, 5], enc, [7]).shape == (3, 20)
    with pytest.raises(ProtocolError):
        model.decode([4, 5], enc, [7])


def test_decoder_is_causal():
    model = small_model()
    enc = model.encode([4, 5, 6], [7, 8])
    a = model.decode([1, 9, 10, 11], enc, [7, 8]).data
    b = model.decode([1, 9, 10, 15], enc, [7, 8]).data
    np.testing.assert_allclose(a[:3], b[:3], atol=1e-12)
    assert not np.allclose(a[3], b[3])


def test_zero_encoder_output_makes_logits_depend_on_prefix_only():
    model = small_model()
    a = model.decode([1, 4, 5], Tensor(np.zeros((3, 8))), []).data
    b = model.decode([1, 4, 5], Tensor(np.zeros((6, 8))), []).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_generate_stops_at_rigged_eos():
    model = small_model()
    model.params["output.b"].data[2] = 1e6
    assert model.generate([4, 5]) == []


def test_generate_runs_to_max_len_on_rigged_token():
    model = small_model()
    model.params["output.b"].data[7] = 1e6
    assert model.generate([4, 5], max_len=5) == [7] * 5
    with pytest.raises(LengthError):
        model.generate([4], max_len=13)


@pytest.mark.parametrize("shared", [True, False])
@pytest.mark.parametrize("dims", [(20, 8, 2, 1), (50, 16, 4, 2), (31, 12, 3, 3)])
def test_parameter_count_closed_form(dims, shared):
    v, d, h, layers = dims
    cfg = ModelConfig(vocab_size=v, d_model=d, num_heads=h, num_layers=layers, share_memory_embedding=shared)
    assert MemoryAugmentedTransformer(cfg).parameter_count() == expected_parameter_count(cfg)


def test_parameter_count_hand_value():
    # d=8, V=20, f=32, one layer: emb 160, out 180, attn 4*64+3*8=280,
    # enc 2*280+32+552=1144, dec 3*280+48+552=1440
    cfg = ModelConfig(vocab_size=20, d_model=8, num_heads=2, num_layers=1)
    assert expected_parameter_count(cfg) == 160 + 180 + 1144 + 1440


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, d_model=10, num_heads=3)


def test_full_model_gradient_check():
    model = small_model(seed=7)
    batch = collate([EncodedTurn([4, 5, 6], [7, 8], [1, 9, 10, 2]), EncodedTurn([11, 12], [], [1, 13, 2])])

    def loss():
        return T.sparse_categorical_cross_entropy(model.forward(batch), batch.tgt_out, 0)

    assert T.finite_difference_check(loss, model.params, eps=1e-5) < 1e-4


def test_attention_rows_sum_to_one_in_every_stream():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(2, 4, 8)))
    mem = Tensor(rng.normal(size=(2, 3, 8)))
    mask = np.array([[True, True, False], [True, False, False]])[:, None, None, :]
    w = small_model().params
    weights = {k.split(".")[-1]: v for k, v in w.items() if k.startswith("encoder.0.mem_attn.")}
    _, attn = multi_head_attention(x, mem, mem, weights, 2, mask=mask, return_weights=True)
    np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    model = small_model(seed=11, share_memory_embedding=False)
    path = tmp_path / "model.npz"
    save_checkpoint(path, model, {"vocab": ["a", "b"]})
    loaded, meta = load_checkpoint(path)
    assert meta == {"vocab": ["a", "b"]}
    assert loaded.config == model.config
    for name, p in model.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, p.data)
    np.testing.assert_array_equal(loaded.encode([4, 5], [6]).data, model.encode([4, 5], [6]).data)


def test_corrupted_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "bad.npz"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CompatibilityError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch_is_rejected(tmp_path):
    model = small_model()
    model.params["output.b"] = Tensor.parameter(np.zeros(21), name="output.b")
    path = tmp_path / "m.npz"
    save_checkpoint(path, model)
    with pytest.raises(CompatibilityError):
        load_checkpoint(path)
