import sys, pathlib
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

from logic.encoders import (
    MLP,
    FeatureSequence,
    ImageEncoder,
    LanguageEncoder,
    TransformerLayer,
    average_pool,
    build_towers,
    embed_images,
    embed_sequences,
    encode_image,
    encode_language,
    extract_patches,
    layer_weighted_pool,
    masked_prediction_probs,
    mlp_project,
    self_attention_block,
)
from logic.selfcheck import TOY_ARCH
from logic.tensor import DegenerateVectorError, ParameterError, ShapeError, Tensor


def _image_encoder(seed=0, **kw):
    opts = dict(grid_size=2, n_layers=2, heads=2, ffn_mult=2, proj_hidden=16)
    opts.update(kw)
    return ImageEncoder(3, 8, 8, np.random.default_rng(seed), **opts)


def _language_encoder(seed=0, **kw):
    opts = dict(speech_layers=2, shared_layers=1, heads=2, ffn_mult=2, proj_hidden=16, n_units=6, max_seq_len=32)
    opts.update(kw)
    return LanguageEncoder(5, 8, 8, np.random.default_rng(seed), **opts)


def _ln(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(axis=-1, keepdims=True) + eps)


# image side

def test_extract_patches_constant_and_block_means():
    ones = extract_patches(np.ones((4, 4, 1)), 4).data
    assert ones.shape == (16, 1)
    assert np.allclose(ones, 1.0)

    fm = np.random.default_rng(0).normal(size=(8, 8, 1))
    got = extract_patches(fm, 4).data
    expected = [fm[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean(axis=(0, 1)) for i in range(4) for j in range(4)]
    assert np.allclose(got, expected, atol=1e-6)

    whole = extract_patches(fm, 1).data
    assert np.allclose(whole, fm.mean(axis=(0, 1))[None, :], atol=1e-6)


def test_extract_patches_needs_divisible_map():
    with pytest.raises(ShapeError):
        extract_patches(np.ones((6, 6, 2)), 4)


def test_single_patch_attends_to_itself():
    layer = TransformerLayer(8, 2, 16, np.random.default_rng(1))
    kept = []
    self_attention_block(Tensor(np.random.default_rng(2).normal(size=(1, 8))), [layer], kept)
    assert np.allclose(kept[0], 1.0)


def test_attention_rows_sum_to_one_and_permute_with_input():
    layers = [TransformerLayer(8, 2, 16, np.random.default_rng(3)) for _ in range(2)]
    x = np.random.default_rng(4).normal(size=(4, 8))
    kept = []
    out = self_attention_block(Tensor(x, dtype=np.float64), layers, kept).data
    for w in kept:
        assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-6)

    perm = np.array([2, 0, 3, 1])
    permuted = self_attention_block(Tensor(x[perm], dtype=np.float64), layers).data
    assert np.allclose(permuted, out[perm], atol=1e-5)


def test_zeroed_sublayers_reduce_to_stacked_layer_norms():
    layer = TransformerLayer(8, 2, 16, np.random.default_rng(5))
    layer.attention.out.weight.data[:] = 0
    layer.ffn.fc2.weight.data[:] = 0
    x = np.random.default_rng(6).normal(size=(3, 8))
    out = self_attention_block(Tensor(x, dtype=np.float64), [layer]).data
    assert np.allclose(out, _ln(_ln(x)), atol=1e-5)


def test_average_pool():
    assert np.allclose(average_pool(Tensor([[1.0, 2.0], [3.0, 4.0]])).data, [2.0, 3.0])
    same = np.tile([0.5, -1.0, 2.0], (5, 1))
    assert np.allclose(average_pool(Tensor(same)).data, same[0])
    rand = np.random.default_rng(7).normal(size=(16, 6))
    assert np.allclose(average_pool(Tensor(rand, dtype=np.float64)).data, rand.mean(axis=0), atol=1e-6)


def test_mlp_project_identity_zero_and_oracle():
    mlp = MLP(3, 3, 3, np.random.default_rng(8))
    mlp.fc1.weight.data = np.eye(3, dtype=np.float32)
    mlp.fc2.weight.data = np.eye(3, dtype=np.float32)
    r = np.array([0.2, 1.5, 3.0], dtype=np.float32)
    assert np.allclose(mlp_project(Tensor(r), mlp).data, r)
    assert not mlp_project(Tensor(np.zeros(3)), mlp).data.any()

    mlp = MLP(4, 6, 2, np.random.default_rng(9))
    for p in mlp.parameters().values():
        p.data = np.random.default_rng(10).normal(size=p.shape).astype(np.float32)
    x = np.random.default_rng(11).normal(size=4).astype(np.float32)
    w1, b1 = mlp.fc1.weight.data, mlp.fc1.bias.data
    w2, b2 = mlp.fc2.weight.data, mlp.fc2.bias.data
    expected = np.maximum(x @ w1 + b1, 0) @ w2 + b2
    assert np.allclose(mlp_project(Tensor(x), mlp).data, expected, atol=1e-5)


def test_encode_image_is_unit_norm_and_deterministic():
    enc = _image_encoder()
    fm = np.random.default_rng(12).normal(size=(4, 4, 3)).astype(np.float32)
    a, b = encode_image(fm, enc).data, encode_image(fm.copy(), enc).data
    assert a.shape == (8,)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-6
    assert np.array_equal(a, b)


def test_batched_and_single_image_embeddings_agree():
    enc = _image_encoder()
    maps = [np.random.default_rng(s).normal(size=(4, 4, 3)).astype(np.float32) for s in range(5)]
    batched = embed_images(enc, maps, batch_size=3)
    single = np.stack([encode_image(m, enc).data for m in maps])
    assert batched.shape == (5, 8)
    assert np.allclose(batched, single, atol=1e-5)


# language side

def test_layer_weights_start_uniform():
    enc = _language_encoder()
    # one slot for the swap point plus one per upper layer
    assert enc.layer_weights.shape == (1 + len(enc.upper_layers()),)
    assert np.allclose(enc.layer_weights.data, 0.0)


def test_layer_weighted_pool_cases():
    rng = np.random.default_rng(13)
    a = Tensor(rng.normal(size=(6, 4)), dtype=np.float64)
    b = Tensor(rng.normal(size=(6, 4)), dtype=np.float64)
    assert np.allclose(layer_weighted_pool([a], Tensor([0.0])).data, a.data.mean(axis=0))
    both = layer_weighted_pool([a, b], Tensor([0.0, 0.0])).data
    assert np.allclose(both, ((a.data + b.data) / 2).mean(axis=0))
    picked = layer_weighted_pool([a, b], Tensor([20.0, -20.0], dtype=np.float64)).data
    assert np.abs(picked - a.data.mean(axis=0)).max() < 1e-4
    with pytest.raises(ShapeError):
        layer_weighted_pool([], Tensor([0.0]))


def test_prediction_probs_uniform_for_identical_codes():
    enc = _language_encoder()
    enc.pred_head.class_embeddings.data[:] = enc.pred_head.class_embeddings.data[0]
    hidden = Tensor(np.random.default_rng(14).normal(size=(5, 8)))
    probs = masked_prediction_probs(hidden, enc.pred_head).data
    assert np.allclose(probs, 1.0 / enc.n_units, atol=1e-6)


def test_prediction_probs_two_classes():
    enc = _language_encoder(n_units=2)
    head = enc.pred_head
    width = head.projection.shape[0]
    head.projection.data = np.eye(width, dtype=np.float32)
    codes = np.zeros((2, width), dtype=np.float32)
    codes[0, 0] = codes[1, 1] = 1.0
    head.class_embeddings.data = codes
    hidden = np.zeros((1, width))
    hidden[0, 0] = 1.0
    p = masked_prediction_probs(Tensor(hidden, dtype=np.float64), head).data[0]
    assert p[0] == pytest.approx(0.9999546, abs=1e-6)
    assert p[1] == pytest.approx(4.54e-5, rel=1e-2)
    assert p.sum() == pytest.approx(1.0, abs=1e-6)

    with pytest.raises(DegenerateVectorError):
        masked_prediction_probs(Tensor(np.zeros((1, width))), head)


def test_language_embedding_is_unit_norm_and_deterministic():
    enc = _language_encoder()
    frames = np.random.default_rng(15).normal(size=(12, 5)).astype(np.float32)
    seq = FeatureSequence("audio", frames, np.arange(12) % 6)
    a = encode_language(seq, enc).embedding.data
    b = encode_language(seq, enc).embedding.data
    assert abs(np.linalg.norm(a) - 1.0) < 1e-6
    assert np.array_equal(a, b)


def test_training_returns_prediction_distributions():
    enc = _language_encoder(mask_prob=0.2, mask_len=3, swap_prob=0.3)
    frames = np.random.default_rng(16).normal(size=(12, 5)).astype(np.float32)
    out = encode_language(
        FeatureSequence("audio", frames, np.arange(12) % 6), enc, training=True,
        rng=np.random.default_rng(0),
    )
    assert out.pred_probs.shape == (12, 6)
    assert np.allclose(out.pred_probs.data.sum(axis=-1), 1.0, atol=1e-6)
    assert not (out.mask & out.swapped).any()


def test_full_swap_matches_text_path():
    enc = _language_encoder(mask_prob=0.0, swap_prob=1.0)
    units = np.array([0, 3, 5, 1, 1, 2, 4, 0, 3, 2, 5, 4])
    frames = np.random.default_rng(17).normal(size=(12, 5)).astype(np.float32)
    swapped = encode_language(FeatureSequence("audio", frames, units), enc, training=True, rng=np.random.default_rng(1))
    assert swapped.swapped.all()
    text = encode_language(FeatureSequence("text", unit_ids=units), enc)
    assert np.abs(swapped.embedding.data - text.embedding.data).max() < 1e-5


def test_fused_input_uses_both_paths():
    enc = _language_encoder()
    frames = np.random.default_rng(18).normal(size=(12, 5)).astype(np.float32)
    units = np.arange(12) % 6
    fused = encode_language(FeatureSequence("fused", frames, units), enc)
    audio = encode_language(FeatureSequence("audio", frames, units), enc)
    assert fused.hidden.shape == (24, 8)
    assert abs(np.linalg.norm(fused.embedding.data) - 1.0) < 1e-6
    assert not np.allclose(fused.embedding.data, audio.embedding.data)


def test_language_input_errors():
    enc = _language_encoder()
    with pytest.raises(ShapeError):
        FeatureSequence("audio", np.zeros((0, 5)))
    with pytest.raises(ParameterError):
        encode_language(FeatureSequence("text", np.zeros((4, 5))), enc)
    with pytest.raises(ParameterError):
        encode_language(FeatureSequence("audio", unit_ids=np.arange(4)), enc)
    with pytest.raises(ShapeError):
        FeatureSequence("audio", np.zeros((4, 5)), np.arange(3))
    with pytest.raises(ShapeError):
        encode_language(FeatureSequence("text", unit_ids=np.array([0, 9])), enc)
    with pytest.raises(ParameterError):
        encode_language(FeatureSequence("audio", np.zeros((4, 5))), enc, training=True)


def test_batched_sequences_match_one_by_one():
    towers = build_towers(TOY_ARCH, 3, 5, np.random.default_rng(19))
    rng = np.random.default_rng(20)
    seqs = [FeatureSequence("audio", rng.normal(size=(12, 5)).astype(np.float32), rng.integers(0, 6, 12)) for _ in range(4)]
    batched = embed_sequences(towers.language, seqs, batch_size=3)
    single = np.stack([encode_language(s, towers.language).embedding.data for s in seqs])
    assert np.allclose(batched, single, atol=1e-5)
