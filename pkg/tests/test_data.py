import sys, pathlib
sys.path.append(str(pathlib.Path(__file__).resolve().parents[1]))

import numpy as np
import pytest

from logic.data import (
    PairedDataset,
    SyntheticSpec,
    batch_iter,
    collate,
    draw_distractors,
    generate_synthetic_pairs,
    split_holdout,
)
from logic.tensor import ParameterError, ShapeError

SMALL = SyntheticSpec(n_classes=4, n_pairs=40, image_size=4, image_channels=2, seq_len=6, audio_dim=3, n_units=8)


def test_zero_noise_makes_classes_constant():
    data = generate_synthetic_pairs(SyntheticSpec(**{**SMALL.__dict__, "noise_sigma": 0.0}))
    for c in range(4):
        members = [r for r in data if r.class_label == c]
        for r in members[1:]:
            assert np.array_equal(r.image_features, members[0].image_features)
            assert np.array_equal(r.language.frames, members[0].language.frames)


def test_same_seed_same_bytes():
    a, b = generate_synthetic_pairs(SMALL), generate_synthetic_pairs(SMALL)
    for ra, rb in zip(a, b):
        assert ra.image_features.tobytes() == rb.image_features.tobytes()
        assert ra.language.frames.tobytes() == rb.language.frames.tobytes()
        assert np.array_equal(ra.language.unit_ids, rb.language.unit_ids)
    other = generate_synthetic_pairs(SyntheticSpec(**{**SMALL.__dict__, "seed": 1}))
    assert not np.array_equal(other.records[0].image_features, a.records[0].image_features)


def test_nearest_prototype_recovers_every_label():
    data = generate_synthetic_pairs(SMALL)
    labels = data.labels
    feats = np.stack([r.image_features.reshape(-1) for r in data])
    protos = np.stack([feats[labels == c].mean(axis=0) for c in range(4)])
    nearest = np.argmin(((feats[:, None, :] - protos[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(nearest, labels)


def test_labels_round_robin_and_units_per_class():
    data = generate_synthetic_pairs(SMALL)
    assert np.array_equal(data.labels, np.arange(40) % 4)
    assert np.array_equal(data.pair_ids, np.arange(40))
    units = data.class_unit_ids()
    assert sorted(units) == [0, 1, 2, 3]
    for r in data:
        assert np.array_equal(r.language.unit_ids, units[r.class_label])
        assert r.language.unit_ids.max() < SMALL.n_units


@pytest.mark.parametrize("bad,err", [
    ({"n_classes": 1}, ParameterError),
    ({"n_pairs": 3}, ParameterError),
    ({"seq_len": 0}, ShapeError),
    ({"noise_sigma": -0.1}, ParameterError),
])
def test_degenerate_specs_are_rejected(bad, err):
    with pytest.raises(err):
        generate_synthetic_pairs(SyntheticSpec(**{**SMALL.__dict__, **bad}))


def test_big_batch_is_one_permutation():
    data = generate_synthetic_pairs(SMALL)
    batches = list(batch_iter(data, 100, seed=0, epoch=0))
    assert len(batches) == 1
    assert sorted(r.pair_id for r in batches[0]) == list(range(40))


def test_tail_of_one_is_dropped():
    data = generate_synthetic_pairs(SMALL)
    batches = list(batch_iter(data, 13, seed=0, epoch=0))
    # 13 + 13 + 13 + 1
    assert [len(b) for b in batches] == [13, 13, 13]
    seen = [r.pair_id for b in batches for r in b]
    assert len(set(seen)) == len(seen) == 39


def test_order_depends_only_on_seed_and_epoch():
    data = generate_synthetic_pairs(SMALL)

    def order(seed, epoch):
        return [r.pair_id for b in batch_iter(data, 8, seed, epoch) for r in b]

    assert order(0, 3) == order(0, 3)
    assert order(0, 3) != order(0, 4)
    assert order(1, 3) != order(0, 3)
    with pytest.raises(ParameterError):
        list(batch_iter(data, 0, 0, 0))


def test_holdout_is_stratified_and_disjoint():
    data = generate_synthetic_pairs(SMALL)
    train, held = split_holdout(data, 0.25, seed=0)
    assert len(train) + len(held) == 40
    assert not set(train.pair_ids) & set(held.pair_ids)
    assert np.bincount(held.labels).tolist() == [2, 2, 2, 2] or np.bincount(held.labels).tolist() == [3, 3, 3, 3]
    assert sorted(set(held.labels)) == [0, 1, 2, 3]
    none_train, none_held = split_holdout(data, 0.0, seed=0)
    assert len(none_held) == 0 and len(none_train) == 40


def test_collate_stacks_a_batch():
    data = generate_synthetic_pairs(SMALL)
    batch = collate(data.records[:5])
    assert batch.images.shape == (5, 4, 4, 2)
    assert batch.frames.shape == (5, 6, 3)
    assert batch.unit_ids.shape == (5, 6)
    assert batch.modality == "audio" and len(batch) == 5


def test_collate_rejects_mixed_modalities():
    data = generate_synthetic_pairs(SMALL)
    text = data.with_modality("text")
    with pytest.raises(ParameterError):
        collate([data.records[0], text.records[1]])
    with pytest.raises(ParameterError):
        data.with_modality("video")


def test_distractors_have_requested_shape():
    d = draw_distractors(19, (4, 4, 2), 0.1, np.random.default_rng(0))
    assert d.shape == (19, 4, 4, 2) and d.dtype == np.float32


def test_empty_dataset_basics():
    empty = PairedDataset()
    assert len(empty) == 0 and empty.n_classes == 0
    assert empty.class_unit_ids() == {}
