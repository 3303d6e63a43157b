import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from loreun.datasets import (ArrayDataset, EmptyForgetSetError, SplitSpec, load_dataset, load_dataset_dir,
                             make_classwise_forget_split, make_difficulty_split, make_random_forget_split,
                             make_synthetic_images, save_dataset_dir)

from conftest import balanced_dataset


def _partitions(split, ds):
    f, r = set(split.forget.tolist()), set(split.retain.tolist())
    assert not f & r
    assert f | r == set(ds.train_indices.tolist())
    assert not set(split.test.tolist()) & set(ds.train_indices.tolist())


def test_random_split_sizes():
    ds = balanced_dataset(5000)
    s = make_random_forget_split(ds, 0.10, seed=0)
    assert len(s.forget) == 500 and len(s.retain) == 4500
    _partitions(s, ds)


def test_random_split_deterministic():
    ds = balanced_dataset(500)
    a = make_random_forget_split(ds, 0.2, seed=11)
    b = make_random_forget_split(ds, 0.2, seed=11)
    assert a.forget_indices == b.forget_indices and a.digest == b.digest
    assert a.forget_indices != make_random_forget_split(ds, 0.2, seed=12).forget_indices


def test_random_split_single_pick_is_uniform():
    ds = balanced_dataset(10, n_test=2)
    picks = [make_random_forget_split(ds, 0.10, seed=s).forget[0] for s in range(10_000)]
    counts = np.bincount(picks, minlength=10)
    # oracle: the same draw taken straight from the generator
    direct = [np.random.default_rng(s).choice(ds.train_indices, 1, replace=False)[0] for s in range(2000)]
    assert picks[:2000] == direct
    assert stats.chisquare(counts).pvalue > 0.001


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_random_split_rejects_bad_fraction(fraction):
    with pytest.raises(ValueError):
        make_random_forget_split(balanced_dataset(100), fraction, 0)


def test_classwise_split():
    ds = balanced_dataset(5000)
    s = make_classwise_forget_split(ds, 3)
    assert len(s.forget) == 500
    assert np.all(ds.labels[s.forget] == 3)
    union = set()
    for c in range(10):
        union |= set(make_classwise_forget_split(ds, c).forget.tolist())
    assert union == set(ds.train_indices.tolist())


def test_classwise_missing_class():
    ds = ArrayDataset(np.zeros((6, 1, 1, 1)), [0, 1, 0, 1, 2, 2], [1, 1, 1, 1, 0, 0], num_classes=3)
    with pytest.raises(EmptyForgetSetError):
        make_classwise_forget_split(ds, 2)
    with pytest.raises(ValueError):
        make_classwise_forget_split(ds, 5)


def test_difficulty_split_examples():
    losses = {0: 0.1, 1: 0.9, 2: 0.5, 3: 0.2}
    assert make_difficulty_split(losses, 0.25, "easy").forget.tolist() == [1]
    assert make_difficulty_split(losses, 0.25, "hard").forget.tolist() == [0]
    flat = {i: 1.0 for i in range(8)}
    assert make_difficulty_split(flat, 0.5, "easy").forget.tolist() == [0, 1, 2, 3]
    assert make_difficulty_split(flat, 0.5, "hard").forget.tolist() == [0, 1, 2, 3]


def test_difficulty_split_too_small():
    with pytest.raises(ValueError):
        make_difficulty_split({0: 1.0, 1: 2.0}, 0.2, "easy")


def test_difficulty_split_needs_full_table():
    ds = balanced_dataset(20)
    with pytest.raises(ValueError):
        make_difficulty_split({0: 1.0, 1: 2.0}, 0.5, "easy", dataset=ds)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=2, max_size=60, unique=True),
       st.floats(0.01, 0.5))
def test_easy_and_hard_are_disjoint(values, fraction):
    # with tied losses the ascending-index tie rule lets both modes pick the same examples
    table = dict(enumerate(values))
    if fraction * len(table) < 1:
        return
    easy = make_difficulty_split(table, fraction, "easy")
    hard = make_difficulty_split(table, fraction, "hard")
    assert not set(easy.forget_indices) & set(hard.forget_indices)
    assert set(easy.forget_indices) | set(easy.retain_indices) == set(table)


@settings(max_examples=30, deadline=None)
@given(st.integers(20, 300), st.floats(0.01, 0.99), st.integers(0, 2**31))
def test_random_split_partitions(n, fraction, seed):
    ds = balanced_dataset(n, n_test=5)
    if round(fraction * n) == 0:
        return
    s = make_random_forget_split(ds, fraction, seed)
    assert len(s.forget) == round(fraction * n)
    _partitions(s, ds)


def test_split_file_roundtrip(tmp_path):
    ds = balanced_dataset(100)
    s = make_random_forget_split(ds, 0.1, 4)
    s.save(tmp_path / "s.json")
    doc = json.loads((tmp_path / "s.json").read_text())
    assert {"mode", "seed", "forget", "retain", "test", "dataset_digest", "fraction"} <= set(doc)
    assert SplitSpec.load(tmp_path / "s.json") == s


def test_dataset_dir_roundtrip(tmp_path):
    ds = make_synthetic_images(n_train=50, n_test=10, size=4, seed=1)
    save_dataset_dir(ds, tmp_path / "d")
    back = load_dataset_dir(tmp_path / "d")
    assert back.digest == ds.digest
    assert load_dataset({"kind": "dir", "path": str(tmp_path / "d")}).digest == ds.digest


def test_synthetic_images_are_valid():
    ds = make_synthetic_images(n_train=200, n_test=50, size=8, seed=0)
    assert ds.features.min() >= 0 and ds.features.max() <= 1
    assert ds.shape == (3, 8, 8)
    assert len(ds.train_indices) == 200 and len(ds.test_indices) == 50
    assert make_synthetic_images(n_train=200, n_test=50, size=8, seed=0).digest == ds.digest
