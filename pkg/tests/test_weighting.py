import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from loreun.models import TrainConfig, init_classifier, per_sample_ce_numpy
from loreun.weighting import (IncompleteTableError, WeightingConfig, WeightTable, build_static_table,
                              default_tau, dynamic_batch_weights, normalize_batch_weights, raw_weight)

from conftest import balanced_dataset

losses_st = arrays(np.float64, st.integers(1, 64), elements=st.floats(0, 50, allow_nan=False))
tau_st = st.floats(0.05, 1e3)


def test_raw_weight_examples():
    assert raw_weight(0.0, 3.7) == 1.0
    assert raw_weight(1.0, 1.0) == pytest.approx(0.367879, abs=1e-6)
    tau = 4.2
    assert raw_weight(tau * np.log(2), tau) == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_raw_weight_rejects_bad_tau(tau):
    with pytest.raises(ValueError):
        raw_weight(1.0, tau)
    with pytest.raises(ValueError):
        WeightingConfig(tau=tau)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_batch_weights([0.3, 0.3]), [0.5, 0.5])
    np.testing.assert_allclose(normalize_batch_weights([1, 0.5]), [2 / 3, 1 / 3])
    with pytest.raises(ValueError):
        normalize_batch_weights([])


def test_dynamic_examples():
    np.testing.assert_allclose(dynamic_batch_weights([0, 0, 0], 2.0), [1 / 3] * 3)
    tau = 7.0
    np.testing.assert_allclose(dynamic_batch_weights([0, tau * np.log(2)], tau), [2 / 3, 1 / 3], atol=1e-12)
    np.testing.assert_allclose(dynamic_batch_weights([0.1, 5.0, 30.0], 1e9), [1 / 3] * 3, atol=1e-6)


def test_default_tau():
    assert default_tau("GAR") == default_tau("GAR-m") == default_tau("GA") == 10
    assert default_tau("RL") == default_tau("SalUn") == 50


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 100), tau_st, tau_st)
def test_raw_weight_monotone(loss, tau_a, tau_b):
    w = raw_weight(loss, tau_a)
    assert 0 < w <= 1
    assume(w > 1e-30 and abs(tau_a - tau_b) > 1e-6 * tau_a)
    assert raw_weight(loss * 1.01 + 1e-3, tau_a) < w
    lo, hi = sorted((tau_a, tau_b))
    assert raw_weight(loss, lo) < raw_weight(loss, hi)


@settings(max_examples=300, deadline=None)
@given(losses_st, tau_st)
def test_weights_normalized(losses, tau):
    w = dynamic_batch_weights(losses, tau)
    assert abs(w.sum() - 1.0) < 1e-9 and np.all(w > 0)


@settings(max_examples=300, deadline=None)
@given(losses_st, tau_st)
def test_weights_invert_loss_order(losses, tau):
    w = dynamic_batch_weights(losses, tau)
    for i in range(len(losses)):
        for j in range(len(losses)):
            # strictness holds while the weight ratio stays above the 1e-30 floor
            if losses[i] < losses[j] and 1e-12 < (losses[j] - losses.min()) / tau < 60:
                assert w[i] > w[j]


@settings(max_examples=300, deadline=None)
@given(losses_st, tau_st, st.floats(-20, 20))
def test_shift_covariance(losses, tau, c):
    shifted = np.maximum(losses + c, 0) if c < 0 else losses + c
    assume(np.all(shifted - losses == c))
    np.testing.assert_allclose(dynamic_batch_weights(shifted, tau), dynamic_batch_weights(losses, tau), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(losses_st)
def test_huge_tau_is_uniform(losses):
    w = dynamic_batch_weights(losses, 1e9)
    np.testing.assert_allclose(w, np.full(len(losses), 1 / len(losses)), atol=1e-6)
    # the weighted term then equals the plain batch mean
    assert abs(w @ losses - losses.mean()) < 1e-6 * max(1.0, losses.mean())


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e6), tau_st)
def test_single_example_batch_is_one(loss, tau):
    assert dynamic_batch_weights([loss], tau).tolist() == [1.0]
    assert dynamic_batch_weights(torch.tensor([loss]), tau).tolist() == [1.0]


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 32), elements=st.floats(0, 5)), st.floats(1, 100))
def test_dynamic_equals_normalized_raw(losses, tau):
    np.testing.assert_allclose(dynamic_batch_weights(losses, tau),
                               normalize_batch_weights(raw_weight(losses, tau)), rtol=1e-12)


def test_torch_and_numpy_agree():
    x = np.array([0.2, 1.5, 3.0, 0.0])
    np.testing.assert_allclose(dynamic_batch_weights(torch.tensor(x), 2.0).numpy(), dynamic_batch_weights(x, 2.0))


def test_floor_keeps_tiny_tau_finite():
    w = dynamic_batch_weights([1e4, 2e4], 1e-3)
    assert np.all(np.isfinite(w)) and w.sum() == pytest.approx(1.0)
    assert raw_weight(1e6, 1e-3) == 1e-30


class _Uniform(torch.nn.Module):
    def forward(self, x):
        return torch.zeros(len(x), 10)


def test_static_table_uniform_model():
    from loreun.models import ClassifierCheckpoint
    ds = balanced_dataset(40)
    ck = ClassifierCheckpoint(_Uniform(), "none", ds.shape, 10)
    table = build_static_table(ck, ds, np.arange(10), tau=10.0)
    np.testing.assert_allclose(table.reference_losses, np.log(10), atol=1e-6)
    assert np.all(table.raw_weights == table.raw_weights[0])


def test_static_table_matches_loop_and_is_deterministic(tmp_path):
    ds = balanced_dataset(20, shape=(3, 8, 8), seed=4)
    ck = init_classifier(TrainConfig(arch_kwargs={"width": 4}), ds.shape, 10)
    forget = np.arange(20)
    table = build_static_table(ck, ds, forget, tau=2.0)
    loop = [per_sample_ce_numpy(ck, *ds.view([i]))[0] for i in forget]
    np.testing.assert_allclose(table.reference_losses, loop, atol=1e-6)
    np.testing.assert_allclose(table.raw_weights, np.exp(-np.asarray(loop) / 2.0), rtol=1e-6)
    assert build_static_table(ck, ds, forget, tau=2.0).to_csv() == table.to_csv()
    table.save(tmp_path / "w.csv")
    back = WeightTable.load(tmp_path / "w.csv")
    assert back.to_csv() == table.to_csv()
    assert back.source_model_digest == ck.digest


def test_table_lookup_errors():
    table = WeightTable([3, 5], [0.1, 0.2], tau=1.0)
    with pytest.raises(IncompleteTableError):
        table.losses_for([3, 4])
    with pytest.raises(IncompleteTableError):
        table.require([5, 9])
    np.testing.assert_allclose(table.batch_weights([3, 5]).sum(), 1.0)
