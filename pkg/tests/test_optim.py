import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hsicl.autodiff import Tensor, mul, sum as tsum
from hsicl.exceptions import NonFiniteError
from hsicl.optim import AdamState, LrSchedule, adam_step, iter_batches, lr_at, n_batches, train_epochs
from hsicl.rng import Rng

from oracles import adam_reference


def test_zero_gradient_leaves_params():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    out = adam_step(p, {"w": np.zeros(2)}, AdamState.for_params(p), lr=0.1)
    np.testing.assert_array_equal(out["w"].data, p["w"].data)


@pytest.mark.parametrize("g", [1e-3, 0.5, -7.0])
def test_first_step_has_size_lr(g):
    p = {"w": Tensor(np.array([0.3]))}
    out = adam_step(p, {"w": np.array([g])}, AdamState.for_params(p), lr=0.01)
    assert abs(abs(out["w"].data[0] - 0.3) - 0.01) < 1e-6


def test_fifty_steps_on_square_match_reference():
    p = {"w": Tensor(np.array([1.0]))}
    state = AdamState.for_params(p)
    traj = [1.0]
    for _ in range(50):
        p = adam_step(p, {"w": 2 * p["w"].data}, state, lr=0.1)
        traj.append(float(p["w"].data[0]))
    ref = adam_reference(lambda t: 2 * t, 1.0, 0.1, 50)
    np.testing.assert_allclose(traj, ref, rtol=0, atol=1e-12)
    assert abs(traj[-1]) < 0.2


def test_l2_is_added_to_the_gradient():
    p = {"w": Tensor(np.array([2.0]))}
    a = adam_step(p, {"w": np.array([0.0])}, AdamState.for_params(p), lr=0.1, l2_weight=0.5)
    b = adam_step(p, {"w": np.array([1.0])}, AdamState.for_params(p), lr=0.1)
    np.testing.assert_array_equal(a["w"].data, b["w"].data)


def test_moments_match_parameter_shapes():
    p = {"a": Tensor(np.zeros((3, 2))), "b": Tensor(np.zeros(4))}
    state = AdamState.for_params(p)
    adam_step(p, {"a": np.ones((3, 2))}, state, 0.1)
    assert state.m["a"].shape == (3, 2) and state.v["b"].shape == (4,)


def test_non_finite_gradient_aborts():
    p = {"w": Tensor(np.zeros(2))}
    with pytest.raises(NonFiniteError, match="w"):
        adam_step(p, {"w": np.array([np.nan, 0.0])}, AdamState.for_params(p), 0.1)


@pytest.mark.parametrize("epoch, expected", [(0, 1e-3), (9, 1e-3), (10, 9e-4), (25, 1e-3 * 0.81)])
def test_lr_at(epoch, expected):
    assert lr_at(LrSchedule(1e-3, 10, 0.9), epoch) == pytest.approx(expected, rel=1e-12)


@given(st.floats(1e-5, 1.0), st.integers(1, 30), st.floats(0.01, 1.0), st.integers(0, 500))
def test_lr_non_increasing(base, step, gamma, epoch):
    s = LrSchedule(base, step, gamma)
    assert lr_at(s, epoch + 1) <= lr_at(s, epoch)


def test_negative_epoch_rejected():
    with pytest.raises(ValueError):
        lr_at(LrSchedule(1.0), -1)


@given(st.integers(1, 200), st.integers(1, 64), st.booleans())
def test_batches_cover_indices(n, bs, drop_last):
    batches = list(iter_batches(n, bs, Rng(0), drop_last=drop_last))
    idx = np.concatenate(batches)
    assert len(batches) == n_batches(n, bs, drop_last)
    assert len(set(idx.tolist())) == len(idx)
    if drop_last and n >= bs:
        assert len(idx) == (n // bs) * bs
    else:
        assert sorted(idx.tolist()) == list(range(n))


def test_train_epochs_keeps_best_epoch():
    p = {"w": Tensor(np.array([3.0]))}
    scores = iter([1.0, 5.0, 5.0, 2.0])

    def loss_fn(params, idx):
        return tsum(mul(params["w"], params["w"]))

    res = train_epochs(p, ["w"], loss_fn, 4, epochs=4, batch_size=4, schedule=LrSchedule(0.1),
                       select=lambda _: next(scores))
    assert res.best_epoch == 1
    assert [h["val_score"] for h in res.history] == [1.0, 5.0, 5.0, 2.0]


def test_train_epochs_flags_non_finite_loss():
    p = {"w": Tensor(np.array([np.inf]))}
    with pytest.raises(NonFiniteError):
        train_epochs(p, ["w"], lambda q, i: tsum(mul(q["w"], q["w"])), 2, epochs=1, batch_size=2,
                     schedule=LrSchedule(0.1))
