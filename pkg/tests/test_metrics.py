import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hsicl.metrics import hamming_accuracy, multilabel_accuracy, singlelabel_accuracy

from oracles import jaccard_sets

label_sets = st.lists(st.frozensets(st.integers(1, 5)), min_size=1, max_size=12)


def test_perfect_multilabel_is_100():
    assert multilabel_accuracy([{1}, {2, 3}], [{1}, {2, 3}]) == 100.0


def test_one_third_example():
    assert multilabel_accuracy([{2, 3}], [{1, 2}]) == pytest.approx(100 / 3)


def test_both_empty_counts_as_correct():
    assert multilabel_accuracy([set()], [set()]) == 100.0


def test_indicator_matrices_and_sets_agree():
    truth = np.array([[1, 1, 0], [0, 0, 1]])
    pred = np.array([[0, 1, 1], [0, 0, 1]])
    assert multilabel_accuracy(pred, truth) == multilabel_accuracy([{2, 3}, {3}], [{1, 2}, {3}])


@given(st.data())
def test_matches_set_oracle_exactly(data):
    truth = data.draw(label_sets)
    pred = data.draw(st.lists(st.frozensets(st.integers(1, 5)), min_size=len(truth), max_size=len(truth)))
    assert multilabel_accuracy(pred, truth) == jaccard_sets(pred, truth)


@given(label_sets)
def test_self_accuracy_is_100(x):
    assert multilabel_accuracy(x, x) == 100.0


@given(st.data())
def test_symmetric(data):
    a = data.draw(label_sets)
    b = data.draw(st.lists(st.frozensets(st.integers(1, 5)), min_size=len(a), max_size=len(a)))
    assert multilabel_accuracy(a, b) == multilabel_accuracy(b, a)


def test_hamming_example():
    # one wrong slot out of 2 samples x 4 classes
    assert hamming_accuracy([{1}, {2, 3}], [{1}, {2}], 4) == pytest.approx(87.5)


def test_single_label():
    assert singlelabel_accuracy([1, 2, 3], [1, 2, 3]) == 100.0
    assert singlelabel_accuracy([1, 2, 3, 4], [1, 2, 1, 1]) == 50.0


@pytest.mark.parametrize("fn", [multilabel_accuracy, singlelabel_accuracy])
def test_guards(fn):
    with pytest.raises(ValueError):
        fn([], [])
    with pytest.raises(ValueError):
        fn([{1}] if fn is multilabel_accuracy else [1], [{1}, {2}] if fn is multilabel_accuracy else [1, 2])
