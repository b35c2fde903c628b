import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsim.algorithms import RoundTrace
from fedsim.data import ClientDataset, Federation, split_train_test
from fedsim.metrics import ConfusionMatrix, MetricError, confusion, global_eval, report, rounds_to_threshold
from fedsim.numerics import MlpConfig, flatten, init_model, predict, unflatten, zeros_model
from fedsim.protocol import evaluate_accuracy


def test_confusion_examples():
    assert np.array_equal(confusion([0, 1, 2], [0, 1, 2], 3).counts, np.eye(3, dtype=int))
    assert confusion([], [], 2).counts.sum() == 0
    cm = confusion([0, 1], [1, 1], 2).counts
    assert cm[1, 0] == 1 and cm[1, 1] == 1 and cm.sum() == 2


def test_confusion_rejects_out_of_range():
    with pytest.raises(MetricError):
        confusion([0, 2], [0, 1], 2)


def test_report_perfect():
    rep = report(confusion([0, 1, 2, 2], [0, 1, 2, 2], 3))
    assert rep.accuracy == rep.macro_f1 == rep.weighted_f1 == 100.0


def test_report_two_by_two_all_ones():
    # P = R = 0.5 for both classes, so F1 = 0.5 each.
    rep = report(ConfusionMatrix(np.array([[1, 1], [1, 1]])))
    assert rep.accuracy == pytest.approx(50.0)
    assert rep.per_class_f1 == pytest.approx((50.0, 50.0))
    assert rep.macro_f1 == pytest.approx(50.0)
    assert rep.weighted_f1 == pytest.approx(50.0)


def test_absent_class_scores_zero_and_carries_no_weight():
    full = report(ConfusionMatrix(np.array([[3, 1, 0], [1, 3, 0], [0, 0, 0]])))
    two = report(ConfusionMatrix(np.array([[3, 1], [1, 3]])))
    assert full.per_class_f1[2] == 0.0
    assert full.weighted_f1 == pytest.approx(two.weighted_f1)
    assert full.macro_f1 == pytest.approx(two.macro_f1 * 2 / 3)


def test_empty_report_raises():
    with pytest.raises(MetricError):
        report(ConfusionMatrix(np.zeros((2, 2), dtype=int)))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60), st.randoms())
def test_permutation_invariance_and_bounds(pairs, rnd):
    preds, truths = map(list, zip(*pairs))
    a = report(confusion(preds, truths, 4))
    rnd.shuffle(pairs)
    preds, truths = map(list, zip(*pairs))
    b = report(confusion(preds, truths, 4))
    assert a == b
    for v in (a.accuracy, a.macro_f1, a.weighted_f1):
        assert 0.0 <= v <= 100.0 + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=3, max_size=3), st.integers(1, 5))
def test_balanced_matrix_macro_equals_weighted(pred_rows, support):
    counts = np.zeros((3, 3), dtype=int)
    for t, p in enumerate(pred_rows):
        counts[t, p] = support
    rep = report(ConfusionMatrix(counts))
    assert rep.macro_f1 == pytest.approx(rep.weighted_f1, abs=1e-12)


def _fed(n_per_class=4, classes=3, copies=1, seed=0):
    rng = np.random.default_rng(seed)
    clients = []
    for k in range(2):
        labels = np.repeat(np.arange(classes), n_per_class)
        ds = ClientDataset(f"c{k}", rng.standard_normal((labels.size, 4)), labels)
        clients.append(split_train_test(ds, 0.5, seed=k))
    return Federation(tuple(clients) * copies, classes)


def test_report_accuracy_matches_evaluate_accuracy():
    fed = _fed(6)
    mc = MlpConfig(4, (3,), 3, 0.0, seed=2)
    w = flatten(init_model(mc))
    ds = fed.clients[0]
    x, y = ds.view("test")
    rep = report(confusion(predict(unflatten(w, mc), x), y, 3))
    assert rep.accuracy == pytest.approx(evaluate_accuracy(w, ds, "test", mc))


def test_global_eval_single_client_equals_local():
    fed = _fed()
    one = Federation(fed.clients[:1], 3)
    mc = MlpConfig(4, (3,), 3, 0.0, seed=2)
    w = flatten(init_model(mc))
    assert global_eval(w, one, mc).accuracy == pytest.approx(evaluate_accuracy(w, one.clients[0], "test", mc))


def test_global_eval_duplicate_federation_is_identical():
    mc = MlpConfig(4, (3,), 3, 0.0, seed=2)
    w = flatten(init_model(mc))
    assert global_eval(w, _fed(), mc) == global_eval(w, _fed(copies=2), mc)


def test_zero_model_on_balanced_31_classes():
    fed = _fed(n_per_class=4, classes=31)
    mc = MlpConfig(4, (), 31, 0.0)
    rep = global_eval(flatten(zeros_model(mc)), fed, mc)
    assert rep.accuracy == pytest.approx(100.0 / 31)


def _trace(accs):
    return [RoundTrace(i + 1, a, a, a, (), 0) for i, a in enumerate(accs)]


def test_rounds_to_threshold():
    assert rounds_to_threshold(_trace([10, 20, 30, 40, 50, 60, 70, 80]), 70) == 7
    assert rounds_to_threshold(_trace([10, 20]), 90) is None
    assert rounds_to_threshold(_trace([5, 6]), 0) == 1
