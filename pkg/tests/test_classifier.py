import math

import numpy as np
import pytest

from copdflow import CLASSES
from copdflow.classifier import (FILTERS, KERNELS, FlowNetClassifier, _batches, build_classifier, expected_trace,
                                 feature_size)
from copdflow.errors import ContractError, ShapeError
from copdflow.nn.gradcheck import check_layer
from copdflow.tensor import Rng

TINY = dict(filters=(4, 6, 8), kernels=(3, 3, 3), hidden=16, dtype=np.float64)


def banded(n, seed=0, size=32):
    """Images whose bright vertical band sits in the left, right or middle third."""
    rng = Rng(seed)
    y = np.arange(n) % 3
    X = -1 + 0.1 * rng.random((n, size, size))
    third = size // 3
    for i, c in enumerate(y):
        start = (0, 2 * third, third)[c]
        X[i, :, start:start + third] = 0.8
    return X, y


def test_full_model_trace_and_size():
    net = build_classifier(rng=Rng(0))
    assert net.shape_trace((2, 1, 128, 128)) == expected_trace(2)
    assert net.shape_trace((2, 1, 128, 128))[-1] == (2, 3)
    assert feature_size(128) == 1
    assert net.n_params() > 0


def test_same_seed_same_weights_and_bn_init():
    a = build_classifier(rng=Rng(4).spawn("init"))
    b = build_classifier(rng=Rng(4).spawn("init"))
    sa, sb = a.state_dict(), b.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    bn = a[1]
    assert np.all(bn.params["gamma"] == 1) and np.all(bn.params["beta"] == 0)
    assert np.all(bn.buffers["running_mean"] == 0) and np.all(bn.buffers["running_var"] == 1)


def test_reduced_model_gradients():
    net = build_classifier((2, 3, 4, 5), (3, 3, 3, 1), image_size=32, hidden=4, rng=Rng(1))
    errors = check_layer(net, Rng(2).normal((3, 1, 32, 32)), seed=3)
    assert max(errors.values()) < 1e-3, errors


@pytest.mark.parametrize("seed", range(3))
def test_untrained_loss_is_near_log3(seed):
    X, y = banded(16, seed, size=128)
    loss = FlowNetClassifier(seed=seed).first_batch_loss(X, y)
    assert abs(loss - math.log(3)) < 0.05


def test_batches_never_leave_a_singleton():
    for n in range(2, 40):
        for bs in (2, 3, 16):
            sizes = [len(b) for b in _batches(np.arange(n), bs)]
            assert sum(sizes) == n and min(sizes) >= 2


@pytest.fixture(scope="module")
def fitted():
    X, y = banded(30, 1)
    names = np.array(CLASSES)[y]
    clf = FlowNetClassifier(epochs=12, batch_size=8, lr=3e-3, seed=2, patience=None, **TINY)
    return clf.fit(X, names), X, y


def test_probabilities_and_predictions(fitted):
    clf, X, y = fitted
    probs = clf.predict_proba(X)
    assert probs.shape == (30, 3) and np.allclose(probs.sum(axis=1), 1, atol=1e-12)
    pred = clf.predict(X)
    assert set(pred) <= set(CLASSES)
    assert np.array_equal(pred, np.array(CLASSES)[probs.argmax(axis=1)])
    assert np.mean(pred == np.array(CLASSES)[y]) == 1.0


def test_batch_size_does_not_change_inference(fitted):
    clf, X, _ = fitted
    batched = clf.predict_proba(X)
    single = np.concatenate([clf.predict_proba(X[i:i + 1]) for i in range(5)])
    assert np.allclose(single, batched[:5], atol=1e-12)


def test_evaluate_is_permutation_invariant(fitted):
    clf, X, y = fitted
    perm = Rng(9).permutation(len(y))
    a, b = clf.evaluate(X, y), clf.evaluate(X[perm], y[perm])
    assert np.array_equal(a.confusion, b.confusion) and a.accuracy == b.accuracy == 1.0
    with pytest.raises(ContractError):
        clf.evaluate(X[:0], y[:0])


def test_input_shape_errors(fitted):
    clf, X, _ = fitted
    with pytest.raises(ShapeError):
        clf.predict(np.zeros((2, 64, 64)))
    with pytest.raises(ShapeError):
        clf.predict(np.zeros((2, 3, 32, 32)))


def test_untrained_zero_image_is_near_uniform():
    clf = FlowNetClassifier(seed=0)
    clf._build(128)
    probs = clf.predict_proba(np.zeros((1, 128, 128)))
    assert np.all(np.abs(probs - 1 / 3) < 0.2)


def test_history_is_deterministic(tmp_path):
    X, y = banded(12, 3)
    a = FlowNetClassifier(epochs=3, batch_size=4, seed=1, **TINY).fit(X, y, X[:6], y[:6])
    b = FlowNetClassifier(epochs=3, batch_size=4, seed=1, **TINY).fit(X, y, X[:6], y[:6])
    assert a.history_ == b.history_ and a.n_epochs_ == 3
    a.write_history(tmp_path / "a.csv")
    b.write_history(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().startswith("epoch,train_loss,train_acc,val_acc\n1,")
    assert isinstance(a.predict(X)[0], (int, np.integer))


def test_early_stopping_restores_best_epoch():
    X, y = banded(12, 4)
    clf = FlowNetClassifier(epochs=40, batch_size=4, lr=3e-3, patience=2, seed=0, **TINY).fit(X, y, X, y)
    val = clf.history_["val_acc"]
    assert clf.n_epochs_ < 40
    assert val[clf.best_epoch_ - 1] == max(val)
    assert np.mean(clf.predict(X) == y) == max(val)


def test_fit_contract_errors():
    X, y = banded(6)
    with pytest.raises(ContractError):
        FlowNetClassifier(batch_size=1, **TINY).fit(X, y)
    with pytest.raises(ContractError):
        FlowNetClassifier(**TINY).fit(X[:0], y[:0])
    with pytest.raises(ContractError):
        FlowNetClassifier(**TINY).fit(X, y[:5])
    with pytest.raises(ContractError):
        FlowNetClassifier(**TINY).fit(X, np.array(["up"] * 6))


def test_checkpoint_round_trip(fitted, tmp_path):
    clf, X, _ = fitted
    clf.save(tmp_path / "clf.cfn")
    back = FlowNetClassifier(**TINY).load(tmp_path / "clf.cfn", image_size=32)
    assert np.allclose(back.predict_proba(X), clf.predict_proba(X), atol=1e-5)
    with pytest.raises(ContractError, match="clf.cfn"):
        FlowNetClassifier(filters=FILTERS, kernels=KERNELS).load(tmp_path / "clf.cfn")


def test_sklearn_params():
    clf = FlowNetClassifier(epochs=5, lr=0.01)
    assert clf.get_params()["epochs"] == 5
    assert clf.set_params(epochs=7).epochs == 7


def test_single_sample_evaluation_and_purity(fitted):
    clf, X, y = fitted
    assert clf.evaluate(X[:1], y[:1]).accuracy in (0.0, 1.0)
    assert np.array_equal(clf.predict_proba(X[:4]), clf.predict_proba(X[:4]))
