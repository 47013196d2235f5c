import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copdflow.errors import ContractError, ParseError, ShapeError
from copdflow.nn import AdamState, adam_step, bce_with_logits, binary_cross_entropy, sigmoid, softmax_cross_entropy
from copdflow.nn.checkpoint import dumps, load, loads, save
from copdflow.nn.gradcheck import check_loss
from copdflow.tensor import Rng


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 5))
def test_softmax_cross_entropy_gradient(seed, n, k):
    rng = Rng(seed)
    logits = 3 * rng.normal((n, k))
    labels = rng.integers(k, n)
    assert check_loss(softmax_cross_entropy, logits, labels) < 1e-4


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_binary_cross_entropy_gradient(seed, n):
    rng = Rng(seed)
    prob = 0.05 + 0.9 * rng.random((n, 1))
    target = (rng.random((n, 1)) > 0.5).astype(float)
    assert check_loss(binary_cross_entropy, prob, target) < 1e-4


@settings(max_examples=15)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_bce_with_logits_gradient(seed, n):
    rng = Rng(seed)
    z = 4 * rng.normal((n, 1))
    target = (rng.random((n, 1)) > 0.5).astype(float)
    assert check_loss(bce_with_logits, z, target) < 1e-4


def test_cross_entropy_uniform_logits_is_log_k():
    loss, grad = softmax_cross_entropy(np.zeros((4, 3)), np.array([0, 1, 2, 0]))
    assert math.isclose(loss, math.log(3), rel_tol=1e-12)
    assert np.allclose(grad.sum(axis=1), 0)


def test_cross_entropy_is_stable_for_huge_logits():
    loss, grad = softmax_cross_entropy(np.array([[1000.0, 0.0, -1000.0]]), np.array([2]))
    assert math.isclose(loss, 2000.0)
    assert np.all(np.isfinite(grad))


def test_cross_entropy_label_checks():
    with pytest.raises(ContractError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0]))


def test_bce_clamps_probabilities():
    loss, grad = binary_cross_entropy(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert math.isclose(loss, -math.log(1e-7), rel_tol=1e-9)
    assert np.all(np.isfinite(grad))


def test_bce_with_logits_agrees_with_probability_form():
    z = np.linspace(-6, 6, 13)
    t = (np.arange(13) % 2).astype(float)
    assert math.isclose(bce_with_logits(z, t)[0], binary_cross_entropy(sigmoid(z), t)[0], rel_tol=1e-9)


def adam_reference(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_scalar_reference():
    grads = [0.5, -1.0, 2.0, 0.1, 0.0]
    params = {"w": np.array([1.0])}
    state = AdamState()
    for g in grads:
        adam_step(params, {"w": np.array([g])}, state)
    assert math.isclose(params["w"][0], adam_reference(1.0, grads), rel_tol=0, abs_tol=1e-15)
    assert state.t == 5


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([0.0, 0.0])}
    adam_step(params, {"w": np.array([3.0, -0.01])}, AdamState(lr=0.1))
    assert np.allclose(params["w"], [-0.1, 0.1], atol=1e-6)


def test_adam_updates_in_place_and_checks_keys():
    w = np.ones(3)
    params = {"w": w}
    adam_step(params, {"w": np.ones(3)}, AdamState())
    assert params["w"] is w and np.all(w < 1)
    with pytest.raises(ContractError):
        adam_step(params, {"v": np.ones(3)}, AdamState())
    with pytest.raises(ContractError):
        adam_step(params, {"w": np.ones(2)}, AdamState())


def test_checkpoint_byte_layout():
    data = dumps({"a.w": np.array([[1.0, 2.0]], dtype=np.float32)})
    expected = (b"CFN1" + struct.pack("<II", 1, 1) + struct.pack("<H", 3) + b"a.w" + struct.pack("<B", 2)
                + struct.pack("<2I", 1, 2) + struct.pack("<2f", 1.0, 2.0))
    assert data == expected


@settings(max_examples=20)
@given(st.integers(0, 1000), st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=0, max_size=4))
def test_checkpoint_round_trip_is_byte_exact(seed, shapes):
    rng = Rng(seed)
    tensors = {f"t{i}.é": rng.normal(tuple(s)).astype(np.float32) if s else np.float32(rng.normal(()))
               for i, s in enumerate(shapes)}
    data = dumps(tensors)
    back = loads(data)
    assert list(back) == list(tensors)
    assert all(np.array_equal(back[k], tensors[k]) for k in tensors)
    assert dumps(back) == data


def test_checkpoint_errors(tmp_path):
    data = dumps({"x": np.ones((2, 2), dtype=np.float32)})
    with pytest.raises(ParseError, match="magic"):
        loads(b"XXXX" + data[4:])
    with pytest.raises(ParseError):
        loads(data[:-1])
    with pytest.raises(ParseError):
        loads(data + b"\0")
    path = tmp_path / "m.cfn"
    save(path, {"x": np.ones(2)})
    assert np.array_equal(load(path)["x"], np.ones(2))
    path.write_bytes(data[:10])
    with pytest.raises(ParseError, match="m.cfn"):
        load(path)
