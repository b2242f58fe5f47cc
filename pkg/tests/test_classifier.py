import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from masan import tensor as T
from masan.autoencoders import LossConfig
from masan.classifier import MLP, MlpConfig, Prediction, cross_entropy, mlp_forward, one_hot, total_loss
from masan.gradcheck import finite_diff_gradient
from masan.tensor import ShapeError, Tape, Tensor, backward


def prediction(probs):
    p = Tensor(probs)
    return Prediction(p, p)


def scalar(v):
    return Tensor(np.float32(v))


def test_zero_weights_give_uniform_probabilities():
    mlp = MLP("m", 6, MlpConfig(), np.random.default_rng(0))
    for p in mlp.parameters():
        p.data[...] = 0
    out = mlp_forward(Tensor(np.random.default_rng(1).standard_normal((3, 6))), mlp)
    assert np.all(out.probs.data == 0.5)


def test_forward_matches_hand_matmul():
    rng = np.random.default_rng(2)
    mlp = MLP("m", 12, MlpConfig(hidden=(5, 4)), rng)
    for p in mlp.parameters():
        p.data[...] = rng.standard_normal(p.shape)
    x = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
    h = x.reshape(1, -1).astype(np.float64)
    for i, layer in enumerate(mlp.layers):
        h = h @ layer.w.data + layer.b.data
        if i < 2:
            h = np.maximum(h, 0)
    e = np.exp(h - h.max())
    out = mlp_forward(Tensor(x), mlp)
    np.testing.assert_allclose(out.logits.data, h, atol=1e-5, rtol=1e-5)
    np.testing.assert_allclose(out.probs.data, e / e.sum(), atol=1e-5)


def test_width_mismatch_is_rejected():
    mlp = MLP("m", 6, MlpConfig(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        mlp_forward(Tensor(np.zeros((2, 7))), mlp)


def test_config_validation():
    with pytest.raises(ValueError):
        MlpConfig(hidden=(0,))
    with pytest.raises(ValueError):
        MlpConfig(n_classes=1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5))
def test_probability_rows_sum_to_one(seed, n):
    rng = np.random.default_rng(seed)
    mlp = MLP("m", 4, MlpConfig(hidden=(3,), n_classes=3), rng)
    probs = mlp_forward(Tensor(rng.standard_normal((n, 4)) * 10), mlp).probs.data
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-5)


def test_cross_entropy_examples():
    for label in (0, 1):
        assert cross_entropy(prediction([[0.5, 0.5]]), [label]).item() == pytest.approx(0.6931, abs=1e-4)
    assert cross_entropy(prediction([[1.0, 0.0]]), [0]).item() == 0
    # the floor keeps an impossible label finite
    assert cross_entropy(prediction([[1.0, 0.0]]), [1]).item() == pytest.approx(-np.log(1e-12), rel=1e-5)


def test_cross_entropy_mixed_batch_against_per_sample_oracle():
    probs = np.array([[0.7, 0.3], [0.2, 0.8]], dtype=np.float32)
    labels = [1, 1]
    ref = np.mean([-np.log(float(probs[n, labels[n]])) for n in range(2)])
    assert cross_entropy(prediction(probs), labels).item() == pytest.approx(ref, abs=1e-6)


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        cross_entropy(prediction([[0.5, 0.5]]), [2])
    with pytest.raises(ShapeError):
        cross_entropy(prediction([[0.5, 0.5]]), [0, 1])
    assert one_hot([1, 0], 2).tolist() == [[0, 1], [1, 0]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 6))
def test_cross_entropy_non_negative_and_zero_only_when_certain(seed, n):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((n, 2)) * 3)
    labels = rng.integers(0, 2, n).tolist()
    assert cross_entropy(Prediction(logits, T.softmax(logits, axis=-1)), labels).item() >= 0
    certain = one_hot(labels, 2)
    assert cross_entropy(prediction(certain), labels).item() == 0


def test_cross_entropy_gradient_is_probs_minus_one_hot():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    labels = [0, 2, 1, 2]

    def f(t=logits):
        return cross_entropy(Prediction(t, T.softmax(t, axis=-1)), labels)

    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    probs = T.softmax(logits, axis=-1).data
    expected = (probs - one_hot(labels, 3)) / 4
    np.testing.assert_allclose(logits.grad, expected, atol=1e-5)
    with T.precision(np.float64):
        wide = Tensor(logits.data)
        numeric = finite_diff_gradient(lambda t: f(t), wide, eps=1e-6)
    np.testing.assert_allclose(numeric, expected, atol=1e-5)


def test_total_loss_examples():
    lb = total_loss(scalar(2), scalar(4), scalar(1))
    assert lb.L_total.item() == 4.0
    assert total_loss(scalar(0), scalar(0), scalar(0)).L_total.item() == 0
    assert total_loss(scalar(2), scalar(4), scalar(1.25), LossConfig(alpha=0, beta=0)).L_total.item() == 1.25
    assert lb.values() == {"L_s": 2.0, "L_f": 4.0, "L_reg": 1.0, "L_total": 4.0}
    with pytest.raises(ValueError):
        total_loss(scalar(np.nan), scalar(0), scalar(0))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 10), st.floats(0, 1), st.floats(0, 1))
def test_total_loss_is_the_weighted_sum(ls, lf, lr, a, b):
    lb = total_loss(scalar(ls), scalar(lf), scalar(lr), LossConfig(alpha=a, beta=b))
    ref = a * np.float32(ls) + b * np.float32(lf) + np.float32(lr)
    assert lb.L_total.item() == pytest.approx(ref, rel=1e-6, abs=1e-6)
