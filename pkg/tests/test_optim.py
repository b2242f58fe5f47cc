import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from masan.optim import AdamState, adam_step
from masan.tensor import Parameter


def adam_oracle(w, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out longhand."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(w)
    return out


def test_three_steps_on_square_match_oracle():
    p = Parameter("w", [1.0])
    state = AdamState()
    got = []
    for _ in range(3):
        adam_step([p], {"w": 2 * p.data}, state, lr=0.1)
        got.append(float(p.data[0]))
    np.testing.assert_allclose(got, adam_oracle(1.0, lambda w: 2 * w, 3, 0.1), atol=1e-6)
    assert state.t == 3


@settings(max_examples=40, deadline=None)
@given(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3), st.floats(1e-4, 1e-1))
def test_first_step_moves_by_lr_against_gradient_sign(g, lr):
    p = Parameter("w", np.zeros(3))
    adam_step([p], {"w": np.full(3, g, dtype=np.float32)}, AdamState(), lr=lr)
    np.testing.assert_allclose(p.data, -lr * np.sign(g), rtol=1e-4)


def test_zero_gradient_leaves_parameter_unchanged():
    p = Parameter("w", [0.5, -2.0])
    before = p.data.copy()
    state = adam_step([p], {"w": np.zeros(2, dtype=np.float32)}, AdamState())
    assert np.array_equal(p.data, before)
    assert state.t == 1 and np.all(np.isfinite(state.m["w"])) and np.all(np.isfinite(state.v["w"]))


def test_uses_param_grad_when_no_mapping_given():
    p = Parameter("w", [1.0])
    p.grad = np.array([3.0], dtype=np.float32)
    adam_step([p], None, AdamState(), lr=0.01)
    assert p.data[0] == pytest.approx(0.99, abs=1e-6)


def test_rejects_bad_betas_and_shapes():
    p = Parameter("w", [1.0])
    with pytest.raises(ValueError):
        adam_step([p], None, AdamState(), beta1=1.0)
    with pytest.raises(ValueError):
        adam_step([p], {"w": np.zeros(2, dtype=np.float32)}, AdamState())
