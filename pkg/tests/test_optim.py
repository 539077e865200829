import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varytoy import tensor as T
from varytoy.optim import LrSchedule, OptimizerState, OptimizerStateError, adamw_step, clip_grad_norm, cosine_lr


def test_cosine_endpoints_and_midpoint():
    s = LrSchedule(5e-5, 0.0, 100)
    assert cosine_lr(s, 0) == 5e-5
    assert cosine_lr(s, 100) == 0.0
    assert cosine_lr(s, 50) == pytest.approx(2.5e-5, rel=1e-12)


def test_cosine_out_of_range():
    s = LrSchedule(1.0, 0.0, 10)
    with pytest.raises(ValueError):
        cosine_lr(s, -1)
    with pytest.raises(ValueError):
        cosine_lr(s, 11)
    with pytest.raises(ValueError):
        LrSchedule(1.0, 0.0, 0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1.0), st.floats(0.0, 1.0), st.integers(1, 500))
def test_property_cosine_monotone_and_exact_endpoints(lr0, frac, total):
    lr1 = lr0 * frac
    s = LrSchedule(lr0, lr1, total)
    vals = [cosine_lr(s, k) for k in range(total + 1)]
    assert vals[0] == lr0 and vals[-1] == lr1
    assert all(b <= a + 1e-18 for a, b in zip(vals, vals[1:]))


def _scalar(v):
    with T.precision(np.float64):
        return T.parameter(np.array([v]))


def test_adamw_zero_gradient_zero_decay_is_fixed_point():
    p = _scalar(1.5)
    state = OptimizerState(weight_decay=0.0)
    for _ in range(3):
        p.grad = np.zeros(1)
        adamw_step({"p": p}, state, 0.1)
    assert p.data[0] == 1.5
    assert state.step == 3


def test_adamw_matches_hand_stepped_transcript():
    # scalar, constant gradient 1, lr 1e-3, betas (0.9, 0.95), eps 1e-8, wd 0.01; stepped by hand
    p = _scalar(1.0)
    state = OptimizerState()
    expected = [0.99899000001, 0.9979800101199999]
    for want in expected:
        p.grad = np.ones(1)
        adamw_step({"p": p}, state, 1e-3)
        assert abs(p.data[0] - want) < 1e-10


def test_adamw_decay_only_shrinks_magnitude():
    p = _scalar(-2.0)
    state = OptimizerState(weight_decay=0.1)
    prev = 2.0
    for _ in range(5):
        adamw_step({"p": p}, state, 0.1)
        assert abs(p.data[0]) < prev
        prev = abs(p.data[0])


def test_adamw_shape_drift_is_an_error():
    p = _scalar(1.0)
    state = OptimizerState()
    adamw_step({"p": p}, state, 1e-3)
    p.data = np.zeros(2)
    with pytest.raises(OptimizerStateError):
        adamw_step({"p": p}, state, 1e-3)


def test_adamw_moments_track_parameter_shapes():
    params = {"a": T.parameter(np.ones((2, 3))), "b": T.parameter(np.ones(4))}
    state = OptimizerState()
    for p in params.values():
        p.grad = np.ones_like(p.data)
    adamw_step(params, state, 1e-3)
    assert {k: v.shape for k, v in state.m.items()} == {"a": (2, 3), "b": (4,)}
    assert {k: v.shape for k, v in state.v.items()} == {"a": (2, 3), "b": (4,)}


def test_clip_grad_norm():
    params = {"a": T.parameter(np.zeros(2)), "b": T.parameter(np.zeros(1))}
    params["a"].grad = np.array([3.0, 0.0], np.float32)
    params["b"].grad = np.array([4.0], np.float32)
    assert clip_grad_norm(params, 1.0) == pytest.approx(5.0)
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params.values()))
    assert total == pytest.approx(1.0, rel=1e-5)
    assert clip_grad_norm(params, 10.0) == pytest.approx(1.0, rel=1e-5)
