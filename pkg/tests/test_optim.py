"""Optimizer and schedule checks."""

import math

import numpy as np
import pytest

from arflow.errors import ConfigError
from arflow.optim import AdamW, cosine_lr
from arflow.tensor import Tensor


def test_zero_grad_zero_decay_is_noop(rng):
    p = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    before = p.data.copy()
    opt = AdamW({"w": p}, weight_decay=0.0)
    for _ in range(5):
        opt.step()
    assert np.array_equal(p.data, before)


def test_first_step_matches_closed_form():
    p = Tensor(np.zeros(()), requires_grad=True)
    p.grad = np.ones(())
    opt = AdamW({"w": p}, lr=1e-4, weight_decay=0.0)
    opt.step()
    # bias correction makes m-hat = v-hat = 1, so the update is lr/(1 + eps)
    assert abs(float(p.data) + 1e-4) < 1e-11


def test_quadratic_descent_matches_scalar_recurrence():
    lr, b1, b2, eps = 1e-2, 0.9, 0.95, 1e-8
    p = Tensor(np.ones(()), requires_grad=True)
    opt = AdamW({"w": p}, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=0.0)

    # independent oracle: the same recurrence in plain floats
    theta, m, v = 1.0, 0.0, 0.0
    traj = []
    for t in range(1, 101):
        g = theta  # gradient of 0.5 * theta^2
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        traj.append(theta)

    abs_before = 1.0
    for t in range(100):
        p.grad = p.data.copy()
        opt.step()
        assert abs(float(p.data) - traj[t]) < 1e-14
        assert abs(float(p.data)) < abs_before
        abs_before = abs(float(p.data))


def test_decay_skips_low_rank_tensors():
    vec = Tensor(np.full(4, 2.0), requires_grad=True)
    scalar = Tensor(np.asarray(3.0), requires_grad=True)
    mat = Tensor(np.full((2, 2), 2.0), requires_grad=True)
    opt = AdamW({"v": vec, "s": scalar, "m": mat}, lr=0.1, weight_decay=0.5)
    opt.step()
    assert np.array_equal(vec.data, np.full(4, 2.0))
    assert float(scalar.data) == 3.0
    # decoupled decay: matrix shrinks by lr * wd * value even with zero grad
    assert np.allclose(mat.data, 2.0 * (1.0 - 0.1 * 0.5), atol=1e-15)


def test_state_round_trip(rng):
    p = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    opt = AdamW({"w": p}, lr=1e-3)
    for _ in range(3):
        p.grad = rng.standard_normal((2, 3))
        opt.step()
    assert opt.step_count == 3
    saved = {k: v.copy() for k, v in opt.state_tensors().items()}
    assert set(saved) == {"opt.m.w", "opt.v.w"}

    fresh = AdamW({"w": p}, lr=1e-3)
    fresh.load_state_tensors(saved)
    assert np.array_equal(fresh.m["w"], opt.m["w"])
    assert np.array_equal(fresh.v["w"], opt.v["w"])


def test_moment_shapes_match_params(rng):
    p = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    opt = AdamW({"w": p})
    assert opt.m["w"].shape == p.data.shape
    assert opt.v["w"].shape == p.data.shape


def test_zero_grad_clears_grads(rng):
    p = Tensor(rng.standard_normal(3), requires_grad=True)
    p.grad = np.ones(3)
    opt = AdamW({"w": p})
    opt.zero_grad()
    assert p.grad is None


def test_cosine_endpoints():
    assert cosine_lr(0, 100) == pytest.approx(1e-4, rel=1e-12)
    assert cosine_lr(100, 100) == pytest.approx(1e-6, rel=1e-12)
    assert cosine_lr(50, 100) == pytest.approx((1e-4 + 1e-6) / 2.0, rel=1e-12)


def test_cosine_monotone_and_clamped():
    vals = [cosine_lr(s, 10, lr_max=1.0, lr_min=0.1) for s in range(11)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert cosine_lr(25, 10, lr_max=1.0, lr_min=0.1) == pytest.approx(0.1)


def test_cosine_zero_total_raises():
    with pytest.raises(ConfigError, match="total_steps"):
        cosine_lr(0, 0)
