import math

import numpy as np
import pytest

from ggpvqa.autodiff import NonFiniteError, Tensor
from ggpvqa.optim import AdamW, WarmupSchedule


def scalar_adamw(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.02):
    """Plain-float AdamW, written independently of the array version."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta * (1 - lr * wd)
        theta = theta - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


def _single(value=0.5):
    p = Tensor(np.array([value]), requires_grad=True)
    return p, AdamW({"w": p}, lr=1e-2)


def test_zero_gradient_is_a_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW({"w": p}, weight_decay=0.0)
    for _ in range(5):
        p.grad = np.zeros(2)
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    np.testing.assert_array_equal(opt.first_moment("w"), [0.0, 0.0])


def test_first_moment_ema_by_hand():
    p, opt = _single()
    for expected in (0.1, 0.19):
        p.grad = np.array([1.0])
        opt.step()
        assert opt.first_moment("w")[0] == pytest.approx(expected, abs=1e-15)


def test_trajectory_matches_scalar_oracle():
    p, opt = _single(0.5)
    grads = [0.3, 0.3, 0.3]
    oracle = scalar_adamw(0.5, grads, lr=1e-2)
    for g, want in zip(grads, oracle):
        p.grad = np.array([g])
        opt.step()
        assert p.data[0] == pytest.approx(want, abs=1e-15)


def test_first_moment_before_any_step():
    p = Tensor(np.ones((2, 3)), requires_grad=True)
    opt = AdamW({"w": p})
    np.testing.assert_array_equal(opt.first_moment("w"), np.zeros((2, 3)))


def test_first_moment_is_a_copy():
    p, opt = _single()
    p.grad = np.array([1.0])
    opt.step()
    snap = opt.first_moment("w")
    snap[:] = 42.0
    assert opt.first_moment("w")[0] == pytest.approx(0.1)
    np.testing.assert_array_equal(opt.first_moment("w"), opt.first_moment("w"))


def test_first_moment_unknown_name():
    _, opt = _single()
    with pytest.raises(KeyError):
        opt.first_moment("nope")


def test_non_finite_gradient_names_parameter():
    p, opt = _single()
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError, match="'w'"):
        opt.step()


def test_moment_replay_property():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    opt = AdamW({"w": p}, beta1=0.85)
    m = np.zeros((3, 4))
    for _ in range(50):
        g = rng.normal(size=(3, 4))
        p.grad = g
        opt.step()
        m = 0.85 * m + 0.15 * g
    assert np.max(np.abs(opt.first_moment("w") - m)) < 1e-12


@pytest.mark.parametrize("g", [0.7, -0.2])
def test_constant_gradient_moves_against_sign(g):
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = AdamW({"w": p}, lr=1e-2, weight_decay=0.0)
    prev = None
    for t in range(1, 20):
        p.grad = np.array([g])
        opt.step()
        if t >= 5:
            assert np.sign(p.data[0] - prev) == -np.sign(g)
        prev = p.data[0]


def test_schedule_examples():
    s = WarmupSchedule(1000, 0.05, 3e-4)
    assert s.warmup_steps == 50
    assert s.lr_at(0) == pytest.approx(3e-4 / 50)
    assert s.lr_at(50) == 3e-4
    assert s.lr_at(24) == pytest.approx(3e-4 * 25 / 50)
    assert s.lr_at(1000) == 3e-4


def test_schedule_monotone_then_flat():
    s = WarmupSchedule(200, 0.05, 1.0)
    lrs = [s.lr_at(i) for i in range(201)]
    assert all(a <= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[s.warmup_steps - 1] == 1.0


def test_schedule_out_of_range():
    with pytest.raises(ValueError):
        WarmupSchedule(10, 0.1, 1.0).lr_at(11)
