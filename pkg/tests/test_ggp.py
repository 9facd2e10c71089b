import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ggpvqa import autodiff as ad
from ggpvqa.autodiff import Tensor
from ggpvqa.ggp import (ParameterSnapshot, PerturbationConfig, PerturbationError, clip_and_apply,
                        compute_perturbation, perturbed_training_step)
from ggpvqa.optim import AdamW

finite = st.floats(-10, 10, allow_nan=False, width=64)


def test_zero_moment_gives_zero():
    r = compute_perturbation(np.array([1.0, 2.0]), np.zeros(2), PerturbationConfig())
    np.testing.assert_array_equal(r, [0.0, 0.0])


def test_adaptive_by_hand():
    r = compute_perturbation(np.array([3.0, 4.0]), np.array([0.0, 0.01]), PerturbationConfig(delta=0.05))
    np.testing.assert_allclose(r, [0.0, 0.25], atol=1e-15)


def test_fixed_by_hand():
    r = compute_perturbation(np.array([3.0, 4.0]), np.array([0.0, 0.01]),
                             PerturbationConfig(adaptive=False, fixed_ratio=0.05))
    np.testing.assert_allclose(r, [0.0, 0.0005], atol=1e-18)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        compute_perturbation(np.ones(2), np.ones(3), PerturbationConfig())
    with pytest.raises(ValueError):
        clip_and_apply(np.ones(2), np.ones(3), 0.1)


def test_clip_by_hand():
    out = clip_and_apply(np.array([1.0, -2.0]), np.array([0.0, 0.25]), 0.001)
    np.testing.assert_allclose(out, [1.0, -1.998], atol=1e-15)


def test_clip_identity_and_zero_weight():
    theta = np.array([0.0, 1.5, -3.0])
    np.testing.assert_array_equal(clip_and_apply(theta, np.zeros(3), 0.01), theta)
    assert clip_and_apply(theta, np.array([5.0, 0.0, 0.0]), 0.5)[0] == 0.0


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite),
       st.floats(1e-3, 1.0))
def test_direction_and_magnitude(theta, moment, delta):
    cfg = PerturbationConfig(delta=delta)
    r = compute_perturbation(theta, moment, cfg)
    if np.linalg.norm(moment) < 1e-12 or np.linalg.norm(theta) < 1e-12:
        assert not r.any()
        return
    cos = r @ moment / (np.linalg.norm(r) * np.linalg.norm(moment))
    assert abs(cos - 1.0) < 1e-12
    assert np.linalg.norm(r) == pytest.approx(delta * np.linalg.norm(theta), rel=1e-10)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite),
       st.floats(1e-4, 0.5))
def test_clip_bound(theta, r, eps):
    out = clip_and_apply(theta, r, eps)
    # (theta + c) - theta can overshoot |c| by one rounding of theta
    slack = np.spacing(np.abs(theta))
    assert np.all(np.abs(out - theta) <= eps * np.abs(theta) + slack)


def test_scale_free_in_moment_and_linear_in_theta():
    rng = np.random.default_rng(0)
    theta, m = rng.normal(size=10), rng.normal(size=10)
    cfg = PerturbationConfig()
    base = np.linalg.norm(compute_perturbation(theta, m, cfg))
    for k in (1e-6, 0.3, 1e4):
        assert np.linalg.norm(compute_perturbation(theta, k * m, cfg)) == pytest.approx(base, rel=1e-12)
        assert np.linalg.norm(compute_perturbation(k * theta, m, cfg)) == pytest.approx(k * base, rel=1e-12)


def test_config_validation_and_selector():
    with pytest.raises(ValueError):
        PerturbationConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        PerturbationConfig(target=" , ")
    cfg = PerturbationConfig(target="visual, text.layers.0")
    assert cfg.selects("visual.ln_f.gamma")
    assert cfg.selects("text.layers.0.attn.q.weight")
    assert not cfg.selects("visualx.w")
    assert not cfg.selects("text.layers.1.attn.q.weight")


def test_snapshot_is_deep():
    p = {"a": Tensor(np.array([1.0, 2.0]))}
    snap = ParameterSnapshot.take(p, ["a"])
    p["a"].data[:] = 7.0
    np.testing.assert_array_equal(snap["a"], [1.0, 2.0])
    snap.restore(p)
    np.testing.assert_array_equal(p["a"].data, [1.0, 2.0])


# ------------------------------------------------------------- the perturbed step

class Quadratic:
    """0.5 * a * (w - c)^2 on a single named scalar parameter."""

    def __init__(self, w0, a=2.0, c=0.3, name="visual.w"):
        self.name = name
        self.params = {name: Tensor(np.array([w0]), requires_grad=True)}
        self.a, self.c = a, c

    def loss(self, model, batch):
        w = self.params[self.name]
        d = w - Tensor([self.c])
        return ad.scale(ad.sum(d * d), 0.5 * self.a)


def replay_scalar(w0, steps, lr, delta, eps, a=2.0, c=0.3, b1=0.9, b2=0.999, adam_eps=1e-8, wd=0.02):
    """Snapshot -> perturb -> gradient at the perturbed point -> restore -> AdamW, in plain floats."""
    w, m, v = w0, 0.0, 0.0
    traj = []
    for t in range(1, steps + 1):
        snap = w
        r = 0.0 if abs(m) < 1e-12 or abs(snap) < 1e-12 else delta * abs(snap) / abs(m) * m
        bound = eps * abs(snap)
        w_pert = snap + min(max(r, -bound), bound)
        g = a * (w_pert - c)
        w = snap
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w * (1 - lr * wd)
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + adam_eps)
        traj.append(w)
    return traj


@pytest.mark.parametrize("delta, eps", [(0.05, 0.001), (0.05, 0.5), (0.3, 0.2)])
def test_scalar_trajectory_matches_replay(delta, eps):
    model = Quadratic(1.2)
    opt = AdamW(model.params, lr=0.05)
    cfg = PerturbationConfig(delta=delta, epsilon=eps)
    oracle = replay_scalar(1.2, 10, 0.05, delta, eps)
    for want in oracle:
        perturbed_training_step(model, None, model.loss, opt, cfg, "pretrain")
        assert abs(model.params["visual.w"].data[0] - want) < 1e-12


def test_first_step_equals_plain_step():
    a, b = Quadratic(1.2), Quadratic(1.2)
    oa, ob = AdamW(a.params, lr=0.05), AdamW(b.params, lr=0.05)
    _, report = perturbed_training_step(a, None, a.loss, oa, PerturbationConfig(), "pretrain")
    perturbed_training_step(b, None, b.loss, ob, None)
    assert report.norms["visual.w"] == 0.0
    assert a.params["visual.w"].data.tobytes() == b.params["visual.w"].data.tobytes()


def test_delta_zero_is_bit_identical():
    a, b = Quadratic(1.2), Quadratic(1.2)
    oa, ob = AdamW(a.params, lr=0.05), AdamW(b.params, lr=0.05)
    for _ in range(20):
        perturbed_training_step(a, None, a.loss, oa, PerturbationConfig(delta=0.0), "pretrain")
        perturbed_training_step(b, None, b.loss, ob, PerturbationConfig(pretrain=False), "pretrain")
    assert a.params["visual.w"].data.tobytes() == b.params["visual.w"].data.tobytes()


class TwoPart:
    """Targeted ``visual.a`` and untargeted ``text.b`` coupled in one loss."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.params = {"visual.a": Tensor(rng.normal(size=(3, 2)), requires_grad=True),
                       "text.b": Tensor(rng.normal(size=(2,)), requires_grad=True)}
        self.x = rng.normal(size=(4, 3))

    def loss(self, model, batch):
        h = ad.matmul(Tensor(self.x), self.params["visual.a"])
        return ad.sum(ad.gelu(h) * self.params["text.b"])

    def grads_at(self, values):
        saved = {k: p.data.copy() for k, p in self.params.items()}
        for k, v in values.items():
            self.params[k].data[...] = v
        for p in self.params.values():
            p.grad = None
        ad.backward(self.loss(self, None))
        g = {k: p.grad.copy() for k, p in self.params.items()}
        for k, v in saved.items():
            self.params[k].data[...] = v
        return g


def test_restoration_by_instrumented_replay():
    model = TwoPart()
    shadow = TwoPart()
    opt = AdamW(model.params, lr=0.01)
    shadow_opt = AdamW(shadow.params, lr=0.01)
    cfg = PerturbationConfig(delta=0.2, epsilon=0.05)
    for _ in range(6):
        before = {k: p.data.copy() for k, p in model.params.items()}
        m = opt.first_moment("visual.a")
        pert = clip_and_apply(before["visual.a"], compute_perturbation(before["visual.a"], m, cfg), cfg.epsilon)
        g = shadow.grads_at({"visual.a": pert, "text.b": before["text.b"]})
        perturbed_training_step(model, None, model.loss, opt, cfg, "pretrain")
        shadow_opt.step(grads=g)
        for k in model.params:
            np.testing.assert_array_equal(model.params[k].data, shadow.params[k].data)


def test_non_finite_loss_restores_and_reports():
    model = Quadratic(1.0)
    opt = AdamW(model.params, lr=0.05)
    cfg = PerturbationConfig()
    perturbed_training_step(model, None, model.loss, opt, cfg, "pretrain")
    before = model.params["visual.w"].data.copy()

    def bad(m, batch):
        return ad.sum(m.params["visual.w"] * Tensor([np.nan]))

    with pytest.raises(PerturbationError, match="visual.w"):
        perturbed_training_step(model, None, bad, opt, cfg, "pretrain")
    np.testing.assert_array_equal(model.params["visual.w"].data, before)


def test_report_fields():
    model = TwoPart()
    opt = AdamW(model.params, lr=0.01)
    cfg = PerturbationConfig(delta=0.05, epsilon=1.0)
    perturbed_training_step(model, None, model.loss, opt, cfg, "pretrain")
    _, rep = perturbed_training_step(model, None, model.loss, opt, cfg, "pretrain")
    assert set(rep.norms) == {"visual.a"}
    assert rep.cosines["visual.a"] == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= rep.clip_fractions["visual.a"] <= 1.0
    assert rep.norms["visual.a"] == pytest.approx(0.05 * np.linalg.norm(model.params["visual.a"].data), rel=0.05)
