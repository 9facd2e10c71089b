"""Quick invariant checks runnable without pytest (``ggp-train selftest``)."""
from __future__ import annotations

import math
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ggp import PerturbationConfig, clip_and_apply, compute_perturbation, perturbed_training_step
from .nn import MomentumCopies, MultiModalModel
from .objectives import EmbeddingQueue, PretrainBatch, itc_loss, mlm_mask, pretrain_loss, vqa_loss
from .optim import AdamW
from .synthdata import answer_question, gen_pretrain_set, gen_vqa_set, pad_ids, stack_grids, VOCAB


def check_perturbation_algebra(cases: int = 1000, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        size = int(rng.integers(1, 50))
        theta = rng.normal(size=size) * 10 ** rng.uniform(-3, 2)
        moment = rng.normal(size=size) * 10 ** rng.uniform(-6, 0)
        delta, eps = rng.uniform(1e-3, 0.5), rng.uniform(1e-4, 0.1)
        r = compute_perturbation(theta, moment, PerturbationConfig(delta=delta, epsilon=eps))
        cos = r @ moment / (np.linalg.norm(r) * np.linalg.norm(moment))
        assert abs(cos - 1) < 1e-12, f"cosine {cos}"
        assert abs(np.linalg.norm(r) / (delta * np.linalg.norm(theta)) - 1) < 1e-10
        out = clip_and_apply(theta, r, eps)
        assert np.all(np.abs(out - theta) <= eps * np.abs(theta) + np.spacing(np.abs(theta)))
    assert not compute_perturbation(np.ones(3), np.zeros(3), PerturbationConfig()).any()
    return f"{cases} random cases"


def check_scalar_replay() -> str:
    w = Tensor(np.array([1.2]), requires_grad=True)
    model = type("M", (), {"params": {"visual.w": w}})()
    loss = lambda m, b: ad.scale(ad.sum((w - Tensor([0.3])) * (w - Tensor([0.3]))), 1.0)
    opt = AdamW(model.params, lr=0.05)
    cfg = PerturbationConfig(delta=0.05, epsilon=0.5)
    x, m, v = 1.2, 0.0, 0.0
    for t in range(1, 11):
        r = 0.0 if abs(m) < 1e-12 else 0.05 * abs(x) * math.copysign(1.0, m)
        g = 2 * (x + max(min(r, 0.5 * abs(x)), -0.5 * abs(x)) - 0.3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x * (1 - 0.05 * 0.02) - 0.05 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        perturbed_training_step(model, None, loss, opt, cfg)
        assert abs(w.data[0] - x) < 1e-12, f"step {t}: {w.data[0]} vs {x}"
    return "10 steps within 1e-12"


def check_gradients() -> str:
    model = MultiModalModel(seed=3)
    data = gen_pretrain_set(0, 3)
    caps = pad_ids([c for _, c in data])
    masked, pos = mlm_mask(caps, 0.15, 0)
    batch = PretrainBatch(stack_grids([s for s, _ in data]), caps, masked, pos, 1)
    mom = MomentumCopies(model)
    f = lambda _: pretrain_loss(model, batch, EmbeddingQueue(8), mom)[0]
    train, _ = gen_vqa_set(0, 3, 1)
    arrays = (stack_grids([s.scene for s in train]), pad_ids([s.question_ids for s in train]),
              pad_ids([s.answer_ids for s in train]))
    g = lambda _: vqa_loss(model, *arrays)
    worst = 0.0
    for fn, names in ((f, ("visual.layers.0.attn.q.weight", "text.tok_embed", "itm_head.weight")),
                      (g, ("decoder.layers.0.cross.k.weight", "visual.pos"))):
        for n in names:
            idx = np.random.default_rng(0).choice(model.params[n].size, 3, replace=False)
            worst = max(worst, ad.finite_difference_check(fn, model.params[n], indices=idx))
    assert worst < 1e-4, f"relative error {worst:.3g}"
    return f"max relative error {worst:.2e}"


def check_uniform_losses() -> str:
    e = np.eye(16)
    val = itc_loss(Tensor(e[[0, 1]]), Tensor(e[[2, 3]]), None).item()
    assert abs(val - math.log(2)) < 1e-9
    model = MultiModalModel(seed=0)
    model.params["decoder.head.weight"].data[:] = 0
    model.params["decoder.head.bias"].data[:] = 0
    train, _ = gen_vqa_set(0, 2, 1)
    lm = vqa_loss(model, stack_grids([s.scene for s in train]), pad_ids([s.question_ids for s in train]),
                  pad_ids([s.answer_ids for s in train])).item()
    assert abs(lm - math.log(len(VOCAB))) < 1e-9
    return "ln 2 and ln V reached"


def check_data() -> str:
    a, b = gen_vqa_set(0, 64, 64), gen_vqa_set(0, 64, 64)
    assert a == b
    for s in a[0] + a[1]:
        words = VOCAB.detokenize(s.question_ids[1:])
        assert VOCAB.words[s.answer_ids[1]] == answer_question(s.scene, words)
    grids = {s.grid.tobytes() for s in a[0]}
    assert not grids & {s.grid.tobytes() for s in a[1]}
    return "deterministic, rule-consistent, disjoint"


def check_determinism() -> str:
    def run():
        model = MultiModalModel(seed=1, with_decoder=False)
        opt = AdamW(model.params, lr=1e-3)
        q = EmbeddingQueue(16)
        data = gen_pretrain_set(1, 4)
        caps = pad_ids([c for _, c in data])
        masked, pos = mlm_mask(caps, 0.15, 0)
        batch = PretrainBatch(stack_grids([s for s, _ in data]), caps, masked, pos, 0)
        for _ in range(3):
            perturbed_training_step(model, batch, lambda m, bt: pretrain_loss(m, bt, q, None)[0], opt,
                                    PerturbationConfig())
        return b"".join(model.params[n].data.tobytes() for n in sorted(model.params))
    assert run() == run()
    return "bit-identical reruns"


CHECKS = {
    "perturbation algebra": check_perturbation_algebra,
    "scalar step replay": check_scalar_replay,
    "gradients vs finite differences": check_gradients,
    "uniform-logit losses": check_uniform_losses,
    "synthetic data": check_data,
    "training determinism": check_determinism,
}


def run_selftest(out=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            detail = fn()
            status = "PASS"
        except Exception as exc:  # noqa: BLE001 - reported, not raised
            detail = f"{type(exc).__name__}: {exc}"
            status, ok = "FAIL", False
        finally:
            ad.current_tape().clear()
        out(f"{status}  {name:<32} {detail}  ({time.perf_counter() - t0:.1f}s)")
    return ok


