"""Moment-aligned weight perturbation around an AdamW step.

First the two building blocks on hand-sized inputs, then a short run on a
quadratic bowl showing that the perturbation grows with the optimizer's
first moment and is undone before every update.
"""
import numpy as np

from ggpvqa import autodiff as ad
from ggpvqa.autodiff import Tensor
from ggpvqa.ggp import PerturbationConfig, clip_and_apply, compute_perturbation, perturbed_training_step
from ggpvqa.optim import AdamW

theta = np.array([3.0, 4.0])
moment = np.array([0.0, 0.01])
r = compute_perturbation(theta, moment, PerturbationConfig(delta=0.05))
print("adaptive r:", r, "| norm", np.linalg.norm(r), "= 0.05 * |theta| =", 0.05 * 5)
print("fixed r:   ", compute_perturbation(theta, moment, PerturbationConfig(adaptive=False)))
print("clipped:   ", clip_and_apply(np.array([1.0, -2.0]), np.array([0.0, 0.25]), 0.001))

# a 4-d bowl whose "visual" weights are perturbed and "text" weights are not
params = {"visual.w": Tensor(np.array([2.0, -1.0, 0.5, 3.0]), requires_grad=True),
          "text.b": Tensor(np.array([1.0, 1.0]), requires_grad=True)}
centre = Tensor(np.array([0.3, 0.3, 0.3, 0.3]))
model = type("Bowl", (), {"params": params})()


def loss_fn(m, batch):
    d = m.params["visual.w"] - centre
    return ad.sum(d * d) + ad.sum(m.params["text.b"] * m.params["text.b"])


opt = AdamW(params, lr=0.05)
cfg = PerturbationConfig(delta=0.05, epsilon=0.01)
print("\nstep  loss      |r| (pre-clip)  clipped share  cos(r, m)")
for step in range(8):
    before = {k: p.data.copy() for k, p in params.items()}
    loss, rep = perturbed_training_step(model, None, loss_fn, opt, cfg, "pretrain")
    print(f"{step:4d}  {loss:.5f}  {rep.norms['visual.w']:.6f}        "
          f"{rep.clip_fractions['visual.w']:.2f}           {rep.cosines.get('visual.w', float('nan')):.3f}")
print("\nonly prefixes listed in cfg.target are touched:", sorted(rep.norms))
