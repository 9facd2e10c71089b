"""Reverse-mode differentiation on float64 arrays.

Builds a small two-layer network by hand, differentiates a cross-entropy
loss, and compares every weight gradient with central differences.
"""
import numpy as np

from ggpvqa import autodiff as ad
from ggpvqa.autodiff import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(5, 3)))
w1 = Tensor(rng.normal(size=(3, 8)) * 0.5, requires_grad=True, name="w1")
w2 = Tensor(rng.normal(size=(8, 4)) * 0.5, requires_grad=True, name="w2")
labels = np.array([0, 3, 1, 1, 2])


def loss_fn(_=None):
    h = ad.gelu(ad.matmul(x, w1))
    return ad.softmax_cross_entropy(ad.matmul(h, w2), labels)


loss = loss_fn()
print("loss:", loss.item())
print("recorded operations:", len(ad.current_tape().nodes))
ad.backward(loss)
print("tape after backward:", len(ad.current_tape().nodes))
print("dL/dw2 row 0:", np.round(w2.grad[0], 5))

# every entry against central differences
for w in (w1, w2):
    err = ad.finite_difference_check(loss_fn, w)
    print(f"{w.name}: worst relative error {err:.2e}")

# shape mistakes are reported with the operation and both shapes
try:
    ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
except ad.ShapeError as exc:
    print("shape error:", exc)
