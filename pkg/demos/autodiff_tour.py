"""A short tour of the autodiff layer: build a graph, backprop, compare with finite differences."""

import numpy as np

from feast import autodiff as ad
from feast.gradcheck import numerical_grad, relative_error

rng = np.random.default_rng(0)

# a tiny two-layer net on a batch of 4 rows
x = ad.Tensor(rng.normal(size=(4, 3)))
w1 = ad.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
w2 = ad.Tensor(rng.normal(size=(5, 2)), requires_grad=True)
labels = np.array([0, 1, 1, 0])

probs = ad.softmax_row(ad.relu(x @ w1) @ w2)
loss = ad.cross_entropy(probs, labels)
g1, g2 = ad.grad(loss, [w1, w2])
print("loss", round(loss.item(), 6))
print("grad shapes", g1.shape, g2.shape)

# the same gradients, numerically
def f():
    return ad.cross_entropy(ad.softmax_row(ad.relu(x @ ad.Tensor(a1)) @ ad.Tensor(a2)), labels).item()

a1, a2 = w1.data.copy(), w2.data.copy()
n1, n2 = numerical_grad(f, [a1, a2], 1e-5)
print("relative error", relative_error([g1, g2], [n1, n2]))

# one Adam step on both weights
before = [w1.data.copy(), w2.data.copy()]
opt = ad.AdamState.for_params([w1.data, w2.data], lr=0.01)
opt.apply([w1.data, w2.data], [g1, g2])   # updates in place
print("largest move", max(np.abs(w.data - b).max() for w, b in zip((w1, w2), before)))

# a graph is consumed by backward
try:
    ad.backward(loss)
except ad.GraphStateError as exc:
    print("second backward:", exc)
