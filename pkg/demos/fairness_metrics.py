"""Fairness gaps and the mutual-information penalty on hand-made numbers."""

import numpy as np

from feast.autodiff import Tensor
from feast.core import mi_loss
from feast.fairness import GroupedScores, delta_dp, delta_eo, task_metrics

# scores grouped by (sensitive group, label)
g = GroupedScores.from_cells(q00=[0.9, 0.7], q01=[0.8], q10=[0.3], q11=[0.6, 0.4])
print("dp gap", delta_dp(g))   # |mean(group 0) - mean(group 1)|
print("eo gap", delta_eo(g))   # summed over both labels

# a query set with no positive row in group 1: EO only covers label 0
m = task_metrics(0, scores=[0.9, 0.2, 0.6, 0.4], sensitive=[0, 1, 0, 1], labels=[1, 0, 0, 0])
print(m)

# MI penalty between a support set and an auxiliary set
rng = np.random.default_rng(1)
def unit(n, d=4):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)

probs = rng.dirichlet([1, 1], size=3)
pen = mi_loss(Tensor(unit(3)), Tensor(probs), [0, 1, 1], Tensor(unit(4)), [1, 0, 1, 1], [0, 0, 1, 1])
print("mi penalty", round(pen.value.item(), 6), "degenerate:", pen.degenerate)

# no shared group between the two sets: the penalty is defined as zero
pen = mi_loss(Tensor(unit(2)), Tensor(probs[:2]), [0, 0], Tensor(unit(2)), [0, 1], [1, 1])
print("no overlap", pen.value.item(), "degenerate:", pen.degenerate)
