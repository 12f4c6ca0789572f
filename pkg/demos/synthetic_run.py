"""Meta-train FEAST and plain first-order MAML on biased synthetic data and compare the gaps.

A smaller budget than the acceptance run (one seed, T=150), so it
finishes in well under a minute. Pass a seed as the first argument.
"""

import sys

import numpy as np

from feast.datasets import SyntheticSpec, make_split, make_synthetic, standardize
from feast.engine import TrainConfig, evaluate, train

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
raw = make_synthetic(SyntheticSpec(delta=2.0), n_samples=8000, n_subsets=12, seed=seed)
split = make_split(raw, 8, 2, 2, seed=seed)
table = standardize(raw, split.train)   # statistics from meta-training rows only
print(f"{len(table.labels)} rows, {table.n_features} features, subsets train/val/test = "
      f"{len(split.train)}/{len(split.val)}/{len(split.test)}")

rows = []
for variant in ("maml", "feast_no_both", "feast"):
    cfg = TrainConfig(T=150, T_test=200, seed=seed, variant=variant)
    state = train(cfg, table, split)
    rep = evaluate(state, table, split.test)
    rows.append((variant, rep.mean("dp"), rep.mean("eo"), rep.mean("acc")))

print(f"{'variant':<15}{'dp':>8}{'eo':>8}{'acc':>8}")
for name, dp, eo, acc in rows:
    print(f"{name:<15}{dp:>8.3f}{eo:>8.3f}{acc:>8.3f}")
base = rows[0][1]
print("dp reduction vs maml:", ", ".join(f"{n} {1 - dp / base:.0%}" for n, dp, *_ in rows[1:]))
