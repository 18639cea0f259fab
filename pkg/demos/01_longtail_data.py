"""Synthetic long-tailed data and the incremental split."""

import numpy as np

from cilforge.dataset import SynthSpec, generate_longtail, longtail_counts, split_scenario

# per-class counts decay geometrically from the head class to the tail
print(longtail_counts(8, 200, 0.05))  # [200, 130, 85, 55, 36, 24, 15, 10]

train, test, counts = generate_longtail(SynthSpec(seed=0))
print(train.x.shape, test.x.shape)

# 4 base classes, then one class per step
seq = split_scenario(train, test, counts, base=4, increment=1, order_seed=1)
print("class order:", seq.class_order)
for t, step in enumerate(seq, 1):
    print(f"step {t}: classes {step.classes} train {len(step.train)} test {len(step.test)}")

# mean distance between cluster centres vs spread decides how hard the task is
cents = np.stack([train.x[train.y == c].mean(0) for c in range(8)])
d = np.linalg.norm(cents[:, None] - cents[None], axis=-1)
print("min centre distance %.2f" % d[d > 0].min())
