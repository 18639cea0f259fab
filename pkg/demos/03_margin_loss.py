"""Vanilla vs distribution margin loss on one memory anchor."""

import numpy as np

from cilforge import losses as L

rng = np.random.default_rng(0)
w = np.array([[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]])  # classes 0, 1 old; class 2 new
h = np.array([[0.9, 0.3]])                           # embedding of an old-class exemplar
labels, new_cols = [0], [2]

print("vanilla margin  %.4f" % L.vanilla_margin_loss(h, w, labels, new_cols, 0.4)[0])

# inherent ratios: share of each class in the historical training data
rhat = L.inherent_ratios([0, 1, 2], {0: 200, 1: 50, 2: 20})
print("rhat", np.round(rhat, 3))

# zero noise: the first term is the vanilla loss, the second pulls h towards w_y
zero = L.DistributionRanges.zero(3, 1, 1, 2)
print("dm, zero noise  %.4f" % L.distribution_margin_loss(h, w, labels, new_cols, zero, 0.4)[0])

# noisy weights: frequent classes get wider perturbation ranges
vals = [L.distribution_margin_loss(h, w, labels, new_cols, L.DistributionRanges.draw(rhat, 1, 1, 2, rng), 0.4)[0]
        for _ in range(1000)]
print("dm, noisy       %.4f +- %.4f" % (np.mean(vals), np.std(vals)))
