"""Frequency-adjusted classification losses on a toy rehearsal pool."""

import numpy as np

from cilforge import losses as L

# two old classes kept as 20 exemplars each, two new classes with full data
table = L.category_frequency({2: 150, 3: 60}, old_classes=[0, 1], m=20)
print("pool frequencies:", table.frequency())
print("v[old, new] = %.3f  (old-labelled samples get larger competitor logits)" % L.logit_adjustment(table, 0, 2))
print("v[new, old] = %.3f" % L.logit_adjustment(table, 2, 0))

logits = np.array([[2.0, 0.5, 1.5, 0.0], [0.3, 0.1, 2.5, 0.2]])
labels = np.array([0, 2])  # one old-labelled, one new-labelled sample
print("cross-entropy   %.4f" % L.softmax_cross_entropy(logits, labels)[0])
print("logit-balanced  %.4f" % L.logit_balanced_loss(logits, labels, table)[0])
for alpha in (1.0, 0.7, 0.4):
    print("cil-balanced a=%.1f %.4f" % (alpha, L.cil_balanced_loss(logits, labels, table, alpha)[0]))

# the two written forms of the logit-balanced loss are the same function
a = L.logit_balanced_loss(logits, labels, table)[0]
b = L.logit_balanced_loss_pairwise(logits, labels, table)[0]
print("forms agree to %.1e" % abs(a - b))
