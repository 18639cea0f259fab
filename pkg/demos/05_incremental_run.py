"""One full class-incremental run: accuracy matrix, Acc and Fgt."""

import numpy as np

from cilforge.dataset import SynthSpec, generate_longtail
from cilforge.losses import LossConfig
from cilforge.runner import RunConfig, run_experiment

data = generate_longtail(SynthSpec(seed=2))
cfg = RunConfig(4, 1, epochs=30, hidden=(32,), embedding_dim=4, num_orders=1,
                loss=LossConfig(alpha=0.9, lambda_d=0.3, lambda_k=0.05))
rep = run_experiment(cfg, data)

np.set_printoptions(precision=3)
print("class order", rep.orders[0])
for t, row in enumerate(rep.matrices[0], 1):
    print(f"after step {t}:", np.array(row))
print("Acc %.3f  Fgt %.3f" % (rep.acc_mean, rep.fgt_mean))
for step, a, f in rep.curves():
    print(f"  step {step}: avg acc {a:.3f}  forgetting {f:+.3f}")
