"""Herding exemplar selection and the rehearsal buffer."""

import numpy as np

from cilforge.dataset import SynthSpec, generate_longtail, split_scenario
from cilforge.memory import MemoryBuffer, herding_select, rehearsal_pool, update_buffer

rng = np.random.default_rng(3)
f = rng.standard_normal((10, 2))
order = herding_select(f, 4)
u = f / np.linalg.norm(f, axis=1, keepdims=True)
print("selected", order)
print("mean of all      ", np.round(u.mean(0), 3))
print("mean of selected ", np.round(u[order].mean(0), 3))

train, test, counts = generate_longtail(SynthSpec(seed=0))
seq = split_scenario(train, test, counts, 4, 1, order_seed=1)

# identity embedding stands in for a trained extractor here
buf = MemoryBuffer(20)
for t, step in enumerate(seq, 1):
    pool, from_mem = rehearsal_pool(buf, step)
    print(f"step {t}: pool {len(pool)} ({from_mem.sum()} from memory)")
    buf = update_buffer(buf, step, lambda x: x)
print("buffer per class", buf.counts())  # tail classes smaller than m are stored whole
