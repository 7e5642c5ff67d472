"""
Which weights get restored
==========================

ARR scores each weight by its Fisher value times a uniform draw and resets
the lowest ceil(q*n) per layer. DR drops the draw; SR ignores the Fisher
values altogether.
"""

import numpy as np

from amrod import restore
from amrod.toydet import ParamStore

rng = np.random.default_rng(0)
n = 1000
# half the weights carry no information for the current frame (zero Fisher)
fim_w = np.where(np.arange(n) < 500, 0.0, rng.exponential(1.0, n))
fim = restore.FimAccumulator({"w": fim_w})
student = ParamStore({"w": np.ones(n)})
source = ParamStore({"w": np.zeros(n)}, "source")

for q in (0.001, 0.01, 0.1):
    _, arr = restore.adaptive_randomized_restore(student, source, fim, q, rng)
    _, dr = restore.data_driven_restore(student, source, fim, q)
    _, sr = restore.stochastic_restore(student, source, q, rng)
    for name, m in (("ARR", arr), ("DR", dr), ("SR", sr)):
        picked = np.flatnonzero(m["w"])
        frac_zero = np.mean(picked < 500) if picked.size else float("nan")
        print(f"q={q:<6} {name}: {picked.size:4d} resets, {100 * frac_zero:5.1f}% from the zero-Fisher half")

# DR is ARR with the uniform draw replaced by ones: fully deterministic
print(restore.build_mask({"w": np.array([4.0, 1.0, 3.0, 2.0])}, 0.5)["w"])
