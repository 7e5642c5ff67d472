"""
Dynamic skipping and per-class thresholds
=========================================

Feed the monitor a score stream with an abrupt jump and watch the ratio
test pause adaptation until the running mean catches up.
"""

import numpy as np

from amrod.monitor import MonitorConfig, init_state, skip_decision, update_thresholds
from amrod.toydet import Box, Detection

rng = np.random.default_rng(0)
state = init_state(MonitorConfig(beta_s=0.7, delta_s=1.5))


def frame(level, n=4):
    return [Detection(Box(0.5, 0.5, 0.2, 0.2), int(rng.integers(4)), float(np.clip(level + 0.03 * rng.normal(), 0.05, 1)))
            for _ in range(n)]


# 15 frames near 0.45, then a domain boundary where scores jump to 0.8
levels = [0.45] * 15 + [0.8] * 10
for t, lv in enumerate(levels):
    dets = frame(lv)
    decision, state = skip_decision(state, dets)
    if decision.value == "adapt":
        state = update_thresholds(state, dets)
    thr = " ".join(f"{x:.3f}" for x in state.thresholds)
    print(f"{t:2d}  lbar {state.last_lbar:.3f}  ema {state.lbar_ema:.3f}  ratio {state.last_ratio:.3f}  {decision.value:5s}  thr {thr}")

# constant class scores pull a threshold toward clamp(1.3 * sqrt(s))
s = init_state()
for _ in range(200):
    s = update_thresholds(s, [Detection(Box(0.5, 0.5, 0.2, 0.2), 0, 0.36)])
print("after 200 frames at score 0.36:", round(s.thresholds[0], 6), "target", 1.3 * np.sqrt(0.36))
