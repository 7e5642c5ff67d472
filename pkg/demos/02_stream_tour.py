"""
A tour of the synthetic stream
==============================

Scenes hold one to four shapes on a textured background. Each target domain
applies one corruption family at a fixed severity; the schedule is
round-major, then domain, then frame.
"""

import numpy as np

from amrod import streams
from amrod.toydet import NUM_CLASSES

scene = streams.gen_scene(np.random.default_rng(0))
names = ["filled square", "hollow square", "disc", "cross"]
for d in scene.labels:
    print(f"{names[d.class_id]:>14}  box centre ({d.box.cx:.3f}, {d.box.cy:.3f})  size {d.box.w:.3f} x {d.box.h:.3f}")

# a coarse ASCII rendering of the clean frame
ramp = " .:-=+*#%@"
px = scene.image.pixels[0]
for row in px[::2]:
    print("".join(ramp[min(9, int(v * 10))] for v in row))

# the same scene under each corruption at severity 5
for fam in streams.CORRUPTIONS:
    out = streams.corrupt(scene, streams.DomainSpec(fam, 5), np.random.default_rng(1))
    x = out.image.pixels
    print(f"{fam:>16}: mean {x.mean():.3f}  std {x.std():.3f}  labels kept: {out.labels == scene.labels}")

# schedule arithmetic of the long-term task
spec = streams.long_term(seed=0, frames_per_domain=2, rounds=2)
for fr in streams.build_stream(spec):
    print(fr.frame_index, fr.round_index, fr.domain_tag)

# class balance over a few hundred scenes
counts = np.zeros(NUM_CLASSES, int)
for sc in streams.clean_scenes(0, 300):
    for d in sc.labels:
        counts[d.class_id] += 1
print("objects per class:", dict(zip(names, counts.tolist())))
