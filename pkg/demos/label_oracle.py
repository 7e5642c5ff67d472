"""
How much can online adaptation gain at all?
===========================================

Run the adaptation loop with the frame's ground-truth labels substituted for
the pseudo-labels. This is a diagnostic upper bound, not a method: it breaks
the unsupervised contract on purpose, by patching the loop from outside.

    python3 label_oracle.py [seed] [section.key=value ...]
"""

import sys

from _source import source

from amrod import config, engine, runner, streams

store, _ = source()
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
extra = dict(a.split("=", 1) for a in sys.argv[2:])

current = {}
real_stream = streams.build_stream


def labelled(spec):
    for fr in real_stream(spec):
        current["labels"] = fr.scene.labels
        yield fr


base = config.short_term_config(seed)
frozen = runner.run(config.apply_overrides(base, {"variant.adapt": "false"}), store).summary

runner.build_stream = labelled
engine.mt.pseudo_label = lambda dets, thr: list(current["labels"])
cfg = config.apply_overrides(base, {"variant.use_am_skip": "false", **extra})
oracle = runner.run(cfg, store).summary

print(f"frozen {frozen.mean_map:.4f}   ground-truth-fed engine {oracle.mean_map:.4f}   gain {oracle.mean_map - frozen.mean_map:+.4f}")
