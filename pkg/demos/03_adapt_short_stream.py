"""
Adapting across five shifted domains
====================================

The frozen source model against the mean-teacher baseline, the full engine,
and the full engine without skipping, on one seed of the short-term stream.
"""

from _source import source

from amrod import config, experiments, runner

store, prov = source()
print(f"source model: clean mAP@0.5 {prov['clean_map']:.3f}")

base = config.short_term_config(seed=0)
variants = {
    "frozen": {"variant.adapt": "false"},
    "MT": dict(experiments.COMPONENT_ROWS[0][1]),
    "full": {},
    "unstop": {"variant.use_am_skip": "false"},
}
named = []
for name, overrides in variants.items():
    cfg = experiments.derive(base, name, overrides)
    named.append((name, runner.run(cfg, store).summary))

# same layout as `amrod report`: per-domain mAP, Mean, Gain vs frozen, Iter., Skip%
print(experiments.render_section("short-term, seed 0", named))
