"""Shared helper: load ``source.amrod`` next to the demos, pretraining it on first use."""

from pathlib import Path

from amrod import modelio, streams

PATH = Path(__file__).with_name("source.amrod")


def source():
    if PATH.exists():
        return modelio.load(PATH)
    print(f"no {PATH.name} yet; pretraining the source model (a minute or two)...")
    store, prov = streams.pretrain_source(log=print)
    modelio.save(PATH, store, prov)
    return store, prov
