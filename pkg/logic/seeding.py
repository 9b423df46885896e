from __future__ import annotations
import numpy as np

# One root seed fans out into named streams. A stream's generator is
# default_rng([seed, stream id, *extra]); extra is usually an epoch or step
# number, which is what lets a resumed run pick up the same draws.
STREAMS = {
    "data": 0,
    "mask": 1,
    "swap": 2,
    "init": 3,
    "shuffle": 4,
    "probe": 5,
    "rerank": 6,
    "split": 7,
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    return np.random.default_rng([int(seed), STREAMS[name], *(int(e) for e in extra)])
