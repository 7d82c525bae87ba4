"""Named random streams.

Every random draw in the package comes from a Philox (counter-based) generator
keyed by ``(seed, stream id, trial)``, so that, for example, changing the
adapter kind never perturbs the frozen base weights or the data.
"""

import numpy as np

MODEL_INIT = 1  # frozen "pretrained" weights
ADAPTER_INIT = 2  # adapter fast and slow weights
TASK = 3  # per-task token labelling (e.g. which tokens count as "on")
DATA = 4  # train / validation / test pools
SUBSAMPLE = 5  # low-resource subsampling
BATCHES = 6  # per-epoch shuffles
PROBE = 7  # verification drivers and benchmarks


def stream(seed, stream_id, trial=0):
    if seed < 0 or trial < 0:
        raise ValueError("seed and trial must be non-negative")
    key = np.array([seed, (stream_id << 32) | trial], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
