"""Named RNG streams derived from a single root seed.

Every source of randomness in a run (network init, exploration noise, replay
sampling, evaluation episodes, ...) draws from its own counter-based Philox
stream, keyed by (root seed, stream id, optional indices). Streams are
mutually independent, so adding or removing a consumer of one stream (for
example an extra evaluation metric) never perturbs the draws seen by any
other stream.
"""

from __future__ import annotations

import numpy as np

# Registry of stream ids. Never renumber existing entries; append only.
STREAM_IDS = {
    "actor_init": 0,
    "critic_init": 1,
    "ensemble_init": 2,
    "hash_hyperplanes": 3,
    "env": 4,
    "exploration": 5,
    "replay_sample": 6,
    "random_removal": 7,
    "eval": 8,
    "rank_scan": 9,
    "correlate": 10,
    "uncertainty_scan": 11,
}


def stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return a fresh generator for the named stream.

    Extra ``indices`` sub-key the stream (ensemble member number, evaluation
    counter, ...). Each distinct key yields an independent Philox generator.
    """
    if name not in STREAM_IDS:
        raise KeyError(f"unknown rng stream {name!r}")
    key = (int(seed), STREAM_IDS[name]) + tuple(int(i) for i in indices)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


class RunStreams:
    """Per-run bundle of the long-lived generators used during training.

    Short-lived streams (evaluation, rank scans) are derived on demand via
    :func:`stream` with the evaluation counter as an index, so their
    consumption never advances training randomness.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.env = stream(seed, "env")
        self.exploration = stream(seed, "exploration")
        self.replay_sample = stream(seed, "replay_sample")
        self.random_removal = stream(seed, "random_removal")

    def init_rng(self, name: str, *indices: int) -> np.random.Generator:
        return stream(self.seed, name, *indices)

    def eval_rng(self, eval_index: int) -> np.random.Generator:
        return stream(self.seed, "eval", eval_index)

    def rank_scan_rng(self, eval_index: int) -> np.random.Generator:
        return stream(self.seed, "rank_scan", eval_index)
