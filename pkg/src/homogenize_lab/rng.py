"""Per-trajectory random streams.

Every Monte Carlo trajectory owns a Philox generator keyed by the tuple
``(master_seed, experiment_id, epsilon_index, trajectory_index)``. The key is
fed through :class:`numpy.random.SeedSequence` so that distinct tuples give
statistically independent streams and the same tuple always reproduces the
same stream, whatever the batching or number of worker threads.
"""

from __future__ import annotations

import numpy as np

# Experiment ids used in stream keys. Pipelines that must share trajectories
# (linear vs. semilinear reductions) share an id on purpose.
STREAM_MICRO = 0
STREAM_LIMIT_OFFSET = 1000
STREAM_GREEN_KUBO = 7
STREAM_FIELD_CHECK = 11
STREAM_MSD = 13


def stream(master_seed: int, experiment_id: int, epsilon_index: int, trajectory_index: int) -> np.random.Generator:
    key = (int(experiment_id), int(epsilon_index), int(trajectory_index))
    if min(key) < 0 or master_seed < 0:
        raise ValueError(f"stream key entries must be non-negative, got {(master_seed, *key)}")
    seq = np.random.SeedSequence(int(master_seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def streams(master_seed: int, experiment_id: int, epsilon_index: int, indices) -> list[np.random.Generator]:
    return [stream(master_seed, experiment_id, epsilon_index, i) for i in indices]


class BatchNormals:
    """Draw standard normals for a batch of trajectories, one stream each.

    Draws are buffered in time chunks so the per-trajectory consumption is
    a plain sequential read of that trajectory's stream. A trajectory's
    values therefore do not depend on which batch it sits in.
    """

    def __init__(self, gens: list[np.random.Generator], shape: tuple[int, ...], chunk: int = 64):
        self.gens = gens
        self.shape = tuple(shape)
        self.chunk = int(chunk)
        self._buf = None
        self._pos = self.chunk

    def __call__(self) -> np.ndarray:
        if self._pos >= self.chunk:
            self._buf = np.stack([g.standard_normal((self.chunk, *self.shape)) for g in self.gens], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out
