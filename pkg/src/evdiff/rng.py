"""Counter-based random streams.

All randomness in the package flows through :class:`SeededRandomSource`,
a thin wrapper over numpy's Philox bit generator.  Philox is counter
based, so the tuple (seed, stream, index) fully determines every draw on
every platform.  Streams isolate consumers from each other: adding a new
consumer (its own stream id) never shifts the draws of existing ones,
which is what makes e.g. the guided and unguided samplers byte-identical
when guidance is disabled.
"""

from __future__ import annotations

import numpy as np

# Stream ids used across the package.  Fixed forever; append only.
STREAM_SCENE = 1
STREAM_INIT = 2
STREAM_TRAIN_T = 3
STREAM_TRAIN_NOISE = 4
STREAM_TRAIN_WINDOW = 5
STREAM_SAMPLER_RC = 6
STREAM_SAMPLER_PM = 7
STREAM_SAMPLER_STEP = 8
STREAM_ALIGN = 9
STREAM_FEATURES = 10


class SeededRandomSource:
    """Deterministic random source addressed by (seed, stream, index)."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF

    def generator(self, index: int = 0) -> np.random.Generator:
        """Fresh generator for the given index; same index, same draws."""
        bitgen = np.random.Philox(
            counter=[int(index) & 0xFFFFFFFFFFFFFFFF, 0, 0, 0],
            key=[self.seed, self.stream],
        )
        return np.random.Generator(bitgen)

    def normal(self, shape, index: int = 0, dtype=np.float32) -> np.ndarray:
        return self.generator(index).standard_normal(shape, dtype=dtype)

    def uniform(self, shape, index: int = 0) -> np.ndarray:
        return self.generator(index).random(shape)

    def integers(self, low, high, shape, index: int = 0) -> np.ndarray:
        return self.generator(index).integers(low, high, size=shape)

    def spawn(self, stream: int) -> "SeededRandomSource":
        """Source with the same seed on a different stream."""
        return SeededRandomSource(self.seed, stream)

    def __repr__(self) -> str:
        return f"SeededRandomSource(seed={self.seed}, stream={self.stream})"
