"""Counter-based random streams.

Every source of randomness in the project is an (master_seed, stream_id)
pair backed by the Philox counter-based generator, so any worker can
recreate any stream independently of scheduling or how many other streams
exist.  Stream ids are namespaced per subsystem to avoid collisions.
"""

from __future__ import annotations

import numpy as np

# Stream-id namespaces (upper 32 bits of the stream id).
NS_INIT = 1        # parameter initialization
NS_SCENE = 2       # procedural scene construction
NS_NOISE = 3       # per-sequence Monte Carlo noise
NS_HR_NOISE = 4    # synthesized noisy-HR supervision targets
NS_SAMPLER = 5     # patch/batch sampling
NS_MISC = 6


def stream_id(namespace: int, index: int) -> int:
    """Pack a namespace and an index into a single 64-bit stream id."""
    if not 0 <= index < (1 << 32):
        raise ValueError(f"stream index out of range: {index}")
    return (namespace << 32) | index


class RngStream:
    """One independent random value stream.

    The same (master_seed, stream_id) always yields the identical value
    sequence, no matter how many other streams are created or interleaved.
    """

    def __init__(self, master_seed: int, stream: int):
        self.master_seed = int(master_seed)
        self.stream = int(stream)
        bitgen = np.random.Philox(key=np.array(
            [self.master_seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF],
            dtype=np.uint64))
        self._gen = np.random.Generator(bitgen)

    def normal(self, mu: float, sigma: float, shape) -> np.ndarray:
        return self._gen.normal(mu, sigma, size=shape)

    def uniform(self, lo: float, hi: float, shape) -> np.ndarray:
        return self._gen.uniform(lo, hi, size=shape)

    def integers(self, lo: int, hi: int, shape=None) -> np.ndarray:
        """Uniform integers in [lo, hi)."""
        return self._gen.integers(lo, hi, size=shape)

    def __repr__(self) -> str:
        return f"RngStream(master_seed={self.master_seed}, stream={self.stream})"
