"""Counter-based random number streams.

Built on numpy's Philox bit generator so that a stream is fully determined
by (seed, stream_id): the same pair reproduces the same draw sequence on
every platform, and streams derived from distinct keys are independent.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream"]


def _mix_to_stream_id(parts) -> int:
    """Hash an arbitrary tuple of ints/strings down to a 64-bit stream id."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, (int, np.integer)):
            h.update(b"i" + int(part).to_bytes(16, "little", signed=True))
        elif isinstance(part, str):
            h.update(b"s" + part.encode("utf-8") + b"\x00")
        else:
            raise TypeError(f"stream key parts must be int or str, got {type(part)}")
    return int.from_bytes(h.digest()[:8], "little")


class RngStream:
    """One independent, reproducible random stream.

    ``derive(*key)`` produces a child stream whose id mixes the parent id
    with the key, giving cheap per-(epoch, sample, purpose) streams.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0
        self._gen = np.random.Generator(
            np.random.Philox(key=[self.seed, self.stream_id])
        )

    def derive(self, *key) -> "RngStream":
        return RngStream(self.seed, _mix_to_stream_id((self.stream_id,) + key))

    # Draw helpers; each bumps the call counter so streams can be audited.
    def uniform(self, low=0.0, high=1.0, size=None):
        self.counter += 1
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        self.counter += 1
        return self._gen.normal(loc, scale, size)

    def random(self, size=None):
        self.counter += 1
        return self._gen.random(size)

    def permutation(self, n):
        self.counter += 1
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        self.counter += 1
        return self._gen.choice(n, size=size, replace=replace)

    def exponential(self, scale=1.0, size=None):
        self.counter += 1
        return self._gen.exponential(scale, size)

    def poisson(self, lam, size=None):
        self.counter += 1
        return self._gen.poisson(lam, size)
