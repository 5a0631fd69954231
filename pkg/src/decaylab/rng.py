"""Counter-based 64-bit generator with named, splittable streams.

The algorithm is fixed so that any implementation can reproduce every draw:

* ``mix64`` is the SplitMix64 output finalizer::

      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
      z = (z ^ (z >> 27)) * 0x94D049BB133111EB
      z =  z ^ (z >> 31)

  with all arithmetic modulo 2**64.
* A stream is a pair ``(key, counter)``.  The i-th draw after the current
  position is ``mix64(key + (counter + i) * GAMMA)``, ``i = 1, 2, ...``, and
  drawing n values advances ``counter`` by n.
* Child streams are derived from labels: string labels are hashed with
  64-bit FNV-1a over their UTF-8 bytes, integer labels are used as-is
  (mod 2**64), and ``key' = mix64(key ^ mix64(label_hash))``.  The counter of
  a derived stream starts at 0.
* ``Rng.from_seed(seed)`` has ``key = mix64(seed)``.

Uniform floats are ``(x >> 11) * 2**-53``; uniform integers in ``[0, n)`` are
``floor(uniform * n)``.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 array arithmetic wraps modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def fnv1a64(label: str) -> int:
    h = _FNV_OFFSET
    for byte in label.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & MASK64
    return h


def _label_hash(label: str | int) -> int:
    if isinstance(label, str):
        return fnv1a64(label)
    return int(label) & MASK64


class Rng:
    """Sequential view of one stream; draws advance ``counter`` in place."""

    __slots__ = ("key", "counter")

    def __init__(self, key: int, counter: int = 0):
        self.key = int(key) & MASK64
        self.counter = int(counter) & MASK64

    @classmethod
    def from_seed(cls, seed: int) -> Rng:
        return cls(mix64(seed))

    def derive(self, *labels: str | int) -> Rng:
        """Independent child stream; does not advance this one."""
        key = self.key
        for label in labels:
            key = mix64(key ^ mix64(_label_hash(label)))
        return Rng(key)

    def copy(self) -> Rng:
        return Rng(self.key, self.counter)

    @property
    def state(self) -> tuple[int, int]:
        return self.key, self.counter

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Rng) and self.state == other.state

    def __repr__(self) -> str:
        return f"Rng(key={self.key:#018x}, counter={self.counter})"

    def next_u64(self) -> int:
        self.counter = (self.counter + 1) & MASK64
        return mix64(self.key + self.counter * GAMMA)

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw draws as a uint64 array."""
        idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter)
        base = np.uint64(self.key)
        out = _mix64_array(base + idx * np.uint64(GAMMA))
        self.counter = (self.counter + n) & MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers uniform on ``[0, high)``."""
        if high < 1:
            raise ValueError("high must be >= 1")
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def signs(self, d: int) -> np.ndarray:
        """Rademacher vector of length ``d``: bit k of draw j gives entry 64*j + k."""
        words = self.u64((d + 63) // 64)
        bits = (words[:, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1)
        return bits.reshape(-1)[:d].astype(np.float64) * 2.0 - 1.0
