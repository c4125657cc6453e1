"""Named splitmix64 streams.

Every stochastic choice in the package (weight init, scene layout, pixel
noise, flips, audit sampling) draws from a stream derived from
(seed, name, index), so results do not depend on call order and can be
reproduced outside Python.
"""

import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state. Returns (new_state, output)."""
    state = (state + GOLDEN) & MASK
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & MASK
    z = ((z ^ (z >> 27)) * _MIX2) & MASK
    return state, z ^ (z >> 31)


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK
    return h


def stream_seed(seed: int, name: str, index: int = 0) -> int:
    _, a = splitmix64((seed & MASK) ^ _fnv1a(name))
    _, b = splitmix64(a ^ (index & MASK))
    return b


class Stream:
    """A splitmix64 generator keyed by (seed, name, index)."""

    def __init__(self, seed: int, name: str, index: int = 0):
        self.state = stream_seed(seed, name, index)

    def next_u64(self) -> int:
        self.state, out = splitmix64(self.state)
        return out

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi], both ends inclusive."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)

    def uniform_array(self, n: int) -> np.ndarray:
        """n floats in [0, 1); same values as n calls to uniform()."""
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN) & MASK
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal_array(self, n: int) -> np.ndarray:
        """n standard normal draws (Box-Muller over two uniform blocks)."""
        u1 = 1.0 - self.uniform_array(n)  # (0, 1]
        u2 = self.uniform_array(n)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
