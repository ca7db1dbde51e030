"""Counter-based deterministic random streams.

Every random decision in a simulation is drawn from a stream derived from
(master_seed, round, client, epoch, purpose) through a 64-bit avalanche mix
(SplitMix64 finalizer).  Streams derived from the same tuple are identical,
so client order and parallel execution cannot change results.
"""

from __future__ import annotations

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# Domain-separation tags for derived streams.
PURPOSE_PERMUTATION = 0x9D
PURPOSE_SAMPLING = 0x51
PURPOSE_OUTPUT = 0x0F
PURPOSE_MOMENTUM_INIT = 0x3B


def mix64(z: int) -> int:
    """SplitMix64 finalizer: a fixed 64-bit avalanche permutation."""
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(*parts: int) -> int:
    """Fold integer components (seed, round, client, ...) into one 64-bit seed."""
    acc = 0
    for p in parts:
        acc = mix64(acc ^ (int(p) & _MASK64))
    return acc


class Stream:
    """SplitMix64 generator: state advances by a fixed increment, output is mixed.

    Cheap to fork (derive a new seed), deterministic, and independent across
    distinct seed tuples for all practical purposes.
    """

    __slots__ = ("_state",)

    def __init__(self, seed: int):
        self._state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return (z ^ (z >> 31)) & _MASK64

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (exactly uniform)."""
        if n <= 0:
            raise ValueError(f"randbelow requires n >= 1, got {n}")
        # Reject draws from the incomplete trailing block of [0, 2^64).
        limit = _MASK64 - (_MASK64 + 1) % n
        while True:
            u = self.next_u64()
            if u <= limit:
                return u % n

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n); exactly uniform over permutations."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def stream_for(master_seed: int, *parts: int) -> Stream:
    """Stream derived from a master seed plus context components."""
    return Stream(derive_seed(master_seed, *parts))
