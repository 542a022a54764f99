"""xoshiro256** with splitmix64 seeding and labelled substreams."""

import hashlib

_M64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _M64


def splitmix64(state: int):
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
        yield z ^ (z >> 31)


class Xoshiro256:
    def __init__(self, state):
        state = [int(s) & _M64 for s in state]
        if len(state) != 4 or not any(state):
            raise ValueError("state must be four words, not all zero")
        self.s = state

    @classmethod
    def from_seed(cls, seed: int, label: str = "") -> "Xoshiro256":
        """Independent stream for ``(seed, label)``; distinct labels never share state."""
        mix = int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "big")
        gen = splitmix64((seed ^ mix) & _M64)
        return cls([next(gen) for _ in range(4)])

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & _M64, 7) * 9) & _M64
        t = (s[1] << 17) & _M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, low: int, high: int) -> int:
        """Uniform integer in [low, high], rejection-sampled."""
        if high < low:
            raise ValueError("empty range")
        span = high - low + 1
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            x = self.next_u64()
            if x < limit:
                return low + x % span

    def randbytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += self.next_u64().to_bytes(8, "big")
        return bytes(out[:n])
