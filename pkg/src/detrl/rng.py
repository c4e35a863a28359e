"""Named, bit-exact pseudo-random streams.

Every random decision in a training run draws from exactly one named
:class:`RandomStream`.  Streams are xoshiro256** generators whose 256-bit
state is expanded from a 64-bit seed with splitmix64, so a stream is fully
described by ``(name, seed, draw_count)`` and can be rebuilt anywhere.

Consumption contract (counted in ``draw_count``, one unit per 64-bit word):

* ``next_u64``       -- exactly one word.
* ``next_uniform``   -- exactly one word.
* ``next_int(n)``    -- one word per attempt of Lemire's multiply-shift
  rejection method; an attempt is rejected with probability < n / 2**64.
* ``next_gaussian``  -- Box-Muller on pairs: the first call of a pair draws
  two uniforms and caches the sine branch, the second call draws nothing.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_TWO_POW_NEG_53 = 1.0 / (1 << 53)

STREAM_NAMES = ("init", "exploration", "noop", "minibatch", "sticky", "compute")


def splitmix64_mix(z: int) -> int:
    """The splitmix64 output finalizer applied to one 64-bit word."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_sequence(seed: int, n: int) -> list[int]:
    """First ``n`` outputs of a splitmix64 generator started at ``seed``."""
    state = seed & MASK64
    out = []
    for _ in range(n):
        state = (state + GOLDEN_GAMMA) & MASK64
        out.append(splitmix64_mix(state))
    return out


def derive_seed(*parts: int) -> int:
    """Combine integers into one 64-bit seed (order sensitive)."""
    h = 0x6A09E667F3BCC908
    for p in parts:
        h = splitmix64_mix((h ^ (p & MASK64)) + GOLDEN_GAMMA)
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


@dataclass(frozen=True)
class SeedSpec:
    """Seeds for every controlled source of nondeterminism in one run.

    ``env_instance_seed`` fixes the content of the environment (ball
    layouts); it is part of the task definition and never varied between
    runs of a group.
    """

    init_seed: int = 1
    exploration_seed: int = 2
    noop_seed: int = 3
    minibatch_seed: int = 4
    sticky_seed: int = 5
    compute_seed: int = 6
    env_instance_seed: int = 7

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v <= MASK64:
                raise ValueError(f"{f.name} must be an unsigned 64-bit integer, got {v!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SeedSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown seed fields: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "SeedSpec":
        d = self.to_dict()
        d.update(changes)
        return SeedSpec(**d)


class RandomStream:
    """A named xoshiro256** stream seeded through splitmix64.

    A stream has a single owner; copy it with :meth:`clone` rather than
    sharing it.
    """

    __slots__ = ("name", "seed", "draw_count", "_s", "_gauss")

    def __init__(self, name: str, seed: int):
        if not 0 <= seed <= MASK64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        self.name = name
        self.seed = seed
        self.draw_count = 0
        self._s = splitmix64_sequence(seed, 4)
        self._gauss = None

    def __repr__(self):
        return f"RandomStream({self.name!r}, seed={self.seed}, draw_count={self.draw_count})"

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        self.draw_count += 1
        return result

    def next_uniform(self) -> float:
        """Uniform double in [0, 1) built from the top 53 bits of one word."""
        return (self.next_u64() >> 11) * _TWO_POW_NEG_53

    def next_int(self, n: int) -> int:
        """Unbiased integer in ``[0, n)`` (Lemire's multiply-shift rejection)."""
        if n < 1:
            raise ValueError(f"next_int needs n >= 1, got {n}")
        if n > MASK64 + 1:
            raise ValueError("next_int bound exceeds 2**64")
        m = self.next_u64() * n
        low = m & MASK64
        if low < n:
            threshold = ((1 << 64) - n) % n
            while low < threshold:
                m = self.next_u64() * n
                low = m & MASK64
        return m >> 64

    def next_gaussian(self) -> float:
        if self._gauss is not None:
            z, self._gauss = self._gauss, None
            return z
        u1 = self.next_uniform()
        u2 = self.next_uniform()
        # 1 - u1 lies in (0, 1], so the log is finite
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        theta = 2.0 * math.pi * u2
        self._gauss = r * math.sin(theta)
        return r * math.cos(theta)

    def clone(self) -> "RandomStream":
        other = RandomStream.__new__(RandomStream)
        other.name = self.name
        other.seed = self.seed
        other.draw_count = self.draw_count
        other._s = list(self._s)
        other._gauss = self._gauss
        return other

    def snapshot(self) -> dict:
        """JSON-ready state: name, seed, draw count and any cached gaussian."""
        return {
            "name": self.name,
            "seed": self.seed,
            "draw_count": self.draw_count,
            "cached_gaussian": self._gauss,
        }

    @classmethod
    def restore(cls, snap: dict) -> "RandomStream":
        """Rebuild a stream by fast-forwarding a fresh one ``draw_count`` words."""
        stream = cls(snap["name"], snap["seed"])
        for _ in range(snap["draw_count"]):
            stream.next_u64()
        stream._gauss = snap.get("cached_gaussian")
        return stream


def new_stream(name: str, seed: int) -> RandomStream:
    return RandomStream(name, seed)


def streams_for(seeds: SeedSpec, *, sticky: bool, perturbed: bool) -> dict[str, RandomStream]:
    """The per-source streams of one run.

    The sticky and compute streams exist only when their source is enabled,
    so a disabled source consumes nothing.
    """
    out = {
        "init": new_stream("init", seeds.init_seed),
        "exploration": new_stream("exploration", seeds.exploration_seed),
        "noop": new_stream("noop", seeds.noop_seed),
        "minibatch": new_stream("minibatch", seeds.minibatch_seed),
    }
    if sticky:
        out["sticky"] = new_stream("sticky", seeds.sticky_seed)
    if perturbed:
        out["compute"] = new_stream("compute", seeds.compute_seed)
    return out
