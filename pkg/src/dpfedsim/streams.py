"""Counter-based random number streams.

Every random quantity in the simulator is drawn from a Philox4x64-10 block
cipher keyed by (master seed, purpose domain, client id, round index) and
indexed by a draw counter.  Streams are values, not stateful objects: the
same key and counter always yield the same bits, on any platform, in any
execution order, for any worker count.

The generator matches numpy's Philox bit-for-bit (verified in the test
suite), but is implemented here as vectorized uint64 arithmetic so that a
whole (rounds x clients x dim) noise block can be produced in one shot.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import ndtri

_MASK64 = (1 << 64) - 1
_MASK32 = np.uint64(0xFFFFFFFF)

# Philox4x64 round constants (Salmon et al. counter-based RNG family).
_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)

_ROUNDS = 10

# Purpose domains keep draws for unrelated uses disjoint even under
# identical (seed, client, round) coordinates.
DOMAIN_NOISE = 1
DOMAIN_COIN = 2
DOMAIN_GENERATE = 3
DOMAIN_BATCH = 4

_COORD_BITS = 30
_COORD_MAX = 1 << _COORD_BITS


class StreamKey(NamedTuple):
    """Value-semantic handle for one deterministic stream."""

    word0: int
    word1: int


def mask64(value: int) -> int:
    """Reduce an arbitrary Python integer to its low 64 bits."""
    return value & _MASK64


def splitmix64(value: int) -> int:
    """One splitmix64 scrambling step; a cheap, well-mixed 64-bit hash."""
    z = mask64(value + 0x9E3779B97F4A7C15)
    z = mask64((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9)
    z = mask64((z ^ (z >> 27)) * 0x94D049BB133111EB)
    return z ^ (z >> 31)


def mix64(*values: int) -> int:
    """Combine integers into one 64-bit seed (order-sensitive)."""
    acc = 0x243F6A8885A308D3  # arbitrary nonzero start
    for v in values:
        acc = splitmix64(acc ^ mask64(v))
    return acc


def stream_key(seed: int, domain: int, a: int = 0, b: int = 0) -> StreamKey:
    """Derive the Philox key for stream (seed, domain, a, b).

    `a` is conventionally a client index and `b` a round index; both must
    fit in 30 bits so the packing below is injective.
    """
    if not 0 <= domain < 16:
        raise ValueError(f"domain must be in [0, 16), got {domain}")
    if not 0 <= a < _COORD_MAX:
        raise ValueError(f"stream coordinate a={a} outside [0, 2^30)")
    if not 0 <= b < _COORD_MAX:
        raise ValueError(f"stream coordinate b={b} outside [0, 2^30)")
    return StreamKey(mask64(seed), (domain << 60) | (a << _COORD_BITS) | b)


def _philox_blocks(key0: np.ndarray, key1: np.ndarray, c0: np.ndarray) -> np.ndarray:
    """Run Philox4x64-10 on counter blocks (c0, 0, 0, 0).

    All inputs broadcast against each other; returns an array of shape
    broadcast_shape + (4,) holding the four 64-bit outputs per block.
    """
    with np.errstate(over="ignore"):
        k0, k1, x0 = np.broadcast_arrays(key0, key1, c0)
        k0 = k0.astype(np.uint64, copy=True)
        k1 = k1.astype(np.uint64, copy=True)
        x0 = x0.astype(np.uint64, copy=True)
        x1 = np.zeros_like(x0)
        x2 = np.zeros_like(x0)
        x3 = np.zeros_like(x0)
        for r in range(_ROUNDS):
            if r > 0:
                k0 += _W0
                k1 += _W1
            lo0 = _M0 * x0
            lo1 = _M1 * x2
            hi0 = _mulhi(_M0, x0)
            hi1 = _mulhi(_M1, x2)
            x0, x1, x2, x3 = hi1 ^ x1 ^ k0, lo1, hi0 ^ x3 ^ k1, lo0
        return np.stack([x0, x1, x2, x3], axis=-1)


def _mulhi(a: np.uint64, b: np.ndarray) -> np.ndarray:
    """High 64 bits of the 128-bit product a*b, via 32-bit limbs."""
    a_lo = a & _MASK32
    a_hi = a >> np.uint64(32)
    b_lo = b & _MASK32
    b_hi = b >> np.uint64(32)
    t = a_lo * b_lo
    w = a_hi * b_lo + (t >> np.uint64(32))
    carry = (w & _MASK32) + a_lo * b_hi
    return a_hi * b_hi + (w >> np.uint64(32)) + (carry >> np.uint64(32))


def raw_uint64(key: StreamKey, count: int) -> np.ndarray:
    """First `count` raw 64-bit outputs of the stream (numpy-compatible)."""
    blocks = -(-count // 4)
    # Counter starts at 1, matching numpy's Philox buffering convention,
    # which keeps numpy usable as an independent oracle in tests.
    c0 = np.arange(1, blocks + 1, dtype=np.uint64)
    out = _philox_blocks(np.uint64(key.word0), np.uint64(key.word1), c0)
    return out.reshape(-1)[:count]


def uniforms(key: StreamKey, count: int) -> np.ndarray:
    """`count` doubles in the open interval (0, 1)."""
    raw = raw_uint64(key, count)
    # 53 high bits, offset by half an ulp so 0.0 is unreachable (the
    # inverse-normal map below must never see an endpoint).
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals(key: StreamKey, count: int) -> np.ndarray:
    """`count` standard normal draws via the inverse CDF."""
    return ndtri(uniforms(key, count))


def normal_block(seed: int, clients: int, rounds: int, dim: int, round_offset: int = 0) -> np.ndarray:
    """Standard normal noise for every (round, client) pair, one shot.

    Entry [t, i, :] equals normals(stream_key(seed, DOMAIN_NOISE, i,
    round_offset + t), dim): each (client, round) owns an independent
    stream, so the block is invariant to scheduling and client count
    changes never reuse bits.
    """
    if rounds * clients == 0:
        return np.zeros((rounds, clients, dim))
    keys = np.empty((rounds, clients, 2), dtype=np.uint64)
    for t in range(rounds):
        for i in range(clients):
            k = stream_key(seed, DOMAIN_NOISE, i, round_offset + t)
            keys[t, i, 0] = k.word0
            keys[t, i, 1] = k.word1
    blocks = -(-dim // 4)
    c0 = np.arange(1, blocks + 1, dtype=np.uint64)
    out = _philox_blocks(
        keys[:, :, 0, None], keys[:, :, 1, None], c0[None, None, :]
    )
    raw = out.reshape(rounds, clients, blocks * 4)[:, :, :dim]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def coin_flips(seed: int, rounds: int, prob: float) -> np.ndarray:
    """Bernoulli(prob) coins for rounds 0..rounds-1 from the master stream.

    Counter-indexed, so extending the horizon preserves the prefix.
    """
    u = uniforms(stream_key(seed, DOMAIN_COIN), rounds)
    return (u < prob).astype(np.uint8)
