"""Counter-based Gaussian streams.

Every draw is a pure function of ``(seed, path_index, draw_index, stream)``,
so an ensemble is bit-identical however its paths are split across workers,
and the first paths of a large ensemble coincide with a smaller one.
The bijection is Philox-4x32 with 10 rounds; numpy ships a Philox bit
generator but it cannot be evaluated for many independent counters at once,
which is what per-path streams need.
"""

from __future__ import annotations

import numpy as np

_MUL = (np.uint64(0xD2511F53), np.uint64(0xCD9E8D57))
_WEYL = (0x9E3779B9, 0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)

MAIN_STREAM = 0
BRIDGE_STREAM = 1


def philox4x32(counter, key, rounds=10):
    """Apply Philox-4x32 to an array of counters.

    Parameters
    ----------
    counter : array_like of uint32, shape (..., 4)
    key : pair of uint32
    rounds : int

    Returns
    -------
    ndarray of uint32, shape (..., 4)
    """
    c = np.asarray(counter, dtype=np.uint64)
    c0, c1, c2, c3 = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(rounds):
        if r:
            k0 = (k0 + _WEYL[0]) & 0xFFFFFFFF
            k1 = (k1 + _WEYL[1]) & 0xFFFFFFFF
        p0 = _MUL[0] * c0
        p1 = _MUL[1] * c2
        c0, c1, c2, c3 = (
            (p1 >> _SHIFT) ^ c1 ^ np.uint64(k0),
            p1 & _MASK,
            (p0 >> _SHIFT) ^ c3 ^ np.uint64(k1),
            p0 & _MASK,
        )
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


def seed_key(seed):
    """Split a 64-bit seed into the two 32-bit Philox key words."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def derive_seed(seed, *path):
    """Child seed for a sub-job (e.g. one grid node), independent of scheduling."""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    lo, hi = seq.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def standard_normals(seed, path_indices, n_draws, stream=MAIN_STREAM, offset=0):
    """Standard normal draws for each requested path.

    Draw ``j`` of path ``p`` depends only on ``(seed, p, offset + j, stream)``.

    Parameters
    ----------
    seed : int
        Master seed (unsigned 64-bit).
    path_indices : array_like of int
        Global path indices.
    n_draws : int
        Number of draws per path.
    stream : int
        Independent stream tag.
    offset : int
        Index of the first draw; must be even.

    Returns
    -------
    ndarray, shape (len(path_indices), n_draws)
    """
    if offset % 2:
        raise ValueError("offset must be even")
    paths = np.asarray(path_indices, dtype=np.uint64).reshape(-1)
    n_blocks = (n_draws + 1) // 2
    if paths.size == 0 or n_blocks == 0:
        return np.zeros((paths.size, n_draws))
    blocks = np.arange(offset // 2, offset // 2 + n_blocks, dtype=np.uint64)
    counter = np.empty((paths.size, n_blocks, 4), dtype=np.uint64)
    counter[..., 0] = blocks[None, :] & _MASK
    counter[..., 1] = (paths & _MASK)[:, None]
    counter[..., 2] = (paths >> _SHIFT)[:, None]
    counter[..., 3] = np.uint64(stream)
    bits = philox4x32(counter, seed_key(seed)).astype(np.uint64)
    # two 53-bit uniforms per block, then Box-Muller
    u1 = ((bits[..., 0] >> np.uint64(5)) * np.uint64(1 << 26) + (bits[..., 1] >> np.uint64(6)))
    u2 = ((bits[..., 2] >> np.uint64(5)) * np.uint64(1 << 26) + (bits[..., 3] >> np.uint64(6)))
    u1 = 1.0 - u1.astype(np.float64) * 2.0**-53  # in (0, 1]
    u2 = u2.astype(np.float64) * 2.0**-53
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    out = np.empty((paths.size, 2 * n_blocks))
    out[:, 0::2] = radius * np.cos(angle)
    out[:, 1::2] = radius * np.sin(angle)
    return out[:, :n_draws]
