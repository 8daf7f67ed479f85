"""Pure-numpy kernels.

Long ranges are processed in blocks of ``block`` elements so that the
temporaries of the vectorised code stay a small multiple of the block.
"""

import numpy as np

from ..rng import hash_counters

_TWO_PI = 2.0 * np.pi
_INV_2_32 = 2.0**-32


def gaussian_fill(out, key, start):
    n = out.shape[0]
    if n == 0:
        return
    k0 = start >> 1
    k1 = (start + n - 1) >> 1
    h = hash_counters(key, np.arange(k0, k1 + 1, dtype=np.uint64))
    radius = (h >> np.uint64(32)).astype(np.float64)
    radius += 0.5
    radius *= _INV_2_32
    np.log(radius, out=radius)
    radius *= -2.0
    np.sqrt(radius, out=radius)
    h &= np.uint64(0xFFFFFFFF)
    angle = h.astype(np.float64)
    del h
    angle += 0.5
    angle *= _INV_2_32 * _TWO_PI
    pairs = np.empty((k1 - k0 + 1, 2), dtype=np.float32)
    pairs[:, 0] = radius * np.cos(angle)
    pairs[:, 1] = radius * np.sin(angle)
    offset = start - 2 * k0
    out[:] = pairs.reshape(-1)[offset:offset + n]


def gaussian(key, start, n):
    out = np.empty(n, dtype=np.float32)
    gaussian_fill(out, key, start)
    return out


def _deltas(key, start, n, scale):
    eps = gaussian(key, start, n)
    return (eps.astype(np.float64) * scale).astype(np.float32)


def perturb(seg, key, start, scale, block):
    """Add ``float32(scale * eps)`` to ``seg`` in place.

    Returns the restore log: offsets (into ``seg``) and original values of the
    elements for which subtracting the same delta might not give back the
    original bits.
    """
    offsets, values = [], []
    n = seg.shape[0]
    for b0 in range(0, n, block):
        b1 = min(b0 + block, n)
        d = _deltas(key, start + b0, b1 - b0, scale)
        x = seg[b0:b1]
        xp = x + d
        # x == 0 also catches -0.0, which compares equal to the +0.0 we would restore
        bad = np.flatnonzero(((xp - d) != x) | (x == 0))
        if bad.size:
            offsets.append((bad + b0).astype(np.uint32))
            values.append(x[bad])
        x[:] = xp
    if not offsets:
        return np.empty(0, np.uint32), np.empty(0, np.float32)
    return np.concatenate(offsets), np.concatenate(values)


def unperturb(seg, key, start, scale, offsets, values, block):
    n = seg.shape[0]
    for b0 in range(0, n, block):
        b1 = min(b0 + block, n)
        d = _deltas(key, start + b0, b1 - b0, scale)
        np.subtract(seg[b0:b1], d, out=seg[b0:b1])
    seg[offsets] = values


def update_chunk(out, keys, coefs, start, n_pop, scale, block):
    """out[i] = float32((sum_s coefs[s] * eps_s[start + i]) / n_pop * scale)."""
    n = out.shape[0]
    for b0 in range(0, n, block):
        b1 = min(b0 + block, n)
        acc = np.zeros(b1 - b0, dtype=np.float64)
        for key, coef in zip(keys, coefs):
            acc += np.multiply(gaussian(int(key), start + b0, b1 - b0), coef, dtype=np.float64)
        acc /= n_pop
        acc *= scale
        out[b0:b1] = acc


def label_logprobs(logits, labels, block=256):
    rows = logits.shape[0]
    out = np.empty(rows, dtype=np.float64)
    for r0 in range(0, rows, block):
        r1 = min(r0 + block, rows)
        z = logits[r0:r1]
        shifted = z.astype(np.float64)
        shifted -= z.max(axis=1)[:, None]
        picked = shifted[np.arange(r1 - r0), labels[r0:r1]]
        np.exp(shifted, out=shifted)
        out[r0:r1] = picked - np.log(shifted.sum(axis=1))
    return out


def rms_norm_rows(x, gain, eps):
    x64 = x.astype(np.float64)
    inv = 1.0 / np.sqrt(np.mean(x64 * x64, axis=1) + eps)
    x64 *= inv[:, None]
    x64 *= gain
    return x64.astype(np.float32)


def rope_rows(x, cos, sin, head_dim):
    """Rotate interleaved pairs of every head; x is (N, T, D), tables (T, head_dim // 2)."""
    n, seq, width = x.shape
    pairs = x.reshape(n, seq, width // head_dim, head_dim // 2, 2)
    c = cos[:, None, :]
    s = sin[:, None, :]
    even, odd = pairs[..., 0], pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = even * c - odd * s
    out[..., 1] = even * s + odd * c
    return out.reshape(x.shape)


def shift_rows(s):
    s -= s.max(axis=1, keepdims=True)


def normalize_rows(s):
    s /= s.sum(axis=1, keepdims=True)
