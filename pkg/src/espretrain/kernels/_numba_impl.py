"""Numba kernels. Same contracts as ``_numpy_impl``, fused into single passes.

The arithmetic mirrors the numpy path operation by operation so both backends
agree to the last bit wherever libm agrees.
"""

import math

import numpy as np
from numba import njit

from ..rng import GOLDEN, MIX1, MIX2

_GOLDEN = np.uint64(GOLDEN)
_MIX1 = np.uint64(MIX1)
_MIX2 = np.uint64(MIX2)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S32 = np.uint64(32)
_LOW32 = np.uint64(0xFFFFFFFF)
_INV_2_32 = 2.0**-32
_ANGLE = 2.0**-32 * (2.0 * np.pi)


@njit(cache=True, nogil=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True, inline="always")
def _pair(key, k):
    h = _mix64(key ^ _mix64(np.uint64(k) * _GOLDEN))
    u1 = (np.float64(h >> _S32) + 0.5) * _INV_2_32
    a = (np.float64(h & _LOW32) + 0.5) * _ANGLE
    r = math.sqrt(math.log(u1) * -2.0)
    return np.float32(r * math.cos(a)), np.float32(r * math.sin(a))


@njit(cache=True, nogil=True, inline="always")
def _eps(key, g):
    z0, z1 = _pair(key, g >> 1)
    if g & 1:
        return z1
    return z0


@njit(cache=True, nogil=True)
def gaussian_fill(out, key, start):
    n = out.shape[0]
    i = 0
    while i < n:
        g = start + i
        if (g & 1) == 0 and i + 1 < n:
            z0, z1 = _pair(key, g >> 1)
            out[i] = z0
            out[i + 1] = z1
            i += 2
        else:
            out[i] = _eps(key, g)
            i += 1


@njit(cache=True, nogil=True)
def _apply_perturb(seg, key, start, scale, offsets, values):
    j = 0
    for i in range(seg.shape[0]):
        d = np.float32(np.float64(_eps(key, start + i)) * scale)
        x = seg[i]
        xp = x + d
        # x == 0 also catches -0.0, which compares equal to the +0.0 we would restore
        if xp - d != x or x == 0:
            offsets[j] = i
            values[j] = x
            j += 1
        seg[i] = xp
    return j


def perturb(seg, key, start, scale, block):
    """Block-wise so the scratch buffers never exceed ``block`` entries."""
    offsets = np.empty(min(block, seg.shape[0]), dtype=np.uint32)
    values = np.empty(offsets.shape[0], dtype=np.float32)
    out_offsets, out_values = [], []
    key = np.uint64(key)
    for b0 in range(0, seg.shape[0], block):
        b1 = min(b0 + block, seg.shape[0])
        count = _apply_perturb(seg[b0:b1], key, start + b0, scale, offsets, values)
        if count:
            out_offsets.append(offsets[:count] + np.uint32(b0))
            out_values.append(values[:count].copy())
    if not out_offsets:
        return np.empty(0, np.uint32), np.empty(0, np.float32)
    if len(out_offsets) == 1:
        return out_offsets[0], out_values[0]
    return np.concatenate(out_offsets), np.concatenate(out_values)


@njit(cache=True, nogil=True)
def _unperturb(seg, key, start, scale, offsets, values):
    for i in range(seg.shape[0]):
        d = np.float32(np.float64(_eps(key, start + i)) * scale)
        seg[i] = seg[i] - d
    for j in range(offsets.shape[0]):
        seg[offsets[j]] = values[j]


def unperturb(seg, key, start, scale, offsets, values, block):
    _unperturb(seg, np.uint64(key), start, scale, offsets, values)


@njit(cache=True, nogil=True)
def _update_chunk(out, keys, coefs, start, n_pop, scale):
    n = out.shape[0]
    i = 0
    while i < n:
        g = start + i
        if (g & 1) == 0 and i + 1 < n:
            acc0 = 0.0
            acc1 = 0.0
            for s in range(keys.shape[0]):
                z0, z1 = _pair(keys[s], g >> 1)
                acc0 += coefs[s] * np.float64(z0)
                acc1 += coefs[s] * np.float64(z1)
            out[i] = np.float32((acc0 / n_pop) * scale)
            out[i + 1] = np.float32((acc1 / n_pop) * scale)
            i += 2
        else:
            acc = 0.0
            for s in range(keys.shape[0]):
                acc += coefs[s] * np.float64(_eps(keys[s], g))
            out[i] = np.float32((acc / n_pop) * scale)
            i += 1


def update_chunk(out, keys, coefs, start, n_pop, scale, block):
    _update_chunk(out, keys, coefs, start, float(n_pop), scale)


@njit(cache=True, nogil=True)
def _shift_pick(logits, labels, shifted, picked):
    rows, vocab = logits.shape
    for r in range(rows):
        m = logits[r, 0]
        for v in range(1, vocab):
            if logits[r, v] > m:
                m = logits[r, v]
        m64 = np.float64(m)
        for v in range(vocab):
            shifted[r, v] = np.float64(logits[r, v]) - m64
        picked[r] = shifted[r, labels[r]]


@njit(cache=True, nogil=True)
def _row_sums(e, out):
    rows, vocab = e.shape
    for r in range(rows):
        s = 0.0
        for v in range(vocab):
            s += e[r, v]
        out[r] = s


def label_logprobs(logits, labels, block=256):
    # exp goes through numpy's vectorised loop; numba's scalar exp is several times slower
    rows, vocab = logits.shape
    out = np.empty(rows, dtype=np.float64)
    shifted = np.empty((min(block, rows), vocab), dtype=np.float64)
    sums = np.empty(min(block, rows), dtype=np.float64)
    for r0 in range(0, rows, block):
        r1 = min(r0 + block, rows)
        sh, sm = shifted[:r1 - r0], sums[:r1 - r0]
        _shift_pick(logits[r0:r1], labels[r0:r1], sh, out[r0:r1])
        np.exp(sh, out=sh)
        _row_sums(sh, sm)
        out[r0:r1] -= np.log(sm)
    return out


@njit(cache=True, nogil=True)
def _rms_norm_rows(x, gain, eps, out):
    rows, width = x.shape
    for r in range(rows):
        ss = 0.0
        for c in range(width):
            v = np.float64(x[r, c])
            ss += v * v
        inv = 1.0 / math.sqrt(ss / width + eps)
        for c in range(width):
            out[r, c] = np.float32((np.float64(x[r, c]) * inv) * np.float64(gain[c]))


def rms_norm_rows(x, gain, eps):
    out = np.empty(x.shape, dtype=np.float32)
    _rms_norm_rows(x, gain, eps, out)
    return out


@njit(cache=True, nogil=True)
def _rope_rows(x, cos, sin, head_dim, out):
    n, seq, width = x.shape
    half = head_dim // 2
    for b in range(n):
        for t in range(seq):
            for h0 in range(0, width, head_dim):
                for i in range(half):
                    e = x[b, t, h0 + 2 * i]
                    o = x[b, t, h0 + 2 * i + 1]
                    c = cos[t, i]
                    s = sin[t, i]
                    out[b, t, h0 + 2 * i] = e * c - o * s
                    out[b, t, h0 + 2 * i + 1] = e * s + o * c


def rope_rows(x, cos, sin, head_dim):
    out = np.empty_like(x)
    _rope_rows(x, cos, sin, head_dim, out)
    return out


@njit(cache=True, nogil=True)
def shift_rows(s):
    rows, width = s.shape
    for r in range(rows):
        m = s[r, 0]
        for c in range(1, width):
            if s[r, c] > m:
                m = s[r, c]
        for c in range(width):
            s[r, c] -= m


@njit(cache=True, nogil=True)
def normalize_rows(s):
    rows, width = s.shape
    for r in range(rows):
        total = np.float32(0.0)
        for c in range(width):
            total += s[r, c]
        for c in range(width):
            s[r, c] /= total
