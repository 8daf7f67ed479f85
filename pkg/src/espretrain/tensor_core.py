"""Forward-only dense kernels used by the transformer.

Matrices are C-contiguous float32 ndarrays. Reductions that feed the fitness
(softmax normalisers, RMS statistics) accumulate in float64.
"""

import numpy as np

from . import kernels
from .errors import ConfigurationError, NumericalError


def _as_matrix(x, name):
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ConfigurationError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b, check: bool = True) -> np.ndarray:
    """Row-major float32 matrix product ``a @ b``."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if check and not np.isfinite(out).all():
        raise NumericalError("matmul produced non-finite values")
    return out


def log_softmax_row(logits) -> np.ndarray:
    """Stabilised log-softmax of one logit vector, returned in float64."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ConfigurationError("log_softmax_row expects a non-empty vector")
    bad = np.flatnonzero(~np.isfinite(z))
    if bad.size:
        raise NumericalError(f"non-finite logit at index {int(bad[0])}")
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def rms_norm(x, gain, eps: float = 1e-6) -> np.ndarray:
    """``gain * x / sqrt(mean(x**2) + eps)`` over the last axis."""
    if eps <= 0:
        raise ConfigurationError("rms_norm eps must be positive")
    x = np.asarray(x, dtype=np.float32)
    gain = np.asarray(gain, dtype=np.float32)
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise ConfigurationError(f"rms_norm length mismatch: {x.shape} vs gain {gain.shape}")
    rows = x.reshape(-1, x.shape[-1])
    return kernels.rms_norm_rows(rows, gain, eps).reshape(x.shape)


def rope_tables(positions, head_dim: int, base: float):
    """cos/sin tables of shape (T, head_dim // 2) for the given positions."""
    if head_dim <= 0 or head_dim % 2:
        raise ConfigurationError(f"rotary head_dim must be even, got {head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = pos[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def rope_apply(x, positions, head_dim: int, base: float = 10000.0, tables=None) -> np.ndarray:
    """Rotate interleaved pairs (2i, 2i+1) of every head by ``pos * base**(-2i/head_dim)``.

    ``x`` has shape (..., T, D) with D a multiple of ``head_dim``; ``positions``
    has length T.
    """
    if head_dim <= 0 or head_dim % 2:
        raise ConfigurationError(f"rotary head_dim must be even, got {head_dim}")
    x = np.asarray(x, dtype=np.float32)
    seq, width = x.shape[-2], x.shape[-1]
    if width % head_dim:
        raise ConfigurationError(f"width {width} is not a multiple of head_dim {head_dim}")
    if len(positions) != seq:
        raise ConfigurationError(f"{len(positions)} positions for sequence length {seq}")
    cos, sin = tables if tables is not None else rope_tables(positions, head_dim, base)
    rows = x.reshape((-1, seq, width))
    return kernels.rope_rows(rows, cos, sin, head_dim).reshape(x.shape)
