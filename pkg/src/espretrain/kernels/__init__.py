"""Hot loops: noise regeneration, perturb/restore, update accumulation,
label log-probabilities and row RMS normalisation.

Two interchangeable backends implement the same functions. Numba is used when
importable; setting ``ESPRETRAIN_DISABLE_NUMBA=1`` before import selects the
pure-numpy path. Within one backend every kernel is deterministic; across
backends results agree to float rounding (the numba path sums sequentially,
numpy pairwise).
"""

import os
import warnings

import numpy as np

from . import _numpy_impl

ENV_FLAG = "ESPRETRAIN_DISABLE_NUMBA"


def _numba_disabled() -> bool:
    return os.environ.get(ENV_FLAG, "").strip().lower() not in ("", "0", "false", "no")


def implementation(name: str):
    """Return the kernel module for ``"numba"`` or ``"numpy"``."""
    if name == "numpy":
        return _numpy_impl
    if name == "numba":
        from . import _numba_impl

        return _numba_impl
    raise ValueError(f"unknown kernel backend {name!r}")


if _numba_disabled():
    BACKEND = "numpy"
    _impl = _numpy_impl
else:
    try:
        _impl = implementation("numba")
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        warnings.warn("numba not importable; using the numpy kernels", RuntimeWarning)
        BACKEND = "numpy"
        _impl = _numpy_impl


def block_for(chunk: int) -> int:
    """Sub-block used by the numpy kernels for a given noise chunk."""
    return max(chunk // 16, 256)


def gaussian(key: int, start: int, n: int) -> np.ndarray:
    """Standard normals ``eps[start:start + n]`` of the stream ``key`` (float32)."""
    out = np.empty(n, dtype=np.float32)
    _impl.gaussian_fill(out, np.uint64(key), int(start))
    return out


def perturb(seg: np.ndarray, key: int, start: int, scale: float, chunk: int):
    return _impl.perturb(seg, int(key), int(start), float(scale), block_for(chunk))


def unperturb(seg, key, start, scale, offsets, values, chunk):
    _impl.unperturb(seg, int(key), int(start), float(scale), offsets, values, block_for(chunk))


def update_chunk(out, keys, coefs, start, n_pop, scale, chunk):
    _impl.update_chunk(out, keys, coefs, int(start), n_pop, float(scale), block_for(chunk))


def label_logprobs(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``log_softmax(logits[r])[labels[r]]`` for every row, in float64."""
    return _impl.label_logprobs(
        np.ascontiguousarray(logits, dtype=np.float32),
        np.ascontiguousarray(labels, dtype=np.int64),
    )


def rms_norm_rows(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    return _impl.rms_norm_rows(
        np.ascontiguousarray(x, dtype=np.float32),
        np.ascontiguousarray(gain, dtype=np.float32),
        float(eps),
    )


def rope_rows(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, head_dim: int) -> np.ndarray:
    return _impl.rope_rows(
        np.ascontiguousarray(x, dtype=np.float32),
        np.ascontiguousarray(cos, dtype=np.float32),
        np.ascontiguousarray(sin, dtype=np.float32),
        int(head_dim),
    )


def softmax_rows_(s: np.ndarray) -> None:
    """In-place float32 softmax over the last axis of a contiguous array."""
    rows = s.reshape(-1, s.shape[-1])
    _impl.shift_rows(rows)
    np.exp(rows, out=rows)
    _impl.normalize_rows(rows)
