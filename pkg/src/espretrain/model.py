"""Forward-only Qwen3-style causal transformer over a flat parameter vector.

Block: RMSNorm -> grouped-query attention with rotary embeddings -> residual ->
RMSNorm -> SwiGLU MLP -> residual. A final RMSNorm precedes the output head,
which is the transposed embedding when embeddings are tied. Projection weights
are stored (in_features, out_features) so activations multiply on the left.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigurationError, NumericalError, ParseError
from .rng import derive_key
from .tensor_core import rms_norm, rope_apply, rope_tables

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    kv_heads: int = 2
    head_dim: int = 16
    intermediate: int = 128
    vocab: int = 128
    max_seq: int = 256
    tie_embeddings: bool = True
    rope_base: float = 10000.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("hidden", "heads", "kv_heads", "head_dim", "intermediate"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"model.{name} must be >= 1")
        if self.layers < 0:
            raise ConfigurationError("model.layers must be >= 0")
        if self.heads % self.kv_heads:
            raise ConfigurationError(
                f"kv_heads ({self.kv_heads}) must divide heads ({self.heads})"
            )
        if self.head_dim % 2:
            raise ConfigurationError("head_dim must be even for rotary embeddings")
        if self.vocab < 2:
            raise ConfigurationError("vocab must be >= 2")
        if self.max_seq < 2:
            raise ConfigurationError("max_seq must be >= 2")
        if self.rope_base <= 0 or self.norm_eps <= 0:
            raise ConfigurationError("rope_base and norm_eps must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown model keys: {sorted(unknown)}")
        return cls(**data)


# Qwen3-style reference family, 0.5B to 32B parameters. Only used for analytic
# accounting; never instantiated.
REFERENCE_MODEL_CONFIGS = {
    "0.5B": ModelConfig(24, 1024, 8, 4, 128, 4096, 151936, 32768, True),
    "1.7B": ModelConfig(28, 2048, 16, 8, 128, 6144, 151936, 32768, True),
    "4B": ModelConfig(36, 4096, 32, 8, 128, 9728, 151936, 32768, True),
    "8B": ModelConfig(36, 4096, 32, 8, 128, 12288, 151936, 32768, False),
    "14B": ModelConfig(40, 5120, 40, 8, 128, 17408, 151936, 32768, False),
    "32B": ModelConfig(64, 8192, 64, 8, 128, 25600, 151936, 40960, False),
}


@dataclass(frozen=True)
class TensorSlot:
    name: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def stop(self) -> int:
        return self.offset + self.size


def layout(config: ModelConfig) -> tuple:
    h, q_width, kv_width = config.hidden, config.heads * config.head_dim, config.kv_heads * config.head_dim
    shapes = [("embed.weight", (config.vocab, h))]
    for i in range(config.layers):
        p = f"layers.{i}."
        shapes += [
            (p + "attn_norm.gain", (h,)),
            (p + "attn.wq", (h, q_width)),
            (p + "attn.wk", (h, kv_width)),
            (p + "attn.wv", (h, kv_width)),
            (p + "attn.wo", (q_width, h)),
            (p + "mlp_norm.gain", (h,)),
            (p + "mlp.w_gate", (h, config.intermediate)),
            (p + "mlp.w_up", (h, config.intermediate)),
            (p + "mlp.w_down", (config.intermediate, h)),
        ]
    shapes.append(("final_norm.gain", (h,)))
    if not config.tie_embeddings:
        shapes.append(("lm_head.weight", (h, config.vocab)))
    slots, offset = [], 0
    for name, shape in shapes:
        slots.append(TensorSlot(name, offset, tuple(int(s) for s in shape)))
        offset += math.prod(shape)
    return tuple(slots)


def param_count(config: ModelConfig) -> int:
    config.validate()
    return sum(slot.size for slot in layout(config))


@dataclass
class ModelParams:
    """The full parameter vector plus the named slices that make up the model."""

    flat: np.ndarray
    layout: tuple
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.flat.dtype != np.float32 or self.flat.ndim != 1 or not self.flat.flags.c_contiguous:
            raise ConfigurationError("flat parameters must be a contiguous float32 vector")
        offset = 0
        for slot in self.layout:
            if slot.offset != offset:
                raise ConfigurationError(f"layout gap or overlap at {slot.name}")
            offset = slot.stop
        if offset != self.flat.size:
            raise ConfigurationError(f"layout covers {offset} floats, flat has {self.flat.size}")
        self._index = {slot.name: slot for slot in self.layout}

    def slot(self, name: str) -> TensorSlot:
        return self._index[name]

    def tensor(self, name: str) -> np.ndarray:
        slot = self._index[name]
        return self.flat[slot.offset:slot.stop].reshape(slot.shape)

    def copy(self) -> "ModelParams":
        return ModelParams(self.flat.copy(), self.layout)

    def __len__(self) -> int:
        return self.flat.size


def _is_residual_output(name: str) -> bool:
    return name.endswith("attn.wo") or name.endswith("mlp.w_down")


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Gaussian(0, 0.02) weights, residual-output projections scaled by
    1/sqrt(2 * layers), unit norm gains. Bit-reproducible from ``seed``."""
    slots = layout(config)
    n = sum(slot.size for slot in slots)
    flat = kernels.gaussian(derive_key("init", seed), 0, n)
    flat *= np.float32(INIT_STD)
    residual_scale = np.float32(1.0 / math.sqrt(2 * max(config.layers, 1)))
    for slot in slots:
        view = flat[slot.offset:slot.stop]
        if slot.name.endswith(".gain"):
            view[:] = 1.0
        elif _is_residual_output(slot.name):
            view *= residual_scale
    return ModelParams(flat, slots)


@dataclass
class TokenBatch:
    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        self.mask = np.ascontiguousarray(self.mask, dtype=np.int8)
        if self.ids.ndim != 2 or self.ids.shape != self.mask.shape:
            raise ConfigurationError(f"ids {self.ids.shape} and mask {self.mask.shape} must be equal 2-D shapes")

    @property
    def shape(self):
        return self.ids.shape

    def rows(self, start: int, stop: int) -> "TokenBatch":
        return TokenBatch(self.ids[start:stop], self.mask[start:stop])


def _causal_bias(seq: int) -> np.ndarray:
    bias = np.zeros((seq, seq), dtype=np.float32)
    bias[np.triu_indices(seq, k=1)] = -np.inf
    return bias


def _attention(h2, params, config, prefix, batch, seq, tables, bias):
    hd, kv = config.head_dim, config.kv_heads
    group = config.heads // kv
    positions = np.arange(seq)
    q = (h2 @ params.tensor(prefix + "attn.wq")).reshape(batch, seq, config.heads * hd)
    k = (h2 @ params.tensor(prefix + "attn.wk")).reshape(batch, seq, kv * hd)
    v = (h2 @ params.tensor(prefix + "attn.wv")).reshape(batch, seq, kv, hd)
    q = rope_apply(q, positions, hd, tables=tables)
    k = rope_apply(k, positions, hd, tables=tables)
    # query head j uses kv head j // group
    q = np.ascontiguousarray(q.reshape(batch, seq, kv, group, hd).transpose(0, 2, 3, 1, 4))
    kt = np.ascontiguousarray(k.reshape(batch, seq, kv, hd).transpose(0, 2, 3, 1))[:, :, None]
    v = np.ascontiguousarray(v.transpose(0, 2, 1, 3))[:, :, None]
    scores = q @ kt
    scores *= np.float32(1.0 / math.sqrt(hd))
    scores += bias
    kernels.softmax_rows_(scores)
    out = scores @ v
    return out.transpose(0, 3, 1, 2, 4).reshape(batch * seq, config.heads * hd)


def _mlp(h2, params, prefix):
    gate = h2 @ params.tensor(prefix + "mlp.w_gate")
    up = h2 @ params.tensor(prefix + "mlp.w_up")
    # silu(gate) * up, in place on the two buffers
    denom = np.negative(gate)
    np.exp(denom, out=denom)
    denom += np.float32(1.0)
    gate /= denom
    del denom
    gate *= up
    return gate @ params.tensor(prefix + "mlp.w_down")


def forward_logits(params: ModelParams, config: ModelConfig, batch) -> np.ndarray:
    """Logits of shape (B, T, vocab) for the token ids in ``batch``.

    ``batch`` is a TokenBatch or a (B, T) integer array. Padding needs no
    special handling: attention is causal, so right padding never reaches
    earlier positions.
    """
    ids = batch.ids if isinstance(batch, TokenBatch) else np.asarray(batch, dtype=np.int64)
    if ids.ndim != 2:
        raise ConfigurationError(f"token ids must be 2-D, got shape {ids.shape}")
    nb, seq = ids.shape
    if seq > config.max_seq:
        raise ConfigurationError(f"sequence length {seq} exceeds max_seq {config.max_seq}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab):
        raise ConfigurationError(f"token ids must lie in [0, {config.vocab})")
    embed = params.tensor("embed.weight")
    x = embed[ids].reshape(nb * seq, config.hidden)
    tables = rope_tables(np.arange(seq), config.head_dim, config.rope_base)
    bias = _causal_bias(seq)
    with np.errstate(all="ignore"):  # non-finite values are reported below
        return _forward(params, config, ids, embed, x, tables, bias)


def _forward(params, config, ids, embed, x, tables, bias):
    nb, seq = ids.shape
    eps = config.norm_eps
    for i in range(config.layers):
        prefix = f"layers.{i}."
        h2 = rms_norm(x, params.tensor(prefix + "attn_norm.gain"), eps)
        x = x + _attention(h2, params, config, prefix, nb, seq, tables, bias) @ params.tensor(prefix + "attn.wo")
        h2 = rms_norm(x, params.tensor(prefix + "mlp_norm.gain"), eps)
        x += _mlp(h2, params, prefix)
        if not np.isfinite(x).all():
            raise NumericalError(f"non-finite activations in layer {i}")
    h2 = rms_norm(x, params.tensor("final_norm.gain"), eps)
    head = embed.T if config.tie_embeddings else params.tensor("lm_head.weight")
    logits = h2 @ head
    if not np.isfinite(logits).all():
        raise NumericalError("non-finite logits at the output head")
    return logits.reshape(nb, seq, config.vocab)


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"ESPTCKPT"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def save_checkpoint(path, params: ModelParams, config: ModelConfig, meta: dict | None = None) -> None:
    """Header (magic, version, JSON config + layout + meta) then little-endian float32 data."""
    header = {
        "config": asdict(config),
        "layout": [[s.name, s.offset, list(s.shape)] for s in params.layout],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.flat.astype("<f4", copy=False).tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(params, config, meta)``."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise ParseError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: corrupt header: {exc}") from exc
    config = ModelConfig.from_dict(header["config"])
    slots = tuple(TensorSlot(n, o, tuple(s)) for n, o, s in header["layout"])
    if slots != layout(config):
        raise ParseError(f"{path}: layout does not match its model config")
    data = raw[_PREFIX.size + hlen:]
    n = param_count(config)
    if len(data) != 4 * n:
        raise ParseError(f"{path}: expected {4 * n} data bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f4").astype(np.float32)
    return ModelParams(flat, slots), config, header["meta"]
