"""Analytic memory accounting: forward-only ES versus backprop with Adam.

All quantities are float32-equivalents (4 bytes). Activation terms are
upper bounds for the implementation in ``model.forward_logits`` and are
checked against allocation tracking in the test suite.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .es import EsConfig
from .model import REFERENCE_MODEL_CONFIGS, ModelConfig, param_count

BYTES_PER_FLOAT = 4


def forward_activation_floats(model: ModelConfig, micro_batch: int, seq_len: int) -> int:
    """Peak transient activations of one forward + scoring pass.

    Nothing is kept across layers except the residual stream, so this does not
    grow with depth.
    """
    tokens = micro_batch * seq_len
    q = model.heads * model.head_dim
    kv = model.kv_heads * model.head_dim
    per_token = 4 * model.hidden + 4 * q + 4 * kv + 3 * model.intermediate + 2 * model.vocab
    return tokens * per_token + micro_batch * model.heads * seq_len * seq_len


def backprop_activation_floats(model: ModelConfig, micro_batch: int, seq_len: int) -> int:
    """Activations a reverse-mode pass must keep, assuming no checkpointing.

    Per layer: block input, both norm outputs, q/k/v before and after rotation,
    attention probabilities, attention output, the residual after attention and
    the three MLP intermediates. Plus the final norm and logits with their
    softmax.
    """
    tokens = micro_batch * seq_len
    q = model.heads * model.head_dim
    kv = model.kv_heads * model.head_dim
    per_layer = tokens * (4 * model.hidden + 3 * q + 3 * kv + 3 * model.intermediate)
    per_layer += micro_batch * model.heads * seq_len * seq_len
    return model.layers * per_layer + tokens * (model.hidden + 2 * model.vocab)


@dataclass(frozen=True)
class MemoryReport:
    params: int
    noise_chunk: int
    accumulator: int
    es_activations: int
    grad_activations: int

    @property
    def es_state(self) -> int:
        return self.params + self.noise_chunk + self.accumulator

    @property
    def grad_state(self) -> int:
        # weights, gradients, two Adam moments
        return 4 * self.params

    @property
    def es_total(self) -> int:
        return self.es_state + self.es_activations

    @property
    def grad_total(self) -> int:
        return self.grad_state + self.grad_activations

    @property
    def state_ratio(self) -> float:
        return self.grad_state / self.es_state

    @property
    def total_ratio(self) -> float:
        return self.grad_total / self.es_total

    def as_dict(self) -> dict:
        out = asdict(self)
        for name in ("es_state", "grad_state", "es_total", "grad_total", "state_ratio", "total_ratio"):
            out[name] = getattr(self, name)
        return out

    def format(self) -> str:
        def row(label, floats):
            return f"  {label:<34}{floats:>16,d} floats {floats * BYTES_PER_FLOAT / 2**20:>12,.1f} MiB"

        lines = [
            "ES (forward only)",
            row("parameters", self.params),
            row("noise chunk", self.noise_chunk),
            row("update accumulator chunk", self.accumulator),
            row("activations, one micro-batch", self.es_activations),
            row("total", self.es_total),
            "Backprop + Adam",
            row("parameters + grads + 2 moments", self.grad_state),
            row("stored activations", self.grad_activations),
            row("total", self.grad_total),
            f"optimizer-state ratio (grad / ES): {self.state_ratio:.3f}",
            f"total ratio (grad / ES):           {self.total_ratio:.3f}",
            "note: the in-place perturbation also keeps a restore log of the elements whose",
            "float32 add/subtract does not round-trip (8 bytes each, count reported per",
            "iteration as restore_entries in metrics.csv); it is not part of the totals above.",
        ]
        return "\n".join(lines)


def memory_report(model: ModelConfig, es: EsConfig, micro_batch: int = 16, seq_len: int | None = None) -> MemoryReport:
    seq_len = model.max_seq if seq_len is None else seq_len
    n = param_count(model)
    chunk = min(es.noise_chunk, n)
    return MemoryReport(
        params=n,
        noise_chunk=chunk,
        accumulator=chunk,
        es_activations=forward_activation_floats(model, micro_batch, seq_len),
        grad_activations=backprop_activation_floats(model, micro_batch, seq_len),
    )


def reference_scale_table(es: EsConfig, micro_batch: int = 16, seq_len: int = 256) -> str:
    lines = [f"{'model':<6}{'params':>16}{'ES GiB':>10}{'grad GiB':>10}{'state x':>9}{'total x':>9}"]
    for name, cfg in REFERENCE_MODEL_CONFIGS.items():
        rep = memory_report(cfg, es, micro_batch, seq_len)
        gib = BYTES_PER_FLOAT / 2**30
        lines.append(
            f"{name:<6}{rep.params:>16,d}{rep.es_total * gib:>10.2f}{rep.grad_total * gib:>10.2f}"
            f"{rep.state_ratio:>9.3f}{rep.total_ratio:>9.3f}"
        )
    return "\n".join(lines)
