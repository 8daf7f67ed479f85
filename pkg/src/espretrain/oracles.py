"""Slow, independent reference implementations used to check the fast paths.

Nothing here imports the production model, fitness or ES code: layouts,
softmax, normalisation and attention are rewritten as plain float64 loops so
that agreement is evidence rather than tautology.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

from .errors import ConfigurationError

MAX_SUBSETS = 10_000
MAX_FD_DIM = 200


@dataclass(frozen=True)
class OracleReport:
    name: str
    metric: str
    value: float
    threshold: float
    higher_is_better: bool = False

    @property
    def passed(self) -> bool:
        if math.isnan(self.value):
            return False
        return self.value > self.threshold if self.higher_is_better else self.value <= self.threshold

    def line(self) -> str:
        op = ">" if self.higher_is_better else "<="
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: {self.metric} = {self.value:.3g} ({op} {self.threshold:g})"


def max_abs_diff(a, b) -> float:
    a, b = list(_flatten(a)), list(_flatten(b))
    if len(a) != len(b):
        raise ConfigurationError("compared arrays differ in size")
    return max((abs(float(x) - float(y)) for x, y in zip(a, b)), default=0.0)


def cosine(a, b) -> float:
    a, b = [float(x) for x in _flatten(a)], [float(x) for x in _flatten(b)]
    num = math.fsum(x * y for x, y in zip(a, b))
    den = math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b))
    return num / den if den else 0.0


def _flatten(x):
    if hasattr(x, "tolist"):
        x = x.tolist()
    if isinstance(x, (list, tuple)):
        for item in x:
            yield from _flatten(item)
    else:
        yield x


# -- next-token reward -----------------------------------------------------

def scalar_reward_oracle(logits, ids, mask) -> float:
    """Mean log-probability of token t+1 under row t, weighted by mask[t+1]."""
    logits = [[float(v) for v in row] for row in _rows(logits)]
    ids = [int(v) for v in _flatten(ids)]
    mask = [int(v) for v in _flatten(mask)]
    total, count = [], 0
    for t in range(len(ids) - 1):
        if not mask[t + 1]:
            continue
        row = logits[t]
        top = max(row)
        log_norm = top + math.log(math.fsum(math.exp(v - top) for v in row))
        total.append(row[ids[t + 1]] - log_norm)
        count += 1
    if count == 0:
        raise ConfigurationError("no scored positions")
    return math.fsum(total) / count


def _rows(m):
    if hasattr(m, "tolist"):
        m = m.tolist()
    return m


# -- transformer -----------------------------------------------------------

def _names(cfg) -> list:
    h, q, kv, inter, vocab = cfg.hidden, cfg.heads * cfg.head_dim, cfg.kv_heads * cfg.head_dim, cfg.intermediate, cfg.vocab
    out = [("embed.weight", (vocab, h))]
    for i in range(cfg.layers):
        out += [
            (f"layers.{i}.attn_norm.gain", (h,)), (f"layers.{i}.attn.wq", (h, q)),
            (f"layers.{i}.attn.wk", (h, kv)), (f"layers.{i}.attn.wv", (h, kv)),
            (f"layers.{i}.attn.wo", (q, h)), (f"layers.{i}.mlp_norm.gain", (h,)),
            (f"layers.{i}.mlp.w_gate", (h, inter)), (f"layers.{i}.mlp.w_up", (h, inter)),
            (f"layers.{i}.mlp.w_down", (inter, h)),
        ]
    out.append(("final_norm.gain", (h,)))
    if not cfg.tie_embeddings:
        out.append(("lm_head.weight", (h, vocab)))
    return out


def _unpack(flat, cfg) -> dict:
    values = [float(v) for v in _flatten(flat)]
    tensors, pos = {}, 0
    for name, shape in _names(cfg):
        if len(shape) == 1:
            tensors[name] = values[pos:pos + shape[0]]
        else:
            r, c = shape
            tensors[name] = [values[pos + i * c:pos + (i + 1) * c] for i in range(r)]
        pos += math.prod(shape)
    if pos != len(values):
        raise ConfigurationError(f"parameter vector has {len(values)} floats, layout needs {pos}")
    return tensors


def _vecmat(v, m):
    cols = len(m[0])
    return [math.fsum(v[i] * m[i][j] for i in range(len(v))) for j in range(cols)]


def _norm(v, gain, eps):
    scale = 1.0 / math.sqrt(math.fsum(x * x for x in v) / len(v) + eps)
    return [x * scale * g for x, g in zip(v, gain)]


def _rotate(v, pos, head_dim, base):
    out = list(v)
    for h0 in range(0, len(v), head_dim):
        for i in range(head_dim // 2):
            angle = pos * base ** (-2.0 * i / head_dim)
            c, s = math.cos(angle), math.sin(angle)
            a, b = v[h0 + 2 * i], v[h0 + 2 * i + 1]
            out[h0 + 2 * i] = a * c - b * s
            out[h0 + 2 * i + 1] = a * s + b * c
    return out


def reference_forward(flat, cfg, ids) -> list:
    """Logits for one token sequence, position by position, in float64."""
    w = _unpack(flat, cfg)
    hd, group = cfg.head_dim, cfg.heads // cfg.kv_heads
    xs = [list(w["embed.weight"][int(t)]) for t in ids]
    seq = len(xs)
    for layer in range(cfg.layers):
        p = f"layers.{layer}."
        normed = [_norm(x, w[p + "attn_norm.gain"], cfg.norm_eps) for x in xs]
        qs = [_rotate(_vecmat(n, w[p + "attn.wq"]), t, hd, cfg.rope_base) for t, n in enumerate(normed)]
        ks = [_rotate(_vecmat(n, w[p + "attn.wk"]), t, hd, cfg.rope_base) for t, n in enumerate(normed)]
        vs = [_vecmat(n, w[p + "attn.wv"]) for n in normed]
        new_xs = []
        for t in range(seq):
            heads_out = []
            for head in range(cfg.heads):
                kvh = head // group
                q = qs[t][head * hd:(head + 1) * hd]
                scores = [
                    math.fsum(a * b for a, b in zip(q, ks[s][kvh * hd:(kvh + 1) * hd])) / math.sqrt(hd)
                    for s in range(t + 1)
                ]
                top = max(scores)
                e = [math.exp(v - top) for v in scores]
                z = math.fsum(e)
                heads_out += [
                    math.fsum(e[s] / z * vs[s][kvh * hd + d] for s in range(t + 1)) for d in range(hd)
                ]
            attn = _vecmat(heads_out, w[p + "attn.wo"])
            new_xs.append([a + b for a, b in zip(xs[t], attn)])
        xs = new_xs
        out = []
        for x in xs:
            n = _norm(x, w[p + "mlp_norm.gain"], cfg.norm_eps)
            gate = _vecmat(n, w[p + "mlp.w_gate"])
            up = _vecmat(n, w[p + "mlp.w_up"])
            act = [g / (1.0 + math.exp(-g)) * u for g, u in zip(gate, up)]
            out.append([a + b for a, b in zip(x, _vecmat(act, w[p + "mlp.w_down"]))])
        xs = out
    if cfg.tie_embeddings:
        head = [list(col) for col in zip(*w["embed.weight"])]
    else:
        head = w["lm_head.weight"]
    return [_vecmat(_norm(x, w["final_norm.gain"], cfg.norm_eps), head) for x in xs]


# -- gradients and subsets -------------------------------------------------

def finite_diff_gradient(objective, theta, h: float = 1e-4) -> list:
    """Central differences (f(theta + h e_i) - f(theta - h e_i)) / 2h in float64."""
    theta = [float(v) for v in _flatten(theta)]
    if h <= 0:
        raise ConfigurationError("step h must be positive")
    if len(theta) > MAX_FD_DIM:
        raise ConfigurationError(f"finite differences limited to {MAX_FD_DIM} dimensions")
    grad = []
    for i in range(len(theta)):
        up, down = list(theta), list(theta)
        up[i] += h
        down[i] -= h
        grad.append((float(objective(up)) - float(objective(down))) / (2.0 * h))
    return grad


def exhaustive_subset_mean(corpus, params, m: int, subset_score) -> float:
    """Exact mean of ``subset_score(params, indices)`` over every m-subset."""
    n = len(corpus)
    if not 1 <= m <= n:
        raise ConfigurationError(f"subset size {m} must lie in [1, {n}]")
    total = math.comb(n, m)
    if total > MAX_SUBSETS:
        raise ConfigurationError(f"C({n}, {m}) = {total} subsets exceeds the limit of {MAX_SUBSETS}")
    scores = [float(subset_score(params, combo)) for combo in itertools.combinations(range(n), m)]
    return math.fsum(scores) / total
