"""Population evolution strategies over a flat float32 parameter vector.

Noise is never stored. A perturbation is a (seed, sign) ticket, and element i
of its noise vector is ``gaussian(seed, i)`` from the counter-based stream, so
perturbing, restoring and aggregating each regenerate it one chunk at a time.

The target of every operation is either a ``ModelParams`` (group multipliers
match tensor names) or a bare contiguous float32 array (a single group named
``"flat"``).
"""

from __future__ import annotations

import fnmatch
import logging
import math
import queue
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .errors import ConfigurationError, NumericalError
from .model import ModelParams
from .rng import derive_key

log = logging.getLogger(__name__)

ZSCORE_GUARD = 1e-8
DEFAULT_NOISE_CHUNK = 1 << 16
# Largest |eps| the Box-Muller stream can emit: sqrt(-2 ln(2**-33)).
EPS_BOUND = math.sqrt(-2.0 * math.log(2.0**-33))


@dataclass(frozen=True)
class GroupMultiplier:
    pattern: str
    alpha_mult: float = 1.0
    sigma_mult: float = 1.0


@dataclass(frozen=True)
class EsConfig:
    population: int = 30
    sigma: float = 1e-3
    alpha: float = 5e-4
    antithetic: bool = False
    nes_scaling: bool = False
    normalization: str = "zscore"
    gamma_alpha: float = 1.0
    gamma_sigma: float = 1.0
    step_alpha: int = 0
    step_sigma: int = 0
    group_multipliers: tuple = ()
    noise_chunk: int = DEFAULT_NOISE_CHUNK
    workers: int = 1

    def __post_init__(self):
        groups = tuple(
            g if isinstance(g, GroupMultiplier) else GroupMultiplier(*g) if isinstance(g, (list, tuple))
            else GroupMultiplier(**g)
            for g in self.group_multipliers
        )
        object.__setattr__(self, "group_multipliers", groups)
        self.validate()

    def validate(self) -> None:
        if self.population < 2:
            raise ConfigurationError("population must be >= 2")
        if self.antithetic and self.population % 2:
            raise ConfigurationError(f"antithetic sampling needs an even population, got {self.population}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ConfigurationError("sigma must be a positive finite number")
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConfigurationError("alpha must be a positive finite number")
        if self.normalization not in ("zscore", "rank"):
            raise ConfigurationError(f"normalization must be 'zscore' or 'rank', got {self.normalization!r}")
        for name in ("gamma_alpha", "gamma_sigma"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in (0, 1]")
        if self.step_alpha < 0 or self.step_sigma < 0:
            raise ConfigurationError("scheduler steps must be >= 0")
        if self.noise_chunk < 1:
            raise ConfigurationError("noise_chunk must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        for g in self.group_multipliers:
            if not (g.alpha_mult > 0 and g.sigma_mult > 0):
                raise ConfigurationError(f"group multipliers for {g.pattern!r} must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "EsConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown es keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class PerturbationTicket:
    seed: int
    sign: int


def make_tickets(master_seed: int, iteration: int, es: EsConfig) -> list:
    if es.antithetic:
        if es.population % 2:
            raise ConfigurationError("antithetic sampling needs an even population")
        seeds = [derive_key("noise", master_seed, iteration, k) for k in range(es.population // 2)]
        return [PerturbationTicket(s, sign) for s in seeds for sign in (1, -1)]
    return [PerturbationTicket(derive_key("noise", master_seed, iteration, j), 1) for j in range(es.population)]


@dataclass(frozen=True)
class Segment:
    """A contiguous range of the flat vector sharing one pair of multipliers."""

    start: int
    stop: int
    alpha_mult: float = 1.0
    sigma_mult: float = 1.0


def _multipliers(name: str, groups) -> tuple:
    for g in groups:
        if fnmatch.fnmatchcase(name, g.pattern):
            return g.alpha_mult, g.sigma_mult
    return 1.0, 1.0


def segments(target, es: EsConfig) -> list:
    if isinstance(target, ModelParams):
        named = [(slot.name, slot.offset, slot.stop) for slot in target.layout]
    else:
        named = [("flat", 0, _flat(target).size)]
    out = []
    for name, start, stop in named:
        a, s = _multipliers(name, es.group_multipliers)
        if out and out[-1].stop == start and (out[-1].alpha_mult, out[-1].sigma_mult) == (a, s):
            out[-1] = Segment(out[-1].start, stop, a, s)
        else:
            out.append(Segment(start, stop, a, s))
    return out


def _flat(target) -> np.ndarray:
    flat = target.flat if isinstance(target, ModelParams) else target
    if not (isinstance(flat, np.ndarray) and flat.dtype == np.float32 and flat.ndim == 1
            and flat.flags.c_contiguous and flat.flags.writeable):
        raise ConfigurationError("ES target must be ModelParams or a writable contiguous float32 vector")
    return flat


def _chunks(segs, chunk):
    for seg in segs:
        for c0 in range(seg.start, seg.stop, chunk):
            yield seg, c0, min(c0 + chunk, seg.stop)


@dataclass
class RestoreLog:
    """Original values of the elements where subtracting the delta again would
    not reproduce the original float (rounding in the perturbing addition)."""

    entries: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return sum(offsets.size for _, offsets, _ in self.entries)

    @property
    def nbytes(self) -> int:
        return sum(o.nbytes + v.nbytes for _, o, v in self.entries)


def perturb_in_place(target, ticket: PerturbationTicket, sigma_t: float, es: EsConfig, segs=None) -> RestoreLog:
    """flat[i] += float32(sign * sigma_t * group_sigma_mult * eps_i)."""
    flat = _flat(target)
    segs = segments(target, es) if segs is None else segs
    restore = RestoreLog()
    for seg, c0, c1 in _chunks(segs, es.noise_chunk):
        scale = ticket.sign * sigma_t * seg.sigma_mult
        offsets, values = kernels.perturb(flat[c0:c1], ticket.seed, c0, scale, es.noise_chunk)
        if offsets.size:
            restore.entries.append((c0, offsets, values))
    return restore


def unperturb_in_place(target, ticket, sigma_t, es, restore: RestoreLog, segs=None) -> None:
    """Exact inverse of the matching ``perturb_in_place`` call."""
    flat = _flat(target)
    segs = segments(target, es) if segs is None else segs
    pending = {c0: (o, v) for c0, o, v in restore.entries}
    empty = (np.empty(0, np.uint32), np.empty(0, np.float32))
    for seg, c0, c1 in _chunks(segs, es.noise_chunk):
        scale = ticket.sign * sigma_t * seg.sigma_mult
        offsets, values = pending.get(c0, empty)
        kernels.unperturb(flat[c0:c1], ticket.seed, c0, scale, offsets, values, es.noise_chunk)


@dataclass(frozen=True)
class RewardVector:
    rewards: np.ndarray
    tickets: tuple

    def __post_init__(self):
        r = np.asarray(self.rewards, dtype=np.float64)
        if r.ndim != 1 or r.size != len(self.tickets):
            raise ConfigurationError("rewards and tickets must align one to one")
        if not np.isfinite(r).all():
            raise NumericalError("rewards must be finite")
        r.setflags(write=False)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "tickets", tuple(self.tickets))


def _values(rewards) -> np.ndarray:
    r = rewards.rewards if isinstance(rewards, RewardVector) else np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ConfigurationError("need at least two rewards")
    return r


def zscore_weights(rewards) -> np.ndarray:
    r = _values(rewards)
    return (r - r.mean()) / (r.std() + ZSCORE_GUARD)


def rank_weights(rewards) -> np.ndarray:
    """Evenly spaced in [-1, 1] by rank; ties keep population order."""
    r = _values(rewards)
    ranks = np.empty(r.size, dtype=np.float64)
    ranks[np.argsort(r, kind="stable")] = np.arange(r.size)
    return 2.0 * ranks / (r.size - 1) - 1.0


def normalized_weights(rewards, es: EsConfig) -> np.ndarray:
    return rank_weights(rewards) if es.normalization == "rank" else zscore_weights(rewards)


def scheduled(value: float, iteration: int, gamma: float, step: int) -> float:
    """``value * gamma ** floor(iteration / step)``; constant when ``step == 0``."""
    if step <= 0 or gamma == 1.0:
        return value
    return value * gamma ** (iteration // step)


def step_sizes(es: EsConfig, iteration: int) -> tuple:
    """(sigma_t, alpha_t) for a 1-based iteration; decay counts completed iterations."""
    done = iteration - 1
    return (
        scheduled(es.sigma, done, es.gamma_sigma, es.step_sigma),
        scheduled(es.alpha, done, es.gamma_alpha, es.step_alpha),
    )


@dataclass(frozen=True)
class UpdateStats:
    update_norm: float
    update_max_abs: float


def _merged_coefficients(tickets, weights):
    """Collapse antithetic partners: one coefficient sum(w_j * sign_j) per seed."""
    coef = {}
    for ticket, w in zip(tickets, weights):
        coef[ticket.seed] = coef.get(ticket.seed, 0.0) + float(w) * ticket.sign
    keys = np.fromiter(coef.keys(), dtype=np.uint64, count=len(coef))
    return keys, np.fromiter(coef.values(), dtype=np.float64, count=len(coef))


def aggregate_update(tickets, weights, es: EsConfig, sigma_t: float, alpha_t: float, target, segs=None) -> UpdateStats:
    """theta += scale * (1/N) sum_j w_j eps_j, one noise chunk at a time.

    ``scale`` is alpha_t (or alpha_t / sigma_t with NES scaling) times the
    group alpha multiplier. A non-finite update raises ``NumericalError`` and
    leaves theta untouched.
    """
    flat = _flat(target)
    segs = segments(target, es) if segs is None else segs
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(tickets),):
        raise ConfigurationError("weights must align with tickets")
    n_pop = len(tickets)
    keys, coefs = _merged_coefficients(tickets, weights)
    base = alpha_t / sigma_t if es.nes_scaling else alpha_t
    scales = [base * seg.alpha_mult for seg in segs]

    # Cheap a-priori bound: if it is finite everywhere, so is every element.
    with np.errstate(all="ignore"):
        bound = float(np.abs(coefs).sum()) * EPS_BOUND / n_pop * max(abs(s) for s in scales)
        peak = float(np.abs(flat).max(initial=0.0)) + bound
    safe = math.isfinite(bound) and peak < float(np.finfo(np.float32).max)

    buf = np.empty(min(es.noise_chunk, flat.size), dtype=np.float32)
    scale_of = {id(seg): s for seg, s in zip(segs, scales)}

    def chunk_update(seg, c0, c1):
        u = buf[: c1 - c0]
        kernels.update_chunk(u, keys, coefs, c0, n_pop, scale_of[id(seg)], es.noise_chunk)
        return u

    if not safe:
        for seg, c0, c1 in _chunks(segs, es.noise_chunk):
            u = chunk_update(seg, c0, c1)
            with np.errstate(all="ignore"):
                ok = np.isfinite(u).all() and np.isfinite(flat[c0:c1] + u).all()
            if not ok:
                raise NumericalError(f"non-finite update in elements {c0}..{c1 - 1}; parameters left unchanged")

    sq, top = 0.0, 0.0
    for seg, c0, c1 in _chunks(segs, es.noise_chunk):
        u = chunk_update(seg, c0, c1)
        sq += float(np.dot(u.astype(np.float64), u.astype(np.float64)))
        top = max(top, float(np.abs(u).max(initial=0.0)))
        flat[c0:c1] += u
    return UpdateStats(math.sqrt(sq), top)


def search_direction(tickets, weights, es: EsConfig, size: int) -> np.ndarray:
    """Materialise (1/N) sum_j w_j eps_j for a vector of ``size`` elements.

    For analysis and tests; the optimiser itself never builds this vector.
    """
    out = np.zeros(size, dtype=np.float32)
    plain = replace(es, nes_scaling=False, group_multipliers=())
    aggregate_update(tickets, weights, plain, 1.0, 1.0, out)
    return out


@dataclass(frozen=True)
class StepResult:
    iteration: int
    rewards: np.ndarray
    sigma: float
    alpha: float
    update_norm: float
    update_max_abs: float
    restore_entries: int
    clamped: int
    center_reward: float | None = None

    @property
    def reward_mean(self) -> float:
        return float(self.rewards.mean())

    @property
    def loss(self) -> float:
        return -self.reward_mean


def _as_float(value) -> float:
    return float(getattr(value, "value", value))


def _evaluate_member(target, ticket, sigma_t, es, segs, fitness_fn, reference=None):
    restore = perturb_in_place(target, ticket, sigma_t, es, segs)
    try:
        try:
            reward = _as_float(fitness_fn(target))
        except NumericalError as exc:
            log.warning("member with seed %#x failed to evaluate: %s", ticket.seed, exc)
            reward = math.nan
    finally:
        unperturb_in_place(target, ticket, sigma_t, es, restore, segs)
    if reference is not None and not np.array_equal(_flat(target).view(np.uint32), reference.view(np.uint32)):
        raise AssertionError(f"perturb/unperturb round trip changed parameters (seed {ticket.seed:#x})")
    return reward, restore.size


def es_step(target, es: EsConfig, master_seed: int, iteration: int, fitness_fn, *,
            workers: int | None = None, eval_center: bool = False, debug: bool = False) -> StepResult:
    """One iteration: evaluate every ticket, normalise, aggregate, update.

    ``fitness_fn(target)`` returns a float or FitnessValue for the current
    parameters of ``target`` and must use the same data for every member.
    ``iteration`` is 1-based. With ``workers > 1`` each worker evaluates on
    its own copy of theta; results are bit-identical to ``workers == 1``.
    """
    workers = es.workers if workers is None else workers
    if workers < 1:
        raise ConfigurationError("workers must be >= 1")
    flat = _flat(target)
    sigma_t, alpha_t = step_sizes(es, iteration)
    tickets = make_tickets(master_seed, iteration, es)
    segs = segments(target, es)
    reference = flat.copy() if debug else None

    center = _as_float(fitness_fn(target)) if eval_center else None
    rewards = np.empty(len(tickets), dtype=np.float64)
    restore_sizes = np.zeros(len(tickets), dtype=np.int64)

    if workers == 1:
        for j, ticket in enumerate(tickets):
            rewards[j], restore_sizes[j] = _evaluate_member(
                target, ticket, sigma_t, es, segs, fitness_fn, reference)
    else:
        copies = queue.SimpleQueue()
        for _ in range(min(workers, len(tickets))):
            copies.put(target.copy())

        def work(j):
            local = copies.get()
            try:
                rewards[j], restore_sizes[j] = _evaluate_member(
                    local, tickets[j], sigma_t, es, segs, fitness_fn, reference)
            finally:
                copies.put(local)

        with threadpool_limits(limits=1), ThreadPoolExecutor(max_workers=workers) as pool:
            for future in [pool.submit(work, j) for j in range(len(tickets))]:
                future.result()

    bad = ~np.isfinite(rewards)
    clamped = int(bad.sum())
    if clamped == len(tickets):
        raise NumericalError(f"iteration {iteration}: every population member produced a non-finite reward")
    if clamped:
        floor = rewards[~bad].min()
        log.warning("iteration %d: %d non-finite rewards clamped to %g", iteration, clamped, floor)
        rewards[bad] = floor

    vector = RewardVector(rewards, tuple(tickets))
    weights = normalized_weights(vector, es)
    stats = aggregate_update(tickets, weights, es, sigma_t, alpha_t, target, segs)
    return StepResult(
        iteration=iteration,
        rewards=vector.rewards,
        sigma=sigma_t,
        alpha=alpha_t,
        update_norm=stats.update_norm,
        update_max_abs=stats.update_max_abs,
        restore_entries=int(restore_sizes.max()),
        clamped=clamped,
        center_reward=center,
    )
