"""Masked next-token log-likelihood as the ES objective.

Position t is scored against the token at t + 1 and weighted by the mask of
that label position, so padding is never scored. A sequence's reward is its
mean over scored positions; a batch's is the plain mean over sequences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import pack_batch
from .errors import ConfigurationError, DataError, NumericalError
from .model import TokenBatch, forward_logits


@dataclass(frozen=True)
class FitnessValue:
    value: float
    tokens_scored: int

    @property
    def loss(self) -> float:
        return -self.value


def _label_side(ids, mask):
    ids = np.asarray(ids)
    mask = np.asarray(mask)
    if ids.shape != mask.shape or ids.shape[-1] < 2:
        raise ConfigurationError(f"ids {ids.shape} and mask {mask.shape} need equal shapes with T >= 2")
    return ids[..., 1:], mask[..., 1:].astype(np.float64)


def sequence_reward(logits, ids, mask) -> FitnessValue:
    """Reward of one sequence from its (T, vocab) logits."""
    logits = np.asarray(logits, dtype=np.float32)
    labels, weights = _label_side(ids, mask)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0] + 1:
        raise ConfigurationError(f"logits {logits.shape} do not match {labels.shape[0] + 1} positions")
    scored = int(weights.sum())
    if scored == 0:
        raise DataError("sequence has no scored positions")
    logp = kernels.label_logprobs(logits[:-1], labels)
    return FitnessValue(float(np.dot(weights, logp) / scored), scored)


def _batch_rewards(params, config, batch: TokenBatch, micro_batch: int):
    nb = batch.shape[0]
    labels, weights = _label_side(batch.ids, batch.mask)
    counts = weights.sum(axis=1)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DataError(f"batch row {int(empty[0])} has no scored positions")
    rewards = np.empty(nb, dtype=np.float64)
    for r0 in range(0, nb, micro_batch):
        r1 = min(r0 + micro_batch, nb)
        # Trailing all-padding columns cannot affect earlier positions.
        width = int(np.flatnonzero(batch.mask[r0:r1].any(axis=0))[-1]) + 1
        try:
            logits = forward_logits(params, config, batch.ids[r0:r1, :width])
        except NumericalError as exc:
            raise NumericalError(f"rows {r0}..{r1 - 1}: {exc}") from exc
        flat = logits[:, :-1].reshape(-1, config.vocab)
        picked = np.ascontiguousarray(labels[r0:r1, :width - 1]).reshape(-1)
        logp = kernels.label_logprobs(flat, picked).reshape(r1 - r0, width - 1)
        rewards[r0:r1] = np.einsum("ij,ij->i", logp, weights[r0:r1, :width - 1]) / counts[r0:r1]
    return rewards, int(counts.sum())


def batch_fitness(params, config, batch: TokenBatch, micro_batch: int = 16) -> FitnessValue:
    if batch.shape[0] == 0:
        raise DataError("empty batch")
    if micro_batch < 1:
        raise ConfigurationError("micro_batch must be >= 1")
    rewards, scored = _batch_rewards(params, config, batch, micro_batch)
    return FitnessValue(float(rewards.mean()), scored)


def subset_fitness(params, config, corpus, plan, max_len: int, micro_batch: int = 16) -> FitnessValue:
    return batch_fitness(params, config, pack_batch(corpus, plan.indices, max_len), micro_batch)


def full_fitness(params, config, corpus, max_len: int, micro_batch: int = 16) -> FitnessValue:
    return batch_fitness(params, config, pack_batch(corpus, range(len(corpus)), max_len), micro_batch)
