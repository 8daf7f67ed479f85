"""Corpus ingestion, tokenization, padding and per-iteration subset sampling."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError
from .model import TokenBatch
from .rng import derive_key, uniform53

log = logging.getLogger(__name__)

PAD_ID = 0
# Characters outside ASCII collapse onto SUB under the char tokenizer.
CHAR_UNKNOWN = 26


class ByteTokenizer:
    name = "byte"
    vocab = 256

    def encode(self, text: str) -> np.ndarray:
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


class CharTokenizer:
    """Lowercased ASCII code points; anything else maps to ``CHAR_UNKNOWN``."""

    name = "char"
    vocab = 128

    def encode(self, text: str) -> np.ndarray:
        codes = np.frombuffer(text.lower().encode("utf-32-le"), dtype=np.uint32).astype(np.int64)
        codes[codes >= self.vocab] = CHAR_UNKNOWN
        return codes


TOKENIZERS = {"byte": ByteTokenizer, "char": CharTokenizer}


def get_tokenizer(kind: str):
    try:
        return TOKENIZERS[kind]()
    except KeyError:
        raise ConfigurationError(f"unknown tokenizer {kind!r}; expected one of {sorted(TOKENIZERS)}") from None


@dataclass(frozen=True)
class Corpus:
    sequences: tuple
    vocab: int
    line_cap: int

    def __len__(self) -> int:
        return len(self.sequences)


def ingest(text, tokenizer, line_cap: int) -> Corpus:
    """One sequence per nonempty line, keeping at most ``line_cap`` of them.

    ``text`` is a string or an iterable of lines (an open file works).
    """
    if line_cap < 1:
        raise ConfigurationError("line_cap must be >= 1")
    if isinstance(tokenizer, str):
        tokenizer = get_tokenizer(tokenizer)
    lines = io.StringIO(text) if isinstance(text, str) else text
    sequences = []
    for line in lines:
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        sequences.append(tokenizer.encode(line))
        if len(sequences) == line_cap:
            break
    if not sequences:
        raise ConfigurationError("corpus is empty after dropping blank lines")
    return Corpus(tuple(sequences), tokenizer.vocab, line_cap)


def load_corpus(path, tokenizer, line_cap: int) -> Corpus:
    try:
        with open(path, encoding="utf-8", errors="replace") as fh:
            return ingest(fh, tokenizer, line_cap)
    except OSError as exc:
        raise ConfigurationError(f"cannot read corpus {path}: {exc}") from exc


def pack_batch(corpus: Corpus, indices, max_len: int) -> TokenBatch:
    """Truncate or right-pad the selected sequences to ``max_len``.

    Sequences shorter than two tokens have nothing to score and are skipped.
    """
    if max_len < 2:
        raise ConfigurationError("max_len must be >= 2")
    keep = []
    for i in indices:
        i = int(i)
        if not 0 <= i < len(corpus):
            raise ConfigurationError(f"index {i} outside corpus of {len(corpus)} sequences")
        if len(corpus.sequences[i]) < 2:
            log.warning("skipping sequence %d: fewer than 2 tokens", i)
            continue
        keep.append(corpus.sequences[i])
    if not keep:
        raise DataError("no sequence in the batch has at least 2 tokens")
    ids = np.full((len(keep), max_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(keep), max_len), dtype=np.int8)
    for row, seq in enumerate(keep):
        n = min(len(seq), max_len)
        ids[row, :n] = seq[:n]
        mask[row, :n] = 1
    return TokenBatch(ids, mask)


@dataclass(frozen=True)
class SubsetPlan:
    iteration: int
    indices: tuple


def sample_subset(master_seed: int, iteration: int, corpus_size: int, m: int) -> SubsetPlan:
    """``m`` distinct indices drawn uniformly from ``range(corpus_size)``.

    Partial Fisher-Yates over a counter-based uniform stream keyed by
    (master_seed, iteration), so every worker derives the same plan.
    """
    if not 1 <= m <= corpus_size:
        raise ConfigurationError(f"subset size {m} must lie in [1, {corpus_size}]")
    u = uniform53(derive_key("subset", master_seed, iteration), np.arange(m, dtype=np.uint64))
    pool = np.arange(corpus_size, dtype=np.int64)
    for i in range(m):
        j = i + min(int(u[i] * (corpus_size - i)), corpus_size - i - 1)
        pool[i], pool[j] = pool[j], pool[i]
    return SubsetPlan(int(iteration), tuple(int(k) for k in pool[:m]))
