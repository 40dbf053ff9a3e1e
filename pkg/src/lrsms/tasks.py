"""Synthetic sequence-to-sequence tasks.

Stand-ins for a real corpus: deterministic, seeded token-sequence problems
(copy, reverse, running modular sum) sized for minutes-scale CPU training.
Token 0 is PAD, token 1 is BOS; payload tokens occupy [2, vocab). Sequences
have variable length in [seq_len // 2, seq_len], padded to seq_len.

Train and eval streams draw from disjoint seed spaces by construction
(the split id is folded into the seed sequence), so held-out batches can
never collide with training batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = ["PAD", "BOS", "TASK_KINDS", "Batch", "SyntheticTask"]

PAD = 0
BOS = 1

TASK_KINDS = ("copy", "reverse", "modular-sum")

_TRAIN_SPLIT = 0
_EVAL_SPLIT = 1


@dataclass
class Batch:
    src: np.ndarray        # (batch, seq) int64, PAD beyond length
    src_valid: np.ndarray  # (batch, seq) bool
    tgt_in: np.ndarray     # (batch, seq) int64, BOS-shifted targets
    tgt_out: np.ndarray    # (batch, seq) int64
    tgt_valid: np.ndarray  # (batch, seq) bool

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def seq_len(self) -> int:
        return self.src.shape[1]


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    seq_len: int
    vocab: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DomainError(f"unknown task kind {self.kind!r}")
        if self.vocab < 4:
            raise DomainError(f"vocab must be >= 4 (PAD, BOS, 2+ payload), got {self.vocab}")
        if self.seq_len < 2:
            raise DomainError(f"seq_len must be >= 2, got {self.seq_len}")

    def train_batch(self, step: int, batch_size: int) -> Batch:
        return self._batch(_TRAIN_SPLIT, step, batch_size)

    def eval_batches(self, count: int, batch_size: int) -> list[Batch]:
        return [self._batch(_EVAL_SPLIT, i, batch_size) for i in range(count)]

    def _batch(self, split: int, index: int, batch_size: int) -> Batch:
        if batch_size < 1:
            raise DomainError(f"batch_size must be >= 1, got {batch_size}")
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(split, index))
        )
        b, s = batch_size, self.seq_len
        lengths = rng.integers(max(2, s // 2), s + 1, size=b)
        valid = np.arange(s)[None, :] < lengths[:, None]
        src = rng.integers(2, self.vocab, size=(b, s), dtype=np.int64)
        src[~valid] = PAD
        tgt = self._targets(src, lengths, valid)
        tgt_in = np.full_like(tgt, PAD)
        tgt_in[:, 0] = BOS
        tgt_in[:, 1:] = np.where(valid[:, 1:], tgt[:, :-1], PAD)
        return Batch(src, valid, tgt_in, tgt, valid.copy())

    def _targets(self, src: np.ndarray, lengths: np.ndarray, valid: np.ndarray) -> np.ndarray:
        if self.kind == "copy":
            return src.copy()
        if self.kind == "reverse":
            tgt = np.full_like(src, PAD)
            for i, length in enumerate(lengths):
                tgt[i, :length] = src[i, :length][::-1]
            return tgt
        # running sum of payload values, modulo the payload alphabet size
        base = self.vocab - 2
        payload = np.where(valid, src - 2, 0)
        tgt = (np.cumsum(payload, axis=1) % base) + 2
        tgt[~valid] = PAD
        return tgt
