"""Synthetic majority-count classification task and batching."""

from __future__ import annotations

import csv
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ModelConfig
from .tensor import Rng

TOKEN_A = 7
TOKEN_B = 9


@dataclass
class Dataset:
    sequences: np.ndarray  # (size, seq_len) int64
    labels: np.ndarray  # (size,) int64
    seed: int | None = None

    def __len__(self):
        return len(self.labels)

    def validate(self, cfg: ModelConfig) -> None:
        if self.sequences.ndim != 2 or self.sequences.shape[1] != cfg.seq_len:
            raise ValueError(f"sequences must be (N, {cfg.seq_len}), got {self.sequences.shape}")
        if self.sequences.min() < 0 or self.sequences.max() >= cfg.vocab_size:
            raise ValueError(f"token id outside [0, {cfg.vocab_size})")
        if self.labels.min() < 0 or self.labels.max() >= cfg.n_classes:
            raise ValueError(f"label outside [0, {cfg.n_classes})")


def gen_majority_task(size: int, cfg: ModelConfig, seed: int) -> Dataset:
    """Label is 1 iff token 7 occurs more often than token 9.

    Background tokens are uniform over the rest of the vocabulary; the two
    marker tokens are then written at random positions with random counts
    (ties re-drawn).
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    if cfg.vocab_size < 10:
        raise ValueError(f"majority task needs vocab_size >= 10, got {cfg.vocab_size}")
    s = cfg.seq_len
    if s < 2:
        raise ValueError("majority task needs seq_len >= 2")
    gen = Rng(seed).gen
    background = np.array([t for t in range(cfg.vocab_size) if t not in (TOKEN_A, TOKEN_B)])
    seqs = background[gen.integers(0, len(background), size=(size, s))]
    labels = np.empty(size, dtype=np.int64)
    max_count = s // 2
    for i in range(size):
        while True:
            ca, cb = gen.integers(0, max_count + 1, size=2)
            if ca != cb:
                break
        pos = gen.permutation(s)
        seqs[i, pos[:ca]] = TOKEN_A
        seqs[i, pos[ca : ca + cb]] = TOKEN_B
        labels[i] = int(ca > cb)
    return Dataset(seqs.astype(np.int64), labels, seed)


def batches(ds: Dataset, batch_size: int, seed: int, epochs: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(tokens, labels)`` batches, reshuffled every epoch.

    A short final batch is topped up with indices drawn with replacement, so
    every batch has exactly ``batch_size`` rows (this also covers datasets
    smaller than one batch).  ``epochs=None`` iterates forever.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    gen = Rng(seed).gen
    n = len(ds)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = gen.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if len(idx) < batch_size:
                idx = np.concatenate([idx, gen.integers(0, n, size=batch_size - len(idx))])
            yield ds.sequences[idx], ds.labels[idx]
        epoch += 1


def epoch_indices(n: int, batch_size: int, seed: int, epochs: int = 1) -> list[np.ndarray]:
    """Index arrays that :func:`batches` would use, for inspection."""
    ds = Dataset(np.arange(n).reshape(n, 1), np.zeros(n, dtype=np.int64))
    return [x[:, 0] for x, _ in batches(ds, batch_size, seed, epochs)]


def save_csv(ds: Dataset, path) -> None:
    """Write ``label,tok0,tok1,...`` rows with a header line."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"tok{i}" for i in range(ds.sequences.shape[1])])
        for label, seq in zip(ds.labels, ds.sequences):
            w.writerow([int(label), *map(int, seq)])


def load_csv(path) -> Dataset:
    rows = []
    with open(Path(path), newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0] == "label":
                continue
            rows.append([int(v) for v in rec])
    if not rows:
        raise ValueError(f"{path}: no rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: ragged rows")
    arr = np.array(rows, dtype=np.int64)
    return Dataset(arr[:, 1:], arr[:, 0])
