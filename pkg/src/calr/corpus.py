"""Byte-level corpus ingestion and deterministic windowing."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from .exceptions import CorpusTooSmallError

MIN_CORPUS_BYTES = 64 * 1024
VALID_FRACTION = 0.1


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("calr") / "data" / "corpus.txt"))


def tokenize(text: bytes | str) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(text, dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> str:
    return bytes(np.asarray(ids, dtype=np.uint8).tolist()).decode("utf-8", errors="replace")


@dataclass
class Corpus:
    """Non-overlapping windows of ``seq_len + 1`` tokens.

    Windows are cut at stride ``seq_len + 1`` so no token is shared between
    two windows; the last 10% (by file position) form the validation split.
    """

    train: np.ndarray  # (n_train, seq_len + 1)
    valid: np.ndarray  # (n_valid, seq_len + 1)
    train_index: np.ndarray
    valid_index: np.ndarray
    seq_len: int
    seed: int

    def train_batches(self, batch_size: int, seed: int | None = None) -> Iterator[np.ndarray]:
        """Endless stream of shuffled training batches; reshuffled every epoch."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        n = len(self.train)
        if batch_size > n:
            raise ValueError(f"batch_size {batch_size} exceeds {n} training windows")
        while True:
            order = rng.permutation(n)
            for start in range(0, n - batch_size + 1, batch_size):
                yield self.train[order[start : start + batch_size]]

    def valid_batches(self, batch_size: int = 16, limit: int | None = None) -> list[np.ndarray]:
        windows = self.valid if limit is None else self.valid[:limit]
        return [windows[i : i + batch_size] for i in range(0, len(windows), batch_size)]

    def sample_windows(self, n: int, seed: int | None = None) -> np.ndarray:
        """``n`` distinct training windows drawn without replacement."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        n = min(n, len(self.train))
        return self.train[np.sort(rng.choice(len(self.train), size=n, replace=False))]


def window_indices(n_tokens: int, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    width = seq_len + 1
    n_windows = n_tokens // width
    n_valid = max(1, int(round(VALID_FRACTION * n_windows)))
    idx = np.arange(n_windows)
    return idx[: n_windows - n_valid], idx[n_windows - n_valid :]


def load_corpus(path=None, seq_len: int = 128, seed: int = 0) -> Corpus:
    path = bundled_corpus_path() if path is None else Path(path)
    data = path.read_bytes()
    if len(data) < MIN_CORPUS_BYTES:
        raise CorpusTooSmallError(
            f"corpus {path} has {len(data)} bytes; at least {MIN_CORPUS_BYTES} required"
        )
    return corpus_from_tokens(tokenize(data), seq_len, seed)


def corpus_from_tokens(tokens: np.ndarray, seq_len: int, seed: int = 0) -> Corpus:
    width = seq_len + 1
    train_idx, valid_idx = window_indices(len(tokens), seq_len)
    n_windows = len(train_idx) + len(valid_idx)
    if len(train_idx) < 1:
        raise CorpusTooSmallError(f"only {n_windows} windows of {width} tokens available")
    windows = tokens[: n_windows * width].reshape(n_windows, width)
    return Corpus(
        train=windows[train_idx],
        valid=windows[valid_idx],
        train_index=train_idx,
        valid_index=valid_idx,
        seq_len=seq_len,
        seed=seed,
    )
