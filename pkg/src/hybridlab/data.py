"""Synthetic tasks: copy, associative recall and a small character-level corpus.

Every task yields ``(inputs, targets)`` integer arrays of shape (N, seq_len).
Targets hold -1 wherever a position is not scored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .seeding import substream

PAD, BOS, SEP = 0, 1, 2
N_SPECIAL = 3
IGNORE = -1
TASK_KINDS = ("copy", "associative_recall", "char_lm")

# Opening of Lewis Carroll's "Alice's Adventures in Wonderland" (1865, public domain).
CORPUS = (
    "alice was beginning to get very tired of sitting by her sister on the bank, and of "
    "having nothing to do: once or twice she had peeped into the book her sister was "
    "reading, but it had no pictures or conversations in it, 'and what is the use of a "
    "book,' thought alice 'without pictures or conversations?' so she was considering in "
    "her own mind (as well as she could, for the hot day made her feel very sleepy and "
    "stupid), whether the pleasure of making a daisy-chain would be worth the trouble of "
    "getting up and picking the daisies, when suddenly a white rabbit with pink eyes ran "
    "close by her. there was nothing so very remarkable in that; nor did alice think it so "
    "very much out of the way to hear the rabbit say to itself, 'oh dear! oh dear! i shall "
    "be late!' (when she thought it over afterwards, it occurred to her that she ought to "
    "have wondered at this, but at the time it all seemed quite natural); but when the "
    "rabbit actually took a watch out of its waistcoat-pocket, and looked at it, and then "
    "hurried on, alice started to her feet, for it flashed across her mind that she had "
    "never before seen a rabbit with either a waistcoat-pocket, or a watch to take out of "
    "it, and burning with curiosity, she ran across the field after it, and fortunately "
    "was just in time to see it pop down a large rabbit-hole under the hedge. in another "
    "moment down went alice after it, never once considering how in the world she was to "
    "get out again. the rabbit-hole went straight on like a tunnel for some way, and then "
    "dipped suddenly down, so suddenly that alice had not a moment to think about stopping "
    "herself before she found herself falling down a very deep well."
)
CHARS = sorted(set(CORPUS))


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 16
    seq_len: int = 32
    n_train: int = 2048
    n_eval: int = 256
    seed: int = 0
    prefix_count: int = 0
    prefix_width: int = 0

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.seq_len < 3 or self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("seq_len must be >= 3 and dataset sizes positive")
        if (self.prefix_count > 0) != (self.prefix_width > 0):
            raise ConfigError("prefix_count and prefix_width must both be zero or both positive")
        if self.kind == "copy" and self.vocab_size < N_SPECIAL + 2:
            raise ConfigError(f"copy needs vocab_size >= {N_SPECIAL + 2}")
        if self.kind == "associative_recall" and self.vocab_size < N_SPECIAL + 2:
            raise ConfigError(f"associative_recall needs vocab_size >= {N_SPECIAL + 2}")
        if self.kind == "associative_recall" and self.seq_len < 5:
            raise ConfigError("associative_recall needs seq_len >= 5")
        if self.kind == "char_lm" and self.vocab_size < len(CHARS):
            raise ConfigError(f"char_lm needs vocab_size >= {len(CHARS)}")


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    prefix: np.ndarray | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def batch(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], None if self.prefix is None else self.prefix[idx])


@dataclass
class TaskData:
    spec: TaskSpec
    train: Dataset
    eval: Dataset


def _copy(rng: np.random.Generator, n: int, spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    k = (spec.seq_len - 1) // 2
    spans = rng.integers(N_SPECIAL, spec.vocab_size, size=(n, k))
    full = np.full((n, spec.seq_len + 1), PAD, dtype=np.int64)
    full[:, 0] = BOS
    full[:, 1 : k + 1] = spans
    full[:, k + 1] = SEP
    full[:, k + 2 : 2 * k + 2] = spans
    inputs = full[:, :-1].copy()
    targets = np.full_like(inputs, IGNORE)
    # position k+1 holds SEP; from there each step predicts the next span symbol
    targets[:, k + 1 : 2 * k + 1] = spans
    return inputs, targets


def _recall(rng: np.random.Generator, n: int, spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    symbols = spec.vocab_size - N_SPECIAL
    n_keys = max(1, symbols // 2)
    n_vals = symbols - n_keys
    if n_vals < 1:
        raise ConfigError("vocab too small to hold keys and values")
    pairs = min((spec.seq_len - 3) // 2, n_keys)
    inputs = np.full((n, spec.seq_len), PAD, dtype=np.int64)
    targets = np.full_like(inputs, IGNORE)
    for r in range(n):
        keys = rng.choice(n_keys, size=pairs, replace=False) + N_SPECIAL
        vals = rng.integers(0, n_vals, size=pairs) + N_SPECIAL + n_keys
        q = rng.integers(pairs)
        inputs[r, 0] = BOS
        inputs[r, 1 : 2 * pairs + 1 : 2] = keys
        inputs[r, 2 : 2 * pairs + 2 : 2] = vals
        inputs[r, 2 * pairs + 1] = SEP
        inputs[r, 2 * pairs + 2] = keys[q]
        targets[r, 2 * pairs + 2] = vals[q]
    return inputs, targets


def encode_text(text: str) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(CHARS)}
    return np.array([lookup[c] for c in text], dtype=np.int64)


def _char_windows(rng: np.random.Generator, n: int, tokens: np.ndarray, seq_len: int):
    if tokens.size < seq_len + 1:
        raise ConfigError("corpus split shorter than one window")
    starts = rng.integers(0, tokens.size - seq_len, size=n)
    win = np.stack([tokens[s : s + seq_len + 1] for s in starts])
    return win[:, :-1].copy(), win[:, 1:].copy()


def gen_task(spec: TaskSpec) -> TaskData:
    """Deterministic train/eval datasets for ``spec``."""
    spec.validate()
    tr, ev = substream(spec.seed, "task.train"), substream(spec.seed, "task.eval")
    if spec.kind == "copy":
        train, evals = _copy(tr, spec.n_train, spec), _copy(ev, spec.n_eval, spec)
    elif spec.kind == "associative_recall":
        train, evals = _recall(tr, spec.n_train, spec), _recall(ev, spec.n_eval, spec)
    else:
        tokens = encode_text(CORPUS)
        cut = int(0.9 * tokens.size)
        train = _char_windows(tr, spec.n_train, tokens[:cut], spec.seq_len)
        evals = _char_windows(ev, spec.n_eval, tokens[cut:], spec.seq_len)
    prefixes = [None, None]
    if spec.prefix_count:
        pr = substream(spec.seed, "task.prefix")
        prefixes = [
            pr.normal(size=(m, spec.prefix_count, spec.prefix_width)).astype(np.float32)
            for m in (spec.n_train, spec.n_eval)
        ]
    return TaskData(spec, Dataset(*train, prefixes[0]), Dataset(*evals, prefixes[1]))


def sample_batch(ds: Dataset, batch_size: int, rng: np.random.Generator) -> Dataset:
    return ds.batch(rng.integers(0, len(ds), size=batch_size))


def iter_batches(ds: Dataset, batch_size: int):
    for s in range(0, len(ds), batch_size):
        yield ds.batch(np.arange(s, min(s + batch_size, len(ds))))
