"""Byte corpora, train/valid splitting, and seeded window sampling."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from decaylab.errors import ValidationError
from decaylab.rng import Rng

VOCAB = 256
SPLITS = ("train", "valid")


@dataclass(frozen=True, eq=False)
class Corpus:
    name: str
    data: np.ndarray  # uint8
    split_fraction: float

    @property
    def boundary(self) -> int:
        return math.floor(self.split_fraction * len(self.data))

    def split(self, which: str) -> np.ndarray:
        if which == "train":
            return self.data[: self.boundary]
        if which == "valid":
            return self.data[self.boundary :]
        raise ValidationError(f"unknown split {which!r}")

    def split_range(self, which: str) -> tuple[int, int]:
        if which == "train":
            return 0, self.boundary
        if which == "valid":
            return self.boundary, len(self.data)
        raise ValidationError(f"unknown split {which!r}")


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (batch, window) int64
    targets: np.ndarray  # (batch,) int64

    def __len__(self) -> int:
        return len(self.targets)


def corpus_from_bytes(name: str, raw: bytes, split_fraction: float) -> Corpus:
    if not raw:
        raise ValidationError(f"corpus {name!r} is empty")
    if not 0.0 < split_fraction < 1.0:
        raise ValidationError(f"split_fraction {split_fraction} not in (0,1)")
    corpus = Corpus(name, np.frombuffer(raw, dtype=np.uint8), split_fraction)
    for which in SPLITS:
        lo, hi = corpus.split_range(which)
        if hi <= lo:
            raise ValidationError(f"corpus {name!r}: {which} split is empty")
    return corpus


def load_corpus(path: str | os.PathLike, split_fraction: float, name: str | None = None) -> Corpus:
    """Read a file's raw bytes; the first ``floor(split_fraction * len)`` are training data."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw:
        raise OSError(f"corpus file {os.fspath(path)!r} is empty")
    return corpus_from_bytes(name or os.path.basename(os.fspath(path)), raw, split_fraction)


def check_window(corpus: Corpus, context_window: int) -> None:
    for which in SPLITS:
        lo, hi = corpus.split_range(which)
        if hi - lo < context_window + 1:
            raise ValidationError(
                f"corpus {corpus.name!r}: {which} split has {hi - lo} bytes, "
                f"needs at least context_window + 1 = {context_window + 1}"
            )


def windows_at(corpus: Corpus, starts: np.ndarray, context_window: int) -> Batch:
    idx = starts[:, None] + np.arange(context_window + 1)
    chunk = corpus.data[idx].astype(np.int64)
    return Batch(chunk[:, :-1], chunk[:, -1])


def sample_batch(
    corpus: Corpus, split: str, context_window: int, batch_size: int, rng: Rng
) -> tuple[Batch, Rng]:
    """Draw ``batch_size`` windows uniformly from one split, advancing ``rng``.

    A window starting at ``p`` has inputs ``data[p:p+w]`` and target
    ``data[p+w]``; both lie inside the split.
    """
    lo, hi = corpus.split_range(split)
    n_positions = hi - lo - context_window
    if n_positions < 1:
        raise ValidationError(
            f"context_window {context_window} too large for {split} split of {hi - lo} bytes"
        )
    starts = lo + rng.integers(n_positions, batch_size)
    return windows_at(corpus, starts, context_window), rng


# Deterministic synthetic text. Two registers with disjoint vocabularies stand
# in for a pre-training corpus and a distribution-shifted fine-tuning corpus.

_PROSE = {
    "subj": ["the river", "a small village", "the old engineer", "every student", "the north wind",
             "our neighbour", "the library", "a quiet farmer", "the city council", "the young doctor",
             "this valley", "the museum", "a travelling merchant", "the school", "the fisherman"],
    "verb": ["carried", "described", "remembered", "built", "followed", "measured", "repaired",
             "painted", "studied", "collected", "visited", "protected", "discovered", "shared"],
    "obj": ["the stone bridge", "an early map", "the harvest", "a long letter", "the evening light",
            "seven wooden boats", "the market square", "a forgotten song", "the winter stores",
            "the eastern road", "a careful drawing", "the garden wall", "the first railway"],
    "tail": ["before the rain", "in the spring", "for many years", "with great care", "after the flood",
             "near the harbour", "at dawn", "during the festival", "without a word", "by the old mill"],
    "conn": ["Later,", "Meanwhile,", "In time,", "Afterwards,", "Even so,", "At first,"],
}

_DIALOG = {
    "ask": ["How do I", "Can you explain how to", "What is the best way to", "Please show me how to",
            "Why should I", "Is it possible to"],
    "task": ["sort a list of numbers", "convert a string to upper case", "read a file line by line",
             "compute the average of values", "reverse a linked list", "parse a date", "count words",
             "merge two dictionaries", "remove duplicate entries", "format a table", "open a socket"],
    "lang": ["in Python", "in C", "with a shell script", "using SQL", "in Rust", "in JavaScript"],
    "reply": ["Use a loop and keep a running total.", "Call the built-in function and check the result.",
              "Split the input first, then handle each part.", "Start with a small example and test it.",
              "Keep a set of seen items and skip repeats.", "Open the file in text mode and iterate."],
}


def _pick(rng: Rng, options: list[str]) -> str:
    return options[int(rng.integers(len(options), 1)[0])]


def _prose_sentence(rng: Rng) -> str:
    parts = [_pick(rng, _PROSE["subj"]), _pick(rng, _PROSE["verb"]), _pick(rng, _PROSE["obj"])]
    if rng.uniform(1)[0] < 0.6:
        parts.append(_pick(rng, _PROSE["tail"]))
    text = " ".join(parts)
    text = text[0].upper() + text[1:] + "."
    if rng.uniform(1)[0] < 0.25:
        text = _pick(rng, _PROSE["conn"]) + " " + text[0].lower() + text[1:]
    return text


def _dialog_turn(rng: Rng) -> str:
    q = f"{_pick(rng, _DIALOG['ask'])} {_pick(rng, _DIALOG['task'])} {_pick(rng, _DIALOG['lang'])}?"
    return f"User: {q}\nAssistant: {_pick(rng, _DIALOG['reply'])}\n\n"


def synthetic_text(n_bytes: int, seed: int, style: str = "prose") -> bytes:
    """At least ``n_bytes`` of seeded pseudo-text, truncated to exactly ``n_bytes``."""
    if style not in ("prose", "dialog"):
        raise ValidationError(f"unknown corpus style {style!r}")
    rng = Rng.from_seed(seed).derive("corpus", style)
    pieces: list[str] = []
    size = 0
    while size < n_bytes:
        if style == "prose":
            n = 3 + int(rng.integers(5, 1)[0])
            piece = " ".join(_prose_sentence(rng) for _ in range(n)) + "\n\n"
        else:
            piece = _dialog_turn(rng)
        pieces.append(piece)
        size += len(piece)
    return "".join(pieces).encode("ascii")[:n_bytes]
