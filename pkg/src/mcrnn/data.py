"""Corpus handling and synthetic long-range tasks.

Vocabulary ids are frequency-ranked with two reserved slots (pad=0, unk=1).
batch_stream cuts one long id sequence into B contiguous lanes so hidden
state can carry across windows within a lane. gen_copy / gen_adding build
the two classic probes for long-range credit assignment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DataError
from .model import AddingBatch, Batch
from .numerics import make_rng

PAD = 0
UNK = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


def tokenize(text: str, level: str) -> list[str]:
    if level == "char":
        return list(text)
    if level == "word":
        return text.split()
    raise ValueError(f"level must be 'char' or 'word', got {level!r}")


class Vocab:
    """Token/id bijection. Ids 0 and 1 are reserved; real tokens start at 2,
    assigned by descending frequency with lexicographic tie-breaks."""

    def __init__(self, tokens: list[str]):
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            tokens = [PAD_TOKEN, UNK_TOKEN] + tokens
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, toks: list[str]) -> np.ndarray:
        idx = self.index
        return np.array([idx.get(t, UNK) for t in toks], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path: str) -> None:
        # one token per line in id order; escaped so "\n" etc. stay one line
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t.encode("unicode_escape").decode("ascii") + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            lines = f.read().split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        toks = [ln.encode("ascii").decode("unicode_escape") for ln in lines]
        if toks[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise DataError(f"{path} is not a vocabulary file")
        return cls(toks)


def build_vocab(text: str, level: str = "char", min_count: int = 1) -> Vocab:
    toks = tokenize(text, level)
    if not toks:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: dict[str, int] = {}
    for t in toks:
        counts[t] = counts.get(t, 0) + 1
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab([PAD_TOKEN, UNK_TOKEN] + kept)


def batch_stream(ids: np.ndarray, batch_size: int, window: int) -> Iterator[Batch]:
    """Split ids into batch_size contiguous lanes and yield (inputs, targets)
    windows of length `window`; targets are inputs shifted by one in-lane."""
    if batch_size < 1 or window < 1:
        raise ValueError("batch size and window must be positive")
    n = len(ids)
    if n < batch_size * (window + 1):
        raise DataError(
            f"corpus of {n} tokens is too small for batch {batch_size} x window {window}"
        )
    lane_len = n // batch_size
    lanes = np.asarray(ids[: lane_len * batch_size], dtype=np.int64).reshape(batch_size, lane_len)
    for start in range(0, lane_len - window, window):
        yield Batch(
            inputs=lanes[:, start : start + window].copy(),
            targets=lanes[:, start + 1 : start + 1 + window].copy(),
            mask=None,
        )


def window_count(n_tokens: int, batch_size: int, window: int) -> int:
    lane_len = n_tokens // batch_size
    return max(0, (lane_len - 1) // window)


# -- synthetic probes --------------------------------------------------------

COPY_BLANK = 0
COPY_MARKER = 1
COPY_FIRST_SYMBOL = 2


@dataclass(frozen=True)
class SyntheticSpec:
    task: str  # "copy" | "adding"
    length: int
    alphabet: int = 8
    blank: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("copy", "adding"):
            raise ValueError(f"task must be 'copy' or 'adding', got {self.task!r}")
        if self.length < 1:
            raise ValueError("length must be positive")
        if self.task == "copy":
            if self.alphabet < 1:
                raise ValueError("alphabet must be positive")
            if self.blank < 0:
                raise ValueError("blank span must be >= 0")
            p = self.payload
            if p < 1:
                raise ValueError("length leaves no room for a payload")
            if self.blank and p >= self.blank:
                raise ValueError(
                    f"payload {p} must be shorter than blank span {self.blank}"
                )

    @property
    def payload(self) -> int:
        return (self.length - self.blank) // 2

    @property
    def vocab_size(self) -> int:
        return self.alphabet + 2  # blank + marker + symbols


def _copy_instance(spec: SyntheticSpec, rng: np.random.Generator):
    p, s = spec.payload, spec.blank
    t = 2 * p + s
    payload = rng.integers(COPY_FIRST_SYMBOL, COPY_FIRST_SYMBOL + spec.alphabet, size=p)
    inputs = np.full(t, COPY_BLANK, dtype=np.int64)
    inputs[:p] = payload
    inputs[p + s] = COPY_MARKER
    targets = np.full(t, COPY_BLANK, dtype=np.int64)
    targets[p + s :] = payload
    mask = np.zeros(t)
    mask[p + s :] = 1.0  # loss only where the payload must be recalled
    return inputs, targets, mask


def gen_copy(spec: SyntheticSpec):
    """One copy-task instance: payload, blank span, recall marker. Solving it
    needs a dependence at least `blank` steps long."""
    if spec.task != "copy":
        raise ValueError(f"spec is for task {spec.task!r}")
    return _copy_instance(spec, make_rng(spec.seed))


def copy_batch(spec: SyntheticSpec, batch_size: int, seed: int | None = None) -> Batch:
    rng = make_rng(spec.seed if seed is None else seed)
    rows = [_copy_instance(spec, rng) for _ in range(batch_size)]
    return Batch(
        inputs=np.stack([r[0] for r in rows]),
        targets=np.stack([r[1] for r in rows]),
        mask=np.stack([r[2] for r in rows]),
    )


def _adding_instance(spec: SyntheticSpec, rng: np.random.Generator):
    t = spec.length
    values = rng.random(t)
    marks = np.zeros(t)
    i = int(rng.integers(0, t // 2))
    j = int(rng.integers(t // 2, t))
    marks[i] = 1.0
    marks[j] = 1.0
    features = np.stack([values, marks], axis=1)  # (T, 2)
    return features, float(values[i] + values[j])


def gen_adding(spec: SyntheticSpec):
    """One adding-task instance: sum the two marked uniform(0,1) values."""
    if spec.task != "adding":
        raise ValueError(f"spec is for task {spec.task!r}")
    return _adding_instance(spec, make_rng(spec.seed))


def adding_batch(spec: SyntheticSpec, batch_size: int, seed: int | None = None) -> AddingBatch:
    rng = make_rng(spec.seed if seed is None else seed)
    rows = [_adding_instance(spec, rng) for _ in range(batch_size)]
    return AddingBatch(
        features=np.stack([r[0] for r in rows]),
        targets=np.array([r[1] for r in rows]),
    )


# -- deterministic text corpus ----------------------------------------------

_DETS = ["the", "the", "the", "a", "a", "this", "every", "no"]
_NOUNS = [
    "river", "garden", "letter", "window", "harbor", "mountain", "teacher",
    "stone", "lantern", "forest", "morning", "village", "painter", "bridge",
    "winter", "market", "shadow", "engine", "island", "doctor", "evening",
    "brother", "sister", "stranger", "captain", "valley", "orchard", "candle",
    "story", "road", "house", "bird", "horse", "child", "king", "sea",
]
_ADJS = [
    "quiet", "old", "small", "bright", "long", "cold", "green", "narrow",
    "heavy", "distant", "golden", "broken", "gentle", "dark", "warm", "pale",
]
_VERBS = [
    "crossed", "watched", "remembered", "followed", "carried", "opened",
    "reached", "answered", "found", "called", "held", "left", "built",
    "painted", "returned", "forgot", "kept", "saw", "knew", "heard",
]
_ADVS = ["slowly", "again", "quietly", "at last", "soon", "once more", "alone"]
_PREPS = ["near", "beyond", "under", "beside", "across", "toward"]


def synth_corpus(n_bytes: int, seed: int = 0) -> str:
    """Deterministic English-like prose of exactly n_bytes characters.

    Two kinds of structure sit above character bigrams: paragraphs keep a
    recurring topic noun, and most sentences echo their subject in a second
    clause a couple of dozen characters later, so a model that can carry a
    word across that span has real perplexity headroom over one that cannot.
    """
    if n_bytes < 1:
        raise ValueError("n_bytes must be positive")
    rng = make_rng(seed)

    def pick(xs):
        return xs[int(rng.integers(0, len(xs)))]

    out: list[str] = []
    total = 0
    while total < n_bytes:
        topic = pick(_NOUNS)
        for _ in range(int(rng.integers(3, 8))):
            words = [pick(_DETS)]
            if rng.random() < 0.4:
                words.append(pick(_ADJS))
            subject = topic if rng.random() < 0.45 else pick(_NOUNS)
            words.append(subject)
            words.append(pick(_VERBS))
            if rng.random() < 0.3:
                words.append(pick(_ADVS))
            if rng.random() < 0.55:
                words.extend([pick(_PREPS), pick(_DETS)])
                if rng.random() < 0.25:
                    words.append(pick(_ADJS))
                words.append(topic if rng.random() < 0.3 else pick(_NOUNS))
            if rng.random() < 0.6:
                words.extend([", and", "the", subject, pick(_VERBS)])
            sent = " ".join(words).replace(" ,", ",") + ". "
            out.append(sent)
            total += len(sent)
        out.append("\n")
        total += 1
    return "".join(out)[:n_bytes]


def load_text(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise DataError(f"corpus {path} is not valid UTF-8: {e}") from e


def split_corpus(text: str, train_frac: float = 0.9, valid_frac: float = 0.05):
    """Contiguous train/valid/test split of one text."""
    n = len(text)
    a = int(n * train_frac)
    b = int(n * (train_frac + valid_frac))
    if a == 0 or b <= a or b >= n:
        raise DataError(f"corpus of {n} chars is too small to split")
    return text[:a], text[a:b], text[b:]
