"""Synthetic multi-task mixture.

Four families with deliberately different target shapes:

choice   majority letter of a 7-letter string over 4 letters, 1-token answer
copy     echo a letter span
arith    a + b for a, b in [0, 99], answered as three zero-padded digits
longgen  a 3-letter motif repeated out to a requested length of 8..12 tokens

Vocabulary (64 symbols)::

    0 PAD  1 SEP  2..5 task markers  6 PLUS  7..16 digits 0-9
    17..31 unused  32..63 letters (32 of them)
"""
from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .numlin import make_rng

PAD = 0
SEP = 1
TASKS = ("choice", "copy", "arith", "longgen")
TASK_TOKEN = {name: 2 + i for i, name in enumerate(TASKS)}
PLUS = 6
DIGIT0 = 7
LETTER0 = 32
N_LETTERS = 32
VOCAB = 64

CHOICE_LEN = 7
CHOICE_ALPHABET = 4
COPY_MIN, COPY_MAX = 3, 8
ARITH_MAX = 99
LONG_MIN, LONG_MAX = 8, 12
LONG_MOTIF = 3


@dataclass(frozen=True)
class Sample:
    input_ids: tuple[int, ...]
    target_ids: tuple[int, ...]
    task_tag: str

    @property
    def tokens(self) -> list[int]:
        return list(self.input_ids) + list(self.target_ids)

    @property
    def loss_mask(self) -> list[int]:
        return [0] * len(self.input_ids) + [1] * len(self.target_ids)

    def __len__(self):
        return len(self.input_ids) + len(self.target_ids)


@dataclass
class MixtureSpec:
    counts: dict = field(default_factory=lambda: {t: 250 for t in TASKS})
    seed: int = 0
    max_seq: int = 64

    def __post_init__(self):
        unknown = set(self.counts) - set(TASKS)
        if unknown:
            raise ValueError(f"unknown task(s): {sorted(unknown)}")
        if any(c < 0 for c in self.counts.values()):
            raise ValueError("task counts must be >= 0")


def digits(n: int, width: int = 3) -> list[int]:
    return [DIGIT0 + int(c) for c in str(n).zfill(width)]


def undigits(tokens) -> int:
    return int("".join(str(t - DIGIT0) for t in tokens))


def letter(i: int) -> int:
    return LETTER0 + i % N_LETTERS


# -- per-task generators ----------------------------------------------------------
# samples within a task are distinct, so each task has a finite capacity


@functools.lru_cache(maxsize=None)
def _choice_combos() -> tuple[tuple[int, ...], ...]:
    out = []
    for combo in itertools.product(range(CHOICE_ALPHABET), repeat=CHOICE_LEN):
        counts = np.bincount(combo, minlength=CHOICE_ALPHABET)
        if (counts == counts.max()).sum() == 1:
            out.append(combo)
    return tuple(out)


def _capacity(task: str) -> int:
    if task == "choice":
        return len(_choice_combos())
    if task == "copy":
        return sum(N_LETTERS ** k for k in range(COPY_MIN, COPY_MAX + 1))
    if task == "arith":
        return (ARITH_MAX + 1) ** 2
    if task == "longgen":
        return N_LETTERS ** LONG_MOTIF * (LONG_MAX - LONG_MIN + 1)
    raise ValueError(task)


def make_choice(combo) -> Sample:
    counts = np.bincount(combo, minlength=CHOICE_ALPHABET)
    answer = int(np.argmax(counts))
    inp = (TASK_TOKEN["choice"],) + tuple(letter(c) for c in combo) + (SEP,)
    return Sample(inp, (letter(answer),), "choice")


def make_copy(span) -> Sample:
    toks = tuple(letter(c) for c in span)
    return Sample((TASK_TOKEN["copy"],) + toks + (SEP,), toks, "copy")


def make_arith(a: int, b: int) -> Sample:
    inp = (TASK_TOKEN["arith"],) + tuple(digits(a, 2)) + (PLUS,) + tuple(digits(b, 2)) + (SEP,)
    return Sample(inp, tuple(digits(a + b, 3)), "arith")


def make_longgen(motif, length: int) -> Sample:
    motif = tuple(letter(c) for c in motif)
    inp = (TASK_TOKEN["longgen"],) + motif + (DIGIT0 + length - LONG_MIN, SEP)
    return Sample(inp, tuple(motif[i % len(motif)] for i in range(length)), "longgen")


def _draw_unique(rng, count: int, draw) -> list:
    seen, out = set(), []
    while len(out) < count:
        key = draw(rng)
        if key in seen:
            continue
        seen.add(key)
        out.append(key)
    return out


def _gen_task(task: str, count: int, rng: np.random.Generator) -> list[Sample]:
    cap = _capacity(task)
    if count > cap:
        raise ValueError(f"{count} {task} samples requested but only {cap} distinct exist")
    if count == 0:
        return []
    if task == "choice":
        combos = _choice_combos()
        idx = rng.permutation(len(combos))[:count]
        return [make_choice(combos[i]) for i in idx]
    if task == "arith":
        idx = rng.permutation(cap)[:count]
        return [make_arith(int(i) // (ARITH_MAX + 1), int(i) % (ARITH_MAX + 1)) for i in idx]
    if task == "longgen":
        n_len = LONG_MAX - LONG_MIN + 1
        out = []
        for i in rng.permutation(cap)[:count]:
            code, length = divmod(int(i), n_len)
            motif = [(code // N_LETTERS ** k) % N_LETTERS for k in range(LONG_MOTIF)]
            out.append(make_longgen(motif, LONG_MIN + length))
        return out

    def draw(g):
        k = int(g.integers(COPY_MIN, COPY_MAX + 1))
        return tuple(int(c) for c in g.integers(0, N_LETTERS, size=k))

    return [make_copy(span) for span in _draw_unique(rng, count, draw)]


def gen_mixture(spec: MixtureSpec) -> list[Sample]:
    """Generate every task's samples, then shuffle them together."""
    rng = make_rng(spec.seed)
    samples = []
    for task in TASKS:
        samples.extend(_gen_task(task, spec.counts.get(task, 0), rng))
    too_long = [s for s in samples if len(s) > spec.max_seq]
    if too_long:
        raise ValueError(f"sample of length {len(too_long[0])} exceeds max_seq {spec.max_seq}")
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


@dataclass
class Batch:
    tokens: np.ndarray  # (B, T) int64, right-padded with PAD
    loss_mask: np.ndarray  # (B, T) 1 where the token is a prediction target

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def n_targets(self) -> int:
        return int(self.loss_mask.sum())


def pad_batch(samples) -> Batch:
    t = max(len(s) for s in samples)
    tokens = np.full((len(samples), t), PAD, dtype=np.int64)
    mask = np.zeros((len(samples), t), dtype=np.int64)
    for i, s in enumerate(samples):
        tokens[i, :len(s)] = s.tokens
        mask[i, :len(s)] = s.loss_mask
    return Batch(tokens, mask)


def batchify(samples, batch_size: int) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not samples:
        raise ValueError("no samples to batch")
    return [pad_batch(samples[i:i + batch_size]) for i in range(0, len(samples), batch_size)]


# -- line-delimited export ----------------------------------------------------------


def format_sample(s: Sample) -> str:
    return f"{s.task_tag} {' '.join(map(str, s.input_ids))} | {' '.join(map(str, s.target_ids))}"


def parse_sample(line: str) -> Sample:
    try:
        head, tail = line.strip().split("|")
        parts = head.split()
        tag = parts[0]
        if tag not in TASKS:
            raise FormatError(f"unknown task tag {tag!r}")
        return Sample(tuple(int(x) for x in parts[1:]), tuple(int(x) for x in tail.split()), tag)
    except (ValueError, IndexError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bad sample line: {line!r}") from exc


def export_mixture(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(format_sample(s) + "\n")


def import_mixture(path) -> list[Sample]:
    with open(path, encoding="utf-8") as fh:
        return [parse_sample(line) for line in fh if line.strip()]
