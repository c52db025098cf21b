"""Synthetic character-level corpora.

* ``pattern``: a small English-like pattern language (the public corpus).
* task families, each sequence tagged with a label:
  ``math`` (``add``, ``sub``, ``mul``: modular arithmetic word problems with a
  numeric answer) and ``option`` (``parity``, ``keyword``: classification with
  a word answer).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD, BOS, EOS = 0, 1, 2
CHARS = " abcdefghijklmnopqrstuvwxyz0123456789.,;:?!=+-*/()'|#<>%&@[]^"
VOCAB = ["<pad>", "<bos>", "<eos>"] + list(CHARS)
STOI = {c: i + 3 for i, c in enumerate(CHARS)}
assert len(VOCAB) == 64

MATH_LABELS = ("add", "sub", "mul")
OPTION_LABELS = ("parity", "keyword")
TASK_LABELS = MATH_LABELS + OPTION_LABELS

_NAMES = ("ann", "bob", "cal", "dee", "eve", "fay", "gus", "hal")
_SUBJ = ("the cat", "a dog", "my bird", "the red fox", "a small frog", "the old owl", "his horse", "her fish")
_VERB = ("sees", "likes", "chases", "finds", "helps", "follows", "hears", "calls")
_OBJ = ("the ball", "a tree", "the moon", "a green hat", "the river", "my friend", "a blue box", "the sun")
_ADV = ("today", "again", "at night", "in the park", "every day", "slowly", "with joy", "near home")
_WORDS = ("cat", "dog", "sun", "hat", "box", "cup", "owl", "fox", "pen", "map")


def encode(text: str) -> list[int]:
    try:
        return [STOI[c] for c in text]
    except KeyError as exc:
        raise ValueError(f"character {exc.args[0]!r} is outside the vocabulary") from None


def decode(ids: Sequence[int]) -> str:
    return "".join(VOCAB[i] if i >= 3 else "" for i in ids)


@dataclass
class Example:
    tokens: list[int]
    label: str | None = None
    answer_start: int | None = None  # index into ``tokens`` of the first answer token
    answer_len: int = 0

    @property
    def text(self) -> str:
        return decode(self.tokens)


@dataclass
class Corpus:
    examples: list[Example]
    split: str = "public"

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return Corpus(self.examples[idx], self.split)
        return self.examples[idx]

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus([self.examples[i] for i in indices], self.split)

    @property
    def labels(self) -> list[str | None]:
        return [e.label for e in self.examples]

    def max_len(self) -> int:
        return max(len(e.tokens) for e in self.examples)

    def validate(self, V: int, S: int, need_labels: bool = False) -> None:
        for i, e in enumerate(self.examples):
            if not e.tokens or max(e.tokens) >= V or min(e.tokens) < 0:
                raise ValueError(f"example {i} has token ids outside [0, {V})")
            if len(e.tokens) > S:
                raise ValueError(f"example {i} is longer than S={S}")
            if need_labels and e.label is None:
                raise ValueError(f"example {i} has no label")

    def save(self, path: str | Path) -> None:
        lines = []
        for e in self.examples:
            rec = {"tokens": e.tokens, "label": e.label, "answer_start": e.answer_start, "answer_len": e.answer_len}
            lines.append(json.dumps(rec, separators=(",", ":")))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path, split: str | None = None) -> "Corpus":
        path = Path(path)
        exs = []
        for line in path.read_text().splitlines():
            if line.strip():
                r = json.loads(line)
                exs.append(Example(r["tokens"], r.get("label"), r.get("answer_start"), r.get("answer_len", 0)))
        if not exs:
            raise ValueError(f"corpus {path} is empty")
        return cls(exs, split or path.stem)


# -- generators ----------------------------------------------------------------
def _pattern_sentence(rng: np.random.Generator) -> str:
    kind = rng.integers(0, 5)
    if kind <= 1:
        parts = [_SUBJ[rng.integers(len(_SUBJ))], _VERB[rng.integers(len(_VERB))], _OBJ[rng.integers(len(_OBJ))]]
        if kind == 1:
            parts.append(_ADV[rng.integers(len(_ADV))])
        return " ".join(parts) + "."
    if kind == 2:
        word = "".join(CHARS[1 + rng.integers(0, 26)] for _ in range(rng.integers(2, 5)))
        return " ".join([word] * int(rng.integers(2, 5))) + "."
    if kind == 3:
        start = int(rng.integers(0, 20))
        step = int(rng.integers(1, 4))
        return " ".join(str(start + step * i) for i in range(int(rng.integers(3, 7)))) + "."
    start = int(rng.integers(0, 20))
    return CHARS[1 + start : 1 + start + int(rng.integers(4, 7))] + "."


def pattern_stream(rng: np.random.Generator, n_chars: int) -> str:
    out: list[str] = []
    total = 0
    while total < n_chars:
        s = _pattern_sentence(rng)
        out.append(s)
        total += len(s) + 1
    return " ".join(out)


def gen_pattern(n: int, length: int, rng: np.random.Generator) -> list[Example]:
    """``n`` windows of exactly ``length`` characters cut from one pattern stream."""
    stream = pattern_stream(rng, n * length + length)
    ids = encode(stream)
    starts = np.arange(n) * length
    return [Example(ids[s : s + length]) for s in starts]


def _task_text(label: str, rng: np.random.Generator) -> tuple[str, str]:
    """(prompt, answer) for one task example."""
    name = _NAMES[rng.integers(len(_NAMES))]
    if label in MATH_LABELS:
        mod = int(rng.integers(2, 10))
        if label == "add":
            a, b = int(rng.integers(0, 50)), int(rng.integers(0, 50))
            return f"{name} has {a}, gets {b}. mod {mod}? ", str((a + b) % mod)
        if label == "sub":
            a = int(rng.integers(0, 50))
            b = int(rng.integers(0, a + 1))
            return f"{name} has {a}, gives {b}. mod {mod}? ", str((a - b) % mod)
        a, b = int(rng.integers(1, 10)), int(rng.integers(1, 10))
        return f"{name} has {a} bags of {b}. mod {mod}? ", str((a * b) % mod)
    if label == "parity":
        bits = "".join(str(int(b)) for b in rng.integers(0, 2, int(rng.integers(4, 9))))
        return f"bits {bits} parity? ", "odd" if bits.count("1") % 2 else "even"
    if label == "keyword":
        pool = list(_WORDS)
        words = [pool[i] for i in rng.choice(len(pool), 3, replace=False)]
        if rng.random() < 0.5:
            w = words[int(rng.integers(3))]
        else:
            w = next(x for x in (pool[i] for i in rng.permutation(len(pool))) if x not in words)
        return f"is {w} in {' '.join(words)}? ", "yes" if w in words else "no"
    raise ValueError(f"unknown task label {label!r}")


def make_task_example(label: str, rng: np.random.Generator) -> Example:
    prompt, answer = _task_text(label, rng)
    tokens = [BOS] + encode(prompt) + encode(answer) + encode(".") + [EOS]
    return Example(tokens, label, 1 + len(prompt), len(answer))


def gen_tasks(n: int, rng: np.random.Generator, labels: Sequence[str] = TASK_LABELS,
              weights: Sequence[float] | None = None) -> list[Example]:
    p = None if weights is None else np.asarray(weights, float) / np.sum(weights)
    picks = rng.choice(len(labels), size=n, p=p)
    return [make_task_example(labels[i], rng) for i in picks]


_MATH_RE = re.compile(r"has (\d+)(?:, gets (\d+)|, gives (\d+)| bags of (\d+))\. mod (\d+)\? (\d+)\.")


def check_math(example: Example) -> bool:
    """Recompute a math-family answer from the text."""
    m = _MATH_RE.search(example.text)
    if not m:
        raise ValueError(f"not a math example: {example.text!r}")
    a = int(m.group(1))
    mod, ans = int(m.group(5)), int(m.group(6))
    if m.group(2) is not None:
        want = (a + int(m.group(2))) % mod
    elif m.group(3) is not None:
        want = (a - int(m.group(3))) % mod
    else:
        want = (a * int(m.group(4))) % mod
    return want == ans


@dataclass(frozen=True)
class CorpusSpec:
    public: int = 3200
    public_eval: int = 256
    public_len: int = 32
    pretrain_tasks: int = 0
    private: int = 1000
    eval: int = 200
    public_family: str = "pattern"  # "pattern" (out-of-domain) or "task" (in-domain)
    seed: int = 0

    def __post_init__(self):
        if self.public_family not in ("pattern", "task"):
            raise ValueError("public_family must be 'pattern' or 'task'")
        for k in ("public", "public_eval", "public_len", "private", "eval"):
            if getattr(self, k) <= 0:
                raise ValueError(f"corpus size {k} must be positive")
        if self.pretrain_tasks < 0:
            raise ValueError("pretrain_tasks must be >= 0")


@dataclass
class CorpusBundle:
    public: Corpus
    public_eval: Corpus
    pretrain: Corpus
    private: Corpus
    eval: Corpus
    extra: dict = field(default_factory=dict)

    def splits(self) -> dict[str, Corpus]:
        return {"public": self.public, "public_eval": self.public_eval, "pretrain": self.pretrain,
                "private": self.private, "eval": self.eval}

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, c in self.splits().items():
            c.save(directory / f"{name}.jsonl")

    @classmethod
    def load(cls, directory: str | Path) -> "CorpusBundle":
        directory = Path(directory)
        return cls(**{n: Corpus.load(directory / f"{n}.jsonl", n)
                      for n in ("public", "public_eval", "pretrain", "private", "eval")})


def gen_corpus(spec: CorpusSpec) -> CorpusBundle:
    """Deterministically generate every split from ``spec.seed``."""
    streams = np.random.default_rng(spec.seed).spawn(6)
    if spec.public_family == "pattern":
        public = gen_pattern(spec.public, spec.public_len, streams[0])
        public_eval = gen_pattern(spec.public_eval, spec.public_len, streams[1])
    else:
        public = [Example(e.tokens) for e in gen_tasks(spec.public, streams[0])]
        public_eval = [Example(e.tokens) for e in gen_tasks(spec.public_eval, streams[1])]
    # the server-side "pre-trained" model sees general text, optionally with task-formatted text
    pre_text = gen_pattern(spec.public, spec.public_len, streams[2])
    pre_tasks = gen_tasks(spec.pretrain_tasks, streams[3])
    return CorpusBundle(
        public=Corpus(public, "public"),
        public_eval=Corpus(public_eval, "public_eval"),
        pretrain=Corpus(pre_text + pre_tasks, "pretrain"),
        private=Corpus(gen_tasks(spec.private, streams[4]), "private"),
        eval=Corpus(gen_tasks(spec.eval, streams[5]), "eval"),
    )


# -- batching -----------------------------------------------------------------
def make_batch(examples: Sequence[Example]) -> tuple[np.ndarray, np.ndarray]:
    """Next-token inputs and targets, right-padded; padded targets are -1."""
    L = max(len(e.tokens) for e in examples)
    if L < 2:
        raise ValueError("sequences need at least two tokens")
    inp = np.full((len(examples), L - 1), PAD, dtype=np.int64)
    tgt = np.full((len(examples), L - 1), -1, dtype=np.int64)
    for i, e in enumerate(examples):
        t = e.tokens
        inp[i, : len(t) - 1] = t[:-1]
        tgt[i, : len(t) - 1] = t[1:]
    return inp, tgt


def batches(corpus: Corpus, batch_size: int, rng: np.random.Generator | None = None):
    """Yield ``(inputs, targets, indices)``; shuffled when ``rng`` is given."""
    order = np.arange(len(corpus)) if rng is None else rng.permutation(len(corpus))
    for s in range(0, len(order), batch_size):
        idx = order[s : s + batch_size]
        inp, tgt = make_batch([corpus.examples[i] for i in idx])
        yield inp, tgt, idx
