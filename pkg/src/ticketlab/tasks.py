"""Synthetic pretraining corpus and a GLUE-like suite of toy tasks.

Every sequence has fixed length ``max_seq_len``: ``[CLS] w1 ... [SEP]`` for
single-segment tasks and ``[CLS] a1..a7 [SEP] b1..b6 [SEP]`` for pair tasks.
The first and last positions therefore always hold boundary tokens.

Vocabulary layout (64 ids)::

    0 PAD, 1 CLS, 2 SEP, 3 MASK
    4-7   determiners
    8-17  singular nouns      18-27 plural nouns (same stems, +10)
    28-35 singular verbs      36-43 plural verbs (same stems, +8)
    44-47 positive adjectives 48-51 negative adjectives
    52-57 adverbs
    58    REF marker: the next token repeats the sequence's first noun
    59-63 fillers
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, CLS, SEP, MASK = 0, 1, 2, 3
DETS = np.arange(4, 8)
NOUN_SG = np.arange(8, 18)
NOUN_PL = np.arange(18, 28)
VERB_SG = np.arange(28, 36)
VERB_PL = np.arange(36, 44)
ADJ_POS = np.arange(44, 48)
ADJ_NEG = np.arange(48, 52)
ADVS = np.arange(52, 58)
REF = 58
FILLERS = np.arange(59, 64)
WORDS = np.arange(4, 64)
VOCAB_SIZE = 64
SEQ_LEN = 16
SEG_A, SEG_B = 7, 6


@dataclass
class Dataset:
    """Token-id matrix (items x length) with class-index or real labels."""

    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.tokens[idx], self.labels[idx])

    def to_lines(self) -> list:
        out = []
        for row, lab in zip(self.tokens, self.labels):
            lab_s = repr(float(lab)) if self.labels.dtype.kind == "f" else str(int(lab))
            out.append(" ".join(str(int(t)) for t in row) + "\t" + lab_s)
        return out

    def save(self, path):
        Path(path).write_text("\n".join(self.to_lines()) + "\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        rows, labels = [], []
        is_float = False
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            toks, lab = line.split("\t")
            rows.append([int(t) for t in toks.split()])
            is_float |= any(c in lab for c in ".eE") or lab in ("nan", "inf")
            labels.append(lab)
        labs = np.array([float(x) for x in labels]) if is_float else np.array([int(x) for x in labels])
        return cls(np.array(rows, dtype=np.int64), labs)


@dataclass
class TaskSpec:
    name: str
    kind: str  # "classification" | "regression"
    metric: str  # "accuracy" | "matthews" | "pearson"
    seed: int
    train_size: int
    dev_size: int
    num_classes: int = 2
    learnable: bool = True
    train: Dataset | None = field(default=None, repr=False)
    dev: Dataset | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"bad task kind {self.kind!r}")
        if (self.kind == "regression") != (self.metric == "pearson"):
            raise ValueError("regression tasks use pearson; classification uses accuracy/matthews")

    @property
    def num_outputs(self) -> int:
        return 1 if self.kind == "regression" else self.num_classes

    def majority_baseline(self) -> float:
        """Metric of a constant predictor on the dev set."""
        from . import metrics

        if self.kind == "regression":
            return 0.0
        values, counts = np.unique(self.train.labels, return_counts=True)
        pred = np.full(len(self.dev), values[np.argmax(counts)])
        return metrics.compute(self.metric, pred, self.dev.labels)


# -- grammar -------------------------------------------------------------------

def _clause(rng: np.random.Generator) -> list:
    """DET [ADJ] NOUN [ADV] VERB, with noun/verb number agreement."""
    plural = rng.random() < 0.5
    out = [int(rng.choice(DETS))]
    if rng.random() < 0.5:
        out.append(int(rng.choice(ADJ_POS if rng.random() < 0.5 else ADJ_NEG)))
    stem = int(rng.integers(10))
    out.append(int((NOUN_PL if plural else NOUN_SG)[stem]))
    if rng.random() < 0.3:
        out.append(int(rng.choice(ADVS)))
    vstem = int(rng.integers(8))
    out.append(int((VERB_PL if plural else VERB_SG)[vstem]))
    return out


def grammatical_words(rng: np.random.Generator, length: int) -> list:
    """Clauses separated by occasional fillers, with a REF back-reference."""
    words: list = []
    first_noun = None
    while len(words) < length:
        r = rng.random()
        if words and first_noun is not None and r < 0.15:
            words += [REF, first_noun]
        elif words and r < 0.25:
            words.append(int(rng.choice(FILLERS)))
        else:
            c = _clause(rng)
            if first_noun is None:
                first_noun = next(t for t in c if 8 <= t < 28)
            words += c
    return words[:length]


def wrap(words: list) -> list:
    return [CLS] + list(words) + [SEP]


def wrap_pair(a: list, b: list) -> list:
    return [CLS] + list(a) + [SEP] + list(b) + [SEP]


def make_pretrain_corpus(seed: int, size: int, seq_len: int = SEQ_LEN) -> Dataset:
    """``size`` grammatical sequences (labels are all zero)."""
    rng = np.random.default_rng([seed, 101])
    rows = []
    for i in range(size):
        if rng.random() < 0.5:
            rows.append(wrap(grammatical_words(rng, seq_len - 2)))
        else:
            a = grammatical_words(rng, SEG_A)
            b = grammatical_words(rng, seq_len - 3 - SEG_A)
            rows.append(wrap_pair(a, b))
    return Dataset(np.array(rows, dtype=np.int64), np.zeros(size, dtype=np.int64))


# -- task generators -----------------------------------------------------------
# Each generator returns (tokens, label) for one example.

def _agreement_positions(words: list) -> list:
    return [i for i, t in enumerate(words) if 28 <= t < 44]


_CATEGORIES = [DETS, np.r_[NOUN_SG, NOUN_PL], np.r_[VERB_SG, VERB_PL], np.r_[ADJ_POS, ADJ_NEG],
               ADVS, FILLERS]


def _category(token: int) -> int:
    for i, cat in enumerate(_CATEGORIES):
        if token in cat:
            return i
    return -1


def _gen_acceptability(rng):
    """Grammatical sequence, or one with an agreement error or a word of the wrong category."""
    words = grammatical_words(rng, SEQ_LEN - 2)
    if rng.random() < 0.5:
        return wrap(words), 1
    verbs = _agreement_positions(words)
    if verbs and rng.random() < 0.3:
        i = int(rng.choice(verbs))
        words[i] = words[i] + 8 if words[i] < 36 else words[i] - 8
    else:
        i = int(rng.integers(len(words)))
        cat = _category(words[i])
        others = [c for j, c in enumerate(_CATEGORIES) if j != cat]
        words[i] = int(rng.choice(others[int(rng.integers(len(others)))]))
    return wrap(words), 0


def _gen_sentiment(rng):
    while True:
        words = grammatical_words(rng, SEQ_LEN - 2)
        pos = sum(t in ADJ_POS for t in words)
        neg = sum(t in ADJ_NEG for t in words)
        if pos != neg:
            return wrap(words), int(pos > neg)


def _gen_paraphrase(rng):
    """Segment B restates the first six words of A, possibly with a swap or substitution."""
    a = grammatical_words(rng, SEG_A)
    b = a[:SEG_B]
    if rng.random() < 0.5:
        return wrap_pair(a, b), 1
    candidates = [i for i in range(SEG_B - 1) if b[i] != b[i + 1]]
    if candidates and rng.random() < 0.5:
        i = int(rng.choice(candidates))
        b[i], b[i + 1] = b[i + 1], b[i]
    else:
        i = int(rng.integers(SEG_B))
        b[i] = int(rng.choice([t for t in WORDS if t != b[i]]))
    return wrap_pair(a, b), 0


def _gen_similarity(rng):
    a = grammatical_words(rng, SEG_A)
    keep = int(rng.integers(SEG_B + 1))
    pick = sorted(rng.choice(SEG_A, size=min(keep, SEG_A), replace=False).tolist())
    b = [a[i] for i in pick]
    filler = grammatical_words(rng, SEG_B)
    b = (b + filler)[:SEG_B]
    sa, sb = set(a), set(b)
    label = len(sa & sb) / len(sa | sb)
    return wrap_pair(a, b), float(label)


def _gen_unlearnable(rng):
    return wrap(grammatical_words(rng, SEQ_LEN - 2)), int(rng.integers(2))


_GENERATORS = {
    "acceptability": ("classification", "matthews", _gen_acceptability, True),
    "sentiment": ("classification", "accuracy", _gen_sentiment, True),
    "paraphrase": ("classification", "accuracy", _gen_paraphrase, True),
    "similarity": ("regression", "pearson", _gen_similarity, True),
    "unlearnable": ("classification", "accuracy", _gen_unlearnable, False),
}

TASK_NAMES = tuple(_GENERATORS)


def make_task(name: str, seed: int, train_size: int = 512, dev_size: int = 256) -> TaskSpec:
    kind, metric, gen, learnable = _GENERATORS[name]
    rng = np.random.default_rng([seed, TASK_NAMES.index(name), 202])
    seen: set = set()
    rows, labels = [], []
    while len(rows) < train_size + dev_size:
        toks, lab = gen(rng)
        key = tuple(toks)
        if key in seen:
            continue
        seen.add(key)
        rows.append(toks)
        labels.append(lab)
    tokens = np.array(rows, dtype=np.int64)
    labs = np.array(labels, dtype=np.float64 if kind == "regression" else np.int64)
    train = Dataset(tokens[:train_size], labs[:train_size])
    dev = Dataset(tokens[train_size:], labs[train_size:])
    return TaskSpec(name, kind, metric, seed, train_size, dev_size, 2, learnable, train, dev)


def make_task_suite(seed: int, train_size: int = 512, dev_size: int = 256,
                    names=TASK_NAMES) -> list:
    """The default suite: one Matthews task, one Pearson task, three accuracy
    tasks, the last of which has random labels and cannot be learned."""
    return [make_task(n, seed, train_size, dev_size) for n in names]
