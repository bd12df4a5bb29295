"""Deterministic synthetic token streams for continual-learning experiments.

Each entity class owns a block of ``vocab_per_class`` token types; adjacent
blocks share ``round(class_overlap * vocab_per_class)`` types. Non-entity
tokens come from their own vocabulary of ``vocab_per_class * num_entity_classes``
types. Labels are laid out by shuffling an exact multiset (so class counts
match the requested sizes) and cutting it into sequences.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .schema import O_LABEL, LabelSet, TokenSequence

MIN_SEQUENCES = 5


@dataclass(frozen=True)
class SynthSpec:
    num_entity_classes: int = 6
    tokens_per_class: int = 200
    vocab_per_class: int = 8
    o_token_fraction: float = 0.5
    sequence_length: int = 10
    seed: int = 0
    class_overlap: float = 0.0
    classes_per_sequence: int = 0  # 0: labels shuffled freely across sequences

    def __post_init__(self):
        if self.num_entity_classes < 1 or self.tokens_per_class < 1:
            raise ConfigError("num_entity_classes and tokens_per_class must be >= 1")
        if self.vocab_per_class < 1 or self.sequence_length < 1:
            raise ConfigError("vocab_per_class and sequence_length must be >= 1")
        if not 0.0 <= self.o_token_fraction < 1.0:
            raise ConfigError(
                f"o_token_fraction must lie in [0, 1) so entity tokens exist, got {self.o_token_fraction}"
            )
        if not 0 <= self.classes_per_sequence <= self.num_entity_classes:
            raise ConfigError("classes_per_sequence must lie in 0..num_entity_classes")
        if not 0.0 <= self.class_overlap <= 1.0:
            raise ConfigError(f"class_overlap must lie in [0, 1], got {self.class_overlap}")

    def to_dict(self) -> dict:
        return asdict(self)


def class_names(n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"C{i:0{width}d}" for i in range(n)]


def class_vocabularies(spec: SynthSpec) -> list[list[str]]:
    v = spec.vocab_per_class
    shared = int(round(spec.class_overlap * v))
    stride = v - shared
    if stride < 1 and spec.num_entity_classes > 1:
        raise ConfigError("class_overlap leaves no private vocabulary; classes are indistinguishable")
    return [[f"w{i:05d}" for i in range(c * stride, c * stride + v)] for c in range(spec.num_entity_classes)]


def _shuffled_layout(spec: SynthSpec, rng: np.random.Generator) -> list[np.ndarray]:
    k = spec.num_entity_classes
    n_ent = k * spec.tokens_per_class
    n_o = int(round(spec.o_token_fraction / (1.0 - spec.o_token_fraction) * n_ent))
    flat = np.concatenate([np.zeros(n_o, np.int64), np.repeat(np.arange(1, k + 1), spec.tokens_per_class)])
    rng.shuffle(flat)
    L = spec.sequence_length
    return [flat[s : s + L] for s in range(0, len(flat), L)]


def _topical_layout(spec: SynthSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Each sequence draws its entity tokens from ``classes_per_sequence`` classes."""
    k, L = spec.num_entity_classes, spec.sequence_length
    n_slots = max(1, L - int(round(spec.o_token_fraction * L)))
    remaining = np.full(k + 1, spec.tokens_per_class)
    remaining[0] = 0
    out = []
    while remaining.sum():
        live = np.flatnonzero(remaining)
        picks = rng.choice(live, size=min(spec.classes_per_sequence, len(live)), replace=False)
        ents = []
        for j in range(n_slots):
            live_picks = [c for c in picks if remaining[c]]
            if not live_picks:
                break
            c = live_picks[j % len(live_picks)]
            remaining[c] -= 1
            ents.append(c)
        ys = np.zeros(max(L, len(ents)), np.int64)
        pos = np.sort(rng.choice(len(ys), size=len(ents), replace=False))
        ys[pos] = rng.permutation(ents)
        out.append(ys)
    return out


def generate(spec: SynthSpec) -> tuple[list[TokenSequence], list[TokenSequence], LabelSet]:
    """Return (train, test, label_set); an 80/20 split by sequence."""
    rng = np.random.default_rng(spec.seed)
    k = spec.num_entity_classes
    labels = LabelSet((O_LABEL, *class_names(k)))
    vocabs = class_vocabularies(spec)
    o_vocab = [f"o{i:05d}" for i in range(spec.vocab_per_class * k)]

    layout = _topical_layout(spec, rng) if spec.classes_per_sequence else _shuffled_layout(spec, rng)
    n_seq = len(layout)
    if n_seq < MIN_SEQUENCES:
        raise ConfigError(f"spec yields {n_seq} sequences; at least {MIN_SEQUENCES} are needed for a split")

    seqs = []
    for ys in layout:
        toks = []
        for y in ys:
            pool = o_vocab if y == 0 else vocabs[y - 1]
            toks.append(pool[rng.integers(len(pool))])
        seqs.append((toks, list(ys)))

    order = rng.permutation(n_seq)
    n_train = int(round(0.8 * n_seq))
    train = [seqs[i] for i in order[:n_train]]
    test = [seqs[i] for i in order[n_train:]]

    # Test tokens unseen in training are swapped for a seen token of the same class.
    seen: dict[int, list[str]] = {}
    for toks, ys in train:
        for t, y in zip(toks, ys):
            seen.setdefault(y, [])
            if t not in seen[y]:
                seen[y].append(t)
    train_vocab = {t for toks, _ in train for t in toks}
    fixed_test = []
    for toks, ys in test:
        out = []
        for t, y in zip(toks, ys):
            if t not in train_vocab:
                if y not in seen:
                    raise ConfigError(f"class {labels.name(y)} has no training tokens; raise tokens_per_class")
                t = seen[y][rng.integers(len(seen[y]))]
            out.append(t)
        fixed_test.append((out, ys))

    to_seq = lambda rows: [TokenSequence(tuple(t), tuple(y)) for t, y in rows]
    return to_seq(train), to_seq(fixed_test), labels
