"""Label sets, incremental task schedules and token-level samples.

Every token carries two labels: its *full* label (the true class over the
whole task stream, used only for evaluation) and its *current* label, the
full label with every class outside the active task masked to ``O``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ConfigError, DataError

O_LABEL = "O"


def _utf8_key(name: str) -> bytes:
    return name.encode("utf-8")


@dataclass(frozen=True)
class LabelSet:
    """Ordered class names. Index 0 is ``O``; entity classes follow sorted byte-wise."""

    classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if not self.classes or self.classes[0] != O_LABEL:
            raise ConfigError(f"label set must start with {O_LABEL!r}: {self.classes!r}")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError(f"duplicate class names in {self.classes!r}")
        entities = self.classes[1:]
        if list(entities) != sorted(entities, key=_utf8_key):
            raise ConfigError("entity classes must be sorted byte-wise on UTF-8")

    @classmethod
    def from_entities(cls, names: Iterable[str]) -> "LabelSet":
        uniq = {n for n in names if n != O_LABEL}
        return cls((O_LABEL, *sorted(uniq, key=_utf8_key)))

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def num_entities(self) -> int:
        return len(self.classes) - 1

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise DataError(f"unknown label {name!r}") from None

    def name(self, idx: int) -> str:
        return self.classes[idx]


@dataclass(frozen=True)
class TaskSchedule:
    """FG-a-PG-b partition of the entity classes into consecutive tasks.

    ``partitions[t - 1]`` holds the class indices introduced by task ``t``
    (tasks are 1-based, as in the incremental protocol).
    """

    fg: int
    pg: int
    partitions: tuple[tuple[int, ...], ...]
    allow_ragged_tail: bool = False

    @property
    def num_tasks(self) -> int:
        return len(self.partitions)

    def _check(self, task_id: int) -> None:
        if not 1 <= task_id <= self.num_tasks:
            raise ConfigError(f"task_id {task_id} out of range 1..{self.num_tasks}")

    def new_classes(self, task_id: int) -> tuple[int, ...]:
        self._check(task_id)
        return self.partitions[task_id - 1]

    def old_classes(self, task_id: int) -> tuple[int, ...]:
        self._check(task_id)
        return tuple(c for part in self.partitions[: task_id - 1] for c in part)

    def learned_classes(self, task_id: int) -> tuple[int, ...]:
        """Entity classes visible after finishing ``task_id``."""
        self._check(task_id)
        return tuple(c for part in self.partitions[:task_id] for c in part)

    def num_visible(self, task_id: int) -> int:
        """Classifier width at ``task_id``, O included."""
        return 1 + len(self.learned_classes(task_id))


def build_schedule(
    label_set: LabelSet, fg: int, pg: int, allow_ragged_tail: bool = False
) -> TaskSchedule:
    """Assign entity classes to tasks greedily in alphabetical order."""
    n = label_set.num_entities
    if fg < 1 or pg < 1:
        raise ConfigError(f"fg and pg must be >= 1 (got fg={fg}, pg={pg})")
    if fg > n:
        raise ConfigError(f"fg={fg} exceeds the {n} entity classes")
    if fg != n and fg + pg > n and not allow_ragged_tail:
        raise ConfigError(f"fg={fg}, pg={pg} does not fit {n} entity classes")

    entity_ids = list(range(1, n + 1))
    parts = [tuple(entity_ids[:fg])]
    pos = fg
    while pos < n:
        chunk = tuple(entity_ids[pos : pos + pg])
        if len(chunk) < pg and not allow_ragged_tail:
            leftover = [label_set.name(c) for c in chunk]
            raise ConfigError(
                f"FG-{fg}-PG-{pg} leaves classes {leftover} unassigned; "
                "set allow_ragged_tail to give them a smaller final task"
            )
        parts.append(chunk)
        pos += pg
    return TaskSchedule(fg=fg, pg=pg, partitions=tuple(parts), allow_ragged_tail=allow_ragged_tail)


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]
    full_labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "full_labels", tuple(int(y) for y in self.full_labels))
        if len(self.tokens) != len(self.full_labels):
            raise DataError(
                f"{len(self.tokens)} tokens but {len(self.full_labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    def validate(self, label_set: LabelSet) -> None:
        n = len(label_set)
        for y in self.full_labels:
            if not 0 <= y < n:
                raise DataError(f"label index {y} invalid for {n} classes")


@dataclass(frozen=True)
class TaskDataset:
    task_id: int
    sequences: tuple[TokenSequence, ...]
    current_labels: tuple[tuple[int, ...], ...]
    classes: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)


def mask_labels(full_labels: Sequence[int], visible: Iterable[int]) -> tuple[int, ...]:
    keep = set(visible)
    return tuple(y if y in keep else 0 for y in full_labels)


def slice_dataset(
    corpus: Sequence[TokenSequence],
    schedule: TaskSchedule,
    task_id: int,
    keep_empty_sequences: bool = False,
) -> TaskDataset:
    """Keep only task ``task_id``'s labels; everything else becomes O.

    Sequences without any current-task entity are dropped unless
    ``keep_empty_sequences`` is set.
    """
    new = schedule.new_classes(task_id)
    seqs, cur = [], []
    for seq in corpus:
        masked = mask_labels(seq.full_labels, new)
        if not keep_empty_sequences and not any(masked):
            continue
        seqs.append(seq)
        cur.append(masked)
    return TaskDataset(task_id=task_id, sequences=tuple(seqs), current_labels=tuple(cur), classes=new)


def strip_bio(label: str) -> str:
    if label[:2] in ("B-", "I-"):
        return label[2:]
    return label


def parse_conll(text: str, strip_prefixes: bool = True) -> list[tuple[list[str], list[str]]]:
    """Parse ``token<TAB>label`` lines; blank lines separate sequences."""
    out: list[tuple[list[str], list[str]]] = []
    toks: list[str] = []
    labs: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            if toks:
                out.append((toks, labs))
                toks, labs = [], []
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise DataError(f"line {lineno}: expected 'token<TAB>label', got {raw!r}")
        tok, lab = parts
        toks.append(tok)
        labs.append(strip_bio(lab) if strip_prefixes else lab)
    if toks:
        out.append((toks, labs))
    return out


def load_conll(
    path, label_set: LabelSet | None = None, strip_prefixes: bool = True
) -> tuple[list[TokenSequence], LabelSet]:
    """Read a CoNLL file. Builds the label set from the file when none is given."""
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise DataError(f"corpus not found: {path}") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not valid UTF-8 ({exc})") from None
    rows = parse_conll(text, strip_prefixes)
    if label_set is None:
        label_set = LabelSet.from_entities(l for _, labs in rows for l in labs)
    seqs = [
        TokenSequence(tuple(toks), tuple(label_set.index(l) for l in labs))
        for toks, labs in rows
    ]
    return seqs, label_set


def format_conll(corpus: Sequence[TokenSequence], label_set: LabelSet) -> str:
    blocks = []
    for seq in corpus:
        for tok in seq.tokens:
            if "\t" in tok or "\n" in tok or not tok.strip():
                raise DataError(f"token {tok!r} cannot be written as CoNLL")
        blocks.append(
            "\n".join(f"{t}\t{label_set.name(y)}" for t, y in zip(seq.tokens, seq.full_labels))
        )
    return "\n\n".join(blocks) + "\n"


def save_conll(path, corpus: Sequence[TokenSequence], label_set: LabelSet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_conll(corpus, label_set))
