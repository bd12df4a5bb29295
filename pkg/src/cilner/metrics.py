"""Token-level scoring, step reports and semantic-shift counts.

E2O: a token whose true class is an old entity is predicted as O.
O2E: a token whose true class is O or an old entity is predicted as one of
the current task's new classes.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .losses import ClassPartition


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @classmethod
    def from_labels(cls, true, pred, num_classes: int) -> "ConfusionMatrix":
        true = np.asarray(true, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if true.shape != pred.shape:
            raise ValueError("true and predicted label arrays differ in length")
        for arr in (true, pred):
            if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
                raise ValueError(f"label outside 0..{num_classes - 1}")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (true, pred), 1)
        return cls(counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp_fp_fn(self, c: int) -> tuple[int, int, int]:
        tp = int(self.counts[c, c])
        return tp, int(self.counts[:, c].sum()) - tp, int(self.counts[c, :].sum()) - tp


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def per_class_f1(confusion: ConfusionMatrix, c: int) -> tuple[float, float, float]:
    if not 0 <= c < confusion.num_classes:
        raise ValueError(f"class {c} out of range")
    tp, fp, fn = confusion.tp_fp_fn(c)
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return p, r, _ratio(2 * p * r, p + r)


def macro_f1(per_class: Sequence[float]) -> float:
    """Unweighted mean of entity-class F1 values (O must already be excluded)."""
    if len(per_class) == 0:
        raise ValueError("macro F1 needs at least one entity class")
    return float(np.mean(np.asarray(per_class, dtype=np.float64)))


def indicator_accuracy(confusion: ConfusionMatrix, groups: Iterable[Sequence[int]]) -> float:
    """Mean over class groups of the fraction of each group's tokens predicted exactly.

    This is the literal indicator-average score, reported next to macro F1.
    Groups with no tokens are skipped.
    """
    accs = []
    for g in groups:
        g = list(g)
        n = confusion.counts[g, :].sum()
        if n:
            accs.append(confusion.counts[g, g].sum() / n)
    return float(np.mean(accs)) if accs else 0.0


def shift_stats(pairs: Iterable[tuple[int, int]], partition: ClassPartition) -> tuple[int, int]:
    """Count (e2o, o2e) over (true_label, predicted_label) pairs."""
    c = partition.num_classes
    old, new = set(partition.old), set(partition.new)
    e2o = o2e = 0
    for true, pred in pairs:
        if not (0 <= true < c and 0 <= pred < c):
            raise ValueError(f"label pair {(true, pred)} outside the {c} learned classes")
        if true in old and pred == 0:
            e2o += 1
        if (true == 0 or true in old) and pred in new:
            o2e += 1
    return e2o, o2e


def shift_stats_array(true, pred, partition: ClassPartition) -> tuple[int, int]:
    true = np.asarray(true)
    pred = np.asarray(pred)
    roles = np.asarray(partition.roles)
    if true.size and (true.max() >= len(roles) or pred.max() >= len(roles)):
        raise ValueError("label outside the learned classes")
    t_old = roles[true] == 1
    p_new = roles[pred] == 2
    e2o = int(np.sum(t_old & (pred == 0)))
    o2e = int(np.sum(((true == 0) | t_old) & p_new))
    return e2o, o2e


@dataclass
class StepReport:
    task_id: int
    classes: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_f1: float
    paper_metric_a: float
    confusion: list[list[int]]
    e2o_count: int
    o2e_count: int
    token_total: int
    method: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def class_f1(self, name: str) -> float:
        return self.f1[self.classes.index(name)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "StepReport":
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(f"malformed step report: {exc}") from None


def build_report(
    task_id: int,
    true: np.ndarray,
    pred: np.ndarray,
    class_names: Sequence[str],
    partition: ClassPartition,
    task_groups: Sequence[Sequence[int]],
    method: str = "",
    seed: int = 0,
) -> StepReport:
    """Score one incremental step. Labels must already be restricted to learned classes."""
    cm = ConfusionMatrix.from_labels(true, pred, len(class_names))
    prf = [per_class_f1(cm, c) for c in range(cm.num_classes)]
    e2o, o2e = shift_stats_array(true, pred, partition)
    return StepReport(
        task_id=task_id,
        classes=list(class_names),
        precision=[p for p, _, _ in prf],
        recall=[r for _, r, _ in prf],
        f1=[f for _, _, f in prf],
        macro_f1=macro_f1([f for _, _, f in prf[1:]]),
        paper_metric_a=indicator_accuracy(cm, task_groups),
        confusion=cm.counts.tolist(),
        e2o_count=e2o,
        o2e_count=o2e,
        token_total=cm.total,
        method=method,
        seed=seed,
    )


def average_macro_f1(reports: Sequence[StepReport]) -> float:
    if len(reports) == 0:
        raise ValueError("no step reports")
    return float(np.mean([r.macro_f1 for r in reports]))


def confusion_csv(report: StepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred", *report.classes])
    for name, row in zip(report.classes, report.confusion):
        w.writerow([name, *row])
    return buf.getvalue()


def curves_csv(series: dict[str, Sequence[StepReport]]) -> str:
    """Step-wise macro F1 per method, one column per method."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    methods = sorted(series)
    w.writerow(["step", *methods])
    steps = sorted({r.task_id for reps in series.values() for r in reps})
    for t in steps:
        row = [t]
        for m in methods:
            vals = [r.macro_f1 for r in series[m] if r.task_id == t]
            row.append(repr(float(np.mean(vals))) if vals else "")
        w.writerow(row)
    return buf.getvalue()


def shift_csv(series: dict[str, Sequence[StepReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "step", "seed", "e2o_count", "o2e_count", "token_total"])
    for m in sorted(series):
        for r in sorted(series[m], key=lambda r: (r.task_id, r.seed)):
            w.writerow([m, r.task_id, r.seed, r.e2o_count, r.o2e_count, r.token_total])
    return buf.getvalue()
