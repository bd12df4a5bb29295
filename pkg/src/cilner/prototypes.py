"""Per-class feature means kept as rehearsal anchors for later tasks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .model import TaggerModel
from .schema import TaskDataset


@dataclass(frozen=True)
class Prototype:
    class_id: int
    vector: np.ndarray
    created_at_task: int
    sample_count: int

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64)
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise ValueError("prototype vector must be a finite 1-d array")
        if self.class_id < 1:
            raise ValueError("prototypes are only kept for entity classes")
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)


class PrototypeStore:
    """Immutable mapping class_id -> Prototype; inserting returns a new store."""

    def __init__(self, entries: Mapping[int, Prototype] | None = None):
        self._entries = dict(sorted((entries or {}).items()))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._entries

    def __getitem__(self, class_id: int) -> Prototype:
        return self._entries[class_id]

    def __iter__(self):
        return iter(self._entries.values())

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(self._entries)

    def as_pairs(self) -> list[tuple[int, np.ndarray]]:
        return [(p.class_id, p.vector) for p in self._entries.values()]

    def to_arrays(self, prefix: str = "protos/") -> dict[str, np.ndarray]:
        protos = list(self._entries.values())
        dim = protos[0].vector.shape[0] if protos else 0
        return {
            f"{prefix}class_id": np.array([p.class_id for p in protos], dtype=np.int64),
            f"{prefix}vector": np.stack([p.vector for p in protos]) if protos else np.zeros((0, dim)),
            f"{prefix}created_at_task": np.array([p.created_at_task for p in protos], dtype=np.int64),
            f"{prefix}sample_count": np.array([p.sample_count for p in protos], dtype=np.int64),
        }

    @classmethod
    def from_arrays(cls, arrays, prefix: str = "protos/") -> "PrototypeStore":
        ids = arrays[f"{prefix}class_id"]
        vecs = arrays[f"{prefix}vector"]
        made = arrays[f"{prefix}created_at_task"]
        counts = arrays[f"{prefix}sample_count"]
        return cls({
            int(c): Prototype(int(c), np.array(v), int(t), int(n))
            for c, v, t, n in zip(ids, vecs, made, counts)
        })


def compute_prototypes(
    model: TaggerModel, dataset: TaskDataset, classes: Iterable[int], batch_size: int = 256
) -> list[Prototype]:
    """Mean encoder feature over the tokens whose current label is each class."""
    classes = sorted(set(int(c) for c in classes))
    allowed = set(dataset.classes) if dataset.classes else None
    if allowed is not None and not set(classes) <= allowed:
        raise ValueError(f"classes {classes} are not all in task {dataset.task_id}")
    d = model.hidden_dim
    sums = {c: np.zeros(d) for c in classes}
    counts = {c: 0 for c in classes}
    seqs = dataset.sequences
    for start in range(0, len(seqs), batch_size):
        batch = model.make_batch([s.tokens for s in seqs[start : start + batch_size]])
        feats, _ = model.features_of(batch)
        if feats.shape[1] != d:
            raise ValueError("feature dimension does not match the model")
        labels = np.concatenate(
            [np.asarray(l, dtype=np.int64) for l in dataset.current_labels[start : start + batch_size]]
        )
        for c in classes:
            mask = labels == c
            if mask.any():
                sums[c] += feats[mask].sum(axis=0)
                counts[c] += int(mask.sum())
    out = []
    for c in classes:
        if counts[c] == 0:
            raise ValueError(f"class {c} has no tokens in task {dataset.task_id}")
        out.append(Prototype(c, sums[c] / counts[c], dataset.task_id, counts[c]))
    return out


def prototype_from_features(class_id: int, features: np.ndarray, task_id: int = 0) -> Prototype:
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if len(feats) == 0:
        raise ValueError(f"class {class_id} has no tokens")
    return Prototype(class_id, feats.mean(axis=0), task_id, len(feats))


def store_and_freeze(store: PrototypeStore, protos: Iterable[Prototype]) -> PrototypeStore:
    protos = list(protos)
    entries = {p.class_id: p for p in store}
    for p in protos:
        if p.class_id in entries:
            raise ValueError(f"class {p.class_id} already has a prototype")
        entries[p.class_id] = p
    return PrototypeStore(entries)
