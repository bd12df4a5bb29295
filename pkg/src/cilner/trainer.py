"""Incremental training loop.

For each task: freeze a copy of the previous model, widen the classifier by
the task's classes, minimise ``ce_debias + alpha * pro + beta * kd`` with
mini-batch updates, then store one prototype per new class.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .losses import (
    ClassPartition,
    HyperParams,
    LossBreakdown,
    debiased_ce_batch,
    kd_batch,
    prototype_loss_and_grad,
    softmax,
    total_loss,
)
from .metrics import StepReport, average_macro_f1, build_report
from .model import (
    BACKBONE,
    CLASSIFIER,
    Batch,
    ModelSnapshot,
    TaggerModel,
    expand_classifier,
    model_arrays,
    model_from_arrays,
    snapshot,
)
from .optim import Optimizer
from .prototypes import PrototypeStore, compute_prototypes, store_and_freeze
from .schema import LabelSet, TaskDataset, TaskSchedule, TokenSequence, mask_labels, slice_dataset

log = logging.getLogger(__name__)

METHODS = ("is3", "ft", "kd_only", "no_debias", "no_pro", "no_both")


@dataclass(frozen=True)
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    epochs_per_task: int = 20
    batch_size: int = 8
    lr_backbone: float = 1e-2
    lr_classifier: float = 1e-2
    weight_decay: float = 0.0
    optimizer: str = "sgd"
    seed: int = 0
    method: str = "is3"
    kd_skip_new_entity_tokens: bool = False
    keep_empty_sequences: bool = False
    emb_dim: int = 32
    hidden_dim: int = 64
    window: int = 2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_backbone <= 0 or self.lr_classifier <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs_per_task < 1 or self.batch_size < 1:
            raise ConfigError("epochs_per_task and batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")

    @classmethod
    def paper_preset(cls, **overrides) -> "TrainConfig":
        """Full-scale optimiser settings (AdamW, 1e-6 backbone / 1e-3 classifier)."""
        base = dict(optimizer="adamw", lr_backbone=1e-6, lr_classifier=1e-3)
        base.update(overrides)
        return cls(**base)

    def effective_hp(self) -> HyperParams:
        """Hyper-parameters after the method flag switches terms off."""
        hp = self.hp
        if self.method == "ft":
            return replace(hp, delta=1.0, alpha=0.0, beta=0.0)
        if self.method in ("kd_only", "no_both"):
            return replace(hp, delta=1.0, alpha=0.0)
        if self.method == "no_debias":
            return replace(hp, delta=1.0)
        if self.method == "no_pro":
            return replace(hp, alpha=0.0)
        return hp

    def to_dict(self) -> dict:
        d = asdict(self)
        hp = d.pop("hp")
        d.update(hp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        hp_keys = {"delta", "alpha", "beta", "kd_temperature"}
        hp = {k: d.pop(k) for k in list(d) if k in hp_keys}
        known = {f for f in cls.__dataclass_fields__ if f != "hp"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(hp=HyperParams(**hp), **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class RunState:
    model: TaggerModel
    schedule: TaskSchedule
    label_set: LabelSet
    rng: np.random.Generator
    store: PrototypeStore = field(default_factory=PrototypeStore)
    old: ModelSnapshot | None = None
    partition: ClassPartition | None = None
    task_id: int = 0
    reports: list[StepReport] = field(default_factory=list)


def _child_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def init_state(
    train: Sequence[TokenSequence], label_set: LabelSet, schedule: TaskSchedule, cfg: TrainConfig
) -> RunState:
    vocab = {t for seq in train for t in seq.tokens}
    model = TaggerModel.create(
        vocab, emb_dim=cfg.emb_dim, hidden_dim=cfg.hidden_dim, window=cfg.window, seed=cfg.seed
    )
    rng = np.random.default_rng(_child_seed(cfg.seed, 1))
    return RunState(model=model, schedule=schedule, label_set=label_set, rng=rng)


def batch_loss(
    model: TaggerModel,
    batch: Batch,
    targets: np.ndarray,
    partition: ClassPartition,
    hp: HyperParams,
    old_probs: np.ndarray | None = None,
    kd_mask: np.ndarray | None = None,
    store: PrototypeStore | None = None,
) -> LossBreakdown:
    """Loss values and parameter gradients for one mini-batch.

    CE and KD are token means; the prototype term is a sum over prototypes.
    KD and prototype values are reported whenever an old model / store
    exists, but contribute gradient only through non-zero weights.
    """
    logits, _, cache = model.run(batch)
    n = len(targets)
    ce_tok, d_logits = debiased_ce_batch(logits, targets, partition.scale(hp.delta))
    ce = float(ce_tok.mean())
    d_logits /= n

    kd = 0.0
    if old_probs is not None:
        kd_tok, kd_grad = kd_batch(old_probs, logits, hp.kd_temperature)
        mask = np.ones(n, bool) if kd_mask is None else kd_mask
        m = int(mask.sum())
        if m:
            kd = float(kd_tok[mask].mean())
            if hp.beta:
                d_logits += (hp.beta / m) * kd_grad * mask[:, None]

    grads = model.backward(cache, d_logits)

    pro = 0.0
    if store is not None and len(store):
        pro, d_w, d_b = prototype_loss_and_grad(
            store.as_pairs(), model.params["cls_W"], model.params["cls_b"]
        )
        if hp.alpha:
            grads["cls_W"] += hp.alpha * d_w
            grads["cls_b"] += hp.alpha * d_b

    total = total_loss(ce, pro, kd, hp)
    return LossBreakdown(ce_debias=ce, pro=pro, kd=kd, total=total, grads=grads)


def _make_optimizer(cfg: TrainConfig) -> Optimizer:
    lrs = {k: cfg.lr_backbone for k in BACKBONE}
    lrs.update({k: cfg.lr_classifier for k in CLASSIFIER})
    return Optimizer(cfg.optimizer, lrs, cfg.weight_decay)


def train_task(
    state: RunState,
    dataset: TaskDataset,
    cfg: TrainConfig,
    on_step: Callable[[int, int, LossBreakdown], None] | None = None,
) -> RunState:
    t = dataset.task_id
    if t != state.task_id + 1:
        raise ConfigError(f"expected task {state.task_id + 1}, got task {t}")
    new = state.schedule.new_classes(t)
    if dataset.classes and tuple(dataset.classes) != tuple(new):
        raise ConfigError(f"dataset classes {dataset.classes} do not match task {t}'s {new}")
    if len(dataset) == 0:
        raise DataError(f"task {t} has no training sequences")
    hp = cfg.effective_hp()

    old = snapshot(state.model, t - 1) if t > 1 else None
    model = expand_classifier(state.model, len(new), _child_seed(cfg.seed, 2, t))
    partition = ClassPartition.from_counts(len(state.schedule.old_classes(t)), len(new))
    assert partition.num_classes == model.num_classes
    opt = _make_optimizer(cfg)

    seqs = dataset.sequences
    batches_all = [model.make_batch([s.tokens]) for s in seqs]
    targets_all = [np.asarray(y, dtype=np.int64) for y in dataset.current_labels]
    old_probs_all = None
    if old is not None:
        old_probs_all = [softmax(old.run(b) / hp.kd_temperature) for b in batches_all]
    new_set = np.zeros(model.num_classes, bool)
    new_set[list(new)] = True

    rng = state.rng
    for epoch in range(cfg.epochs_per_task):
        order = rng.permutation(len(seqs))
        for bi, start in enumerate(range(0, len(seqs), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            batch = Batch(
                windows=np.concatenate([batches_all[i].windows for i in idx]),
                offsets=np.array([]),
            )
            targets = np.concatenate([targets_all[i] for i in idx])
            old_probs = kd_mask = None
            if old_probs_all is not None:
                old_probs = np.concatenate([old_probs_all[i] for i in idx])
                if cfg.kd_skip_new_entity_tokens:
                    kd_mask = ~new_set[targets]
            lb = batch_loss(model, batch, targets, partition, hp, old_probs, kd_mask, state.store)
            if not np.isfinite(lb.total):
                raise NumericalError(
                    f"non-finite loss at task {t}, epoch {epoch}, batch {bi}: "
                    f"ce={lb.ce_debias} pro={lb.pro} kd={lb.kd}"
                )
            if on_step is not None:
                on_step(epoch, bi, lb)
            opt.step(model.params, lb.grads)
        log.debug("task %d epoch %d last-batch loss %.5f", t, epoch, lb.total)

    protos = compute_prototypes(model, dataset, new)
    store = store_and_freeze(state.store, protos)
    return RunState(
        model=model,
        schedule=state.schedule,
        label_set=state.label_set,
        rng=rng,
        store=store,
        old=old,
        partition=partition,
        task_id=t,
        reports=list(state.reports),
    )


def predict(model: TaggerModel, corpus: Sequence[TokenSequence], batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(corpus), batch_size):
        batch = model.make_batch([s.tokens for s in corpus[start : start + batch_size]])
        logits, _, _ = model.run(batch)
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, np.int64)


def evaluate(
    model: TaggerModel,
    test: Sequence[TokenSequence],
    schedule: TaskSchedule,
    label_set: LabelSet,
    task_id: int,
    method: str = "",
    seed: int = 0,
) -> StepReport:
    """Score against full labels, with classes not yet learned counted as O."""
    learned = schedule.learned_classes(task_id)
    c = schedule.num_visible(task_id)
    if model.num_classes != c:
        raise ConfigError(f"model has {model.num_classes} classes, task {task_id} needs {c}")
    true = np.concatenate([np.asarray(mask_labels(s.full_labels, learned)) for s in test])
    pred = predict(model, test)
    partition = ClassPartition.from_counts(len(schedule.old_classes(task_id)), len(schedule.new_classes(task_id)))
    return build_report(
        task_id,
        true,
        pred,
        label_set.classes[:c],
        partition,
        schedule.partitions[:task_id],
        method=method,
        seed=seed,
    )


@dataclass
class ExperimentResult:
    reports: list[StepReport]
    state: RunState

    @property
    def final_macro_f1(self) -> float:
        return self.reports[-1].macro_f1

    @property
    def average_macro_f1(self) -> float:
        return average_macro_f1(self.reports)


def continue_experiment(
    state: RunState,
    train: Sequence[TokenSequence],
    test: Sequence[TokenSequence],
    cfg: TrainConfig,
    until_task: int | None = None,
) -> ExperimentResult:
    last = state.schedule.num_tasks if until_task is None else until_task
    for t in range(state.task_id + 1, last + 1):
        data = slice_dataset(train, state.schedule, t, cfg.keep_empty_sequences)
        state = train_task(state, data, cfg)
        report = evaluate(state.model, test, state.schedule, state.label_set, t, cfg.method, cfg.seed)
        state.reports.append(report)
        log.info("task %d: macro F1 %.4f (e2o=%d, o2e=%d)", t, report.macro_f1, report.e2o_count, report.o2e_count)
    return ExperimentResult(reports=list(state.reports), state=state)


def run_experiment(
    train: Sequence[TokenSequence],
    test: Sequence[TokenSequence],
    label_set: LabelSet,
    schedule: TaskSchedule,
    cfg: TrainConfig,
    until_task: int | None = None,
) -> ExperimentResult:
    for seq in list(train) + list(test):
        seq.validate(label_set)
    state = init_state(train, label_set, schedule, cfg)
    return continue_experiment(state, train, test, cfg, until_task)


# run checkpoints ---------------------------------------------------------

def save_checkpoint(path, state: RunState, cfg: TrainConfig | None = None) -> None:
    meta = {
        "task_id": state.task_id,
        "labels": list(state.label_set.classes),
        "fg": state.schedule.fg,
        "pg": state.schedule.pg,
        "partitions": [list(p) for p in state.schedule.partitions],
        "allow_ragged_tail": state.schedule.allow_ragged_tail,
        "rng": state.rng.bit_generator.state,
        "reports": [json.loads(r.to_json()) for r in state.reports],
        "config": cfg.to_dict() if cfg is not None else None,
    }
    arrays = model_arrays(state.model)
    arrays.update(state.store.to_arrays())
    arrays["run/meta"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> tuple[RunState, TrainConfig | None]:
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    with data:
        meta = json.loads(str(data["run/meta"]))
        model = model_from_arrays(data)
        store = PrototypeStore.from_arrays(data)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    schedule = TaskSchedule(
        fg=meta["fg"],
        pg=meta["pg"],
        partitions=tuple(tuple(p) for p in meta["partitions"]),
        allow_ragged_tail=meta["allow_ragged_tail"],
    )
    state = RunState(
        model=model,
        schedule=schedule,
        label_set=LabelSet(tuple(meta["labels"])),
        rng=rng,
        store=store,
        task_id=meta["task_id"],
        reports=[StepReport.from_dict(r) for r in meta["reports"]],
    )
    cfg = TrainConfig.from_dict(meta["config"]) if meta["config"] else None
    return state, cfg
