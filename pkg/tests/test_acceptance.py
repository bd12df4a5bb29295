"""Acceptance suite. Each test emits one PASS/FAIL line, collected in the terminal summary."""

import time
from functools import lru_cache

import numpy as np
import pytest

import cilner.optim
from cilner.cli import load_config, split_config
from cilner.losses import (
    ClassPartition,
    HyperParams,
    ce_grad,
    ce_loss,
    debiased_ce_grad,
    debiased_ce_loss,
    kd_batch,
    prototype_loss_and_grad,
)
from cilner.model import expand_classifier, snapshot, TaggerModel
from cilner.schema import build_schedule, format_conll, parse_conll
from cilner.synthgen import SynthSpec, generate
from cilner.trainer import (
    TrainConfig,
    batch_loss,
    continue_experiment,
    load_checkpoint,
    run_experiment,
    save_checkpoint,
)

from conftest import ACCEPTANCE_LINES, central_diff, rel_err

SEEDS = (0, 1, 2)
DELTAS = (0.0, 0.25, 0.5, 0.75, 1.0)
H = 1e-4
FD_TOL = 1e-4
N_INSTANCES = 100


def report(num: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {num:>2}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


# bundled synthetic stream ------------------------------------------------

@lru_cache(maxsize=None)
def bundled():
    train_kw, run, synth = split_config(load_config("is3.toml"))
    train, test, ls = generate(SynthSpec(**synth))
    schedule = build_schedule(ls, run["fg"], run["pg"])
    return train_kw, train, test, ls, schedule


@lru_cache(maxsize=None)
def experiment(method: str, seed: int, delta: float | None = None):
    train_kw, train, test, ls, schedule = bundled()
    kw = {**train_kw, "method": method, "seed": seed}
    if delta is not None:
        kw["delta"] = delta
    t0 = time.perf_counter()
    res = run_experiment(train, test, ls, schedule, TrainConfig.from_dict(kw))
    return res, time.perf_counter() - t0


def final_f1(method, seed, delta=None):
    return experiment(method, seed, delta)[0].final_macro_f1


# 1 ------------------------------------------------------------------------

def _fd_check(loss_fn, grad, x):
    return rel_err(grad, central_diff(loss_fn, x, H), floor=1e-7)


def test_c01_gradient_oracle():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(N_INSTANCES):
        n_old, n_new = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        part = ClassPartition.from_counts(n_old, n_new)
        c = part.num_classes
        z = rng.normal(0, 2, size=c)
        t = int(rng.choice([0, *part.new]))
        note("ce", _fd_check(lambda: ce_loss(z, t), ce_grad(z, t), z))
        for d in (0.0, 0.3, 0.7, 1.0):
            g = debiased_ce_grad(z, t, part, d)
            note(f"debiased d={d}", _fd_check(lambda: debiased_ce_loss(z, t, part, d), g, z))

        n, c_old = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        p = rng.dirichlet(np.ones(c_old), size=n)
        zn = rng.normal(0, 2, size=(n, c_old + int(rng.integers(0, 3))))
        temp = float(rng.choice([1.0, 2.0]))
        _, g = kd_batch(p, zn, temp)
        note("kd", _fd_check(lambda: kd_batch(p, zn, temp)[0].sum(), g, zn))

        d_feat, c = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        W, b = rng.normal(size=(d_feat, c)), rng.normal(size=c)
        protos = [(int(k), rng.normal(size=d_feat)) for k in rng.choice(c, size=min(c, 3), replace=False)]
        _, dW, db = prototype_loss_and_grad(protos, W, b)
        f = lambda: prototype_loss_and_grad(protos, W, b)[0]
        note("prototype", max(_fd_check(f, dW, W), _fd_check(f, db, b)))

    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < FD_TOL and elapsed < 10.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"{N_INSTANCES} instances/loss, worst rel err [{detail}], {elapsed:.2f}s")
    assert ok


# 2 ------------------------------------------------------------------------

def _trajectory(method, hp, monkeypatch):
    _, train, test, ls, schedule = bundled()
    seen = []
    orig = cilner.optim.Optimizer.step

    def recording(self, params, grads):
        orig(self, params, grads)
        seen.append({k: v.copy() for k, v in params.items()})

    monkeypatch.setattr(cilner.optim.Optimizer, "step", recording)
    cfg = TrainConfig(method=method, hp=hp, seed=3, epochs_per_task=3, lr_backbone=0.5, lr_classifier=0.5)
    run_experiment(train, test, ls, schedule, cfg)
    monkeypatch.undo()
    return seen


def test_c02_degeneration(monkeypatch):
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(1000):
        n_old, n_new = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        part = ClassPartition.from_counts(n_old, n_new)
        z = rng.normal(0, 5, size=part.num_classes)
        t = int(rng.choice([0, *part.new]))
        worst = max(worst, abs(debiased_ce_loss(z, t, part, 1.0) - ce_loss(z, t)))

    ft = _trajectory("ft", HyperParams(), monkeypatch)
    off = _trajectory("is3", HyperParams(delta=1.0, alpha=0.0, beta=0.0), monkeypatch)
    same = len(ft) == len(off) and all(
        a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a) for a, b in zip(ft, off)
    )
    ok = worst <= 1e-12 and same
    report(2, ok, f"max |debiased(δ=1) - CE| = {worst:.1e} over 1000 vectors; FT vs IS3(α=β=0) identical over {len(ft)} steps: {same}")
    assert ok


# 3 ------------------------------------------------------------------------

def test_c03_gradient_ratio():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(1000):
        n_old, n_new = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        part = ClassPartition.from_counts(n_old, n_new)
        z = rng.normal(0, 3, size=part.num_classes)
        t = 0
        a, b = rng.choice(part.new, size=2, replace=False)
        for g in (ce_grad(z, t), debiased_ce_grad(z, t, part, float(rng.uniform()))):
            worst = max(worst, rel_err(g[a] / g[b], np.exp(z[a] - z[b]), floor=1e-300))
        g = ce_grad(z, t)
        o = part.old[0]
        worst = max(worst, rel_err(g[o] / g[a], np.exp(z[o] - z[a]), floor=1e-300))
    ok = worst <= 1e-9
    report(3, ok, f"non-target gradient ratio vs exp(Φa-Φb), worst rel err {worst:.1e}")
    assert ok


# 4 ------------------------------------------------------------------------

def test_c04_delta_zero_isolation():
    _, train, _, _, _ = bundled()
    rng = np.random.default_rng(404)
    worst = 0.0
    for seed in range(20):
        m = TaggerModel.create({t for s in train for t in s.tokens}, emb_dim=6, hidden_dim=8, window=1, seed=seed)
        m = expand_classifier(m, 3, seed)
        old = snapshot(m)
        m = expand_classifier(m, 2, seed + 100)
        part = ClassPartition.from_counts(3, 2)
        seqs = [train[i].tokens for i in rng.choice(len(train), 3, replace=False)]
        batch = m.make_batch(seqs)
        targets = rng.choice(part.new, size=len(batch.windows))
        probs = np.exp(old.run(batch) - old.run(batch).max(1, keepdims=True))
        probs /= probs.sum(1, keepdims=True)
        lb = batch_loss(m, batch, targets, part, HyperParams(delta=0.0, alpha=0.0, beta=0.0), probs)
        cols = list(part.old)
        worst = max(worst, float(np.abs(lb.grads["cls_W"][:, cols]).max()), float(np.abs(lb.grads["cls_b"][cols]).max()))
    ok = worst == 0.0
    report(4, ok, f"δ=0, new-only targets: max |CE grad| on old classifier weights = {worst!r}")
    assert ok


# 5 ------------------------------------------------------------------------

def test_c05_forgetting():
    _, _, _, _, schedule = bundled()
    first = schedule.new_classes(1)
    rows = []
    for s in SEEDS:
        res, secs = experiment("ft", s)
        during = res.reports[0].macro_f1
        after = float(np.mean([res.reports[-1].f1[c] for c in first]))
        rows.append((during, after, secs))
    ok = all(d >= 0.95 and a <= 0.10 and secs < 120 for d, a, secs in rows)
    detail = "; ".join(f"seed {s}: task-1 F1 {d:.3f} -> final {a:.3f} ({secs:.1f}s)" for s, (d, a, secs) in zip(SEEDS, rows))
    report(5, ok, f"FT forgetting: {detail}")
    assert ok


# 6 ------------------------------------------------------------------------

def test_c06_method_ordering():
    m = {k: float(np.mean([final_f1(k, s) for s in SEEDS])) for k in ("is3", "kd_only", "ft")}
    ok = m["is3"] - m["kd_only"] >= 0.05 and m["kd_only"] - m["ft"] >= 0.05
    report(6, ok, f"mean A_T is3 {m['is3']:.3f} > kd_only {m['kd_only']:.3f} > ft {m['ft']:.3f} (gaps >= 0.05)")
    assert ok


# 7 ------------------------------------------------------------------------

def test_c07_ablation_structure():
    wins, rows = 0, []
    for s in SEEDS:
        full = final_f1("is3", s)
        drop_pro = full - final_f1("no_pro", s)
        drop_deb = full - final_f1("no_debias", s)
        wins += drop_pro > drop_deb
        rows.append(f"seed {s}: drop w/o pro {drop_pro:+.3f}, w/o debias {drop_deb:+.3f}")
    ok = wins >= 2
    report(7, ok, f"prototype removal hurts more in {wins}/3 seeds ({'; '.join(rows)})")
    assert ok


# 8 ------------------------------------------------------------------------

def test_c08_shift_reduction():
    rows = []
    for s in SEEDS:
        shifts = []
        for m in ("is3", "ft"):
            r = experiment(m, s)[0].reports[-1]
            shifts.append(r.e2o_count + r.o2e_count)
        rows.append(shifts)
    ok = all(a < b for a, b in rows)
    report(8, ok, "final e2o+o2e is3 vs ft: " + ", ".join(f"{a} < {b}" for a, b in rows))
    assert ok


# 9 ------------------------------------------------------------------------

def test_c09_delta_sweep():
    means = [float(np.mean([final_f1("is3", s, d) for s in SEEDS])) for d in DELTAS]
    best = int(np.argmax(means))
    ok = 0 < best < len(DELTAS) - 1
    curve = ", ".join(f"δ={d}: {v:.4f}" for d, v in zip(DELTAS, means))
    report(9, ok, f"argmax δ = {DELTAS[best]} ({curve})")
    assert ok


# 10 -----------------------------------------------------------------------

def test_c10_determinism_and_round_trip(tmp_path):
    _, train, test, ls, schedule = bundled()
    cfg = TrainConfig(seed=5, epochs_per_task=4, lr_backbone=0.5, lr_classifier=0.5)
    a = run_experiment(train, test, ls, schedule, cfg)
    b = run_experiment(train, test, ls, schedule, cfg)
    same_reports = [r.to_json() for r in a.reports] == [r.to_json() for r in b.reports]

    half = run_experiment(train, test, ls, schedule, cfg, until_task=1)
    save_checkpoint(tmp_path / "ck.npz", half.state, cfg)
    state, cfg2 = load_checkpoint(tmp_path / "ck.npz")
    resumed = continue_experiment(state, train, test, cfg2)
    same_resume = all(
        np.array_equal(a.state.model.params[k], resumed.state.model.params[k]) for k in a.state.model.params
    ) and [r.to_json() for r in a.reports] == [r.to_json() for r in resumed.reports]

    text = format_conll(train + test, ls)
    parsed = parse_conll(text)
    same_conll = parsed == [([*s.tokens], [ls.name(y) for y in s.full_labels]) for s in train + test]

    ok = same_reports and same_resume and same_conll
    report(10, ok, f"byte-identical reports {same_reports}, bit-identical resume {same_resume}, lossless CoNLL {same_conll}")
    assert ok
