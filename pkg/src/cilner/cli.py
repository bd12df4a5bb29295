"""Command-line front end: run / gen / eval / report.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Set ``CILNER_LOG_LEVEL`` (e.g. ``DEBUG``) for logs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import CilnerError, ConfigError, DataError
from .metrics import StepReport, confusion_csv, curves_csv, shift_csv
from .schema import build_schedule, load_conll, save_conll
from .synthgen import SynthSpec, generate
from .trainer import TrainConfig, evaluate, load_checkpoint, run_experiment, save_checkpoint

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("cilner")

RUN_KEYS = {"fg", "pg", "allow_ragged_tail", "corpus", "test_corpus", "multi_seed"}
SYNTH_PREFIX = "synth_"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def resolve_config(path: str) -> Path:
    """A filesystem path, or the name of a bundled config such as ``is3.toml``."""
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("cilner") / "configs" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise DataError(f"config not found: {path}")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = resolve_config(path)
    try:
        with open(p, "rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None


def split_config(raw: dict) -> tuple[dict, dict, dict]:
    """Separate a flat key set into (train config, run keys, synthetic spec keys)."""
    train, run, synth = {}, {}, {}
    train_keys = {f.name for f in fields(TrainConfig)} - {"hp"} | {"delta", "alpha", "beta", "kd_temperature"}
    synth_keys = {f.name for f in fields(SynthSpec)}
    for k, v in raw.items():
        if k in RUN_KEYS:
            run[k] = v
        elif k.startswith(SYNTH_PREFIX) and k[len(SYNTH_PREFIX):] in synth_keys:
            synth[k[len(SYNTH_PREFIX):]] = v
        elif k in train_keys:
            train[k] = v
        else:
            raise ConfigError(f"unknown config key {k!r}")
    return train, run, synth


def _overrides(args) -> dict:
    out = {}
    for key in ("method", "fg", "pg", "delta", "alpha", "beta", "seed", "corpus", "test_corpus"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    if getattr(args, "multi_seed", None):
        try:
            out["multi_seed"] = [int(s) for s in args.multi_seed.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--multi_seed expects comma-separated integers, got {args.multi_seed!r}") from None
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_value(v.strip())
    return out


def _load_data(run: dict, synth: dict):
    if "corpus" in run:
        train, ls = load_conll(run["corpus"])
        if "test_corpus" not in run:
            raise ConfigError("test_corpus is required when corpus is given")
        test, _ = load_conll(run["test_corpus"], ls)
        return train, test, ls
    try:
        spec = SynthSpec(**synth)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return generate(spec)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def cmd_run(args) -> int:
    raw = load_config(args.config)
    raw.update(_overrides(args))
    train_kw, run, synth = split_config(raw)
    base = TrainConfig.from_dict(train_kw)
    train, test, ls = _load_data(run, synth)
    schedule = build_schedule(ls, int(run.get("fg", 1)), int(run.get("pg", 1)), bool(run.get("allow_ragged_tail", False)))
    seeds = run.get("multi_seed") or [base.seed]
    out = Path(args.out)
    finals, avgs = [], []
    for seed in seeds:
        cfg = TrainConfig.from_dict({**base.to_dict(), "seed": int(seed)})
        res = run_experiment(train, test, ls, schedule, cfg)
        tag = f"{cfg.method}_seed{seed}"
        doc = {
            "method": cfg.method,
            "seed": int(seed),
            "config": cfg.to_dict(),
            "schedule": [list(p) for p in schedule.partitions],
            "final_macro_f1": res.final_macro_f1,
            "average_macro_f1": res.average_macro_f1,
            "steps": [json.loads(r.to_json()) for r in res.reports],
        }
        _write(out / "reports" / f"{tag}.json", _dumps(doc))
        for r in res.reports:
            _write(out / "confusion" / f"{tag}_step{r.task_id}.csv", confusion_csv(r))
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoints" / f"{tag}.npz", res.state, cfg)
        finals.append(res.final_macro_f1)
        avgs.append(res.average_macro_f1)
        print(f"{tag}: A_T={res.final_macro_f1:.4f} A_bar={res.average_macro_f1:.4f}")
    agg = {
        "method": base.method,
        "seeds": [int(s) for s in seeds],
        "final_macro_f1_mean": float(np.mean(finals)),
        "final_macro_f1_std": float(np.std(finals)),
        "average_macro_f1_mean": float(np.mean(avgs)),
        "average_macro_f1_std": float(np.std(avgs)),
    }
    _write(out / f"aggregate_{base.method}.json", _dumps(agg))
    print(
        f"{base.method}: A_T {agg['final_macro_f1_mean']:.4f} ± {agg['final_macro_f1_std']:.4f}, "
        f"A_bar {agg['average_macro_f1_mean']:.4f} ± {agg['average_macro_f1_std']:.4f}"
    )
    return 0


def cmd_gen(args) -> int:
    raw = load_config(args.config)
    raw.update(_overrides(args))
    _, _, synth = split_config(raw)
    try:
        spec = SynthSpec(**synth)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    train, test, ls = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_conll(out / "train.conll", train, ls)
    save_conll(out / "test.conll", test, ls)
    _write(out / "synth_spec.json", _dumps(spec.to_dict()))
    print(f"wrote {len(train)} train / {len(test)} test sequences to {out}")
    return 0


def cmd_eval(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    if state.task_id < 1:
        raise DataError(f"{args.checkpoint} holds an untrained model")
    test, _ = load_conll(args.corpus, state.label_set)
    method = cfg.method if cfg else ""
    seed = cfg.seed if cfg else 0
    rep = evaluate(state.model, test, state.schedule, state.label_set, state.task_id, method, seed)
    out = Path(args.out)
    _write(out / f"eval_step{rep.task_id}.json", rep.to_json())
    _write(out / f"eval_step{rep.task_id}_confusion.csv", confusion_csv(rep))
    print(f"task {rep.task_id}: macro F1 {rep.macro_f1:.4f} (e2o={rep.e2o_count}, o2e={rep.o2e_count})")
    return 0


def read_reports(report_dir: Path) -> dict[str, list[StepReport]]:
    series: dict[str, list[StepReport]] = {}
    files = sorted(p for p in report_dir.rglob("*.json") if not p.name.startswith("aggregate_"))
    for p in files:
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise DataError(f"{p}: malformed JSON ({exc})") from None
        steps = doc.get("steps") if isinstance(doc, dict) else None
        if steps is None:
            if isinstance(doc, dict) and "task_id" in doc:
                steps = [doc]
            else:
                continue
        for s in steps:
            rep = StepReport.from_dict(s)
            series.setdefault(rep.method or doc.get("method", "unknown"), []).append(rep)
    return series


def cmd_report(args) -> int:
    d = Path(args.report_dir)
    if not d.is_dir():
        raise DataError(f"report directory not found: {d}")
    series = read_reports(d)
    if not series:
        raise DataError(f"no step reports under {d}")
    out = Path(args.out) if args.out else d
    _write(out / "curves.csv", curves_csv(series))
    _write(out / "shifts.csv", shift_csv(series))
    for m, reps in sorted(series.items()):
        _write(out / f"curve_{m}.csv", curves_csv({m: reps}))
    print(f"{sum(map(len, series.values()))} step reports, methods: {', '.join(sorted(series))}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cilner", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML config file (or bundled name, e.g. is3.toml)")
        sp.add_argument("--out", default="runs", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    r = sub.add_parser("run", help="run an incremental experiment")
    common(r)
    r.add_argument("--corpus", help="training CoNLL file")
    r.add_argument("--test_corpus", help="test CoNLL file")
    r.add_argument("--method")
    r.add_argument("--fg", type=int)
    r.add_argument("--pg", type=int)
    r.add_argument("--delta", type=float)
    r.add_argument("--alpha", type=float)
    r.add_argument("--beta", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--multi_seed", help="comma-separated seeds, e.g. 1,2,3")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen", help="write a synthetic corpus as CoNLL")
    common(g)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("eval", help="evaluate a run checkpoint on a CoNLL test file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="step-wise CSVs from a directory of reports")
    rp.add_argument("report_dir")
    rp.add_argument("--out", help="output directory (defaults to report_dir)")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("CILNER_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CilnerError as exc:
        print(f"cilner: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError) as exc:
        print(f"cilner: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
