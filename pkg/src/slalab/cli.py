"""Command line entry point: ``slalab <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime or training error,
3 sweep results outside the committed expected values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .data import DomainSpec, export_task, generate_task, import_task
from .nnet import load_model, save_model
from .sla import CenterSource, ProtoState
from .trainer import (MODES, RunRecord, TrainConfig, config_for_mode, train,
                      train_ideally_adapted, train_oracle)

EXIT_USAGE, EXIT_RUNTIME, EXIT_MISMATCH = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(rows, out, fieldnames=None):
    text = analysis.rows_to_csv(rows, fieldnames)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"no such file: {path}") from exc


def ppc_to_dict(ppc: ProtoState) -> dict:
    return {"centers": ppc.centers.tolist(), "temperature": ppc.temperature,
            "source": ppc.source.value, "built_at_step": ppc.built_at_step}


def ppc_from_dict(d: dict) -> ProtoState:
    return ProtoState(np.asarray(d["centers"], dtype=np.float64), float(d["temperature"]),
                      CenterSource(d["source"]), int(d["built_at_step"]))


# -- commands ------------------------------------------------------------------

def cmd_gen_task(args):
    spec = DomainSpec.from_dict(_read_json(args.spec)) if args.spec else DomainSpec()
    task = generate_task(spec, args.n_shot, args.seed)
    export_task(task, args.out)
    print(f"wrote {args.out}: |S|={len(task.source_y)} |L|={len(task.labeled_y)} "
          f"|U|={len(task.unlabeled_x)} |test|={len(task.test_y)}")


def _train_config(args) -> TrainConfig:
    kw = _read_json(args.config) if args.config else {}
    flag_map = {"alpha": args.alpha, "temperature": args.temp, "update_interval": args.interval,
                "warmup": args.warmup, "total_iters": args.iters, "seed": args.seed,
                "entropy_weight": args.entropy_weight, "base_lr": args.lr}
    kw.update({k: v for k, v in flag_map.items() if v is not None})
    try:
        return config_for_mode(args.mode, **kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training settings: {exc}") from exc


def _write_run(rec: RunRecord, out: Path, cfg: TrainConfig, task, extra: dict):
    out.mkdir(parents=True, exist_ok=True)
    K = task.n_classes
    _emit(rec.metrics, out / "metrics.csv", RunRecord.METRIC_FIELDS)
    _emit([{"step": int(s), "kl": r, "kl_ema": e} for s, r, e in analysis.kl_trace(rec)],
          out / "kl.csv")
    ref_fields = ["step"] + [f"count_{k}" for k in range(K)] + ["displacement"]
    if cfg.eval_ppc_as_classifier:
        ref_fields.append("ppc_test_acc")
    ref_rows = []
    for ev in rec.refresh_events:
        row = {"step": ev["step"], "displacement": ev["displacement"]}
        row.update({f"count_{k}": c for k, c in enumerate(ev["counts"])})
        if "ppc_test_acc" in ev:
            row["ppc_test_acc"] = ev["ppc_test_acc"]
        ref_rows.append(row)
    _emit(ref_rows, out / "refresh.csv", ref_fields)
    save_model(rec.model, out / "model.json", cfg.config_hash())
    if rec.ppc is not None:
        (out / "ppc.json").write_text(json.dumps(ppc_to_dict(rec.ppc)))
    summary = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(),
               "mode": extra.pop("mode"), "final": rec.final, "checkpoint": "model.json",
               "wall_clock": rec.wall_clock, "audit_accesses": rec.audit_accesses}
    summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def cmd_train(args):
    task = import_task(args.task)
    cfg = _train_config(args)
    out = Path(args.out)
    extra = {"mode": args.mode}
    if args.mode == "ideal":
        oracle = train_oracle(task, cfg)
        out.mkdir(parents=True, exist_ok=True)
        save_model(oracle, out / "oracle.json", cfg.config_hash())
        rec = train_ideally_adapted(task, cfg, oracle)
        extra["oracle"] = "oracle.json"
    else:
        rec = train(task, cfg)
    _write_run(rec, out, cfg, task, extra)
    print(f"{args.mode}: test_acc={rec.final['test_acc']:.4f} val_acc={rec.final['val_acc']:.4f}")


def _split(task, name):
    if name == "test":
        return task.test_x, task.test_y
    if name == "val":
        return task.val_x, task.val_y
    if name == "labeled":
        return task.labeled_x, task.labeled_y
    return task.source_x, task.source_y


def cmd_evaluate(args):
    task = import_task(args.task)
    model = load_model(args.model)
    acc, cm = analysis.evaluate(model, *_split(task, args.split))
    _emit(cm.rows(), args.out)
    print(f"accuracy={acc:.4f} worst_class={cm.worst_row()}", file=sys.stderr)


def cmd_audit_centers(args):
    task = import_task(args.task)
    audit = analysis.center_audit(load_model(args.model), task)
    _emit(audit.rows(), args.out)


def cmd_kl_trace(args):
    run_dir = Path(args.run)
    kl_file = run_dir / "kl.csv"
    if not kl_file.exists():
        raise UsageError(f"{run_dir} has no kl.csv")
    with kl_file.open(newline="") as fh:
        raw = [float(r["kl"]) for r in analysis.csv.DictReader(fh)]
    rows = [{"step": int(s), "kl": r, "kl_ema": e}
            for s, r, e in analysis.kl_trace(raw, args.ratio)]
    _emit(rows, args.out)


def cmd_label_summary(args):
    task = import_task(args.task)
    run_dir = Path(args.run)
    summary = _read_json(run_dir / "summary.json")
    if not (run_dir / "ppc.json").exists():
        raise UsageError(f"{run_dir} has no PPC snapshot; train with --mode sla or sla+ent")
    model = load_model(run_dir / "model.json")
    ppc = ppc_from_dict(_read_json(run_dir / "ppc.json"))
    cfg = TrainConfig.from_dict(summary["config"])
    oracle = load_model(args.oracle) if args.oracle else train_oracle(task, cfg)
    alpha = cfg.sla.alpha if args.alpha is None else args.alpha
    summ = analysis.adapted_label_summary(model, task, ppc, oracle, alpha)
    _emit(summ.rows(), args.out)
    print(f"fraction of classes closer to ideal than one-hot: {summ.fraction_closer():.2f}",
          file=sys.stderr)


def cmd_sweep(args):
    grid = _read_json(args.grid)
    spec, n_shot, seeds, entries, base = analysis.load_grid(grid)
    runs, summary, _ = analysis.sweep(entries, seeds, spec, n_shot, base)
    _emit(summary, args.out, list(analysis.SUMMARY_SCHEMA))
    if args.runs_out:
        _emit(runs, args.runs_out, ["config", "mode", "seed", "status", "val_acc", "test_acc"])
    if args.check_expected:
        doc = _read_json(args.check_expected)
        key = args.key or grid.get("expected_key")
        if key not in doc:
            raise UsageError(f"expected-results file has no entry {key!r}")
        bad = analysis.check_expected(summary, doc[key])
        for name, got, want in bad:
            print(f"MISMATCH {name}: got {got:.4f}, expected {want:.4f}", file=sys.stderr)
        if bad:
            return EXIT_MISMATCH
        print(f"all {len(doc[key]['config_means'])} configs within tolerance", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slalab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-task", help="sample a synthetic SSDA task")
    g.add_argument("--spec", help="JSON file with domain settings (default: built-in)")
    g.add_argument("--n-shot", type=int, choices=(1, 3), default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_task)

    t = sub.add_parser("train", help="train one model and write CSV/JSON artifacts")
    t.add_argument("--task", required=True, help="task file written by gen-task")
    t.add_argument("--mode", choices=MODES, default="st")
    t.add_argument("--alpha", type=float, help="label mixing weight (default 0.3)")
    t.add_argument("--temp", type=float, help="protonet temperature (default 0.6)")
    t.add_argument("--interval", type=int, help="steps between center refreshes")
    t.add_argument("--warmup", type=int, help="plain S+T steps before adaptation")
    t.add_argument("--iters", type=int, help="total training steps")
    t.add_argument("--seed", type=int)
    t.add_argument("--entropy-weight", type=float, help="ENT plugin weight (default 0.1)")
    t.add_argument("--lr", type=float, help="base learning rate (default 0.01)")
    t.add_argument("--config", help="JSON file with further training settings")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="accuracy and confusion matrix")
    e.add_argument("--task", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--split", choices=("test", "val", "labeled", "source"), default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("audit-centers", help="ideal vs labeled/pseudo center distances")
    a.add_argument("--task", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_audit_centers)

    k = sub.add_parser("kl-trace", help="EMA-smoothed KL trace of a run")
    k.add_argument("--run", required=True, help="run directory written by train")
    k.add_argument("--ratio", type=float, default=analysis.KL_EMA_RATIO)
    k.add_argument("--out")
    k.set_defaults(func=cmd_kl_trace)

    ls = sub.add_parser("label-summary", help="top-3 of mean adapted source labels")
    ls.add_argument("--task", required=True)
    ls.add_argument("--run", required=True)
    ls.add_argument("--oracle", help="oracle checkpoint (trained on the fly if omitted)")
    ls.add_argument("--alpha", type=float)
    ls.add_argument("--out")
    ls.set_defaults(func=cmd_label_summary)

    s = sub.add_parser("sweep", help="run a config x seed grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", help="summary CSV (stdout if omitted)")
    s.add_argument("--runs-out", help="per-run CSV")
    s.add_argument("--check-expected", help="expected-results JSON to compare against")
    s.add_argument("--key", help="entry in the expected-results file")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(f"slalab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"slalab: error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"slalab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
