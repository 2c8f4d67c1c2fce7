"""Post-hoc diagnostics over trained models and run records.

Confusion matrices, center-distance audits, KL traces, adapted-label
summaries and the config x seed sweep driver. Results are plain dataclasses
and lists of dict rows that go straight to CSV.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import DomainSpec, SsdaTask, generate_task
from .mathcore import ema_smooth, one_hot
from .nnet import Model, forward, forward_features, predict
from .sla import ProtoState, adapt_label, compute_centers, labeled_centers, protonet_predict
from .trainer import (RunRecord, TrainConfig, accuracy, config_for_mode, train, train_oracle,
                      train_ideally_adapted)

KL_EMA_RATIO = 0.8


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    def percent(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return 100.0 * self.counts / np.maximum(rows, 1)

    def worst_row(self) -> int:
        """True class with the lowest per-class recall."""
        return int(np.argmin(np.diag(self.percent())))

    def rows(self) -> list:
        pct = self.percent()
        worst = self.worst_row()
        out = []
        for k in range(len(self.counts)):
            row = {"true_class": k, "worst": int(k == worst)}
            for j in range(len(self.counts)):
                row[f"pred_{j}"] = int(self.counts[k, j])
            for j in range(len(self.counts)):
                row[f"pct_{j}"] = float(pct[k, j])
            out.append(row)
        return out


def confusion_matrix(y_true, y_pred, K: int) -> ConfusionMatrix:
    counts = np.zeros((K, K), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return ConfusionMatrix(counts)


def evaluate(model: Model, x, y):
    """Accuracy and confusion matrix of ``model`` on a labeled set."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(model, x)
    cm = confusion_matrix(y, pred, model.n_classes)
    return float(np.mean(pred == y)), cm


@dataclass
class CenterAudit:
    labeled_dist: np.ndarray  # per class, ideal -> labeled-target center
    pseudo_dist: np.ndarray   # per class, ideal -> pseudo center

    @property
    def mean_labeled(self) -> float:
        return float(self.labeled_dist.mean())

    @property
    def mean_pseudo(self) -> float:
        return float(self.pseudo_dist.mean())

    def rows(self) -> list:
        out = [{"class": k, "ideal_to_labeled": float(a), "ideal_to_pseudo": float(b)}
               for k, (a, b) in enumerate(zip(self.labeled_dist, self.pseudo_dist))]
        out.append({"class": "mean", "ideal_to_labeled": self.mean_labeled,
                    "ideal_to_pseudo": self.mean_pseudo})
        return out


def center_audit(model: Model, task: SsdaTask) -> CenterAudit:
    """Distances from ideal centers (true-labeled U) to labeled-target and
    pseudo centers, all in the model's current feature space."""
    K = task.n_classes
    feats = forward_features(model, task.unlabeled_x)
    ideal = compute_centers(feats, task.audit_labels("center_audit"), K)
    lab = labeled_centers(model, task.labeled_x, task.labeled_y, 1.0).centers
    pseudo = compute_centers(feats, predict(model, task.unlabeled_x), K, fallback=lab)
    return CenterAudit(np.linalg.norm(ideal - lab, axis=1), np.linalg.norm(ideal - pseudo, axis=1))


def kl_trace(run, ratio: float = KL_EMA_RATIO) -> np.ndarray:
    """Rows of ``(step, raw KL, smoothed KL)``; accepts a RunRecord or a series."""
    raw = run.kl if isinstance(run, RunRecord) else run
    if raw is None or len(raw) == 0:
        raise ValueError("run has no KL trace")
    raw = np.asarray(raw, dtype=np.float64)
    return np.column_stack([np.arange(1, len(raw) + 1), raw, ema_smooth(raw, ratio)])


@dataclass
class ClassLabelSummary:
    source_class: int
    mean_adapted: np.ndarray
    mean_ideal: np.ndarray

    @staticmethod
    def _top3(p):
        idx = np.argsort(-p, kind="stable")[:3]
        return [(int(i), float(p[i])) for i in idx]

    @property
    def top3(self):
        return self._top3(self.mean_adapted)

    @property
    def ideal_top3(self):
        return self._top3(self.mean_ideal)

    @property
    def l1_adapted_to_ideal(self) -> float:
        return float(np.abs(self.mean_adapted - self.mean_ideal).sum())

    @property
    def l1_onehot_to_ideal(self) -> float:
        e = np.zeros_like(self.mean_ideal)
        e[self.source_class] = 1.0
        return float(np.abs(e - self.mean_ideal).sum())

    @property
    def closer_than_onehot(self) -> bool:
        return self.l1_adapted_to_ideal < self.l1_onehot_to_ideal


@dataclass
class AdaptedLabelSummary:
    classes: list
    alpha: float

    def fraction_closer(self) -> float:
        return float(np.mean([c.closer_than_onehot for c in self.classes]))

    def rows(self) -> list:
        out = []
        for c in self.classes:
            row = {"source_class": c.source_class}
            for r, (k, p) in enumerate(c.top3, 1):
                row[f"top{r}_class"], row[f"top{r}_prob"] = k, p
            for r, (k, p) in enumerate(c.ideal_top3, 1):
                row[f"ideal_top{r}_class"], row[f"ideal_top{r}_prob"] = k, p
            row["l1_adapted_to_ideal"] = c.l1_adapted_to_ideal
            row["l1_onehot_to_ideal"] = c.l1_onehot_to_ideal
            out.append(row)
        return out


def adapted_label_summary(model: Model, task: SsdaTask, ppc: ProtoState, oracle: Model,
                          alpha: float) -> AdaptedLabelSummary:
    """Per source class, the mean PPC-adapted label next to the mean label
    obtained by mixing in the oracle's predictions at the same ``alpha``."""
    K = task.n_classes
    Y = one_hot(task.source_y, K)
    adapted = adapt_label(Y, protonet_predict(ppc, forward_features(model, task.source_x)), alpha)
    ideal = adapt_label(Y, forward(oracle, task.source_x), alpha)
    classes = []
    for k in range(K):
        m = task.source_y == k
        classes.append(ClassLabelSummary(k, adapted[m].mean(axis=0), ideal[m].mean(axis=0)))
    return AdaptedLabelSummary(classes, alpha)


# -- CSV -----------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows: list, fieldnames=None) -> str:
    """Render dict rows as CSV text; floats use shortest round-trip repr."""
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            fieldnames.extend(k for k in r if k not in fieldnames)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    # the writer only quotes "\n"; a bare "\r" would split the row on read
    wq = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n", quoting=csv.QUOTE_ALL)
    w.writeheader()
    for r in rows:
        out = {k: _fmt(r[k]) if k in r else "" for k in fieldnames}
        if any("\0" in v for v in out.values()):
            raise ValueError("CSV fields cannot contain NUL characters")
        (wq if any("\r" in v for v in out.values()) else w).writerow(out)
    return buf.getvalue()


def write_csv(rows: list, path, fieldnames=None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv(rows, fieldnames))


SUMMARY_SCHEMA = {
    "config": str, "mode": str, "n_runs": int, "n_failed": int,
    "val_mean": float, "val_std": float, "test_mean": float, "test_std": float,
    "selected": int, "checkpoint": str,
}


def parse_summary_csv(text: str) -> list:
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        rows.append({k: SUMMARY_SCHEMA[k](v) for k, v in raw.items()})
    return rows


# -- sweeps --------------------------------------------------------------------

@dataclass
class GridEntry:
    name: str
    mode: str
    overrides: dict

    def train_config(self, seed: int, base: dict) -> TrainConfig:
        kw = dict(base)
        kw.update(self.overrides)
        kw["seed"] = seed
        return config_for_mode(self.mode, **kw)


def load_grid(doc: dict):
    """Parse a grid document into ``(spec, n_shot, seeds, entries, base)``."""
    spec = DomainSpec.from_dict(doc.get("spec", {}))
    seeds = [int(s) for s in doc.get("task_seeds", [0])]
    base = dict(doc.get("base", {}))
    entries = []
    for i, c in enumerate(doc["configs"]):
        c = dict(c)
        name = c.pop("name", f"cfg{i}")
        mode = c.pop("mode", base.get("mode", "st"))
        entries.append(GridEntry(name, mode, c))
    base.pop("mode", None)
    return spec, int(doc.get("n_shot", 3)), seeds, entries, base


def sweep(entries: list, seeds: list, spec: DomainSpec | None = None, n_shot: int = 3,
          base: dict | None = None, tasks: dict | None = None):
    """Train every entry on every task seed.

    Selection looks at validation accuracy only; test accuracy is computed
    after the selection is fixed. Returns ``(run_rows, summary_rows, log)``
    where ``log`` lists ``(phase, ...)`` events in the order they happened.
    """
    spec = spec or DomainSpec()
    base = dict(base or {})
    base["track_test"] = False
    tasks = dict(tasks or {})
    log, runs = [], []
    for seed in seeds:
        if seed not in tasks:
            tasks[seed] = generate_task(spec, n_shot, seed)
    for ent in entries:
        for seed in seeds:
            task = tasks[seed]
            row = {"config": ent.name, "mode": ent.mode, "seed": seed}
            try:
                cfg = ent.train_config(seed, base)
                if ent.mode == "ideal":
                    rec = train_ideally_adapted(task, cfg, train_oracle(task, cfg))
                else:
                    rec = train(task, cfg)
                row.update(status="ok", val_acc=accuracy(rec.model, task.val_x, task.val_y),
                           model=rec.model)
                log.append(("val", ent.name, seed))
            except Exception as exc:  # a failed run must not stop the sweep
                row.update(status=f"error: {type(exc).__name__}: {exc}", val_acc=float("nan"),
                           model=None)
            runs.append(row)

    def _stats(vals):
        vals = [v for v in vals if np.isfinite(v)]
        if not vals:
            return float("nan"), float("nan")
        return float(np.mean(vals)), float(np.std(vals))

    val_means = {e.name: _stats([r["val_acc"] for r in runs if r["config"] == e.name])[0]
                 for e in entries}
    finite = {k: v for k, v in val_means.items() if np.isfinite(v)}
    best = max(finite, key=lambda k: (finite[k], -list(finite).index(k))) if finite else ""
    log.append(("select", best))

    for r in runs:
        task = tasks[r["seed"]]
        r["test_acc"] = (accuracy(r["model"], task.test_x, task.test_y)
                         if r["model"] is not None else float("nan"))
        log.append(("test", r["config"], r["seed"]))

    summary = []
    for e in entries:
        mine = [r for r in runs if r["config"] == e.name]
        vm, vs = _stats([r["val_acc"] for r in mine])
        tm, ts = _stats([r["test_acc"] for r in mine])
        summary.append({"config": e.name, "mode": e.mode, "n_runs": len(mine),
                        "n_failed": sum(r["status"] != "ok" for r in mine),
                        "val_mean": vm, "val_std": vs, "test_mean": tm, "test_std": ts,
                        "selected": int(e.name == best), "checkpoint": "final"})
    run_rows = [{k: v for k, v in r.items() if k != "model"} for r in runs]
    return run_rows, summary, log


def check_expected(summary: list, expected: dict) -> list:
    """Compare summary test means with committed values; returns mismatches."""
    tol = float(expected["tolerance"])
    want = expected["config_means"]
    bad = []
    for row in summary:
        if row["config"] in want and not abs(row["test_mean"] - want[row["config"]]) <= tol:
            bad.append((row["config"], row["test_mean"], want[row["config"]]))
    missing = set(want) - {r["config"] for r in summary}
    bad.extend((name, float("nan"), want[name]) for name in sorted(missing))
    return bad
