"""Synthetic domain pairs and SSDA task sampling.

The source domain is an isotropic Gaussian mixture with class means spread on
a circle. The target domain rotates those means, translates them and jitters
each class mean a little, so target clusters land on top of source clusters
of *other* classes. A classifier fit on the source alone therefore gets a
large share of the target wrong, which is the regime label adaptation is
meant for.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .mathcore import make_rng, one_hot, softmax

TASK_FORMAT = "slalab-task"
TASK_VERSION = 1


class GenerationError(RuntimeError):
    pass


class TaskFileError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    n_classes: int = 5
    dim: int = 8
    mean_radius: float = 4.0
    cov_scale: float = 0.5
    rotation: float = float(np.deg2rad(50.0))
    translation: tuple | None = None  # None -> unit vector along (1, 1, ..., 1)
    jitter_scale: float = 0.5
    n_source_per_class: int = 200
    n_unlabeled_per_class: int = 200
    n_test_per_class: int = 100
    n_val_per_class: int = 3
    min_source_error: float = 0.2
    max_retries: int = 20

    def __post_init__(self):
        if self.n_classes < 2 or self.dim < 2:
            raise ValueError("need n_classes >= 2 and dim >= 2")
        if self.cov_scale <= 0:
            raise ValueError("cov_scale must be positive")
        if self.translation is not None and len(self.translation) != self.dim:
            raise ValueError("translation length must equal dim")

    def translation_vector(self) -> np.ndarray:
        if self.translation is None:
            return np.ones(self.dim) / np.sqrt(self.dim)
        return np.asarray(self.translation, dtype=np.float64)

    def source_means(self) -> np.ndarray:
        angles = 2 * np.pi * np.arange(self.n_classes) / self.n_classes
        means = np.zeros((self.n_classes, self.dim))
        means[:, 0] = self.mean_radius * np.cos(angles)
        means[:, 1] = self.mean_radius * np.sin(angles)
        return means

    def rotation_matrix(self) -> np.ndarray:
        R = np.eye(self.dim)
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        R[:2, :2] = [[c, -s], [s, c]]
        return R

    def to_dict(self) -> dict:
        d = asdict(self)
        d["translation"] = None if self.translation is None else list(self.translation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        if d.get("translation") is not None:
            d["translation"] = tuple(float(v) for v in d["translation"])
        return cls(**d)


def no_shift_spec(**overrides) -> DomainSpec:
    """Degenerate spec whose target domain equals the source domain."""
    kw = dict(rotation=0.0, translation=(0.0, 0.0), jitter_scale=0.0, min_source_error=0.0)
    kw.update(overrides)
    if "dim" in kw and kw["translation"] == (0.0, 0.0):
        kw["translation"] = (0.0,) * kw["dim"]
    return DomainSpec(**kw)


class SsdaTask:
    """Source, labeled target, unlabeled target and evaluation splits.

    The true classes of the unlabeled split are kept behind
    :meth:`audit_labels`, which records every caller in ``audit_log``.
    """

    def __init__(self, spec, seed, n_shot, source_x, source_y, labeled_x, labeled_y,
                 unlabeled_x, unlabeled_y, test_x, test_y, val_x, val_y, attempt=0):
        self.spec = spec
        self.seed = int(seed)
        self.n_shot = int(n_shot)
        self.attempt = int(attempt)
        self.source_x, self.source_y = source_x, source_y
        self.labeled_x, self.labeled_y = labeled_x, labeled_y
        self.unlabeled_x = unlabeled_x
        self.unlabeled_ids = np.arange(len(unlabeled_x))
        self._unlabeled_y = unlabeled_y
        self.test_x, self.test_y = test_x, test_y
        self.val_x, self.val_y = val_x, val_y
        self.audit_log: list[str] = []
        for arr in self._arrays().values():
            arr.setflags(write=False)

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    @property
    def dim(self) -> int:
        return self.spec.dim

    def audit_labels(self, caller: str) -> np.ndarray:
        self.audit_log.append(caller)
        return self._unlabeled_y

    def unlabeled(self):
        return self.unlabeled_ids, self.unlabeled_x

    def _arrays(self) -> dict:
        return {
            "source_x": self.source_x, "source_y": self.source_y,
            "labeled_x": self.labeled_x, "labeled_y": self.labeled_y,
            "unlabeled_x": self.unlabeled_x, "unlabeled_y": self._unlabeled_y,
            "test_x": self.test_x, "test_y": self.test_y,
            "val_x": self.val_x, "val_y": self.val_y,
        }

    def equals(self, other: "SsdaTask") -> bool:
        if (self.spec, self.seed, self.n_shot, self.attempt) != (
                other.spec, other.seed, other.n_shot, other.attempt):
            return False
        a, b = self._arrays(), other._arrays()
        return all(a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]) for k in a)

    def with_source(self, source_x, source_y) -> "SsdaTask":
        """Copy with the source split replaced (used for isolation checks)."""
        a = self._arrays()
        return SsdaTask(self.spec, self.seed, self.n_shot, np.asarray(source_x),
                        np.asarray(source_y), a["labeled_x"], a["labeled_y"],
                        a["unlabeled_x"], a["unlabeled_y"], a["test_x"], a["test_y"],
                        a["val_x"], a["val_y"], self.attempt)


def _sample(rng, means, cov_scale, per_class):
    K, m = means.shape
    y = np.repeat(np.arange(K), per_class)
    x = means[y] + cov_scale * rng.standard_normal((len(y), m))
    return x, y


def fit_linear_softmax(x, y, K, iters: int = 300, lr: float = 0.5):
    """Full-batch softmax regression on standardized inputs; returns a predict fn."""
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-12
    Z = (x - mu) / sd
    W = np.zeros((K, x.shape[1]))
    b = np.zeros(K)
    Y = one_hot(y, K)
    for _ in range(iters):
        G = (softmax(Z @ W.T + b) - Y) / len(y)
        W -= lr * (G.T @ Z)
        b -= lr * G.sum(axis=0)
    return lambda q: np.argmax(((q - mu) / sd) @ W.T + b, axis=1)


def source_only_error(task: SsdaTask) -> float:
    clf = fit_linear_softmax(task.source_x, task.source_y, task.n_classes)
    return float(np.mean(clf(task.test_x) != task.test_y))


def generate_task(spec: DomainSpec, n_shot: int, seed: int) -> SsdaTask:
    """Sample a task; retries jitter draws until the shift is large enough."""
    if n_shot not in (1, 3):
        raise ValueError("n_shot must be 1 or 3")
    K = spec.n_classes
    src_means = spec.source_means()
    base_tgt = src_means @ spec.rotation_matrix().T + spec.translation_vector()
    last_err = None
    for attempt in range(spec.max_retries):
        rng = make_rng(seed, attempt)
        tgt_means = base_tgt + spec.jitter_scale * rng.standard_normal(base_tgt.shape)
        sx, sy = _sample(rng, src_means, spec.cov_scale, spec.n_source_per_class)
        lx, ly = _sample(rng, tgt_means, spec.cov_scale, n_shot)
        ux, uy = _sample(rng, tgt_means, spec.cov_scale, spec.n_unlabeled_per_class)
        tx, ty = _sample(rng, tgt_means, spec.cov_scale, spec.n_test_per_class)
        vx, vy = _sample(rng, tgt_means, spec.cov_scale, spec.n_val_per_class)
        # unlabeled pool is shuffled so ids carry no class information
        perm = rng.permutation(len(uy))
        task = SsdaTask(spec, seed, n_shot, sx, sy, lx, ly, ux[perm], uy[perm],
                        tx, ty, vx, vy, attempt=attempt)
        if spec.min_source_error <= 0:
            return task
        last_err = source_only_error(task)
        if last_err >= spec.min_source_error:
            return task
    raise GenerationError(
        f"source-only linear error {last_err:.3f} stayed below {spec.min_source_error} "
        f"after {spec.max_retries} draws; increase the rotation, translation or jitter")


# -- minibatches ---------------------------------------------------------------

class _Cycler:
    """Shuffled cycling over ``range(n)``; reshuffles at every epoch boundary."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.epoch = 0
        self._perm = rng.permutation(n)
        self._pos = 0

    def take(self, b: int) -> np.ndarray:
        out = np.empty(b, dtype=np.int64)
        filled = 0
        while filled < b:
            if self._pos == self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
                self.epoch += 1
            k = min(b - filled, self.n - self._pos)
            out[filled:filled + k] = self._perm[self._pos:self._pos + k]
            filled += k
            self._pos += k
        return out


class Batch(NamedTuple):
    source_x: np.ndarray
    source_y: np.ndarray
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_ids: np.ndarray


@dataclass
class BatchPlan:
    n_source: int
    n_labeled: int
    n_unlabeled: int
    b_s: int = 32
    b_l: int = 32
    b_u: int = 32
    seed: int = 0
    iteration: int = 0
    last_source_idx: np.ndarray | None = None
    _cyclers: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._cyclers = [
            _Cycler(self.n_source, make_rng(self.seed, 101)),
            _Cycler(self.n_labeled, make_rng(self.seed, 102)),
            _Cycler(self.n_unlabeled, make_rng(self.seed, 103)),
        ]

    @classmethod
    def for_task(cls, task: SsdaTask, b_s=32, b_l=32, b_u=32, seed=0) -> "BatchPlan":
        return cls(len(task.source_y), len(task.labeled_y), len(task.unlabeled_x),
                   b_s, b_l, b_u, seed)

    @property
    def epochs(self) -> tuple:
        return tuple(c.epoch for c in self._cyclers)


def next_batch(task: SsdaTask, plan: BatchPlan) -> Batch:
    si = plan._cyclers[0].take(plan.b_s)
    li = plan._cyclers[1].take(plan.b_l)
    ui = plan._cyclers[2].take(plan.b_u) if plan.b_u > 0 else np.empty(0, dtype=np.int64)
    plan.iteration += 1
    plan.last_source_idx = si
    return Batch(task.source_x[si], task.source_y[si], task.labeled_x[li],
                 task.labeled_y[li], task.unlabeled_x[ui], task.unlabeled_ids[ui])


# -- task files ----------------------------------------------------------------

def _body_checksum(body: dict) -> str:
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def task_to_dict(task: SsdaTask) -> dict:
    body = {}
    for name, arr in task._arrays().items():
        body[name] = arr.tolist()
    header = {"format": TASK_FORMAT, "version": TASK_VERSION, "spec": task.spec.to_dict(),
              "seed": task.seed, "n_shot": task.n_shot, "attempt": task.attempt}
    return {"header": header, "body": body, "checksum": _body_checksum(body)}


def task_from_dict(doc: dict) -> SsdaTask:
    try:
        header, body = doc["header"], doc["body"]
    except (KeyError, TypeError) as exc:
        raise TaskFileError("malformed task file: missing header or body") from exc
    if header.get("format") != TASK_FORMAT:
        raise TaskFileError("not a task file")
    if header.get("version") != TASK_VERSION:
        raise TaskFileError(
            f"task file version {header.get('version')!r} is not supported "
            f"(expected {TASK_VERSION})")
    if doc.get("checksum") != _body_checksum(body):
        raise TaskFileError("task file checksum mismatch; file is corrupted")
    spec = DomainSpec.from_dict(header["spec"])
    arr = {}
    for name in ("source_x", "labeled_x", "unlabeled_x", "test_x", "val_x"):
        arr[name] = np.asarray(body[name], dtype=np.float64).reshape(-1, spec.dim)
    for name in ("source_y", "labeled_y", "unlabeled_y", "test_y", "val_y"):
        arr[name] = np.asarray(body[name], dtype=np.int64)
    return SsdaTask(spec, header["seed"], header["n_shot"], arr["source_x"], arr["source_y"],
                    arr["labeled_x"], arr["labeled_y"], arr["unlabeled_x"], arr["unlabeled_y"],
                    arr["test_x"], arr["test_y"], arr["val_x"], arr["val_y"],
                    attempt=header.get("attempt", 0))


def export_task(task: SsdaTask, path) -> None:
    Path(path).write_text(json.dumps(task_to_dict(task)))


def import_task(path) -> SsdaTask:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise TaskFileError(f"task file is not valid JSON: {exc}") from exc
    return task_from_dict(doc)
