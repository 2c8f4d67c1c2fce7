"""Training loops: S+T and friends, SLA, the target oracle and the
ideally-adapted baseline.

Every iteration draws one source, one labeled-target and one unlabeled-target
batch, sums ``source loss + labeled loss + unlabeled loss`` with unit weights
and takes a single SGD step.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import sla as sla_ops
from .data import BatchPlan, SsdaTask, _Cycler, next_batch
from .mathcore import DomainError, make_rng, one_hot
from .nnet import (Model, SgdState, TrainingError, add_grads, backward_ce, backward_entropy,
                   forward, forward_features, init_model, predict, scheduler_refresh, sgd_step)
from .sla import CorrectionMode, SlaConfig

# Rng stream ids under the run seed.
_INIT_STREAM = 1
_ORACLE_INIT_STREAM = 2
_ORACLE_BATCH_STREAM = 3

MODES = ("st", "ent", "sla", "sla+ent", "self-pred", "ideal")


@dataclass(frozen=True)
class TrainConfig:
    sla: SlaConfig = SlaConfig(correction_mode=CorrectionMode.NONE)
    unlabeled_loss: str = "none"  # "none" or "entropy"
    entropy_weight: float = 0.1
    total_iters: int = 5000
    b_s: int = 32
    b_l: int = 32
    b_u: int = 32
    eval_every: int = 100
    seed: int = 0
    base_lr: float = 0.01
    momentum: float = 0.9
    decay_gamma: float = 1e-4
    decay_power: float = 0.75
    hidden: tuple = (32,)
    n_features: int = 16
    oracle_iters: int = 3000
    oracle_batch: int = 64
    # restart the lr schedule after warmup even when no correction is used,
    # so that a no-correction run can be compared step for step with SLA
    force_scheduler_refresh: bool = False
    eval_ppc_as_classifier: bool = False
    track_test: bool = True  # False keeps the test split untouched (model selection)

    def __post_init__(self):
        if self.unlabeled_loss not in ("none", "entropy"):
            raise ValueError(f"unknown unlabeled loss {self.unlabeled_loss!r}")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be nonnegative")
        if (self.sla.correction_mode is not CorrectionMode.NONE
                and self.total_iters <= self.sla.warmup):
            raise ValueError("total_iters must exceed the warmup when a correction is used")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sla"]["correction_mode"] = self.sla.correction_mode.value
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        s = dict(d.pop("sla", {}))
        if "correction_mode" in s:
            s["correction_mode"] = CorrectionMode(s["correction_mode"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(sla=SlaConfig(**s), **d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def new_optimizer(self) -> SgdState:
        return SgdState(self.base_lr, self.momentum, self.decay_gamma, self.decay_power)


def config_for_mode(mode: str, **overrides) -> TrainConfig:
    """Preset configuration for one of :data:`MODES`."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    sla_kw = {k: overrides.pop(k) for k in ("alpha", "temperature", "update_interval", "warmup")
              if k in overrides}
    cm = {"sla": CorrectionMode.PPC, "sla+ent": CorrectionMode.PPC,
          "self-pred": CorrectionMode.SELF_PREDICTION}.get(mode, CorrectionMode.NONE)
    unl = "entropy" if mode in ("ent", "sla+ent") else "none"
    return TrainConfig(sla=SlaConfig(correction_mode=cm, **sla_kw), unlabeled_loss=unl,
                       **overrides)


@dataclass
class RunRecord:
    config: TrainConfig
    metrics: list = field(default_factory=list)
    kl: list = field(default_factory=list)          # per step, mean KL(y_s -> g(x_s))
    refresh_events: list = field(default_factory=list)
    model: Model | None = None
    ppc: sla_ops.ProtoState | None = None
    audit_accesses: list = field(default_factory=list)
    wall_clock: float = 0.0

    METRIC_FIELDS = ("step", "test_acc", "val_acc", "loss_total", "loss_source",
                     "loss_labeled", "loss_unlabeled", "kl")

    def _append(self, row: dict) -> None:
        if self.metrics and row["step"] <= self.metrics[-1]["step"]:
            raise ValueError("metric rows must have increasing steps")
        if row["step"] > self.config.total_iters:
            raise ValueError("metric step beyond total_iters")
        self.metrics.append(row)

    @property
    def final(self) -> dict:
        return self.metrics[-1]

    def metric_stream(self) -> list:
        return [tuple(r[k] for k in self.METRIC_FIELDS) for r in self.metrics]


def accuracy(model: Model, x, y) -> float:
    return float(np.mean(predict(model, x) == np.asarray(y)))


def _ppc_accuracy(model, ppc, x, y) -> float:
    pred = np.argmax(sla_ops.protonet_logits(ppc, forward_features(model, x)), axis=1)
    return float(np.mean(pred == y))


def _run(task: SsdaTask, cfg: TrainConfig, ideal_source_targets=None, callback=None) -> RunRecord:
    t0 = time.perf_counter()
    audit_before = len(task.audit_log)
    K = task.n_classes
    model = init_model(task.dim, K, cfg.hidden, cfg.n_features, make_rng(cfg.seed, _INIT_STREAM))
    opt = cfg.new_optimizer()
    plan = BatchPlan.for_task(task, cfg.b_s, cfg.b_l, cfg.b_u, cfg.seed)
    scfg = cfg.sla
    mode = scfg.correction_mode
    use_ent = cfg.unlabeled_loss == "entropy" and cfg.b_u > 0
    refresh_sched = ideal_source_targets is None and (
        mode is not CorrectionMode.NONE or cfg.force_scheduler_refresh)
    rec = RunRecord(cfg)
    ppc = None

    for e in range(1, cfg.total_iters + 1):
        if ideal_source_targets is None:
            out = sla_ops.maybe_refresh(scfg, e, model, task)
            if out is not None:
                table, new_ppc = out
                ev = {"step": e, "counts": table.counts(K).tolist(),
                      "displacement": (float(np.mean(np.linalg.norm(
                          new_ppc.centers - ppc.centers, axis=1))) if ppc is not None else 0.0)}
                ppc = new_ppc
                if cfg.eval_ppc_as_classifier and cfg.track_test:
                    ev["ppc_test_acc"] = _ppc_accuracy(model, ppc, task.test_x, task.test_y)
                rec.refresh_events.append(ev)
            if refresh_sched and e == scfg.warmup + 1:
                scheduler_refresh(opt)

        batch = next_batch(task, plan)
        try:
            ys = one_hot(batch.source_y, K)
            if ideal_source_targets is not None:
                targets = ideal_source_targets[plan.last_source_idx]
                g_s, loss_s, p_s = backward_ce(model, batch.source_x, targets)
            elif mode is CorrectionMode.NONE or sla_ops.in_warmup(scfg, e):
                g_s, loss_s, p_s = backward_ce(model, batch.source_x, ys)
            else:
                self_pred = None
                if mode is CorrectionMode.SELF_PREDICTION:
                    self_pred = forward(model, batch.source_x)
                targets = sla_ops.adapted_source_target(scfg, e, ys, model, ppc, batch.source_x,
                                                        self_pred)
                g_s, loss_s, p_s = backward_ce(model, batch.source_x, targets)
            rec.kl.append(float(np.mean(-np.log(np.maximum(
                p_s[np.arange(len(ys)), batch.source_y], 1e-12)))))

            g_l, loss_l, _ = backward_ce(model, batch.labeled_x, one_hot(batch.labeled_y, K))
            grads = add_grads(g_s, g_l)
            loss_u = 0.0
            if use_ent:
                g_u, ent, _ = backward_entropy(model, batch.unlabeled_x)
                loss_u = cfg.entropy_weight * ent
                grads = add_grads(grads, g_u, cfg.entropy_weight)
        except DomainError as err:
            raise TrainingError(f"non-finite activations at step {e}: {err}") from err
        total = loss_s + loss_l + loss_u
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss at step {e}: source={loss_s} "
                                f"labeled={loss_l} unlabeled={loss_u}")
        sgd_step(model, grads, opt)
        if callback is not None:
            callback(e, model)

        if e % cfg.eval_every == 0 or e == cfg.total_iters:
            rec._append({
                "step": e,
                "test_acc": (accuracy(model, task.test_x, task.test_y)
                             if cfg.track_test else float("nan")),
                "val_acc": accuracy(model, task.val_x, task.val_y),
                "loss_total": total, "loss_source": loss_s, "loss_labeled": loss_l,
                "loss_unlabeled": loss_u, "kl": rec.kl[-1],
            })

    rec.model = model
    rec.ppc = ppc
    rec.audit_accesses = task.audit_log[audit_before:]
    rec.wall_clock = time.perf_counter() - t0
    return rec


def train(task: SsdaTask, cfg: TrainConfig, callback=None) -> RunRecord:
    """Train S+T, ENT, SLA or self-prediction correction per ``cfg``.

    ``callback(step, model)`` runs after every parameter update; it must not
    modify the model.
    """
    return _run(task, cfg, callback=callback)


def train_oracle(task: SsdaTask, cfg: TrainConfig) -> Model:
    """Fit a model on fully labeled target data (L plus U with true labels).

    Stands in for the ideal target model; only ever reads target splits.
    """
    K = task.n_classes
    x = np.concatenate([task.labeled_x, task.unlabeled_x])
    y = np.concatenate([task.labeled_y, task.audit_labels("train_oracle")])
    Y = one_hot(y, K)
    model = init_model(task.dim, K, cfg.hidden, cfg.n_features,
                       make_rng(cfg.seed, _ORACLE_INIT_STREAM))
    opt = cfg.new_optimizer()
    cyc = _Cycler(len(y), make_rng(cfg.seed, _ORACLE_BATCH_STREAM))
    for _ in range(cfg.oracle_iters):
        idx = cyc.take(cfg.oracle_batch)
        grads, _, _ = backward_ce(model, x[idx], Y[idx])
        sgd_step(model, grads, opt)
    return model


def train_ideally_adapted(task: SsdaTask, cfg: TrainConfig, oracle: Model,
                          callback=None) -> RunRecord:
    """S+T whose source targets are the oracle's soft predictions."""
    base = dataclasses.replace(cfg, sla=dataclasses.replace(
        cfg.sla, correction_mode=CorrectionMode.NONE), force_scheduler_refresh=False)
    return _run(task, base, ideal_source_targets=forward(oracle, task.source_x), callback=callback)


def unlabeled_loss_entropy(model: Model, batch_u, weight: float):
    """``weight * mean prediction entropy`` and its gradient."""
    if weight < 0:
        raise ValueError("entropy weight must be nonnegative")
    grads, ent, _ = backward_entropy(model, batch_u)
    return [weight * g for g in grads], weight * ent
