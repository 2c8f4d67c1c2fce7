"""Prototypes, pseudo centers and source label adaptation.

A protonet scores an input by ``softmax(-T * ||f(x) - c_k||^2)`` over class
centers ``c_k``. Building the centers from unlabeled target features grouped
by the model's own hard predictions gives the "pseudo-center" protonet (PPC)
that serves as the target-side cleaner for source labels.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .mathcore import ConfigError, ShapeError, argmax_lowest, pairwise_sq_euclidean, softmax
from .nnet import Model, forward, forward_features


class EmptyClassError(ValueError):
    def __init__(self, class_index: int):
        super().__init__(f"class {class_index} has no members and no fallback center")
        self.class_index = class_index


class StateError(RuntimeError):
    pass


class CenterSource(enum.Enum):
    LABELED_TARGET = "labeled_target"
    PSEUDO = "pseudo"
    IDEAL = "ideal"


class CorrectionMode(enum.Enum):
    NONE = "none"                 # plain source cross entropy
    SELF_PREDICTION = "self_pred"  # mix with the model's own prediction
    PPC = "ppc"                    # mix with the pseudo-center protonet


@dataclass(frozen=True)
class ProtoState:
    centers: np.ndarray  # (K, F)
    temperature: float
    source: CenterSource = CenterSource.LABELED_TARGET
    built_at_step: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.centers.ndim != 2 or not np.all(np.isfinite(self.centers)):
            raise ValueError("centers must be a finite (K, F) array")

    @property
    def n_classes(self) -> int:
        return self.centers.shape[0]


@dataclass(frozen=True)
class SlaConfig:
    alpha: float = 0.3
    temperature: float = 0.6
    update_interval: int = 500
    warmup: int = 1000
    correction_mode: CorrectionMode = CorrectionMode.PPC

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.update_interval < 1 or self.warmup < 0:
            raise ConfigError("need update_interval >= 1 and warmup >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


@dataclass(frozen=True)
class PseudoLabelTable:
    ids: np.ndarray
    labels: np.ndarray
    step: int = 0

    def as_dict(self) -> dict:
        return dict(zip(self.ids.tolist(), self.labels.tolist()))

    def counts(self, K: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=K)


def compute_centers(features, labels, K: int, fallback=None) -> np.ndarray:
    """Per-class mean of ``features``; empty classes take ``fallback[k]``."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if len(feats) != len(labels):
        raise ShapeError("features and labels differ in length")
    counts = np.bincount(labels, minlength=K)
    sums = np.zeros((K, feats.shape[1]))
    np.add.at(sums, labels, feats)
    centers = np.empty_like(sums)
    for k in range(K):
        if counts[k] > 0:
            centers[k] = sums[k] / counts[k]
        elif fallback is not None:
            centers[k] = fallback[k]
        else:
            raise EmptyClassError(k)
    return centers


def protonet_logits(state: ProtoState, feats) -> np.ndarray:
    F = np.asarray(feats, dtype=np.float64)
    single = F.ndim == 1
    if F.shape[-1] != state.centers.shape[1]:
        raise ShapeError(f"feature dim {F.shape[-1]} != center dim {state.centers.shape[1]}")
    z = -state.temperature * pairwise_sq_euclidean(np.atleast_2d(F), state.centers)
    return z[0] if single else z


def protonet_predict(state: ProtoState, feats) -> np.ndarray:
    return softmax(protonet_logits(state, feats))


def protonet_as_linear(state: ProtoState):
    """Weights ``(W, b)`` of the equivalent linear classifier over features.

    ``-T||f - c||^2 = 2T c.f - T||c||^2 - T||f||^2`` and the last term is the
    same for every class, so it drops out of the softmax.
    """
    C = state.centers
    T = state.temperature
    return 2.0 * T * C, -T * np.einsum("kf,kf->k", C, C)


def assign_pseudo_labels(model: Model, ids, x, step: int = 0) -> PseudoLabelTable:
    ids = np.asarray(ids, dtype=np.int64)
    labels = argmax_lowest(forward(model, np.atleast_2d(x)))
    return PseudoLabelTable(ids.copy(), labels.astype(np.int64), step)


def labeled_centers(model: Model, labeled_x, labeled_y, T: float, step: int = 0) -> ProtoState:
    C = compute_centers(forward_features(model, np.atleast_2d(labeled_x)), labeled_y,
                        model.n_classes)
    return ProtoState(C, T, CenterSource.LABELED_TARGET, step)


def build_ppc(model: Model, ids, x, table: PseudoLabelTable, labeled_x, labeled_y,
              T: float, step: int = 0) -> ProtoState:
    """Protonet with pseudo centers; classes no example was assigned to fall
    back to their labeled-target center."""
    ids = np.asarray(ids, dtype=np.int64)
    lookup = table.as_dict()
    missing = [i for i in ids.tolist() if i not in lookup]
    if missing:
        raise StateError(f"pseudo-label table lacks {len(missing)} ids, e.g. {missing[:3]}")
    labels = np.array([lookup[i] for i in ids.tolist()], dtype=np.int64)
    K = model.n_classes
    feats = forward_features(model, np.atleast_2d(x))
    fallback = None
    if np.bincount(labels, minlength=K).min() == 0:
        fallback = compute_centers(forward_features(model, np.atleast_2d(labeled_x)),
                                   labeled_y, K)
    return ProtoState(compute_centers(feats, labels, K, fallback), T, CenterSource.PSEUDO, step)


def adapt_label(y, cleaner_out, alpha: float) -> np.ndarray:
    """Convex mix ``(1 - alpha) * y + alpha * cleaner_out``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    y = np.asarray(y, dtype=np.float64)
    c = np.asarray(cleaner_out, dtype=np.float64)
    if y.shape != c.shape:
        raise ShapeError(f"shape mismatch: {y.shape} vs {c.shape}")
    return (1.0 - alpha) * y + alpha * c


def in_warmup(cfg: SlaConfig, step: int) -> bool:
    return step <= cfg.warmup


def adapted_source_target(cfg: SlaConfig, step: int, y, model: Model | None = None,
                          ppc: ProtoState | None = None, x_source=None, self_pred=None):
    """Source training targets at iteration ``step`` (1-based).

    Original labels through the warmup (``step <= warmup``), afterwards the
    mix toward the cleaner chosen by ``cfg.correction_mode``. ``self_pred``
    may carry already-computed model predictions on ``x_source``.
    """
    y = np.asarray(y, dtype=np.float64)
    mode = cfg.correction_mode
    if mode is CorrectionMode.NONE or in_warmup(cfg, step):
        return y
    if mode is CorrectionMode.PPC:
        if ppc is None:
            raise StateError(f"no PPC available at step {step} (warmup {cfg.warmup})")
        cleaner = protonet_predict(ppc, forward_features(model, x_source))
    else:
        cleaner = self_pred if self_pred is not None else forward(model, x_source)
    return adapt_label(y, cleaner, cfg.alpha)


def refresh_due(cfg: SlaConfig, step: int) -> bool:
    """True at ``warmup + 1`` and every ``update_interval`` steps after it."""
    if cfg.correction_mode is not CorrectionMode.PPC or step <= cfg.warmup:
        return False
    return (step - cfg.warmup - 1) % cfg.update_interval == 0


def refresh(cfg: SlaConfig, step: int, model: Model, task):
    table = assign_pseudo_labels(model, task.unlabeled_ids, task.unlabeled_x, step)
    ppc = build_ppc(model, task.unlabeled_ids, task.unlabeled_x, table, task.labeled_x,
                    task.labeled_y, cfg.temperature, step)
    return table, ppc


def maybe_refresh(cfg: SlaConfig, step: int, model: Model, task):
    """Rebuild pseudo labels and PPC when the schedule says so, else ``None``."""
    if not refresh_due(cfg, step):
        return None
    return refresh(cfg, step, model, task)
