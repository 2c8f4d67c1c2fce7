"""A small MLP classifier with hand-written backprop and momentum SGD.

The model is ``g = head o f`` where ``f`` is a stack of affine + tanh layers
and ``head`` is a single affine map to ``K`` logits. Weight matrices are
stored as ``(out, in)`` so the head is ``K x F``. Gradients are plain lists
of arrays in the same order as :meth:`Model.params`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mathcore import LOG_EPS, ShapeError, softmax

CHECKPOINT_FORMAT = "slalab-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Non-finite values showed up during optimisation."""


@dataclass
class Model:
    weights: list  # extractor layers then head, each (out, in)
    biases: list
    final_activation: bool = True  # tanh on the last extractor layer

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_features(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden(self) -> tuple:
        return tuple(W.shape[0] for W in self.weights[:-2])

    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "Model":
        return Model([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                     self.final_activation)

    def head(self):
        return self.weights[-1], self.biases[-1]


def init_model(n_in: int, n_classes: int, hidden=(32,), n_features: int = 16,
               rng: np.random.Generator | None = None, final_activation: bool = True) -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every layer."""
    if rng is None:
        raise ValueError("init_model needs an explicit rng")
    sizes = [n_in, *hidden, n_features, n_classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Model(weights, biases, final_activation)


def _as_batch(model: Model, x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_in:
        raise ShapeError(f"expected inputs of dim {model.n_in}, got {X.shape[1]}")
    return X, single


def _forward_cache(model: Model, X: np.ndarray):
    """Run the net on a 2-D batch; return logits and per-layer activations."""
    acts = [X]
    h = X
    n_ext = len(model.weights) - 1
    for i in range(n_ext):
        z = h @ model.weights[i].T + model.biases[i]
        h = np.tanh(z) if (i < n_ext - 1 or model.final_activation) else z
        acts.append(h)
    logits = h @ model.weights[-1].T + model.biases[-1]
    return logits, acts


def _backprop(model: Model, acts: list, dlogits: np.ndarray) -> list:
    n_ext = len(model.weights) - 1
    grads = [None] * (2 * len(model.weights))
    delta = dlogits
    for i in range(n_ext, -1, -1):
        h_in = acts[i]
        grads[2 * i] = delta.T @ h_in
        grads[2 * i + 1] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ model.weights[i]
        if i - 1 < n_ext - 1 or model.final_activation:
            delta = delta * (1.0 - acts[i] ** 2)
    return grads


def forward_features(model: Model, x) -> np.ndarray:
    X, single = _as_batch(model, x)
    _, acts = _forward_cache(model, X)
    return acts[-1][0] if single else acts[-1]


def forward_logits(model: Model, x) -> np.ndarray:
    X, single = _as_batch(model, x)
    logits, _ = _forward_cache(model, X)
    return logits[0] if single else logits


def forward(model: Model, x) -> np.ndarray:
    """Class probabilities ``softmax(head(f(x)))`` for one input or a batch."""
    return softmax(forward_logits(model, x))


def predict(model: Model, x) -> np.ndarray:
    return np.argmax(forward_logits(model, np.atleast_2d(x)), axis=1)


def backward_ce(model: Model, x, targets, weights=None):
    """Weighted-mean soft cross entropy and its exact gradient.

    Returns ``(grads, loss, probs)`` where ``probs`` are the predictions the
    loss was evaluated at.
    """
    X, _ = _as_batch(model, x)
    T = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if T.shape != (X.shape[0], model.n_classes):
        raise ShapeError(f"targets must have shape {(X.shape[0], model.n_classes)}")
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    wn = w / w.sum()
    logits, acts = _forward_cache(model, X)
    P = softmax(logits)
    ce = -(T * np.log(np.maximum(P, LOG_EPS))).sum(axis=1)
    loss = float(wn @ ce)
    dlogits = wn[:, None] * (P * T.sum(axis=1, keepdims=True) - T)
    return _backprop(model, acts, dlogits), loss, P


def backward_entropy(model: Model, x):
    """Mean prediction entropy and its gradient. Returns ``(grads, loss, probs)``."""
    X, _ = _as_batch(model, x)
    logits, acts = _forward_cache(model, X)
    P = softmax(logits)
    logP = np.log(np.maximum(P, LOG_EPS))
    H = -(P * logP).sum(axis=1)
    n = X.shape[0]
    # dH/dz_j = -p_j (log p_j + H)
    dlogits = -P * (logP + H[:, None]) / n
    return _backprop(model, acts, dlogits), float(H.mean()), P


def add_grads(a: list, b: list, scale: float = 1.0) -> list:
    return [ga + scale * gb for ga, gb in zip(a, b)]


@dataclass
class SgdState:
    base_lr: float = 0.01
    momentum: float = 0.9
    decay_gamma: float = 1e-4
    decay_power: float = 0.75
    step_count: int = 0
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.base_lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need base_lr >= 0 and momentum in [0, 1)")
        if self.decay_gamma < 0 or self.decay_power < 0:
            raise ValueError("decay parameters must be nonnegative")

    def lr(self, t: int | None = None) -> float:
        t = self.step_count if t is None else t
        return self.base_lr * (1.0 + self.decay_gamma * t) ** (-self.decay_power)


def sgd_step(model: Model, grads: list, opt: SgdState) -> float:
    """In-place momentum step; returns the learning rate that was used."""
    params = model.params()
    if len(grads) != len(params):
        raise ShapeError("gradient list does not match model parameters")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient at optimizer step {opt.step_count}")
    if not opt.velocity:
        opt.velocity = [np.zeros_like(p) for p in params]
    lr = opt.lr()
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        for p, g, v in zip(params, grads, opt.velocity):
            v *= opt.momentum
            v += g
            p -= lr * v
    if not all(np.all(np.isfinite(p)) for p in params):
        raise TrainingError(f"parameters became non-finite at optimizer step {opt.step_count} "
                            f"(lr={lr:g}); lower the learning rate")
    opt.step_count += 1
    return lr


def scheduler_refresh(opt: SgdState) -> SgdState:
    """Restart the decay schedule; momentum buffers are kept."""
    opt.step_count = 0
    return opt


# -- checkpoints ---------------------------------------------------------------

def model_to_dict(model: Model, config_hash: str = "") -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {"n_in": model.n_in, "hidden": list(model.hidden),
                 "n_features": model.n_features, "n_classes": model.n_classes},
        "final_activation": model.final_activation,
        "shapes": [list(p.shape) for p in model.params()],
        "params": [p.ravel().tolist() for p in model.params()],
        "config_hash": config_hash,
    }


def model_from_dict(doc: dict) -> Model:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    arrays = [np.asarray(flat, dtype=np.float64).reshape(shape)
              for flat, shape in zip(doc["params"], doc["shapes"])]
    return Model(arrays[0::2], arrays[1::2], bool(doc["final_activation"]))


def save_model(model: Model, path, config_hash: str = "") -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, config_hash)))


def load_model(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text()))


def params_digest(model: Model) -> str:
    h = hashlib.sha256()
    for p in model.params():
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()
