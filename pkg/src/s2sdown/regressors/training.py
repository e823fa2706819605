"""Adam training with best-validation selection, random hyperparameter search,
and checkpointing of fitted regressors."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..grid import DimensionError
from ..io.checkpoint import read_checkpoint, write_checkpoint
from ..preprocess import NormStats
from .layers import Module
from .mlr import MlrModel
from .smaat import SmaAtUNet

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSpec:
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 200
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epoch budget must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class TrainLog:
    train_mse: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val(self) -> float:
        return self.val_mse[self.best_epoch - 1] if self.val_mse else math.inf


# -- state handling ------------------------------------------------------------

def state_dict(model: Module) -> dict[str, np.ndarray]:
    out = {f"param.{k}": v.copy() for k, v in model.named_parameters()}
    out.update({f"buffer.{k}": v.copy() for k, v in model.named_buffers()})
    return out


def load_state(model: Module, state: dict[str, np.ndarray]) -> None:
    """Copy arrays into the model in place; names and shapes must match exactly."""
    slots = {f"param.{k}": v for k, v in model.named_parameters()}
    slots.update({f"buffer.{k}": v for k, v in model.named_buffers()})
    missing = set(slots) - set(state)
    if missing:
        raise DimensionError(f"state lacks {sorted(missing)[0]!r}")
    for k, dst in slots.items():
        src = np.asarray(state[k])
        if src.shape != dst.shape:
            raise DimensionError(f"{k}: stored shape {src.shape} vs model {dst.shape}")
        np.copyto(dst, src)


def build_model(config: dict, seed: int = 0) -> Module:
    kind = config.get("kind")
    if kind == "mlr":
        return MlrModel(config["n_in"], config["n_out"])
    if kind == "cnn":
        return SmaAtUNet(tuple(config["in_shape"]), tuple(config["out_shape"]), config["stages"],
                         config["base_channels"], config.get("reduction", 8), tuple(config["crop_offsets"]), seed)
    raise ValueError(f"unknown model kind {kind!r}")


# -- CNN entry points -----------------------------------------------------------

def cnn_forward(model: SmaAtUNet, x: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Single map (H_in, W_in) -> (H_out, W_out), or a leading batch axis."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2 and x.shape == model.in_shape
    y = model.forward(x[None] if single else x, train=mode == "train")
    y = y.reshape(-1, *model.out_shape)
    return y[0] if single else y


def cnn_backward(model: SmaAtUNet, x: np.ndarray, grad_out: np.ndarray, mode: str = "train") -> dict[str, np.ndarray]:
    """Gradients of sum(grad_out * cnn_forward(x)) for every parameter; running statistics are left untouched."""
    saved = {k: v.copy() for k, v in model.named_buffers()}
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2 and x.shape == model.in_shape
    model.forward(x[None] if single else x, train=mode == "train")
    model.zero_grads()
    g = np.asarray(grad_out, dtype=np.float64).reshape(1 if single else x.shape[0], -1)
    model.backward(g)
    for k, v in model.named_buffers():
        np.copyto(v, saved[k])
    return {k: v.copy() for k, v in model.named_grads()}


# -- optimisation --------------------------------------------------------------

class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params, self.lr, self.b1, self.b2, self.eps = params, lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def evaluate_mse(model: Module, X: np.ndarray, Y: np.ndarray, batch: int = 256) -> float:
    sse = 0.0
    for i in range(0, len(X), batch):
        sse += float(np.sum((model.forward(X[i:i + batch], train=False) - Y[i:i + batch]) ** 2))
    return sse / Y.size


def train(model: Module, X_train, Y_train, X_val, Y_val, spec: TrainSpec) -> tuple[Module, TrainLog]:
    """Minimize MSE + (weight_decay / 2) * sum of squared weights with Adam.

    Biases and batch-norm affine terms are not decayed. The returned model holds
    the snapshot with the lowest validation MSE, or the last iterate when no
    validation data is given.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    Y_train = np.asarray(Y_train, dtype=np.float64)
    select = X_val is not None
    if select:
        X_val = np.asarray(X_val, dtype=np.float64)
        Y_val = np.asarray(Y_val, dtype=np.float64)
        if len(X_val) != len(Y_val):
            raise DimensionError("validation inputs and targets differ in sample count")
        if len(X_val) == 0:
            raise ValueError("validation set is empty")
    if len(X_train) != len(Y_train) or len(X_train) == 0:
        raise DimensionError("training inputs and targets differ in sample count or are empty")
    names = [k for k, _ in model.named_parameters()]
    params = [v for _, v in model.named_parameters()]
    decay = model.decay_names()
    decay_mask = [k in decay for k in names]
    opt = Adam(params, spec.lr, spec.beta1, spec.beta2, spec.eps)
    rng = np.random.default_rng(spec.seed)
    n = len(X_train)
    log_ = TrainLog()
    best, best_val = state_dict(model), math.inf
    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(n)
        sse = 0.0
        for i in range(0, n, spec.batch_size):
            idx = order[i:i + spec.batch_size]
            pred = model.forward(X_train[idx], train=True)
            diff = pred - Y_train[idx]
            sse += float(np.sum(diff * diff))
            model.zero_grads()
            model.backward(2.0 * diff / diff.size)
            grads = [g for _, g in model.named_grads()]
            if spec.weight_decay:
                grads = [g + spec.weight_decay * p if d else g for g, p, d in zip(grads, params, decay_mask)]
            opt.step(grads)
        tr = sse / Y_train.size
        if not math.isfinite(tr):
            raise TrainingError(f"non-finite training loss at epoch {epoch}")
        log_.train_mse.append(tr)
        if not select:
            log_.best_epoch = epoch
            continue
        va = evaluate_mse(model, X_val, Y_val)
        if not math.isfinite(va):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        log_.val_mse.append(va)
        if va < best_val:
            best_val, best, log_.best_epoch = va, state_dict(model), epoch
        log.debug("epoch %d train %.6g val %.6g", epoch, tr, va)
    if select:
        load_state(model, best)
    return model, log_


def fit_fixed_epochs(model: Module, X, Y, spec: TrainSpec) -> Module:
    """Train for exactly ``spec.epochs`` epochs and keep the last iterate (final refit, no validation)."""
    model, _ = train(model, X, Y, None, None, spec)
    return model


# -- hyperparameter search -------------------------------------------------------

@dataclass(frozen=True)
class SearchSpace:
    lr: tuple[float, float]
    weight_decay: tuple[float, float]

    def __post_init__(self):
        for name, (lo, hi) in (("lr", self.lr), ("weight_decay", self.weight_decay)):
            if not (0 < lo <= hi) or not math.isfinite(hi):
                raise ValueError(f"empty or invalid {name} range ({lo}, {hi}); need 0 < low <= high")

    def sample(self, rng: np.random.Generator) -> tuple[float, float]:
        return tuple(float(lo) if lo == hi else float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
                     for lo, hi in (self.lr, self.weight_decay))


@dataclass
class SearchResult:
    lr: float
    weight_decay: float
    score: float
    best_epochs: list[int]
    trials: list[tuple[float, float, float]]


def hyper_search(space: SearchSpace, folds: Sequence, budget: int,
                 fit_eval: Callable[[float, float, object], tuple[float, int]], seed: int = 0) -> SearchResult:
    """Seeded random search over log-uniform (lr, weight_decay).

    ``fit_eval(lr, wd, fold)`` returns (validation MSE, best epoch) on one inner
    fold. Candidates are ranked by mean validation MSE; ties go to the smaller lr,
    then the smaller weight decay.
    """
    if budget < 1:
        raise ValueError("search budget must be >= 1")
    if not folds:
        raise ValueError("hyper_search needs at least one fold")
    rng = np.random.default_rng(seed)
    trials, epochs = [], []
    for _ in range(budget):
        lr, wd = space.sample(rng)
        res = [fit_eval(lr, wd, f) for f in folds]
        trials.append((float(np.mean([r[0] for r in res])), lr, wd))
        epochs.append([int(r[1]) for r in res])
    k = min(range(budget), key=lambda i: trials[i])
    score, lr, wd = trials[k]
    return SearchResult(lr, wd, score, epochs[k], [(t[1], t[2], t[0]) for t in trials])


# -- fitted regressor bundle -----------------------------------------------------

@dataclass
class FittedRegressor:
    """Model plus the normalization that maps anomaly fields to and from its inputs and outputs."""

    model: Module
    x_stats: NormStats
    y_stats: NormStats
    extras: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def predict(self, x_anom: np.ndarray) -> np.ndarray:
        """(..., G_in) anomalies -> (..., G_out) anomalies; leading axes are flattened and restored."""
        x = np.asarray(x_anom, dtype=np.float64)
        lead = x.shape[:-1]
        flat = (x.reshape(-1, x.shape[-1]) - self.x_stats.mu) / self.x_stats.sigma
        out = np.concatenate([self.model.forward(flat[i:i + 256], train=False)
                              for i in range(0, len(flat), 256)]) if len(flat) else np.zeros((0, self.y_stats.mu.size))
        return (out * self.y_stats.sigma + self.y_stats.mu).reshape(*lead, -1)

    def save(self, path) -> None:
        arrays = state_dict(self.model)
        arrays.update({"norm.x.mu": self.x_stats.mu, "norm.x.sigma": self.x_stats.sigma,
                       "norm.y.mu": self.y_stats.mu, "norm.y.sigma": self.y_stats.sigma})
        arrays.update(self.extras)
        write_checkpoint(path, arrays, dict(self.meta, model=self.model.config()))

    @classmethod
    def load(cls, path) -> "FittedRegressor":
        arrays, meta = read_checkpoint(path)
        if "model" not in meta:
            raise ValueError(f"{path}: checkpoint carries no model configuration")
        model = build_model(meta["model"])
        load_state(model, {k: v for k, v in arrays.items() if k.startswith(("param.", "buffer."))})
        extras = {k: v for k, v in arrays.items() if not k.startswith(("param.", "buffer.", "norm."))}
        meta = {k: v for k, v in meta.items() if k != "model"}
        return cls(model, NormStats(arrays["norm.x.mu"], arrays["norm.x.sigma"]),
                   NormStats(arrays["norm.y.mu"], arrays["norm.y.sigma"]), extras, meta)
