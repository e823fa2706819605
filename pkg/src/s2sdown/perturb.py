"""Gaussian residual model and stochastic perturbation of regressed ensembles.

Noise comes from a counter-based generator: every draw is a pure function of
(seed, t, l, m, p, g), so results do not depend on evaluation order or on how
the work is split.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .grid import DimensionError, EnsembleField, Field

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer."""
    with np.errstate(over="ignore"):
        z = z + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, *coords) -> np.ndarray:
    """Uniform (0, 1) variates keyed by ``seed`` and broadcastable integer coordinate arrays."""
    h = _mix(np.array([int(seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    for i, c in enumerate(coords):
        c = np.asarray(c).astype(np.uint64)
        h = _mix(h ^ (c + np.uint64(i)))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def counter_normal(seed: int, *coords) -> np.ndarray:
    return ndtri(counter_uniform(seed, *coords))


@dataclass(frozen=True)
class ResidualModel:
    mean: np.ndarray
    var: np.ndarray
    var_floor: float = VAR_FLOOR

    def __post_init__(self):
        if np.any(self.var < self.var_floor) or not np.all(np.isfinite(self.mean)):
            raise ValueError("residual variance below floor or non-finite mean")

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"residual.mean": self.mean, "residual.var": self.var,
                "residual.var_floor": np.array([self.var_floor])}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ResidualModel":
        return cls(arrays["residual.mean"], arrays["residual.var"], float(arrays["residual.var_floor"][0]))


def fit_residuals(y_true, y_hat, var_floor: float = VAR_FLOOR) -> ResidualModel:
    """Per-gridpoint mean and population variance of y_true - y_hat over time."""
    a = y_true.values if isinstance(y_true, Field) else np.asarray(y_true, dtype=np.float64)
    b = y_hat.values if isinstance(y_hat, Field) else np.asarray(y_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < 2:
        raise ValueError("fitting residuals needs T >= 2")
    r = a - b
    mean = r.mean(axis=0)
    var = np.maximum(((r - mean) ** 2).mean(axis=0), var_floor)
    return ResidualModel(mean, var, var_floor)


def perturb_ensemble(regressed: EnsembleField, res: ResidualModel, n_perturb: int, seed: int) -> EnsembleField:
    """Add ``n_perturb`` independent residual draws to every member.

    Output member ``m * n_perturb + p`` is member ``m`` plus draw ``p``.
    """
    if n_perturb < 1:
        raise ValueError("n_perturb must be >= 1")
    T, L, M, G = regressed.values.shape
    if res.mean.shape != (G,):
        raise DimensionError(f"residual model has {res.mean.shape[0]} gridpoints, ensemble has {G}")
    t = np.arange(T)[:, None, None, None, None]
    l = np.arange(L)[None, :, None, None, None]
    m = np.arange(M)[None, None, :, None, None]
    p = np.arange(n_perturb)[None, None, None, :, None]
    g = np.arange(G)[None, None, None, None, :]
    z = counter_normal(seed, t, l, m, p, g)
    out = regressed.values[:, :, :, None, :] + res.mean + res.std * z
    out = out.reshape(T, L, M * n_perturb, G)
    meta = dict(regressed.metadata, perturbations=n_perturb, negative_values=int(np.count_nonzero(out < 0)))
    if meta["negative_values"] and regressed.units in ("m/s", "m s-1"):
        log.info("perturbed ensemble holds %d negative wind speeds (kept)", meta["negative_values"])
    return EnsembleField(regressed.grid, regressed.inits, out, regressed.units, meta)
