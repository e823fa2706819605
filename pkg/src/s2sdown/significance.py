"""Bootstrap relative score differences between a candidate and a benchmark model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

SIG_LEVELS = (("a", 0.01), ("b", 0.05), ("c", 0.1))


def classify_p(p) -> str:
    """Significance class: a for p < 0.01, b for p < 0.05, c for p < 0.1, else none."""
    if p is None or not np.isfinite(p):
        return "none"
    for name, alpha in SIG_LEVELS:
        if p < alpha:
            return name
    return "none"


def format_significance(result: "BootstrapResult") -> tuple[np.ndarray, np.ndarray]:
    """Class labels for the per-cell and aggregate p-values."""
    cells = np.vectorize(classify_p, otypes=[object])(result.p_value)
    agg = None
    if result.aggregate_p_value is not None:
        agg = np.vectorize(classify_p, otypes=[object])(result.aggregate_p_value)
    return cells, agg


@dataclass
class BootstrapResult:
    delta_median: np.ndarray
    p_value: np.ndarray
    n_replicates: int
    n_excluded: np.ndarray
    aggregate_delta_median: np.ndarray | None = None
    aggregate_p_value: np.ndarray | None = None

    @property
    def sig_class(self) -> np.ndarray:
        return format_significance(self)[0]


def relative_difference(score_s, score_b) -> np.ndarray:
    """(S_s - S_b) / S_b in percent; NaN where S_b is zero."""
    score_s = np.asarray(score_s, dtype=np.float64)
    score_b = np.asarray(score_b, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(score_b != 0, (score_s - score_b) / np.where(score_b != 0, score_b, 1.0) * 100.0,
                        np.nan)


def _p_values(deltas: np.ndarray, orientation: str, literal: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    valid = np.isfinite(deltas)
    if orientation == "negative":
        # improvement means a lower score, so count replicates that are not improvements
        hit = (deltas < 0) if literal else (deltas >= 0)
    elif orientation == "positive":
        hit = (deltas > 0) if literal else (deltas <= 0)
    else:
        raise ValueError(f"orientation must be 'negative' or 'positive', got {orientation!r}")
    n_valid = valid.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(n_valid > 0, (hit & valid).sum(axis=0) / np.maximum(n_valid, 1), np.nan)
        with warnings.catch_warnings():
            # cells with no finite replicate get a NaN median
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(np.where(valid, deltas, np.nan), axis=0)
    return p, med, deltas.shape[0] - n_valid


def bootstrap_delta(
    score_fn: Callable[..., np.ndarray],
    samples_s: Sequence[np.ndarray],
    samples_b: Sequence[np.ndarray],
    n_replicates: int = 1000,
    seed: int = 0,
    orientation: str = "negative",
    reduce: Callable[[np.ndarray], np.ndarray] | None = None,
    literal_sign: bool = False,
    on_resample: Callable[[int, np.ndarray], None] | None = None,
) -> BootstrapResult:
    """Resample initializations with replacement, identically for both models.

    ``samples_s`` and ``samples_b`` are tuples of arrays whose first axis is the
    initialization; ``score_fn(*samples)`` returns the score array. ``reduce``
    maps a score array to its spatial aggregate, whose relative difference is
    bootstrapped alongside the per-cell one.

    The p-value is the fraction of replicates that do not show an improvement
    (``literal_sign=True`` counts improvements instead, for audit).
    """
    if n_replicates < 1:
        raise ValueError("n_replicates must be >= 1")
    samples_s = tuple(np.asarray(a) for a in samples_s)
    samples_b = tuple(np.asarray(a) for a in samples_b)
    n = samples_s[0].shape[0]
    if any(a.shape[0] != n for a in samples_s + samples_b):
        raise ValueError("both models must be evaluated on the same initializations")
    rng = np.random.default_rng(seed)
    deltas, agg_deltas = [], []
    for r in range(n_replicates):
        idx = rng.integers(0, n, size=n)
        if on_resample is not None:
            on_resample(r, idx)
        s = score_fn(*(a[idx] for a in samples_s))
        b = score_fn(*(a[idx] for a in samples_b))
        deltas.append(relative_difference(s, b))
        if reduce is not None:
            agg_deltas.append(relative_difference(reduce(s), reduce(b)))
    p, med, excluded = _p_values(np.stack(deltas), orientation, literal_sign)
    result = BootstrapResult(med, p, n_replicates, excluded)
    if reduce is not None:
        result.aggregate_p_value, result.aggregate_delta_median, _ = _p_values(
            np.stack(agg_deltas), orientation, literal_sign)
    return result
