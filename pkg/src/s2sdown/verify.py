"""Deterministic and probabilistic verification scores.

Array conventions: verifying values ``y`` are (T, L, G), ensembles are
(T, L, M, G); scores come back per (lead, gridpoint) as (L, G).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import DimensionError, EnsembleField, Field, Grid

SSIM_EPS = 1e-12


def _ens(ens) -> np.ndarray:
    return ens.values if isinstance(ens, EnsembleField) else np.asarray(ens, dtype=np.float64)


def _obs(y) -> np.ndarray:
    if isinstance(y, EnsembleField):
        return y.deterministic()
    if isinstance(y, Field):
        return y.values
    return np.asarray(y, dtype=np.float64)


def _member_mean(ens: np.ndarray) -> np.ndarray:
    """Mean over members, exact when all members are equal (shifted by the first member)."""
    return ens[:, :, 0, :] + (ens - ens[:, :, :1, :]).mean(axis=2)


def _check_pair(y: np.ndarray, ens: np.ndarray) -> None:
    if ens.ndim != 4 or y.shape != ens.shape[:2] + ens.shape[3:]:
        raise DimensionError(f"verifying values {y.shape} do not align with ensemble {ens.shape}")


@dataclass
class ScoreTable:
    """Per-(lead, gridpoint) score values plus optional significance columns.

    ``flags`` marks cells whose value is a sentinel (zero reference, zero RMSE);
    those cells are skipped by the spatial aggregate.
    """

    name: str
    values: np.ndarray
    grid: Grid
    leads: tuple = ()
    flags: np.ndarray | None = None
    p_value: np.ndarray | None = None
    aggregate_values: np.ndarray | None = None
    aggregate_p_value: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        L, G = self.values.shape
        if G != self.grid.size:
            raise DimensionError(f"score table has G={G}, grid has {self.grid.size}")
        if not self.leads:
            self.leads = tuple(range(1, L + 1))
        if len(self.leads) != L:
            raise DimensionError("leads label count differs from table rows")
        if self.flags is None:
            self.flags = ~np.isfinite(self.values)
        if not np.all(np.isfinite(self.values[~self.flags])):
            raise ValueError(f"score table {self.name!r} has non-finite unflagged values")

    def aggregate(self) -> np.ndarray:
        if self.aggregate_values is not None:
            return np.asarray(self.aggregate_values, dtype=np.float64)
        return aggregate_spatial(self)


def aggregate_spatial(table: ScoreTable, grid: Grid | None = None) -> np.ndarray:
    """Cosine-latitude weighted mean per lead over unflagged cells."""
    grid = grid or table.grid
    w = np.where(table.flags, 0.0, grid.weights[None, :])
    v = np.where(table.flags, 0.0, table.values)
    wsum = w.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(wsum > 0, (v * w).sum(axis=1) / np.where(wsum > 0, wsum, 1.0), np.nan)


# -- deterministic -------------------------------------------------------------

def mse_deterministic(y, y_hat) -> np.ndarray:
    """Mean over time of squared differences, (T, G) -> (G,)."""
    y, y_hat = _obs(y), _obs(y_hat)
    if y.shape != y_hat.shape:
        raise DimensionError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    return ((y - y_hat) ** 2).mean(axis=0)


def mse_ensemble_mean(y, ens) -> np.ndarray:
    y, ens = _obs(y), _ens(ens)
    _check_pair(y, ens)
    return ((y - _member_mean(ens)) ** 2).mean(axis=0)


# -- CRPS --------------------------------------------------------------------

def crps_per_sample(y, ens) -> np.ndarray:
    """Discrete CRPS for every init, (T, L, G)."""
    y, ens = _obs(y), _ens(ens)
    _check_pair(y, ens)
    M = ens.shape[2]
    # sorting first makes both terms exactly invariant to member order
    xs = np.sort(ens, axis=2)
    abs_err = np.abs(xs - y[:, :, None, :]).mean(axis=2)
    k = np.arange(1, M + 1, dtype=np.float64)
    coef = (2.0 * k - M - 1.0)[None, None, :, None]
    # sum_m sum_n |x_m - x_n| = 2 sum_k (2k - M - 1) x_(k)
    spread = (coef * xs).sum(axis=2) / (M * M)
    return abs_err - spread


def crps_discrete(y, ens) -> np.ndarray:
    return crps_per_sample(y, ens).mean(axis=0)


def quantile_downsample(ens, m_small: int, axis: int = 2) -> np.ndarray:
    """Replace members by empirical quantiles at levels (i - 0.5) / m_small.

    Quantiles interpolate linearly between order statistics with position
    ``q * M + 0.5`` on the 1-based sorted members.
    """
    x = _ens(ens) if axis == 2 else np.asarray(ens, dtype=np.float64)
    m_big = x.shape[axis]
    if not 1 <= m_small <= m_big:
        raise ValueError(f"need 1 <= m_small <= {m_big}, got {m_small}")
    levels = (np.arange(1, m_small + 1) - 0.5) / m_small
    q = np.quantile(x, levels, axis=axis, method="hazen")
    return np.moveaxis(q, 0, axis)


# -- spread / skill ------------------------------------------------------------

def spread(ens, literal: bool = False) -> np.ndarray:
    """sqrt(mean_t var_m) with unbiased member variance; ``literal`` squares the variance."""
    ens = _ens(ens)
    if ens.shape[2] < 2:
        raise ValueError("spread needs at least 2 members")
    d = ens - _member_mean(ens)[:, :, None, :]
    var = (d ** 2).sum(axis=2) / (ens.shape[2] - 1)
    return np.sqrt((var ** 2 if literal else var).mean(axis=0))


def ssr(y, ens, literal: bool = False) -> np.ndarray:
    """Spread over RMSE of the ensemble mean; +inf where the RMSE is zero."""
    y, ens = _obs(y), _ens(ens)
    _check_pair(y, ens)
    sp = spread(ens, literal)
    rmse = np.sqrt(mse_ensemble_mean(y, ens))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(rmse > 0, sp / np.where(rmse > 0, rmse, 1.0), np.inf)


def skill_score(score_ens, score_ref) -> np.ndarray:
    """1 - ens/ref; NaN where the reference score is zero."""
    score_ens = np.asarray(score_ens, dtype=np.float64)
    score_ref = np.asarray(score_ref, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(score_ref > 0, 1.0 - score_ens / np.where(score_ref > 0, score_ref, 1.0), np.nan)


def msss(mse_ens, mse_ref) -> np.ndarray:
    return skill_score(mse_ens, mse_ref)


def crpss(crps_ens, crps_ref) -> np.ndarray:
    return skill_score(crps_ens, crps_ref)


# -- SSIM --------------------------------------------------------------------

@dataclass(frozen=True)
class SsimResult:
    ssim: np.ndarray
    luminance: np.ndarray
    contrast: np.ndarray
    structure: np.ndarray
    flagged: np.ndarray


def ssim(y, ens, eps: float = SSIM_EPS) -> SsimResult:
    """Whole-field SSIM per lead from spatial mean, std and covariance.

    No stabilizing constants: each denominator is only floored at ``eps``, and
    leads where a floor was needed are flagged.
    """
    y, ens = _obs(y), _ens(ens)
    _check_pair(y, ens)
    yb = y[:, :, None, :]
    mu_f = ens.mean(axis=3)
    mu_o = yb.mean(axis=3)
    df = ens - mu_f[..., None]
    do = yb - mu_o[..., None]
    sd_f = np.sqrt((df ** 2).mean(axis=3))
    sd_o = np.sqrt((do ** 2).mean(axis=3))
    cov = (df * do).mean(axis=3)

    den_l = mu_f ** 2 + mu_o ** 2
    den_c = sd_f ** 2 + sd_o ** 2
    den_s = sd_f * sd_o
    flagged = ((den_l < eps) | (den_c < eps) | (den_s < eps)).any(axis=(0, 2))
    lum = (2.0 * mu_f * mu_o / np.maximum(den_l, eps)).mean(axis=(0, 2))
    con = (2.0 * sd_f * sd_o / np.maximum(den_c, eps)).mean(axis=(0, 2))
    struc = (cov / np.maximum(den_s, eps)).mean(axis=(0, 2))
    return SsimResult(lum * con * struc, lum, con, struc, flagged)
