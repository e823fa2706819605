"""Mean-variance adjustment of ensembles toward reference statistics, per lead and gridpoint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import DimensionError, EnsembleField

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class MvaParams:
    """Reference and ensemble climatological moments, each (L, G)."""

    ref_mean: np.ndarray
    ref_std: np.ndarray
    ens_mean: np.ndarray
    ens_std: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return self.ref_std / self.ens_std

    @property
    def shift(self) -> np.ndarray:
        """Additive term of the equivalent map y' = scale * y + shift."""
        return self.ref_mean - self.scale * self.ens_mean

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"mva.ref_mean": self.ref_mean, "mva.ref_std": self.ref_std,
                "mva.ens_mean": self.ens_mean, "mva.ens_std": self.ens_std}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "MvaParams":
        return cls(arrays["mva.ref_mean"], arrays["mva.ref_std"], arrays["mva.ens_mean"], arrays["mva.ens_std"])


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, EnsembleField) else np.asarray(x, dtype=np.float64)


def fit_mva(ens_train, ref_train, std_floor: float = STD_FLOOR) -> MvaParams:
    """Pool the ensemble over (t, m) and the reference over t, separately for every (l, g).

    ``ref_train`` is (T, L, G) or a single-member EnsembleField aligned with ``ens_train``.
    """
    e = _values(ens_train)
    r = _values(ref_train)
    if r.ndim == 4:
        if r.shape[2] != 1:
            raise DimensionError("reference must be deterministic (M = 1)")
        r = r[:, :, 0, :]
    if e.ndim != 4 or r.shape != e.shape[:2] + e.shape[3:]:
        raise DimensionError(f"ensemble {e.shape} and reference {r.shape} are not aligned by (t, l)")
    ens_mean = e.mean(axis=(0, 2))
    ens_std = np.maximum(np.sqrt(((e - ens_mean[None, :, None, :]) ** 2).mean(axis=(0, 2))), std_floor)
    ref_mean = r.mean(axis=0)
    ref_std = np.maximum(np.sqrt(((r - ref_mean) ** 2).mean(axis=0)), std_floor)
    return MvaParams(ref_mean, ref_std, ens_mean, ens_std)


def apply_mva(ens, params: MvaParams):
    """y' = (y - mu_ens) * sigma_ref / sigma_ens + mu_ref."""
    e = _values(ens)
    if e.shape[1] != params.ens_mean.shape[0] or e.shape[3] != params.ens_mean.shape[1]:
        raise DimensionError("MVA parameters do not cover the ensemble's (lead, gridpoint) layout")
    out = ((e - params.ens_mean[None, :, None, :]) * (params.ref_std / params.ens_std)[None, :, None, :]
           + params.ref_mean[None, :, None, :])
    if isinstance(ens, EnsembleField):
        return ens.with_values(out)
    return out
