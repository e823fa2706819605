"""Flat ``key = value`` run configuration.

Lines starting with ``#`` are comments. Lists are comma-separated. Relative
paths resolve against the directory holding the config file. Value types come
from the RunConfig field annotations, so an unknown key or a badly typed value
fails at load time.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from ..grid import Grid

CONFIG_ENV = "S2SDOWN_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    reanalysis_x: str = ""
    reanalysis_y: str = ""
    hindcast_x: str = ""
    hindcast_y: str = ""
    # "lat_start,lat_step,n_lat,lon_start,lon_step,n_lon"; empty keeps the file grid
    input_grid: list[float] = field(default_factory=list)
    target_grid: list[float] = field(default_factory=list)
    months: list[int] = field(default_factory=lambda: [12, 1, 2])
    study_start_year: int = 1996
    study_years: int = 27
    outer_folds: int = 3
    inner_folds: int = 6
    climatology_years: int = 15
    sample_stride_days: int = 7
    models: list[str] = field(default_factory=lambda: ["mlr", "cnn"])
    cnn_stages: int = 4
    cnn_channels: int = 16
    epochs: int = 200
    batch_size: int = 32
    lr_range: list[float] = field(default_factory=lambda: [1e-4, 1e-2])
    weight_decay_range: list[float] = field(default_factory=lambda: [1e-6, 1e-2])
    mlr_weight_decay_range: list[float] = field(default_factory=lambda: [1e-6, 1e-2])
    search_budget: int = 8
    perturbations: int = 20
    bootstrap_replicates: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("outer_folds", "inner_folds", "climatology_years", "study_years",
                     "sample_stride_days", "cnn_stages", "cnn_channels", "epochs", "batch_size",
                     "search_budget", "perturbations", "bootstrap_replicates"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.months or any(not 1 <= m <= 12 for m in self.months):
            raise ConfigError(f"months must lie in 1..12, got {self.months}")
        for name in ("lr_range", "weight_decay_range", "mlr_weight_decay_range"):
            lo_hi = getattr(self, name)
            if len(lo_hi) != 2 or not 0 < lo_hi[0] <= lo_hi[1]:
                raise ConfigError(f"{name} must be two positive values lo <= hi, got {lo_hi}")
        for name in ("input_grid", "target_grid"):
            spec = getattr(self, name)
            if spec and len(spec) != 6:
                raise ConfigError(f"{name} needs 6 numbers, got {len(spec)}")
        unknown = set(self.models) - {"mlr", "cnn"}
        if unknown or not self.models:
            raise ConfigError(f"models must be a non-empty subset of mlr,cnn, got {self.models}")

    def require_paths(self) -> None:
        for name in ("reanalysis_x", "reanalysis_y", "hindcast_x"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be a non-empty path")

    def grid(self, name: str) -> Grid | None:
        spec = getattr(self, name)
        if not spec:
            return None
        a, b, c, d, e, f = spec
        return Grid(a, b, int(c), d, e, int(f))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _convert(key: str, raw: str, typ):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        if getattr(typ, "__origin__", None) is list:
            (inner,) = typ.__args__
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return [_convert(key, s, inner) for s in items]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{key}: unsupported type {typ}")


_PATH_KEYS = ("reanalysis_x", "reanalysis_y", "hindcast_x", "hindcast_y")


def parse_config(text: str, base_dir=None, overrides: dict | None = None) -> RunConfig:
    hints = get_type_hints(RunConfig)
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, hints[key])
    values.update(overrides or {})
    if base_dir is not None:
        for key in _PATH_KEYS:
            if values.get(key) and not os.path.isabs(values[key]):
                values[key] = str(Path(base_dir) / values[key])
    return RunConfig(**values)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        raise ConfigError(f"no config path given and ${CONFIG_ENV} is unset")
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent, overrides=overrides)
