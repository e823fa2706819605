"""Statistical downscaling of sub-seasonal wind forecasts: preprocessing, regression,
perturbation, calibration and ensemble verification on regular lat/lon grids."""

from .grid import DimensionError, EnsembleField, Field, Grid

__version__ = "0.1.0"

__all__ = ["DimensionError", "EnsembleField", "Field", "Grid", "__version__"]
