"""Synthetic coupled predictor/target fields and ensembles with known statistics.

The predictor anomaly ``Z`` is a stationary, spectrally band-limited Gaussian
field on a periodic input grid (optionally AR(1) in time). The target is

    Y = A Z + q (B Z)**2 + noise + offset + seasonal + trend

with ``A`` and ``B`` translation-invariant local kernels, so the best linear
predictor's error is known in closed form. Ensembles are built around weekly
means of any truth field with a lead-dependent, spatially correlated error and
a spread deflation factor ``d``.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import EnsembleField, Field, Grid, from_epoch_days, to_epoch_days
from .perturb import counter_normal
from .preprocess import DAYS_PER_WEEK, weekly_average

# substream tags for the counter-based generator
_S_Z, _S_NOISE, _S_CENTER, _S_MEMBER = 11, 12, 13, 14


@dataclass(frozen=True)
class SynthSpec:
    input_grid: Grid = Grid(40.0, 2.0, 8, -10.0, 2.0, 12)
    out_offset: tuple[int, int] = (2, 3)
    out_shape: tuple[int, int] = (4, 6)
    start: dt.date = dt.date(2000, 1, 1)
    n_days: int = 3000
    corr_length: float = 1.5          # grid cells
    ar1: float = 0.0                  # day-to-day autocorrelation of Z
    linear_width: float = 1.0         # A kernel width, grid cells
    linear_gain: float = 1.0          # target std of the linear term
    quad_width: float = 0.8
    quad_shift: tuple[int, int] = (0, 1)
    q: float = 0.8
    sigma_obs: float = 0.3
    offset: float = 8.0
    seasonal_amplitude: float = 0.0
    trend_per_year: float = 0.0
    kernel_radius: int = 2
    # ensembles
    n_members: int = 10
    n_leads: int = 4
    error_max: float = 1.0
    saturation_lead: int = 3
    deflation: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_obs < 0:
            raise ValueError("sigma_obs must be >= 0")
        if not 0 < self.deflation <= 1:
            raise ValueError(f"deflation must lie in (0, 1], got {self.deflation}")
        if not -1 < self.ar1 < 1:
            raise ValueError("ar1 must lie in (-1, 1)")
        r0, c0 = self.out_offset
        ho, wo = self.out_shape
        n_lat, n_lon = self.input_grid.shape
        if r0 < 0 or c0 < 0 or r0 + ho > n_lat or c0 + wo > n_lon:
            raise ValueError("output window does not fit inside the input grid")
        if self.n_days < 1 or self.n_members < 1 or self.n_leads < 1:
            raise ValueError("n_days, n_members and n_leads must be >= 1")

    @property
    def output_grid(self) -> Grid:
        return self.input_grid.subgrid(*self.out_offset, *self.out_shape)

    @property
    def dates(self) -> list[dt.date]:
        return [self.start + dt.timedelta(days=i) for i in range(self.n_days)]


@dataclass
class SynthTruth:
    x: Field
    y: Field
    components: dict = field(default_factory=dict)
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    cov: np.ndarray | None = None


# -- building blocks -----------------------------------------------------------

def _spectral_filter(shape: tuple[int, int], corr_length: float) -> np.ndarray:
    ky = np.fft.fftfreq(shape[0])[:, None]
    kx = np.fft.fftfreq(shape[1])[None, :]
    return np.exp(-((2 * np.pi * corr_length) ** 2) * (kx ** 2 + ky ** 2) / 4.0)


def smooth_field(white: np.ndarray, shape: tuple[int, int], corr_length: float) -> np.ndarray:
    """Band-limit white noise (..., G) on a periodic grid; unit marginal variance."""
    F = _spectral_filter(shape, corr_length)
    maps = white.reshape(*white.shape[:-1], *shape)
    out = np.fft.ifft2(np.fft.fft2(maps, axes=(-2, -1)) * F, axes=(-2, -1)).real
    # circular convolution: marginal variance is the filter energy over the grid
    out /= np.sqrt(np.sum(F ** 2) / F.size)
    return out.reshape(white.shape)


def field_covariance(spec: SynthSpec) -> np.ndarray:
    """Exact covariance of one Z snapshot, from the generator applied to basis vectors."""
    G = spec.input_grid.size
    K = smooth_field(np.eye(G), spec.input_grid.shape, spec.corr_length).T
    return K @ K.T


def _kernel_matrix(spec: SynthSpec, width: float, shift: tuple[int, int]) -> np.ndarray:
    """Translation-invariant Gaussian kernel rows: output point -> nearby input points (periodic)."""
    n_lat, n_lon = spec.input_grid.shape
    r0, c0 = spec.out_offset
    ho, wo = spec.out_shape
    R = spec.kernel_radius
    d = np.arange(-R, R + 1)
    w = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * width ** 2))
    M = np.zeros((ho * wo, n_lat * n_lon))
    for i in range(ho):
        for j in range(wo):
            ci, cj = r0 + i + shift[0], c0 + j + shift[1]
            for a in range(2 * R + 1):
                for b in range(2 * R + 1):
                    M[i * wo + j, ((ci + d[a]) % n_lat) * n_lon + (cj + d[b]) % n_lon] += w[a, b]
    return M


def coupling_matrices(spec: SynthSpec, cov: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """A scaled so the linear term has std ``linear_gain``; B scaled so B Z has unit variance."""
    cov = field_covariance(spec) if cov is None else cov
    A = _kernel_matrix(spec, spec.linear_width, (0, 0))
    B = _kernel_matrix(spec, spec.quad_width, spec.quad_shift)
    A *= spec.linear_gain / np.sqrt(np.einsum("gi,ij,gj->g", A, cov, A))[:, None]
    B /= np.sqrt(np.einsum("gi,ij,gj->g", B, cov, B))[:, None]
    return A, B


def seasonal_cycle(days: np.ndarray, amplitude: float) -> np.ndarray:
    doy = np.array([d.timetuple().tm_yday for d in from_epoch_days(days)], dtype=np.float64)
    return amplitude * np.cos(2 * np.pi * (doy - 15.0) / 365.25)


def linear_floor(spec: SynthSpec, cov: np.ndarray | None = None) -> np.ndarray:
    """Per-output-gridpoint MSE of the best linear predictor of Y from X.

    (B Z)**2 is uncorrelated with Z for Gaussian Z, so the linear model captures the
    linear term and the mean only: floor = 2 q^2 (b' S b)^2 + sigma_obs^2. Valid only
    without seasonal cycle or trend, which would add a shared nonlinear signal.
    """
    if spec.seasonal_amplitude or spec.trend_per_year:
        raise ValueError("closed-form linear floor assumes zero seasonal amplitude and trend")
    cov = field_covariance(spec) if cov is None else cov
    _, B = coupling_matrices(spec, cov)
    bsb = np.einsum("gi,ij,gj->g", B, cov, B)
    return 2.0 * spec.q ** 2 * bsb ** 2 + spec.sigma_obs ** 2


# -- generators ----------------------------------------------------------------

def generate_truth(spec: SynthSpec) -> SynthTruth:
    G_in = spec.input_grid.size
    G_out = spec.output_grid.size
    days = to_epoch_days(spec.dates)
    t = np.arange(spec.n_days)[:, None]
    white = counter_normal(spec.seed, _S_Z, t, np.arange(G_in)[None, :])
    z = smooth_field(white, spec.input_grid.shape, spec.corr_length)
    if spec.ar1:
        rho = spec.ar1
        innov = np.sqrt(1.0 - rho * rho)
        for i in range(1, spec.n_days):
            z[i] = rho * z[i - 1] + innov * z[i]
    cov = field_covariance(spec)
    A, B = coupling_matrices(spec, cov)
    seasonal = seasonal_cycle(days, spec.seasonal_amplitude)
    trend = spec.trend_per_year * (days - days[0]) / 365.25
    background = (seasonal + trend)[:, None]
    linear = z @ A.T
    quadratic = spec.q * (z @ B.T) ** 2
    noise = spec.sigma_obs * counter_normal(spec.seed, _S_NOISE, t, np.arange(G_out)[None, :])
    y = linear + quadratic + noise + spec.offset + background
    x = z + background
    comps = {"z": z, "linear": linear, "quadratic": quadratic, "noise": noise,
             "seasonal": seasonal, "trend": trend}
    return SynthTruth(Field(spec.input_grid, spec.dates, x, "m"), Field(spec.output_grid, spec.dates, y, "m/s"),
                      comps, A, B, cov)


def reassemble(truth: SynthTruth, offset: float) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild (x, y) from the stored decomposition in generation order."""
    c = truth.components
    background = (c["seasonal"] + c["trend"])[:, None]
    return c["z"] + background, c["linear"] + c["quadratic"] + c["noise"] + offset + background


def lead_spread(spec: SynthSpec) -> np.ndarray:
    """Forecast-error std per lead: linear growth, flat from ``saturation_lead`` on."""
    l = np.arange(1, spec.n_leads + 1)
    return spec.error_max * np.minimum(l, spec.saturation_lead) / spec.saturation_lead


def default_inits(spec: SynthSpec, stride_days: int = 7) -> list[dt.date]:
    last = spec.n_days - DAYS_PER_WEEK * spec.n_leads
    return [spec.start + dt.timedelta(days=i) for i in range(0, last + 1, stride_days)]


def generate_ensembles(spec: SynthSpec, truth: Field, inits=None, deflation: float | None = None,
                       stream: int = 0) -> EnsembleField:
    """Ensemble of weekly means around ``truth``.

    centre = v + s_l sqrt(1 + (1 - d^2) / M) xi, member = centre + d s_l eta_m, with xi and
    eta unit-variance smooth fields. The ensemble-mean error variance is s_l^2 (1 + 1/M) for
    every d, the member spread is d s_l, hence SSR -> d sqrt(M / (M + 1)).
    """
    d = spec.deflation if deflation is None else deflation
    if not 0 < d <= 1:
        raise ValueError(f"deflation must lie in (0, 1], got {d}")
    inits = default_inits(spec) if inits is None else list(inits)
    wk = weekly_average(truth, inits, spec.n_leads).values[:, :, 0, :]
    T, L, G = wk.shape
    M = spec.n_members
    shape = truth.grid.shape
    s = lead_spread(spec)[None, :, None, None]
    ti = to_epoch_days(inits).astype(np.int64)[:, None, None, None]
    li = np.arange(L)[None, :, None, None]
    mi = np.arange(M)[None, None, :, None]
    gi = np.arange(G)[None, None, None, :]
    xi = smooth_field(counter_normal(spec.seed + stream, _S_CENTER, ti, li, 0, gi)[:, :, 0, :], shape,
                      spec.corr_length)[:, :, None, :]
    eta = smooth_field(counter_normal(spec.seed + stream, _S_MEMBER, ti, li, mi, gi), shape, spec.corr_length)
    centre = wk[:, :, None, :] + s * np.sqrt(1.0 + (1.0 - d * d) / M) * xi
    members = centre + d * s * eta
    return EnsembleField(truth.grid, inits, members, truth.units,
                         {"deflation": d, "members": M, "synthetic": True})


# -- shipped datasets -------------------------------------------------------------

def benchmark_spec(seed: int = 0, n_days: int = 4000) -> SynthSpec:
    """Quadratic benchmark: 8 x 12 predictor grid, 4 x 6 centred target, no seasonal cycle or trend."""
    return SynthSpec(n_days=n_days, seed=seed)


def dispersion_spec(seed: int = 0, n_days: int = 12000) -> SynthSpec:
    """Persistent benchmark whose weekly regression residual dominates the ensemble error."""
    return SynthSpec(n_days=n_days, ar1=0.7, error_max=0.25, deflation=0.5, seed=seed)


def mini_spec(seed: int = 0) -> SynthSpec:
    """Small end-to-end dataset: 8 years of daily data (2 climatology + 6 study season-years)."""
    start = dt.date(1988, 7, 1)
    n_days = (dt.date(1996, 7, 1) - start).days + 60
    return SynthSpec(start=start, n_days=n_days, ar1=0.6, seasonal_amplitude=0.5, trend_per_year=0.02,
                     n_members=5, n_leads=3, error_max=0.8, deflation=0.6, seed=seed)


MINI_CONFIG = """\
# synthetic end-to-end run
reanalysis_x = reanalysis_x.gfd
reanalysis_y = reanalysis_y.gfd
hindcast_x = hindcast_x.gfd
hindcast_y = hindcast_y.gfd
months = 12,1,2
study_start_year = 1991
study_years = 6
outer_folds = 3
inner_folds = 2
climatology_years = 2
sample_stride_days = 2
models = mlr,cnn
cnn_stages = 2
cnn_channels = 4
epochs = 6
batch_size = 32
lr_range = 0.003,0.01
weight_decay_range = 0.00001,0.001
mlr_weight_decay_range = 0.001,1.0
search_budget = 2
perturbations = 5
bootstrap_replicates = 100
seed = {seed}
"""


def write_mini_dataset(directory, seed: int = 0) -> Path:
    """Write GFD inputs and ``mini.cfg`` into ``directory``; returns the config path."""
    from .io.gfd import write_gfd

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = mini_spec(seed)
    truth = generate_truth(spec)
    inits = [d for d in default_inits(spec) if d.month in (12, 1, 2)]
    write_gfd(directory / "reanalysis_x.gfd", truth.x)
    write_gfd(directory / "reanalysis_y.gfd", truth.y)
    write_gfd(directory / "hindcast_x.gfd", generate_ensembles(spec, truth.x, inits, stream=1))
    write_gfd(directory / "hindcast_y.gfd", generate_ensembles(spec, truth.y, inits, stream=2))
    cfg = directory / "mini.cfg"
    cfg.write_text(MINI_CONFIG.format(seed=seed))
    return cfg
