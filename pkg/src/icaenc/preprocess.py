"""Voxel time-series cleaning: detrend, band-pass, confound regression,
within-mask smoothing, standardization and TR trimming.

All operations take and return :class:`~icaenc.dataio.VolumeSeries` and leave
grid and mask untouched. Variances use the population (1/T) convention.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, signal

from .dataio import atomic_write_text, format_float
from .errors import (
    BandOutOfRange,
    ConfigError,
    ConstantColumnWarning,
    DimMismatch,
    EmptyAfterTrim,
    LengthMismatch,
    MalformedHeader,
    RankDeficientWarning,
    TooFewSamples,
)

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))
BUTTER_ORDER = 5
SMOOTH_TRUNCATE = 4.0
PINV_RCOND = 1e-10


@dataclass
class ConfoundMatrix:
    """``T x C`` nuisance regressors with column names.

    Columns whose name starts with ``spike`` or ``motion_outlier`` are spike
    indicators and must be 0/1 with exactly one 1.
    """

    data: np.ndarray
    names: list

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim == 1:
            self.data = self.data[:, None]
        self.names = list(self.names)
        if self.data.shape[1] != len(self.names):
            raise DimMismatch(f"{self.data.shape[1]} confound columns but {len(self.names)} names")
        if not np.isfinite(self.data).all():
            raise DimMismatch("confound columns must be finite")
        for j, name in enumerate(self.names):
            if is_spike_name(name):
                col = self.data[:, j]
                if not np.isin(col, (0.0, 1.0)).all() or col.sum() != 1:
                    raise DimMismatch(f"spike column {name!r} must be 0/1 with exactly one 1")

    @property
    def n_samples(self):
        return self.data.shape[0]

    def select(self, names):
        idx = [self.names.index(n) for n in names if n in self.names]
        return ConfoundMatrix(self.data[:, idx], [self.names[i] for i in idx])

    def trim(self, head, tail):
        t = self.n_samples
        keep = slice(head, t - tail)
        cols = [j for j in range(self.data.shape[1])
                if not is_spike_name(self.names[j]) or self.data[keep, j].sum() == 1]
        return ConfoundMatrix(self.data[keep][:, cols], [self.names[j] for j in cols])


def is_spike_name(name):
    return name.startswith("spike") or name.startswith("motion_outlier")


def spike_regressors(fd, threshold=0.5):
    """One indicator column per volume with framewise displacement above ``threshold``."""
    fd = np.nan_to_num(np.asarray(fd, dtype=float))
    hits = np.flatnonzero(fd > threshold)
    cols = np.zeros((fd.size, hits.size))
    cols[hits, np.arange(hits.size)] = 1.0
    return ConfoundMatrix(cols, [f"spike{i:03d}" for i in range(hits.size)])


def read_confounds(path, columns=None, fd_spike_threshold=None):
    """Read a confound TSV. ``n/a`` cells (first-row derivatives) become 0."""
    with open(path, newline="") as fh:
        reader = csv.reader((line for line in fh if not line.startswith("#")), delimiter="\t")
        rows = list(reader)
    if not rows:
        raise MalformedHeader(f"{path}: empty confound table")
    names, body = rows[0], rows[1:]
    try:
        data = np.array([[0.0 if x.strip().lower() in ("n/a", "na", "nan", "") else float(x)
                          for x in row] for row in body], dtype=float).reshape(len(body), len(names))
    except ValueError as exc:
        raise MalformedHeader(f"{path}: non-numeric confound value ({exc})") from exc
    conf = ConfoundMatrix(data, names)
    if columns is not None:
        missing = [c for c in columns if c not in names]
        if missing:
            raise MalformedHeader(f"{path}: missing confound columns {missing}")
        conf = conf.select(columns)
    if fd_spike_threshold is not None and "framewise_displacement" in names:
        spikes = spike_regressors(data[:, names.index("framewise_displacement")], fd_spike_threshold)
        conf = ConfoundMatrix(np.hstack([conf.data, spikes.data]), conf.names + spikes.names)
    return conf


def write_confounds(conf, path):
    lines = ["\t".join(conf.names)]
    lines.extend("\t".join(format_float(x) for x in row) for row in conf.data)
    atomic_write_text(path, "\n".join(lines) + "\n")


@dataclass
class PreprocessConfig:
    detrend: bool = True
    band: tuple = None
    fwhm: float = None
    confounds: bool = True
    standardize: bool = True
    trim_head: int = 0
    trim_tail: int = 0
    fd_spike_threshold: float = 0.5
    confound_columns: list = field(default=None)

    def __post_init__(self):
        if self.band is not None:
            low, high = self.band
            if not 0 < low < high:
                raise BandOutOfRange(f"band must satisfy 0 < low < high, got {self.band}")
            self.band = (float(low), float(high))
        if self.fwhm is not None and not self.fwhm > 0:
            raise ConfigError(f"fwhm must be positive, got {self.fwhm}")
        if self.trim_head < 0 or self.trim_tail < 0:
            raise ConfigError("trims must be >= 0")

    @classmethod
    def ica_path(cls, **overrides):
        """Cleaning applied before component estimation."""
        return cls(**{"band": (0.01, 0.1), "fwhm": 4.0, **overrides})

    @classmethod
    def encoding_path(cls, **overrides):
        """Cleaning for encoding train/test runs: no band-pass, no smoothing."""
        return cls(**{"trim_head": 10, "trim_tail": 10, **overrides})

    def to_dict(self):
        out = asdict(self)
        if out["band"] is not None:
            out["band"] = list(out["band"])
        return out


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _linear_basis(n):
    t = np.arange(n, dtype=float)
    return np.column_stack([np.ones(n), t - t.mean()])


def detrend(series):
    """Remove each voxel's least-squares line (intercept and slope)."""
    n = series.n_samples
    if n < 3:
        raise TooFewSamples(f"detrend needs T >= 3, got {n}")
    basis = _linear_basis(n)
    # columns of basis are orthogonal, so the fit splits per column
    coef = (basis.T @ series.data) / (basis ** 2).sum(axis=0)[:, None]
    return series.with_data(series.data - basis @ coef)


def check_band(band, tr):
    low, high = band
    nyquist = 0.5 / tr
    if not (0 < low < high < nyquist):
        raise BandOutOfRange(f"band {band} Hz invalid for tr={tr} s (Nyquist {nyquist:g} Hz)")


def bandpass_filter(data, band, tr, order=BUTTER_ORDER):
    """Zero-phase Butterworth band-pass along axis 0."""
    check_band(band, tr)
    sos = signal.butter(order, band, btype="bandpass", fs=1.0 / tr, output="sos")
    return signal.sosfiltfilt(sos, data, axis=0)


def bandpass(series, band):
    """Order-5 Butterworth band-pass applied forward and backward."""
    return series.with_data(bandpass_filter(series.data, band, series.tr))


def residualize_columns(data, design, rcond=PINV_RCOND):
    """OLS residuals of every column of ``data`` against ``design`` (minimum-norm)."""
    u, s, vt = np.linalg.svd(design, full_matrices=False)
    keep = s > rcond * s[0] if s.size else np.zeros(0, bool)
    if keep.sum() < design.shape[1]:
        warnings.warn(
            f"confound design rank {int(keep.sum())} < {design.shape[1]} columns; "
            "using minimum-norm solution",
            RankDeficientWarning,
            stacklevel=3,
        )
    u = u[:, keep]
    return data - u @ (u.T @ data)


def regress_confounds(series, confounds):
    """Replace each voxel by its OLS residual against ``[1 | confounds]``."""
    if confounds.n_samples != series.n_samples:
        raise LengthMismatch(
            f"confounds have {confounds.n_samples} rows, series has {series.n_samples}"
        )
    design = np.column_stack([np.ones(series.n_samples), confounds.data])
    return series.with_data(residualize_columns(series.data, design))


def fwhm_to_sigma(fwhm, voxel_size):
    """Per-axis Gaussian sigma in voxels for a FWHM in millimetres."""
    return tuple(fwhm * FWHM_TO_SIGMA / s for s in voxel_size)


def smooth(series, fwhm):
    """Separable Gaussian smoothing restricted to the mask.

    Each volume is convolved with zero outside the mask and divided by the
    equally smoothed mask, so voxels near the mask boundary are not dimmed.
    """
    if not fwhm > 0:
        raise ConfigError(f"fwhm must be positive, got {fwhm}")
    sigma = fwhm_to_sigma(fwhm, series.grid.voxel_size)
    weight = ndimage.gaussian_filter(
        series.mask.included.astype(float), sigma, mode="constant", truncate=SMOOTH_TRUNCATE
    )
    vols = series.volumes()
    smoothed = ndimage.gaussian_filter(
        vols, (0.0,) + sigma, mode="constant", truncate=SMOOTH_TRUNCATE
    )
    inside = series.mask.from_volume(smoothed)
    return series.with_data(inside / series.mask.from_volume(weight)[None, :])


def zscore_columns(data, warn=True):
    """Population z-score per column; constant columns become zeros."""
    mean = data.mean(axis=0)
    centered = data - mean
    sd = np.sqrt((centered ** 2).mean(axis=0))
    scale = np.maximum(np.abs(mean), 1.0)
    const = sd <= 1e-12 * scale
    if const.any() and warn:
        warnings.warn(
            f"{int(const.sum())} constant column(s) set to zero", ConstantColumnWarning, stacklevel=3
        )
    sd = np.where(const, 1.0, sd)
    out = centered / sd
    out[:, const] = 0.0
    return out


def standardize(series):
    """Mean 0, population sd 1 per voxel; constant voxels become all-zero."""
    return series.with_data(zscore_columns(series.data))


def trim(series, head, tail):
    """Drop ``head`` leading and ``tail`` trailing samples."""
    n = series.n_samples
    if head < 0 or tail < 0:
        raise ConfigError("trim counts must be >= 0")
    if head + tail >= n or n - head - tail < 2:
        raise EmptyAfterTrim(f"trimming {head}+{tail} from T={n} leaves too few samples")
    return series.with_data(series.data[head:n - tail])


def clean(series, config, confounds=None):
    """Apply the configured chain: detrend, band-pass, confounds, smooth, trim, standardize.

    Trimming precedes standardization so the retained samples are exactly z-scored.
    """
    out = series
    if config.detrend:
        out = detrend(out)
    if config.band is not None:
        out = bandpass(out, config.band)
    if config.confounds and confounds is not None and confounds.data.shape[1] > 0:
        out = regress_confounds(out, confounds)
    if config.fwhm is not None:
        out = smooth(out, config.fwhm)
    if config.trim_head or config.trim_tail:
        out = trim(out, config.trim_head, config.trim_tail)
    if config.standardize:
        out = standardize(out)
    return out
