"""Rule-based artifact labeling from four component features.

High-frequency content and motion correlation come from component time
courses; edge and CSF fractions come from the spatial maps. Labels are an
annotation only: models and series are never modified.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, signal

from .errors import ConfigError, GridMismatch, LengthMismatch
from .matching import _corr_matrix

MOTION_COLUMNS = ("trans_x", "trans_y", "trans_z", "rot_x", "rot_y", "rot_z")


@dataclass
class AromaThresholds:
    csf: float = 0.10
    hfc: float = 0.35
    edge: float = 0.225
    rp: float = 0.45
    cutoff_hz: float = 0.10
    z_threshold: float = 2.0

    def __post_init__(self):
        for name in ("csf", "hfc", "edge", "rp"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"aroma threshold {name} must lie in [0, 1], got {value}")
        if self.cutoff_hz <= 0:
            raise ConfigError("aroma cutoff_hz must be > 0")

    to_dict = asdict


@dataclass
class AromaFeatures:
    hfc: np.ndarray
    edge_frac: np.ndarray
    csf_frac: np.ndarray
    motion_corr: np.ndarray

    @property
    def k(self):
        return self.hfc.size

    def columns(self):
        return {"hfc": self.hfc, "edge_frac": self.edge_frac,
                "csf_frac": self.csf_frac, "motion_corr": self.motion_corr}


def edge_mask(mask):
    """Boundary shell of ``mask``: voxels removed by one binary erosion step."""
    inc = mask.included
    return inc & ~ndimage.binary_erosion(inc, border_value=0)


def _flat_in_mask(volume, mask, what):
    """Boolean volume (or Mask) restricted to the ``mask`` voxels."""
    if hasattr(volume, "included"):
        if volume.grid != mask.grid:
            raise GridMismatch(f"{what} mask grid differs from the model grid")
        volume = volume.included
    volume = np.asarray(volume, dtype=bool)
    if volume.shape != tuple(mask.grid.dims):
        raise GridMismatch(f"{what} mask has shape {volume.shape}, grid is {mask.grid.dims}")
    return mask.from_volume(volume).astype(bool)


def high_frequency_content(series, tr, cutoff_hz=0.10):
    """Fraction of periodogram power above ``cutoff_hz`` (DC excluded), per column."""
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    freqs, power = signal.periodogram(x, fs=1.0 / tr, detrend="constant", axis=0)
    power = power[1:]
    freqs = freqs[1:]
    total = power.sum(axis=0)
    high = power[freqs > cutoff_hz].sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, high / np.where(total > 0, total, 1.0), 0.0)


def map_weights(sources, z_threshold=2.0):
    """Absolute z-scored map weights, zeroed below ``z_threshold``.

    Rows with no voxel above the threshold fall back to all absolute weights.
    """
    s = np.asarray(sources, dtype=float)
    sd = s.std(axis=1, keepdims=True)
    z = (s - s.mean(axis=1, keepdims=True)) / np.where(sd > 0, sd, 1.0)
    w = np.where(np.abs(z) > z_threshold, np.abs(z), 0.0)
    empty = w.sum(axis=1) == 0
    w[empty] = np.abs(s[empty])
    return w


def motion_columns(confounds):
    names = list(confounds.names)
    picked = [i for i, n in enumerate(names) if n in MOTION_COLUMNS]
    if not picked:
        picked = [i for i, n in enumerate(names) if not n.startswith(("spike", "motion_outlier"))]
    return confounds.data[:, picked]


def aroma_features(model, series, edge=None, csf=None, motion=None, thresholds=None):
    """Per-component hfc, edge/CSF fractions and motion correlation.

    ``series`` is a ComponentSeries (a bare ``(T, K)`` array is read at
    TR 2 s). ``edge`` defaults to the mask boundary; without ``csf`` the CSF
    fraction is 0 and without ``motion`` the motion correlation is 0.
    """
    thresholds = thresholds or AromaThresholds()
    data = np.asarray(getattr(series, "data", series), dtype=float)
    tr = getattr(series, "tr", None) or 2.0
    if data.shape[1] != model.k:
        raise LengthMismatch(f"series has {data.shape[1]} components, model has {model.k}")
    weights = map_weights(model.sources, thresholds.z_threshold)
    total = weights.sum(axis=1)

    edge_flat = _flat_in_mask(edge if edge is not None else edge_mask(model.mask), model.mask, "edge")
    edge_frac = weights[:, edge_flat].sum(axis=1) / total
    if csf is not None:
        csf_frac = weights[:, _flat_in_mask(csf, model.mask, "csf")].sum(axis=1) / total
    else:
        csf_frac = np.zeros(model.k)

    if motion is not None:
        mot = motion_columns(motion) if hasattr(motion, "names") else np.asarray(motion, dtype=float)
        if mot.shape[0] != data.shape[0]:
            raise LengthMismatch(f"motion has {mot.shape[0]} rows, series {data.shape[0]}")
        motion_corr = np.abs(_corr_matrix(data.T, mot.T)).max(axis=1) if mot.shape[1] else np.zeros(model.k)
    else:
        motion_corr = np.zeros(model.k)

    hfc = high_frequency_content(data, tr, thresholds.cutoff_hz)
    clip = lambda a: np.clip(np.asarray(a, dtype=float), 0.0, 1.0)
    return AromaFeatures(clip(hfc), clip(edge_frac), clip(csf_frac), clip(motion_corr))


def classify(features, thresholds=None):
    """``noise`` if CSF > t_csf, or HFC > t_hfc, or (edge > t_edge and motion > t_rp)."""
    t = thresholds or AromaThresholds()
    noise = (
        (features.csf_frac > t.csf)
        | (features.hfc > t.hfc)
        | ((features.edge_frac > t.edge) & (features.motion_corr > t.rp))
    )
    return ["noise" if n else "signal" for n in noise]
