"""Stimulus design matrices at TR resolution.

Word-level tracks (surprisal, embeddings) are moved onto the acquisition grid
with a Lanczos kernel evaluated at TR-bin centres; word rate is a per-bin
count. Every track is then expanded into FIR lags and z-scored.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    ConstantColumnWarning,
    DegenerateRegressor,
    DimMismatch,
    LengthMismatch,
    MissingSurprisal,
    NonPositiveProbability,
    WordPastEnd,
)
from .preprocess import zscore_columns

DEFAULT_DELAYS = (1, 2, 3, 4, 5)


@dataclass
class WordFeatureTrack:
    values: np.ndarray   # (n_words, d)
    times: np.ndarray    # word midpoints, seconds
    name: str = "track"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        if self.values.shape[0] != self.times.size:
            raise DimMismatch("track values and times differ in length")
        if not (np.isfinite(self.values).all() and np.isfinite(self.times).all()):
            raise DimMismatch(f"track {self.name!r} has non-finite entries")

    @property
    def d(self):
        return self.values.shape[1]


@dataclass
class FeatureMatrix:
    data: np.ndarray     # (T, D)
    names: list
    tr: float = 2.0
    provenance: list = field(default=None)   # (feature, delay) per column; delay None before FIR

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim == 1:
            self.data = self.data[:, None]
        self.names = list(self.names)
        if self.data.shape[1] != len(self.names):
            raise DimMismatch(f"{self.data.shape[1]} columns but {len(self.names)} names")
        if not np.isfinite(self.data).all():
            raise DimMismatch("feature matrix has non-finite entries")
        if self.provenance is None:
            self.provenance = [(n, None) for n in self.names]

    @property
    def n_samples(self):
        return self.data.shape[0]

    @property
    def d(self):
        return self.data.shape[1]

    def rows(self, start, stop):
        return FeatureMatrix(self.data[start:stop], self.names, self.tr, list(self.provenance))


# ---------------------------------------------------------------------------
# word-level tracks
# ---------------------------------------------------------------------------

def word_rate(words, tr, n_trs):
    """Count of word midpoints falling in each ``[t*tr, (t+1)*tr)`` bin."""
    mids = words.midpoints
    if mids.size and (mids.max() >= n_trs * tr or mids.min() < 0):
        raise WordPastEnd(f"word midpoint outside [0, {n_trs * tr}) s")
    bins = np.floor(mids / tr).astype(int)
    counts = np.bincount(bins, minlength=n_trs).astype(float)
    return FeatureMatrix(counts[:, None], ["word_rate"], tr)


def surprisal_track(words, base=np.e):
    """Per-word surprisal ``-log P``; passthrough when the table already has it."""
    if words.surprisal is not None and np.isfinite(words.surprisal).all():
        values = words.surprisal
    elif words.probability is not None:
        p = words.probability
        if not np.all(p > 0):
            raise NonPositiveProbability("word probabilities must be > 0")
        if np.any(p > 1):
            raise NonPositiveProbability("word probabilities must be <= 1")
        values = -np.log(p) / np.log(base)
    else:
        raise MissingSurprisal("word table has neither surprisal nor probabilities")
    return WordFeatureTrack(values.copy(), words.midpoints, "surprisal")


def embedding_track(words, embeddings, name="embedding"):
    embeddings = np.asarray(embeddings, dtype=float)
    if embeddings.shape[0] != len(words):
        raise DimMismatch(f"{embeddings.shape[0]} embedding rows for {len(words)} words")
    return WordFeatureTrack(embeddings, words.midpoints, name)


def ones_track(words, name="word_rate_lanczos"):
    return WordFeatureTrack(np.ones(len(words)), words.midpoints, name)


def residualize(target, regressor):
    """OLS residual of a single-column ``target`` on ``[1 | regressor]``."""
    y = np.asarray(getattr(target, "data", target), dtype=float).reshape(-1)
    x = np.asarray(getattr(regressor, "data", regressor), dtype=float).reshape(-1)
    if y.size != x.size:
        raise LengthMismatch(f"target has {y.size} rows, regressor {x.size}")
    xc = x - x.mean()
    ss = xc @ xc
    if ss <= 1e-24 * max(1.0, x @ x):
        raise DegenerateRegressor("regressor is constant; it adds nothing beyond the intercept")
    yc = y - y.mean()
    resid = yc - xc * (xc @ yc) / ss
    name = getattr(target, "names", ["target"])[0]
    tr = getattr(target, "tr", 2.0)
    return FeatureMatrix(resid[:, None], [f"{name}_resid"], tr)


def lanczos_kernel(x, window=3):
    """``sinc(x) sinc(x / a)`` for ``|x| < a``, else 0."""
    x = np.asarray(x, dtype=float)
    out = np.sinc(x) * np.sinc(x / window)
    return np.where(np.abs(x) < window, out, 0.0)


def lanczos_downsample(track, tr, n_trs, window=3):
    """Resample word-time values onto TR-bin centres.

    Entry ``(t, j) = sum_w values[w, j] * L((t*tr + tr/2 - times[w]) / tr)``.
    """
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    if track.values.shape[0] == 0:
        raise DimMismatch("lanczos_downsample needs at least one word")
    centres = (np.arange(n_trs) + 0.5) * tr
    kernel = lanczos_kernel((centres[:, None] - track.times[None, :]) / tr, window)
    names = [track.name] if track.d == 1 else [f"{track.name}{j}" for j in range(track.d)]
    return FeatureMatrix(kernel @ track.values, names, tr)


def fir_expand(features, delays=DEFAULT_DELAYS, groups=None):
    """Lagged copies of every column, delay-major, zero-padded at the start.

    ``groups`` (run label per row) restarts the zero padding at each run so
    lags never leak across run boundaries.
    """
    delays = [int(d) for d in delays]
    if not delays or min(delays) < 1:
        raise ConfigError(f"delays must be a non-empty set of integers >= 1, got {delays}")
    x = features.data
    n = x.shape[0]
    if groups is None:
        starts = np.zeros(n, dtype=int)
    else:
        groups = np.asarray(groups)
        new = np.r_[True, groups[1:] != groups[:-1]]
        starts = np.maximum.accumulate(np.where(new, np.arange(n), 0))
    pos = np.arange(n) - starts
    blocks, names, prov = [], [], []
    for d in delays:
        shifted = np.zeros_like(x)
        if d < n:
            shifted[d:] = x[:-d]
        shifted[pos < d] = 0.0
        blocks.append(shifted)
        names.extend(f"{name}@{d}" for name in features.names)
        prov.extend((p[0], d) for p in features.provenance)
    return FeatureMatrix(np.hstack(blocks), names, features.tr, prov)


# ---------------------------------------------------------------------------
# design assembly
# ---------------------------------------------------------------------------

@dataclass
class FeatureConfig:
    tracks: list = field(default_factory=lambda: ["word_rate", "residual_surprisal", "embeddings"])
    delays: list = field(default_factory=lambda: list(DEFAULT_DELAYS))
    window: int = 3
    log_base: float = float(np.e)

    def __post_init__(self):
        known = {"word_rate", "word_rate_lanczos", "surprisal", "residual_surprisal", "embeddings"}
        unknown = [t for t in self.tracks if t not in known]
        if unknown:
            raise ConfigError(f"unknown feature tracks {unknown}; choose from {sorted(known)}")
        if not self.tracks:
            raise ConfigError("features.tracks must not be empty")


def build_tracks(words, tr, n_trs, config, embeddings=None):
    """Pre-FIR TR-resolution matrices for one run, in ``config.tracks`` order."""
    out = []
    rate = word_rate(words, tr, n_trs)
    for name in config.tracks:
        if name == "word_rate":
            out.append(rate)
        elif name == "word_rate_lanczos":
            out.append(lanczos_downsample(ones_track(words), tr, n_trs, config.window))
        elif name in ("surprisal", "residual_surprisal"):
            surp = lanczos_downsample(surprisal_track(words, config.log_base), tr, n_trs, config.window)
            if name == "residual_surprisal":
                surp = residualize(surp, rate)
                surp.names = ["residual_surprisal"]
                surp.provenance = [("residual_surprisal", None)]
            out.append(surp)
        elif name == "embeddings":
            if embeddings is None:
                raise ConfigError("track 'embeddings' requested but no embedding file given")
            out.append(lanczos_downsample(embedding_track(words, embeddings, "emb"), tr, n_trs, config.window))
    return out


def concat_columns(mats):
    n = {m.n_samples for m in mats}
    if len(n) != 1:
        raise LengthMismatch(f"tracks have different lengths {sorted(n)}")
    return FeatureMatrix(
        np.hstack([m.data for m in mats]),
        [name for m in mats for name in m.names],
        mats[0].tr,
        [p for m in mats for p in m.provenance],
    )


def assemble_design(tracks, delays=DEFAULT_DELAYS, trim_head=0, trim_tail=0, zscore=True):
    """FIR-expand each track, trim rows, z-score columns and concatenate.

    Constant columns are dropped with a warning. The lag expansion happens on
    the full run, so trimmed rows still supply history to the retained ones.
    """
    if not tracks:
        raise ConfigError("assemble_design needs at least one track")
    lengths = {t.n_samples for t in tracks}
    if len(lengths) != 1:
        raise LengthMismatch(f"tracks have different lengths {sorted(lengths)}")
    n = lengths.pop()
    if trim_head + trim_tail >= n:
        raise LengthMismatch(f"trimming {trim_head}+{trim_tail} leaves no rows of {n}")
    blocks = []
    for track in tracks:
        expanded = fir_expand(track, delays).rows(trim_head, n - trim_tail)
        data = expanded.data
        if zscore:
            sd = data.std(axis=0)
            keep = sd > 1e-12 * np.maximum(1.0, np.abs(data.mean(axis=0)))
            if not keep.all():
                dropped = [expanded.names[j] for j in np.flatnonzero(~keep)]
                warnings.warn(f"dropping constant design columns {dropped}", ConstantColumnWarning, stacklevel=2)
            data = zscore_columns(data[:, keep], warn=False)
            names = [expanded.names[j] for j in np.flatnonzero(keep)]
            prov = [expanded.provenance[j] for j in np.flatnonzero(keep)]
        else:
            names, prov = expanded.names, expanded.provenance
        blocks.append(FeatureMatrix(data, names, track.tr, prov))
    return concat_columns(blocks)
