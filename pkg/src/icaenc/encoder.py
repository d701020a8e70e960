"""Ridge encoding models with cross-validated per-target regularization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .dataio import atomic_write_text
from .errors import (
    ConfigError,
    DimMismatch,
    EmptyParcel,
    GridMismatch,
    LengthMismatch,
    MalformedHeader,
    NonFiniteInput,
    TooFewRows,
)

FOLD_SCHEMES = ("blocks", "by-story")


def default_alpha_grid():
    return list(np.logspace(0, 4, 10))


@dataclass
class RidgeSpec:
    alpha_grid: list = field(default_factory=default_alpha_grid)
    folds: int = 5
    fold_scheme: str = "blocks"
    scoring: str = "pearson"

    def __post_init__(self):
        grid = np.asarray(self.alpha_grid, dtype=float).reshape(-1)
        if grid.size == 0 or not np.all(grid > 0) or not np.isfinite(grid).all():
            raise ConfigError("alpha_grid must be a non-empty list of positive reals")
        self.alpha_grid = sorted(float(a) for a in grid)
        if int(self.folds) < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        self.folds = int(self.folds)
        if self.fold_scheme not in FOLD_SCHEMES:
            raise ConfigError(f"fold_scheme must be one of {FOLD_SCHEMES}, got {self.fold_scheme!r}")
        if self.scoring != "pearson":
            raise ConfigError("only pearson scoring is supported")


@dataclass(eq=False)
class EncodingModel:
    weights: np.ndarray          # (D, M) on z-scored design columns
    intercepts: np.ndarray       # (M,)
    alpha_per_target: np.ndarray  # (M,)
    cv_scores: np.ndarray        # (folds, M) at the chosen alpha
    x_mean: np.ndarray           # (D,)
    x_sd: np.ndarray             # (D,)
    alpha_grid: list = field(default_factory=list)
    alpha_scores: np.ndarray = None   # (n_alpha, M) fold-mean scores
    feature_names: list = None

    @property
    def n_features(self):
        return self.weights.shape[0]


def as_matrix(x):
    return np.asarray(getattr(x, "data", x), dtype=float)


def _check_inputs(x, y, min_rows):
    if x.ndim != 2:
        raise DimMismatch("design must be 2-D")
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise LengthMismatch(f"design has {x.shape[0]} rows, targets {y.shape[0]}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise NonFiniteInput("design and targets must be finite")
    if x.shape[0] <= min_rows:
        raise TooFewRows(f"need more than {min_rows} rows, got {x.shape[0]}")
    return x, y


def make_folds(n_rows, spec, groups=None, seed=0):
    """Held-out row indices for each fold.

    ``blocks`` splits rows into contiguous chunks. ``by-story`` keeps each
    story (``groups`` label) whole; stories are shuffled by ``seed`` and dealt
    into ``spec.folds`` contiguous groups.
    """
    if spec.fold_scheme == "blocks" or groups is None:
        return [idx for idx in np.array_split(np.arange(n_rows), spec.folds)]
    groups = np.asarray(groups)
    if groups.size != n_rows:
        raise LengthMismatch("groups must label every row")
    _, first = np.unique(groups, return_index=True)
    stories = groups[np.sort(first)]
    if stories.size < spec.folds:
        raise ConfigError(f"by-story folds need >= {spec.folds} stories, got {stories.size}")
    order = np.random.default_rng(seed).permutation(stories.size)
    return [np.flatnonzero(np.isin(groups, stories[chunk]))
            for chunk in np.array_split(order, spec.folds)]


def column_stats(x):
    mean = x.mean(axis=0)
    sd = x.std(axis=0)
    return mean, np.where(sd > 1e-12 * np.maximum(1.0, np.abs(mean)), sd, 1.0)


def ridge_solve(xz, yc, alpha):
    """Solve ``(X^T X + alpha I) B = X^T Y`` by Cholesky, SVD on failure."""
    gram = xz.T @ xz
    rhs = xz.T @ yc
    try:
        c = linalg.cho_factor(gram + alpha * np.eye(gram.shape[0]), lower=True, check_finite=False)
        return linalg.cho_solve(c, rhs, check_finite=False)
    except linalg.LinAlgError:
        u, s, vt = np.linalg.svd(xz, full_matrices=False)
        return vt.T @ ((s / (s ** 2 + alpha))[:, None] * (u.T @ yc))


def pearson_columns(a, b):
    """Column-wise Pearson r; columns with zero variance score 0."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    den = np.sqrt((a ** 2).sum(axis=0) * (b ** 2).sum(axis=0))
    num = (a * b).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(r, -1.0, 1.0)


def fit_fold(x, y, train, test, alphas):
    """Out-of-fold predictions for ``test`` rows for every alpha: ``(n_alpha, n_test, M)``.

    Only ``train`` rows enter the column statistics and the solve.
    """
    xtr, ytr = x[train], y[train]
    mean, sd = column_stats(xtr)
    xz = (xtr - mean) / sd
    xte = (x[test] - mean) / sd
    ymu = ytr.mean(axis=0)
    yc = ytr - ymu
    gram = xz.T @ xz
    rhs = xz.T @ yc
    eye = np.eye(gram.shape[0])
    out = np.empty((len(alphas), len(test), y.shape[1]))
    for i, alpha in enumerate(alphas):
        try:
            c = linalg.cho_factor(gram + alpha * eye, lower=True, check_finite=False)
            beta = linalg.cho_solve(c, rhs, check_finite=False)
        except linalg.LinAlgError:
            beta = ridge_solve(xz, yc, alpha)
        out[i] = xte @ beta + ymu
    return out


def fold_weights(x, y, train, alpha):
    """Fold-local weights in the fold's own z-scored units (for hygiene checks)."""
    x, y = as_matrix(x), as_matrix(y)
    if y.ndim == 1:
        y = y[:, None]
    mean, sd = column_stats(x[train])
    return ridge_solve((x[train] - mean) / sd, y[train] - y[train].mean(axis=0), alpha)


def fit_ridge(x, y, spec=None, seed=0, groups=None):
    """Fit ridge weights with per-target alpha chosen by cross-validated Pearson r.

    Ties between alphas go to the smaller alpha. After selection each target is
    refit on all rows at its alpha.
    """
    spec = spec or RidgeSpec()
    names = getattr(x, "names", None)
    x, y = _check_inputs(as_matrix(x), as_matrix(y), spec.folds)
    folds = make_folds(x.shape[0], spec, groups, seed)
    alphas = spec.alpha_grid
    n_t, m = y.shape
    scores = np.empty((len(alphas), len(folds), m))
    for f, test in enumerate(folds):
        train = np.setdiff1d(np.arange(n_t), test, assume_unique=True)
        preds = fit_fold(x, y, train, test, alphas)
        for i in range(len(alphas)):
            scores[i, f] = pearson_columns(preds[i], y[test])
    alpha_scores = scores.mean(axis=1)
    best = np.argmax(alpha_scores, axis=0)

    mean, sd = column_stats(x)
    xz = (x - mean) / sd
    ymu = y.mean(axis=0)
    yc = y - ymu
    weights = np.empty((x.shape[1], m))
    for i in np.unique(best):
        cols = np.flatnonzero(best == i)
        weights[:, cols] = ridge_solve(xz, yc[:, cols], alphas[i])
    return EncodingModel(
        weights=weights,
        intercepts=ymu,
        alpha_per_target=np.asarray(alphas)[best],
        cv_scores=scores[best, :, np.arange(m)].T,
        x_mean=mean,
        x_sd=sd,
        alpha_grid=list(alphas),
        alpha_scores=alpha_scores,
        feature_names=names,
    )


def predict(model, x):
    """``(X - train mean) / train sd @ weights + intercepts``."""
    x = as_matrix(x)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise DimMismatch(f"design has {x.shape[-1]} columns, model expects {model.n_features}")
    return ((x - model.x_mean) / model.x_sd) @ model.weights + model.intercepts


def cv_predict(x, y, folds, alpha_per_target):
    """Concatenated out-of-fold predictions at fixed per-target alphas, in row order."""
    x, y = as_matrix(x), as_matrix(y)
    if y.ndim == 1:
        y = y[:, None]
    alpha_per_target = np.asarray(alpha_per_target, dtype=float)
    uniq = np.unique(alpha_per_target)
    pred = np.empty_like(y)
    n_t = x.shape[0]
    for test in folds:
        train = np.setdiff1d(np.arange(n_t), test, assume_unique=True)
        out = fit_fold(x, y, train, test, uniq)
        for i, a in enumerate(uniq):
            cols = np.flatnonzero(alpha_per_target == a)
            pred[np.ix_(test, cols)] = out[i][:, cols]
    return pred


# ---------------------------------------------------------------------------
# target adapters
# ---------------------------------------------------------------------------

def targets_from_voxels(series):
    return np.asarray(series.data)


def targets_from_components(components):
    return np.asarray(components.data)


def targets_from_rois(series, atlas):
    """Mean time series over each parcel's in-mask voxels, ``(T, n_parcels)``."""
    if atlas.grid != series.grid:
        raise GridMismatch("atlas grid differs from the series grid")
    member = atlas.in_mask(series.mask)
    counts = member.sum(axis=1)
    if np.any(counts == 0):
        empty = [atlas.names[i] for i in np.flatnonzero(counts == 0)]
        raise EmptyParcel(f"parcels with no in-mask voxels: {empty}")
    return series.data @ (member.T / counts)


def fit_targets_from(obj, atlas=None):
    """Targets for voxelwise (series), ROI (series + atlas) or component models."""
    if hasattr(obj, "mask"):
        return targets_from_voxels(obj) if atlas is None else targets_from_rois(obj, atlas)
    return targets_from_components(obj)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_encoding_model(model, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {
        "weights": model.weights,
        "intercepts": model.intercepts,
        "alpha_per_target": model.alpha_per_target,
        "cv_scores": model.cv_scores,
        "x_mean": model.x_mean,
        "x_sd": model.x_sd,
        "alpha_scores": model.alpha_scores,
    }
    for name, arr in arrays.items():
        with open(directory / f"{name}.npy", "wb") as fh:
            np.save(fh, np.asarray(arr, dtype=np.float64), allow_pickle=False)
    meta = {"alpha_grid": model.alpha_grid, "feature_names": model.feature_names,
            "n_features": int(model.weights.shape[0]), "n_targets": int(model.weights.shape[1])}
    atomic_write_text(directory / "model.json", json.dumps(meta, indent=1) + "\n")


def load_encoding_model(directory):
    directory = Path(directory)
    try:
        meta = json.loads((directory / "model.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{directory}: unreadable encoding model ({exc})") from exc
    arrays = {name: np.load(directory / f"{name}.npy", allow_pickle=False)
              for name in ("weights", "intercepts", "alpha_per_target", "cv_scores",
                           "x_mean", "x_sd", "alpha_scores")}
    return EncodingModel(alpha_grid=meta["alpha_grid"], feature_names=meta["feature_names"], **arrays)
