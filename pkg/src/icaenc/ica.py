"""Spatial ICA: estimate sources from one set of runs, project others onto them.

Model: ``X = A S`` with ``X`` of shape ``(T, V)``, spatial sources ``S``
``(K, V)`` and component time courses ``A`` ``(T, K)``. Voxels are the ICA
samples, so independence is sought across space.

Estimation centers each voxel column over time, whitens to exactly ``k``
principal components via a thin SVD, and runs symmetric FastICA with the
logcosh contrast on the voxel-centered whitened maps. Sources are reported
uncentered (their spatial mean is kept) with unit population variance per
row, and ``A S`` equals the rank-``k`` PCA reconstruction of the centered
data.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import (
    Mask,
    VolumeGrid,
    atomic_write_text,
    read_matrix_tsv,
    read_vxt,
    write_matrix_tsv,
    write_vxt,
)
from .errors import (
    ConfigError,
    DimMismatch,
    GridMismatch,
    MalformedHeader,
    MaskMismatch,
    NonConverged,
    RankTooLow,
)

PINV_RCOND = 1e-10
RANK_RTOL = 1e-10


@dataclass(eq=False)
class IcaModel:
    k: int
    sources: np.ndarray          # (K, V)
    mixing: np.ndarray           # (T, K) time courses of the estimation data
    unmixing: np.ndarray         # (K, T): sources = unmixing @ (X - column means)
    whitening: np.ndarray        # (K, T): whitened maps = whitening @ (X - column means)
    column_means: np.ndarray     # (V,) voxel means over the estimation data
    grid: VolumeGrid
    mask: Mask
    seed: int = 0
    n_iter: int = 0
    final_delta: float = float("nan")
    converged: bool = True
    _pinv: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not np.isfinite(self.sources).all():
            raise RankTooLow("sources contain non-finite values")

    @property
    def pinv(self):
        """Moore-Penrose pseudoinverse of the sources, ``(V, K)``."""
        if self._pinv is None:
            self._pinv = np.linalg.pinv(self.sources, rcond=PINV_RCOND)
        return self._pinv

    @property
    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.sources).tobytes())
        h.update(self.mask.digest.encode())
        return h.hexdigest()

    def reconstruct(self):
        return self.mixing @ self.sources


@dataclass(eq=False)
class ComponentSeries:
    """Component time courses ``(T, K)`` for one run."""

    data: np.ndarray
    tr: float
    model_digest: str = ""
    run_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise DimMismatch("component series must be 2-D (T x K)")
        if not np.isfinite(self.data).all():
            raise DimMismatch("component series contain non-finite values")

    @property
    def k(self):
        return self.data.shape[1]


def _sym_decorrelate(w):
    # w <- (w w^T)^{-1/2} w
    vals, vecs = np.linalg.eigh(w @ w.T)
    vals = np.clip(vals, np.finfo(float).tiny, None)
    return (vecs * (1.0 / np.sqrt(vals))) @ vecs.T @ w


def fastica_symmetric(z, w_init, max_iter=200, tol=1e-4, alpha=1.0):
    """Parallel FastICA (logcosh) on whitened ``z`` of shape ``(k, n_samples)``.

    Returns ``(w, n_iter, delta, converged)``; ``w`` is orthogonal and the
    estimated sources are ``w @ z``. ``delta`` is the largest change
    ``max |(|diag(w_new w_old^T)| - 1)|`` at the last iteration.
    """
    w = _sym_decorrelate(w_init)
    n = z.shape[1]
    best_w, best_delta = w, np.inf
    delta = np.inf
    for it in range(1, max_iter + 1):
        y = alpha * (w @ z)
        g = np.tanh(y)
        g_prime = alpha * (1.0 - g ** 2)
        w_new = (g @ z.T) / n - g_prime.mean(axis=1)[:, None] * w
        w_new = _sym_decorrelate(w_new)
        delta = float(np.max(np.abs(np.abs(np.einsum("ij,ij->i", w_new, w)) - 1.0)))
        w = w_new
        if delta < best_delta:
            best_w, best_delta = w, delta
        if delta < tol:
            return w, it, delta, True
    return best_w, max_iter, best_delta, False


def fit_ica(series, k=100, seed=0, max_iter=200, tol=1e-4):
    """Estimate ``k`` spatial components from ``series``.

    Raises
    ------
    RankTooLow
        ``k`` exceeds the numerical rank of the time-centered data.
    NonConverged
        FastICA did not reach ``tol``; the exception's ``model`` attribute
        carries the best iterate.
    """
    x = series.data
    n_t, n_v = x.shape
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k >= n_t or k > n_v:
        raise RankTooLow(f"k={k} needs T > k and V >= k (T={n_t}, V={n_v})")
    sd = x.std(axis=0)
    mean = x.mean(axis=0)
    if np.max(np.abs(mean)) > 1e-6 or np.max(np.abs(sd[sd > 0] - 1.0), initial=0.0) > 1e-6:
        warnings.warn("fit_ica input does not look standardized", stacklevel=2)

    xc = x - mean
    u, s, vt = np.linalg.svd(xc, full_matrices=False)
    if s[0] == 0 or s[k - 1] <= RANK_RTOL * s[0]:
        raise RankTooLow(f"data rank is below k={k} after centering")
    u_k, s_k = u[:, :k], s[:k]
    scale = np.sqrt(n_v)
    z = vt[:k] * scale                            # (k, V), z z^T / V = I
    whitening = (u_k / s_k).T * scale             # z = whitening @ xc

    # ICA samples are voxels: center each whitened map over voxels and re-whiten
    m = z.mean(axis=1)
    cov = np.eye(k) - np.outer(m, m)
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] <= RANK_RTOL:
        raise RankTooLow("a spatially constant map spans the whitened subspace")
    rewhite = (evecs / np.sqrt(evals)) @ evecs.T
    zw = rewhite @ (z - m[:, None])

    rng = np.random.default_rng(seed)
    w_init = rng.standard_normal((k, k))
    w_rot, n_iter, delta, converged = fastica_symmetric(zw, w_init, max_iter=max_iter, tol=tol)

    unmix_z = w_rot @ rewhite                     # sources = unmix_z @ z
    sources = unmix_z @ z
    mixing = (u_k * s_k) @ np.linalg.inv(unmix_z) / scale
    model = IcaModel(
        k=k,
        sources=sources,
        mixing=mixing,
        unmixing=unmix_z @ whitening,
        whitening=whitening,
        column_means=mean,
        grid=series.grid,
        mask=series.mask,
        seed=seed,
        n_iter=n_iter,
        final_delta=delta,
        converged=converged,
    )
    if not converged:
        raise NonConverged(
            f"FastICA did not converge in {max_iter} iterations (delta={delta:.3g}, tol={tol:g})",
            model=model,
        )
    return model


def check_compatible(model, series):
    if series.grid != model.grid:
        raise GridMismatch("series grid differs from the model grid")
    if series.mask.digest != model.mask.digest:
        raise MaskMismatch("series mask differs from the model mask")


def project(model, series, run_id=""):
    """Component time courses of new data: ``X_new @ pinv(S)``."""
    check_compatible(model, series)
    return ComponentSeries(series.data @ model.pinv, series.tr, model.digest, run_id)


def sign_align(model):
    """Flip components whose source map has a negative median (ties keep sign)."""
    med = np.median(model.sources, axis=1)
    flip = np.where(med < 0, -1.0, 1.0)
    return replace(
        model,
        sources=model.sources * flip[:, None],
        mixing=model.mixing * flip[None, :],
        unmixing=model.unmixing * flip[:, None],
        _pinv=None,
    )


# ---------------------------------------------------------------------------
# persistence: one .vxt volume per source row plus npy matrices and JSON
# ---------------------------------------------------------------------------

def save_model(model, directory):
    directory = Path(directory)
    (directory / "sources").mkdir(parents=True, exist_ok=True)
    for i, row in enumerate(model.sources):
        write_vxt(model.grid, model.mask, 1.0, row[None, :], directory / "sources" / f"ic_{i:03d}.vxt", "f64")
    for name in ("mixing", "unmixing", "whitening"):
        arr = getattr(model, name)
        write_matrix_tsv(arr, directory / f"{name}.tsv", [f"c{j}" for j in range(arr.shape[1])])
    write_vxt(model.grid, model.mask, 1.0, model.column_means[None, :], directory / "column_means.vxt", "f64")
    meta = {
        "k": model.k,
        "seed": model.seed,
        "n_iter": model.n_iter,
        "final_delta": model.final_delta,
        "converged": model.converged,
        "mask_digest": model.mask.digest,
        "digest": model.digest,
    }
    atomic_write_text(directory / "model.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_model(directory):
    directory = Path(directory)
    try:
        meta = json.loads((directory / "model.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{directory}: unreadable model metadata ({exc})") from exc
    rows = []
    grid = mask = None
    for i in range(meta["k"]):
        grid, mask, _, data = read_vxt(directory / "sources" / f"ic_{i:03d}.vxt")
        rows.append(data[0])
    _, _, _, means = read_vxt(directory / "column_means.vxt")
    mats = {name: read_matrix_tsv(directory / f"{name}.tsv")[0] for name in ("mixing", "unmixing", "whitening")}
    if mask.digest != meta["mask_digest"]:
        raise MaskMismatch(f"{directory}: stored mask digest mismatch")
    return IcaModel(
        k=meta["k"],
        sources=np.vstack(rows),
        mixing=mats["mixing"],
        unmixing=mats["unmixing"],
        whitening=mats["whitening"],
        column_means=means[0],
        grid=grid,
        mask=mask,
        seed=meta["seed"],
        n_iter=meta["n_iter"],
        final_delta=meta["final_delta"],
        converged=meta["converged"],
    )


def save_component_series(cs, path, header_lines=()):
    meta = {"tr": cs.tr, "model_digest": cs.model_digest, "run_id": cs.run_id, "k": cs.k}
    write_matrix_tsv(cs.data, path, [f"ic{j:03d}" for j in range(cs.k)], meta, header_lines)


def load_component_series(path):
    data, _, meta = read_matrix_tsv(path)
    meta = meta or {}
    return ComponentSeries(data, meta.get("tr", 1.0), meta.get("model_digest", ""), meta.get("run_id", ""))
