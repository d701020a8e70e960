"""Predictivity statistics: Pearson r, permutation p-values, BH-FDR, ranking."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataio import atomic_write_text
from .encoder import RidgeSpec, as_matrix, cv_predict, make_folds, pearson_columns
from .errors import ConfigError, ConstantInput, LengthMismatch
from .features import FeatureMatrix, fir_expand


def pearson(x, y):
    """Population-moment Pearson correlation of two equal-length series."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.size != y.size:
        raise LengthMismatch(f"lengths differ: {x.size} vs {y.size}")
    if x.size < 3:
        raise LengthMismatch("pearson needs at least 3 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc ** 2).mean())
    sy = np.sqrt((yc ** 2).mean())
    if sx == 0 or sy == 0:
        raise ConstantInput("pearson is undefined for a constant series")
    return float(np.clip((xc * yc).mean() / (sx * sy), -1.0, 1.0))


def permutation_rng(seed, index):
    """Generator for permutation ``index``; independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def permuted_rows(n_rows, seed, index, groups=None, block_len=None):
    """Row order for one null draw.

    Rows are shuffled within each run (``groups``); with ``block_len`` whole
    blocks of consecutive rows are shuffled instead of single rows.
    """
    rng = permutation_rng(seed, index)
    if groups is None:
        groups = np.zeros(n_rows, dtype=int)
    groups = np.asarray(groups)
    order = np.arange(n_rows)
    _, first = np.unique(groups, return_index=True)
    for g in groups[np.sort(first)]:
        idx = np.flatnonzero(groups == g)
        if block_len and block_len > 1:
            blocks = [idx[i:i + block_len] for i in range(0, idx.size, block_len)]
            perm = rng.permutation(len(blocks))
            order[idx] = np.concatenate([blocks[j] for j in perm])
        else:
            order[idx] = idx[rng.permutation(idx.size)]
    return order


def permutation_test(x_pre, y, spec=None, n_perm=1000, seed=0, alphas=None, delays=(1, 2, 3, 4, 5),
                     groups=None, block_len=None, fold_seed=0, n_jobs=1, return_null=False):
    """One-sided permutation p-values for cross-validated predictivity.

    ``x_pre`` holds the design before lag expansion, aligned row-for-row with
    ``y``. Each null draw shuffles those rows (within runs), applies the FIR
    expansion, refits on the cross-validation folds at the fixed per-target
    ``alphas`` and scores the concatenated out-of-fold predictions. The
    observed statistic is computed by the same route on the unshuffled rows.

    Returns ``(p, observed_r)`` or ``(p, observed_r, null)`` with ``null`` of
    shape ``(n_perm, M)``.
    """
    if n_perm < 1:
        raise ConfigError(f"n_perm must be >= 1, got {n_perm}")
    spec = spec or RidgeSpec()
    xp = as_matrix(x_pre)
    y = as_matrix(y)
    if y.ndim == 1:
        y = y[:, None]
    if xp.shape[0] != y.shape[0]:
        raise LengthMismatch(f"design has {xp.shape[0]} rows, targets {y.shape[0]}")
    n_t, m = y.shape
    if alphas is None:
        alphas = np.full(m, spec.alpha_grid[0])
    alphas = np.broadcast_to(np.asarray(alphas, dtype=float), (m,))
    folds = make_folds(n_t, spec, groups if spec.fold_scheme == "by-story" else None, fold_seed)
    base = FeatureMatrix(xp, [f"f{j}" for j in range(xp.shape[1])])

    def score(order):
        design = fir_expand(FeatureMatrix(xp[order], base.names), delays, groups).data
        return pearson_columns(cv_predict(design, y, folds, alphas), y)

    observed = score(np.arange(n_t))

    def draw(i):
        return score(permuted_rows(n_t, seed, i, groups, block_len))

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            null = np.array(list(pool.map(draw, range(n_perm))))
    else:
        null = np.array([draw(i) for i in range(n_perm)])
    null = null.reshape(n_perm, m)
    p = (1.0 + (null >= observed[None, :]).sum(axis=0)) / (n_perm + 1.0)
    if return_null:
        return p, observed, null
    return p, observed


def bh_fdr(p, q=0.05):
    """Benjamini-Hochberg step-up decisions (True = reject)."""
    p = np.asarray(p, dtype=float).reshape(-1)
    if not 0 < q < 1:
        raise ConfigError(f"q must be in (0, 1), got {q}")
    if p.size == 0:
        return np.zeros(0, dtype=bool)
    if np.any((p <= 0) | (p > 1)) or not np.isfinite(p).all():
        raise ConfigError("p-values must lie in (0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    below = p[order] <= q * np.arange(1, m + 1) / m
    reject = np.zeros(m, dtype=bool)
    if below.any():
        k = np.flatnonzero(below)[-1]
        reject[order[:k + 1]] = True
    return reject


def rank_components(scores):
    """Indices ordered by descending score; equal scores keep ascending index."""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.arange(scores.size), -scores))


def ranks_from_scores(scores):
    """1-based rank of each entry under :func:`rank_components`."""
    order = rank_components(scores)
    ranks = np.empty(order.size, dtype=int)
    ranks[order] = np.arange(1, order.size + 1)
    return ranks


@dataclass
class PredictivityReport:
    r: np.ndarray
    p: np.ndarray = None
    significant: np.ndarray = None
    labels: list = None
    extra: dict = None      # column name -> per-target values

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        m = self.r.size
        if self.p is not None:
            self.p = np.asarray(self.p, dtype=float)
        if self.significant is None and self.p is not None:
            self.significant = np.zeros(m, dtype=bool)
        self.extra = dict(self.extra or {})
        if self.labels is not None and len(self.labels) != m:
            raise LengthMismatch("labels must cover every target")

    @property
    def ranks(self):
        return ranks_from_scores(self.r)

    def apply_fdr(self, q=0.05):
        self.significant = bh_fdr(self.p, q)
        return self

    def rows(self):
        ranks = self.ranks
        out = []
        for j in range(self.r.size):
            row = {"component": j, "r": float(self.r[j])}
            row["p"] = float(self.p[j]) if self.p is not None else ""
            row["significant"] = int(bool(self.significant[j])) if self.significant is not None else ""
            row["rank"] = int(ranks[j])
            row["aroma_label"] = self.labels[j] if self.labels is not None else ""
            for key, vals in self.extra.items():
                row[key] = vals[j]
            out.append(row)
        return out

    def summary(self):
        sig = self.significant if self.significant is not None else np.zeros(self.r.size, bool)
        return {
            "n_components": int(self.r.size),
            "n_significant": int(sig.sum()),
            "mean_r": float(self.r.mean()) if self.r.size else None,
            "mean_r_significant": float(self.r[sig].mean()) if sig.any() else None,
        }

    def to_csv(self, path, header_lines=()):
        rows = self.rows()
        cols = list(rows[0]) if rows else ["component", "r", "p", "significant", "rank", "aroma_label"]
        lines = [f"# {h}" for h in header_lines]
        lines.append(",".join(cols))
        for row in rows:
            lines.append(",".join(_csv_cell(row[c]) for c in cols))
        atomic_write_text(path, "\n".join(lines) + "\n")

    def summary_json(self, path, extra=None):
        atomic_write_text(path, json.dumps({**self.summary(), **(extra or {})}, indent=1, sort_keys=True) + "\n")


def _csv_cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)
