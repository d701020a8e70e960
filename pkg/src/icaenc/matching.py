"""Relating components to atlas parcels and across subjects."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import pearson_columns
from .errors import (
    AllZeroSource,
    ConfigError,
    EmptyParcel,
    GridMismatch,
    NoSharedStory,
    TooFewSubjects,
)
from .stats import rank_components

LOW_CONFIDENCE_R = 0.1
DIRECTIONS = ("temporal", "spatial")


@dataclass
class ThresholdedMap:
    component: int
    values: np.ndarray      # sign-aligned map over mask voxels
    retained: np.ndarray    # boolean over mask voxels
    percentile: float

    @property
    def binary(self):
        return self.retained.astype(float)

    @property
    def weighted(self):
        return np.where(self.retained, self.values, 0.0)


def n_retained(n_voxels, percentile):
    """Voxels kept above ``percentile``: ``V - floor(P * V / 100)``, at least one."""
    below = math.floor(percentile * n_voxels / 100.0 + 1e-9)
    return max(1, n_voxels - below)


def threshold_map(values, percentile=99.0, component=0):
    """Keep voxels whose ``|value|`` reaches the top ``100 - percentile`` percent.

    The cut is the ``n_retained``-th largest ``|value|`` (nearest rank); every
    voxel tied with it is kept as well.
    """
    if not 0 < percentile < 100:
        raise ConfigError(f"percentile must be in (0, 100), got {percentile}")
    values = np.asarray(values, dtype=float).reshape(-1)
    mag = np.abs(values)
    if not mag.any():
        raise AllZeroSource(f"component {component} map is all zero")
    n_keep = n_retained(mag.size, percentile)
    cut = np.partition(mag, mag.size - n_keep)[mag.size - n_keep]
    return ThresholdedMap(component, values, mag >= cut, float(percentile))


def _corr_matrix(a, b):
    """Pearson r between every row of ``a`` and every row of ``b``; constant rows give 0."""
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    na = np.sqrt((a ** 2).sum(axis=1))
    nb = np.sqrt((b ** 2).sum(axis=1))
    num = a @ b.T
    den = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(r, -1.0, 1.0)


@dataclass
class AtlasMatch:
    parcel_names: list
    r: np.ndarray                 # (K, n_parcels)
    best_parcel: np.ndarray       # (K,) parcel index per component
    best_r: np.ndarray            # (K,)
    tied: np.ndarray              # (K,) another parcel reached the same r
    low_confidence: np.ndarray    # (K,) best_r < 0.1
    parcel_best_component: np.ndarray   # (n_parcels,) best component per parcel
    parcel_best_r: np.ndarray

    def component_for(self, name):
        return int(self.parcel_best_component[self.parcel_names.index(name)])

    def rows(self):
        return [
            {"component": k, "best_parcel": self.parcel_names[self.best_parcel[k]],
             "spatial_r": float(self.best_r[k]), "tied": int(self.tied[k]),
             "low_confidence": int(self.low_confidence[k])}
            for k in range(self.r.shape[0])
        ]


def match_atlas(model, atlas, percentile=99.0, weighted=False):
    """Spatially correlate thresholded component maps with every atlas parcel.

    By default both sides are binary (retained voxel vs parcel member) over the
    analysis mask; ``weighted=True`` keeps the retained map values instead.
    Argmax ties resolve to the earlier parcel (and component).
    """
    if atlas.grid != model.grid:
        raise GridMismatch("atlas grid differs from the model grid")
    member = atlas.in_mask(model.mask).astype(float)
    empty = member.sum(axis=1) == 0
    if empty.any():
        raise EmptyParcel(f"parcels with no in-mask voxels: {[atlas.names[i] for i in np.flatnonzero(empty)]}")
    maps = np.array([
        (lambda t: t.weighted if weighted else t.binary)(threshold_map(row, percentile, k))
        for k, row in enumerate(model.sources)
    ])
    r = _corr_matrix(maps, member)
    best = np.argmax(r, axis=1)
    best_r = r[np.arange(r.shape[0]), best]
    tied = (r == best_r[:, None]).sum(axis=1) > 1
    pbest = np.argmax(r, axis=0)
    return AtlasMatch(
        parcel_names=atlas.names,
        r=r,
        best_parcel=best,
        best_r=best_r,
        tied=tied,
        low_confidence=best_r < LOW_CONFIDENCE_R,
        parcel_best_component=pbest,
        parcel_best_r=r[pbest, np.arange(r.shape[1])],
    )


# ---------------------------------------------------------------------------
# cross-subject matching
# ---------------------------------------------------------------------------

@dataclass
class SubjectBundle:
    """What matching needs from one subject.

    ``timeseries`` are the shared test-story component series ``(T, K)``
    (predicted by default); ``sources`` the sign-aligned maps ``(K, V)``;
    ``scores`` the per-component test predictivity used for ranking.
    """

    name: str
    sources: np.ndarray
    timeseries: np.ndarray
    scores: np.ndarray
    mask_digest: str = ""
    grid: object = None
    story: str = "test"

    @property
    def k(self):
        return self.sources.shape[0]


@dataclass
class MatchResult:
    reference: str
    other: str
    direction: str
    partner: np.ndarray      # (K_ref,) matched component in ``other``
    match_r: np.ndarray      # (K_ref,) metric used for matching
    eval_r: np.ndarray       # (K_ref,) complementary metric, sign-oriented

    def rows(self):
        return [
            {"ref_subject": self.reference, "ref_component": k, "other_subject": self.other,
             "matched_component": int(self.partner[k]), "match_r": float(self.match_r[k]),
             "eval_r": float(self.eval_r[k])}
            for k in range(self.partner.size)
        ]


def _check_pair(ref, other, direction):
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}")
    if ref.timeseries.shape[0] != other.timeseries.shape[0] or ref.story != other.story:
        raise NoSharedStory(f"{ref.name} and {other.name} do not share a test story of equal length")
    if ref.sources.shape[1] != other.sources.shape[1] or (
        ref.mask_digest and other.mask_digest and ref.mask_digest != other.mask_digest
    ):
        raise GridMismatch(f"{ref.name} and {other.name} maps are on different grids")


def match_pair(ref, other, direction="temporal", signed=False):
    """Best partner in ``other`` for every component of ``ref``.

    One domain (temporal or spatial correlation) selects the partner and the
    other domain evaluates the pair. With ``signed=False`` the partner is the
    argmax of ``|r|`` and the evaluation is multiplied by the sign of the match
    correlation, so the result does not depend on ICA sign flips.
    """
    _check_pair(ref, other, direction)
    temporal = _corr_matrix(ref.timeseries.T, other.timeseries.T)
    spatial = _corr_matrix(ref.sources, other.sources)
    match, evaluate = (temporal, spatial) if direction == "temporal" else (spatial, temporal)
    score = match if signed else np.abs(match)
    partner = np.argmax(score, axis=1)
    rows = np.arange(partner.size)
    picked = match[rows, partner]
    sign = np.ones_like(picked) if signed else np.where(picked < 0, -1.0, 1.0)
    return MatchResult(ref.name, other.name, direction, partner, picked * sign,
                       evaluate[rows, partner] * sign)


def match_subjects(reference, others, direction="temporal", signed=False):
    return [match_pair(reference, o, direction, signed) for o in others]


@dataclass
class GroupSummary:
    direction: str
    top_n: int
    per_reference_eval: np.ndarray    # (n_subjects, top_n)
    per_reference_match: np.ndarray
    subjects: list = field(default_factory=list)

    @property
    def mean_eval(self):
        return self.per_reference_eval.mean(axis=0)

    @property
    def sd_eval(self):
        return self.per_reference_eval.std(axis=0)

    @property
    def mean_match(self):
        return self.per_reference_match.mean(axis=0)

    @property
    def sd_match(self):
        return self.per_reference_match.std(axis=0)

    def rows(self):
        return [
            {"direction": self.direction, "rank": i + 1,
             "mean_match_r": float(self.mean_match[i]), "sd_match_r": float(self.sd_match[i]),
             "mean_eval_r": float(self.mean_eval[i]), "sd_eval_r": float(self.sd_eval[i])}
            for i in range(self.top_n)
        ]


def loo_aggregate(bundles, direction="temporal", top_n=5, signed=False):
    """Leave-one-out group summary over subjects.

    Each subject serves once as reference. For its ``top_n`` components by
    predictivity, metrics are averaged over the remaining subjects; the
    per-reference means are then summarised per rank (mean and population SD
    across references).
    """
    if len(bundles) < 2:
        raise TooFewSubjects(f"leave-one-out needs >= 2 subjects, got {len(bundles)}")
    top_n = min(top_n, min(b.k for b in bundles))
    eval_means = np.empty((len(bundles), top_n))
    match_means = np.empty((len(bundles), top_n))
    results = []
    for i, ref in enumerate(bundles):
        others = [b for j, b in enumerate(bundles) if j != i]
        res = match_subjects(ref, others, direction, signed)
        results.extend(res)
        top = rank_components(ref.scores)[:top_n]
        eval_means[i] = np.mean([r.eval_r[top] for r in res], axis=0)
        match_means[i] = np.mean([r.match_r[top] for r in res], axis=0)
    summary = GroupSummary(direction, top_n, eval_means, match_means, [b.name for b in bundles])
    return summary, results


def spatial_corr(a, b):
    """Pearson r between maps, row-wise over voxels (convenience wrapper)."""
    return pearson_columns(np.asarray(a, float).T, np.asarray(b, float).T)
