import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icaenc.dataio import Atlas, Mask, VolumeGrid
from icaenc.errors import AllZeroSource, ConfigError, GridMismatch, NoSharedStory, TooFewSubjects
from icaenc.ica import IcaModel
from icaenc.matching import (
    SubjectBundle,
    loo_aggregate,
    match_atlas,
    match_pair,
    n_retained,
    threshold_map,
)


@given(st.integers(1, 5000), st.floats(0.5, 99.5))
def test_retained_count_is_nearest_rank(v, pct):
    rng = np.random.default_rng(v)
    values = rng.standard_normal(v)
    t = threshold_map(values, pct)
    assert t.retained.sum() == n_retained(v, pct)
    assert 1 <= n_retained(v, pct) <= v
    kept = np.abs(values[t.retained])
    if (~t.retained).any():
        assert kept.min() > np.abs(values[~t.retained]).max()


def test_threshold_ties_are_retained():
    values = np.array([5.0, -4.0, 4.0, 4.0, 1.0, 0.5, 0.1, 0.0, 0.0, 0.0])
    t = threshold_map(values, 80.0)        # nearest rank keeps 2, three voxels tie at 4
    assert t.retained.tolist() == [True, True, True, True] + [False] * 6
    assert t.binary.sum() == 4 and t.weighted[1] == -4.0
    with pytest.raises(AllZeroSource):
        threshold_map(np.zeros(5))
    with pytest.raises(ConfigError):
        threshold_map(values, 100.0)


def atlas_model(seed=0, noise=0.05):
    rng = np.random.default_rng(seed)
    grid = VolumeGrid((10, 10, 4))
    mask = Mask.full(grid)
    parcels = []
    maps = []
    for i, name in enumerate(["A", "B", "C"]):
        vol = np.zeros(grid.dims, bool)
        vol[3 * i:3 * i + 3, 2:8, :] = True
        parcels.append((name, vol))
        maps.append(mask.from_volume(vol.astype(float)) * rng.uniform(1, 2, mask.v))
    order = [2, 0, 1]
    sources = np.array([maps[i] for i in order]) + noise * rng.standard_normal((3, mask.v))
    sources = np.vstack([sources, rng.standard_normal(mask.v)])
    model = IcaModel(4, sources, np.zeros((5, 4)), np.zeros((4, 5)), np.zeros((4, 5)), np.zeros(mask.v), grid, mask)
    return model, Atlas(grid, parcels), order


def test_match_atlas_planted():
    model, atlas, order = atlas_model()
    res = match_atlas(model, atlas, percentile=80.0)
    assert res.best_parcel[:3].tolist() == order
    assert [res.component_for(n) for n in ("A", "B", "C")] == [1, 2, 0]
    assert res.low_confidence.tolist() == [False, False, False, True]
    assert res.rows()[0]["best_parcel"] == "C"


def test_match_atlas_scale_invariant():
    model, atlas, _ = atlas_model(1)
    scaled = IcaModel(4, model.sources * np.array([[3.0], [0.1], [7.0], [2.0]]), model.mixing, model.unmixing,
                      model.whitening, model.column_means, model.grid, model.mask)
    a, b = match_atlas(model, atlas, 80.0), match_atlas(scaled, atlas, 80.0)
    assert np.array_equal(a.best_parcel, b.best_parcel)
    assert np.array_equal(a.parcel_best_component, b.parcel_best_component)
    other = Atlas(VolumeGrid((10, 10, 5)), [])
    with pytest.raises(GridMismatch):
        match_atlas(model, other)


def bundles(n=3, k=5, t=120, v=300, noise=0.05, seed=0):
    rng = np.random.default_rng(seed)
    maps = rng.laplace(size=(k, v))
    series = rng.standard_normal((t, k))
    out, perms = [], []
    for i in range(n):
        perm = rng.permutation(k) if i else np.arange(k)
        sign = rng.choice([-1.0, 1.0], k) if i else np.ones(k)
        out.append(SubjectBundle(f"s{i}", (maps * sign[:, None])[perm] + noise * rng.standard_normal((k, v)),
                                 (series * sign)[:, perm] + noise * rng.standard_normal((t, k)),
                                 rng.uniform(0, 1, k)))
        perms.append(perm)
    return out, perms


@pytest.mark.parametrize("direction", ["temporal", "spatial"])
def test_match_pair_recovers_planted_permutation_and_signs(direction):
    (ref, other, _), perms = bundles()
    res = match_pair(ref, other, direction)
    inverse = np.argsort(perms[1])
    assert np.array_equal(res.partner, inverse)
    assert np.all(res.match_r > 0.95) and np.all(res.eval_r > 0.95)


def test_signed_matching_penalises_flips():
    (ref, other, _), perms = bundles(seed=3)
    flipped = SubjectBundle("f", -ref.sources, -ref.timeseries, ref.scores)
    assert np.all(match_pair(ref, flipped).eval_r > 0.99)
    # signed matching cannot use the anti-correlated true partner and settles for chance
    signed = match_pair(ref, flipped, signed=True)
    assert np.all(signed.match_r < 0.3)
    assert not np.array_equal(signed.partner, np.arange(ref.k))


def test_identical_subjects_match_perfectly_both_ways():
    (ref, other, _), _ = bundles(seed=4)
    same = SubjectBundle("copy", ref.sources.copy(), ref.timeseries.copy(), ref.scores)
    res = match_pair(ref, same)
    assert np.array_equal(res.partner, np.arange(ref.k))
    assert np.allclose(res.eval_r, 1.0) and np.allclose(res.match_r, 1.0)
    ab, ba = match_pair(ref, other), match_pair(other, ref)
    assert np.array_equal(ba.partner[ab.partner], np.arange(ref.k))


def test_loo_aggregate():
    subs, _ = bundles(n=4, seed=5)
    summary, results = loo_aggregate(subs, top_n=3)
    assert len(results) == 12
    assert summary.per_reference_eval.shape == (4, 3)
    assert np.all(summary.mean_eval > 0.95)
    assert [row["rank"] for row in summary.rows()] == [1, 2, 3]
    with pytest.raises(TooFewSubjects):
        loo_aggregate(subs[:1])


def test_shared_story_required():
    (ref, other, _), _ = bundles()
    short = SubjectBundle("x", other.sources, other.timeseries[:-1], other.scores)
    with pytest.raises(NoSharedStory):
        match_pair(ref, short)
    elsewhere = SubjectBundle("y", other.sources, other.timeseries, other.scores, story="other")
    with pytest.raises(NoSharedStory):
        match_pair(ref, elsewhere)
