import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icaenc.dataio import WordTable
from icaenc.errors import (
    ConfigError,
    ConstantColumnWarning,
    DegenerateRegressor,
    MissingSurprisal,
    NonPositiveProbability,
    WordPastEnd,
)
from icaenc.features import (
    FeatureConfig,
    FeatureMatrix,
    WordFeatureTrack,
    assemble_design,
    build_tracks,
    fir_expand,
    lanczos_downsample,
    lanczos_kernel,
    residualize,
    surprisal_track,
    word_rate,
)


def random_words(seed, duration=120.0):
    rng = np.random.default_rng(seed)
    onsets = np.sort(rng.uniform(0, duration - 1.0, int(duration * 2)))
    offsets = onsets + rng.uniform(0.05, 0.6, onsets.size)
    return WordTable([f"w{i}" for i in range(onsets.size)], onsets, offsets,
                     surprisal=rng.gamma(2.0, 2.0, onsets.size))


@given(st.floats(-10, 10), st.integers(1, 5))
def test_kernel_symmetric(x, a):
    assert lanczos_kernel(x, a) == lanczos_kernel(-x, a)


@pytest.mark.parametrize("a", [1, 2, 3, 4])
def test_kernel_zeros(a):
    assert lanczos_kernel(0.0, a) == 1.0
    ints = np.array([n for n in range(-a - 2, a + 3) if n != 0], dtype=float)
    assert np.abs(lanczos_kernel(ints, a)).max() < 1e-15
    assert lanczos_kernel(a + 0.5, a) == 0.0


def test_word_at_bin_centre_lands_in_one_bin():
    # a word centred on TR bin 4 sits at integer offsets from every other centre
    track = WordFeatureTrack([2.5], [4 * 2.0 + 1.0], "s")
    out = lanczos_downsample(track, 2.0, 10).data[:, 0]
    expected = np.zeros(10)
    expected[4] = 2.5
    assert np.allclose(out, expected, atol=1e-15)


@given(st.integers(0, 10_000))
def test_downsample_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    times = np.sort(rng.uniform(0, 40, 30))
    vals = rng.standard_normal((30, 2))
    fast = lanczos_downsample(WordFeatureTrack(vals, times), 2.0, 20).data
    slow = np.zeros((20, 2))
    for t in range(20):
        for w in range(30):
            x = (t * 2.0 + 1.0 - times[w]) / 2.0
            if abs(x) < 3:
                slow[t] += vals[w] * np.sinc(x) * np.sinc(x / 3)
    assert np.abs(fast - slow).max() < 1e-12


def test_word_rate_counts_midpoints():
    words = WordTable(list("abcd"), [0.0, 1.0, 1.9, 5.0], [0.5, 1.5, 2.3, 5.2])
    assert word_rate(words, 2.0, 4).data[:, 0].tolist() == [2, 1, 1, 0]
    with pytest.raises(WordPastEnd):
        word_rate(words, 2.0, 2)


def test_surprisal_from_probability():
    words = WordTable(list("ab"), [0, 1], [0.5, 1.5], probability=[0.5, 0.25])
    assert np.allclose(surprisal_track(words).values[:, 0], [np.log(2), np.log(4)])
    assert np.allclose(surprisal_track(words, 2).values[:, 0], [1.0, 2.0])
    with pytest.raises(NonPositiveProbability):
        surprisal_track(WordTable(["a"], [0], [1], probability=[0.0]))
    with pytest.raises(MissingSurprisal):
        surprisal_track(WordTable(["a"], [0], [1]))


@given(st.integers(0, 10_000), st.floats(0.1, 100), st.floats(-100, 100))
def test_residualize_invariant_to_affine_regressor(seed, scale, offset):
    rng = np.random.default_rng(seed)
    x = rng.poisson(4, 80).astype(float)
    y = rng.standard_normal(80) + 0.3 * x
    a = residualize(y, x).data
    b = residualize(y, scale * x + offset).data
    assert np.abs(a - b).max() < 1e-10
    assert abs(np.corrcoef(a[:, 0], x)[0, 1]) < 1e-10
    with pytest.raises(DegenerateRegressor):
        residualize(y, np.full(80, 3.0))


def test_fir_is_delay_major_and_impulse_exact():
    x = np.zeros((12, 2))
    x[2, 0] = 1.0
    x[4, 1] = 3.0
    out = fir_expand(FeatureMatrix(x, ["a", "b"]), (1, 2, 3))
    assert out.names == ["a@1", "b@1", "a@2", "b@2", "a@3", "b@3"]
    assert out.provenance[3] == ("b", 2)
    for j, d in enumerate((1, 2, 3)):
        assert np.flatnonzero(out.data[:, 2 * j]).tolist() == [2 + d]
        assert out.data[4 + d, 2 * j + 1] == 3.0
    # summing one feature's block over delays reproduces the shifted kernel
    total = out.data[:, [0, 2, 4]].sum(axis=1)
    assert total.tolist() == [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0]


def test_fir_resets_at_run_boundaries():
    x = np.arange(1.0, 9.0)[:, None]
    groups = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    out = fir_expand(FeatureMatrix(x, ["a"]), (1, 2), groups).data
    assert out[:, 0].tolist() == [0, 1, 2, 3, 0, 5, 6, 7]
    assert out[:, 1].tolist() == [0, 0, 1, 2, 0, 0, 5, 6]
    with pytest.raises(ConfigError):
        fir_expand(FeatureMatrix(x, ["a"]), (0, 1))


def test_assemble_design_trims_after_lagging():
    words = random_words(1, 200.0)
    tracks = build_tracks(words, 2.0, 100, FeatureConfig(tracks=["word_rate", "residual_surprisal"]))
    full = assemble_design(tracks, (1, 2), zscore=False)
    cut = assemble_design(tracks, (1, 2), trim_head=10, trim_tail=5, zscore=False)
    assert np.array_equal(cut.data, full.data[10:95])
    assert cut.names == ["word_rate@1", "word_rate@2", "residual_surprisal@1", "residual_surprisal@2"]
    z = assemble_design(tracks, (1, 2), trim_head=10, trim_tail=5)
    assert np.allclose(z.data.mean(axis=0), 0, atol=1e-12) and np.allclose(z.data.std(axis=0), 1)


def test_constant_design_column_dropped():
    x = FeatureMatrix(np.r_[np.ones(1), np.zeros(19)][:, None], ["a"])
    with pytest.warns(ConstantColumnWarning):
        out = assemble_design([x], (1, 2), trim_head=3)
    assert out.d == 0


def test_residual_surprisal_orthogonal_on_random_tables():
    cfg = FeatureConfig(tracks=["word_rate", "residual_surprisal"])
    for seed in range(20):
        words = random_words(seed)
        rate, resid = build_tracks(words, 2.0, 60, cfg)
        assert abs(np.corrcoef(rate.data[:, 0], resid.data[:, 0])[0, 1]) < 1e-10


def test_feature_config_validation():
    with pytest.raises(ConfigError):
        FeatureConfig(tracks=["pitch"])
    with pytest.raises(ConfigError):
        build_tracks(random_words(0), 2.0, 60, FeatureConfig(tracks=["embeddings"]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        build_tracks(random_words(0), 2.0, 60, FeatureConfig(tracks=["word_rate_lanczos"]))
