import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icaenc.encoder import RidgeSpec
from icaenc.errors import ConfigError, ConstantInput, LengthMismatch
from icaenc.stats import (
    PredictivityReport,
    bh_fdr,
    pearson,
    permutation_test,
    permuted_rows,
    rank_components,
    ranks_from_scores,
)


@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_affine_and_sign(seed, scale, shift):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(40), rng.standard_normal(40)
    r = pearson(x, y)
    assert abs(pearson(scale * x + shift, y) - r) < 1e-10
    assert abs(pearson(x, scale * y + shift) - r) < 1e-10
    assert abs(pearson(-x, y) + r) < 1e-12
    assert abs(r - np.corrcoef(x, y)[0, 1]) < 1e-12


def test_pearson_errors():
    with pytest.raises(ConstantInput):
        pearson(np.ones(5), np.arange(5))
    with pytest.raises(LengthMismatch):
        pearson(np.arange(5), np.arange(4))


def test_p_value_formula_and_bounds():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((60, 2))
    y = rng.standard_normal((60, 3))
    p, obs, null = permutation_test(x, y, RidgeSpec(folds=3), n_perm=30, seed=1, alphas=[1.0, 10.0, 100.0],
                                    return_null=True)
    assert null.shape == (30, 3)
    assert np.array_equal(p, (1 + (null >= obs).sum(axis=0)) / 31)
    assert np.all(p >= 1 / 31) and np.all(p <= 1)


def test_parallel_draws_match_serial():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((50, 2))
    y = rng.standard_normal((50, 2))
    groups = np.repeat([0, 1], 25)
    kw = dict(n_perm=12, seed=4, alphas=[10.0], groups=groups)
    a = permutation_test(x, y, RidgeSpec(folds=2), n_jobs=1, return_null=True, **kw)
    b = permutation_test(x, y, RidgeSpec(folds=2), n_jobs=3, return_null=True, **kw)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_permutations_stay_within_runs():
    groups = np.repeat(["a", "b", "c"], [5, 7, 4])
    order = permuted_rows(16, 7, 3, groups)
    assert sorted(order.tolist()) == list(range(16))
    assert np.array_equal(groups[order], groups)
    assert np.array_equal(order, permuted_rows(16, 7, 3, groups))
    assert not np.array_equal(order, permuted_rows(16, 7, 4, groups))


def test_block_permutation_keeps_blocks():
    order = permuted_rows(12, 0, 0, block_len=3)
    blocks = order.reshape(4, 3)
    assert np.all(np.diff(blocks, axis=1) == 1)
    assert np.all(blocks[:, 0] % 3 == 0)


@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=30), st.integers(0, 29), st.floats(0.01, 0.3))
def test_bh_step_up_monotone(p, idx, q):
    p = np.array(p)
    before = bh_fdr(p, q)
    lowered = p.copy()
    i = idx % p.size
    lowered[i] = lowered[i] / 2
    after = bh_fdr(lowered, q)
    others = np.arange(p.size) != i
    assert np.all(after[others] >= before[others])


def test_bh_examples():
    # sorted: 0.01, 0.03, 0.035 against 0.0125, 0.025, 0.0375; 0.03 misses its own
    # bound but is rejected because a later p passes (step-up, not step-down)
    p = np.array([0.01, 0.035, 0.03, 0.2])
    assert bh_fdr(p, 0.05).tolist() == [True, True, True, False]
    assert bh_fdr(np.array([0.01, 0.04, 0.03, 0.2]), 0.05).tolist() == [True, False, False, False]
    assert bh_fdr(np.array([0.02, 0.9]), 0.05).tolist() == [True, False]
    assert bh_fdr(np.array([]), 0.05).size == 0
    with pytest.raises(ConfigError):
        bh_fdr(np.array([0.0, 0.5]))
    with pytest.raises(ConfigError):
        bh_fdr(np.array([0.5]), 1.0)


def test_ranks():
    scores = np.array([0.2, 0.9, 0.2, -0.1])
    assert rank_components(scores).tolist() == [1, 0, 2, 3]
    assert ranks_from_scores(scores).tolist() == [2, 1, 3, 4]


def test_report_csv(tmp_path):
    rep = PredictivityReport(np.array([0.5, 0.1]), p=np.array([0.01, 0.5]), labels=["signal", "noise"],
                             extra={"network": ["AUD", "VIS"]}).apply_fdr(0.05)
    rep.to_csv(tmp_path / "r.csv", ["config_digest: x"])
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "# config_digest: x"
    assert lines[1] == "component,r,p,significant,rank,aroma_label,network"
    assert lines[2] == "0,0.5,0.01,1,1,signal,AUD"
    assert rep.summary()["n_significant"] == 1
