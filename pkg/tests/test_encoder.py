import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icaenc.dataio import Atlas, Mask, VolumeGrid, VolumeSeries
from icaenc.encoder import (
    RidgeSpec,
    fit_ridge,
    fold_weights,
    load_encoding_model,
    make_folds,
    pearson_columns,
    predict,
    save_encoding_model,
    targets_from_rois,
)
from icaenc.errors import ConfigError, EmptyParcel, LengthMismatch, NonFiniteInput, TooFewRows


def problem(seed, t=60, d=10, m=3, noise=1.0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((t, d))
    y = x @ rng.standard_normal((d, m)) + noise * rng.standard_normal((t, m))
    return x, y


def brute_force_cv(x, y, folds, alpha):
    """Fold-mean Pearson r with explicit normal equations per fold."""
    scores = []
    for test in folds:
        train = np.setdiff1d(np.arange(x.shape[0]), test)
        mu, sd = x[train].mean(axis=0), x[train].std(axis=0)
        xz = (x[train] - mu) / sd
        beta = np.linalg.solve(xz.T @ xz + alpha * np.eye(x.shape[1]), xz.T @ (y[train] - y[train].mean(axis=0)))
        pred = (x[test] - mu) / sd @ beta + y[train].mean(axis=0)
        scores.append([np.corrcoef(pred[:, j], y[test, j])[0, 1] for j in range(y.shape[1])])
    return np.mean(scores, axis=0)


def test_alpha_selection_matches_brute_force():
    x, y = problem(0, t=80, noise=3.0)
    spec = RidgeSpec()
    model = fit_ridge(x, y, spec)
    folds = make_folds(80, spec)
    table = np.array([brute_force_cv(x, y, folds, a) for a in spec.alpha_grid])
    assert np.allclose(model.alpha_scores, table, atol=1e-10)
    assert np.array_equal(model.alpha_per_target, np.asarray(spec.alpha_grid)[table.argmax(axis=0)])


def test_ties_go_to_smaller_alpha():
    # one regressor: every alpha gives predictions proportional to x, so every
    # alpha scores the same
    rng = np.random.default_rng(1)
    x = rng.standard_normal((50, 1))
    y = 2 * x + 0.1 * rng.standard_normal((50, 1))
    model = fit_ridge(x, y, RidgeSpec(alpha_grid=[100.0, 1.0, 10.0]))
    assert np.ptp(model.alpha_scores[:, 0]) < 1e-12
    assert model.alpha_per_target[0] == 1.0


def test_monotone_shrinkage():
    x, y = problem(2)
    norms = [np.linalg.norm(fit_ridge(x, y, RidgeSpec(alpha_grid=[a])).weights, axis=0)
             for a in np.logspace(0, 4, 10)]
    assert np.all(np.diff(np.array(norms), axis=0) <= 1e-12)


def test_cv_hygiene_held_out_rows_do_not_matter():
    x, y = problem(3)
    spec = RidgeSpec()
    folds = make_folds(60, spec)
    test = folds[2]
    train = np.setdiff1d(np.arange(60), test)
    before = fold_weights(x, y, train, 10.0)
    x2, y2 = x.copy(), y.copy()
    perm = np.random.default_rng(0).permutation(test)
    x2[test], y2[test] = x[perm] * 5 + 1, y[perm] - 3
    assert np.array_equal(fold_weights(x2, y2, train, 10.0), before)


def test_folds():
    spec = RidgeSpec(folds=4)
    blocks = make_folds(10, spec)
    assert [b.tolist() for b in blocks] == [[0, 1, 2], [3, 4, 5], [6, 7], [8, 9]]
    groups = np.repeat(["s1", "s2", "s3", "s4", "s5"], 6)
    story = make_folds(30, RidgeSpec(folds=4, fold_scheme="by-story"), groups, seed=4)
    assert sorted(np.concatenate(story).tolist()) == list(range(30))
    for fold in story:
        held = set(groups[fold])
        assert all((groups == g).sum() == np.isin(fold, np.flatnonzero(groups == g)).sum() for g in held)
    again = make_folds(30, RidgeSpec(folds=4, fold_scheme="by-story"), groups, seed=4)
    assert all(np.array_equal(a, b) for a, b in zip(story, again))
    with pytest.raises(ConfigError):
        make_folds(30, RidgeSpec(folds=6, fold_scheme="by-story"), groups)


@given(st.floats(0.01, 100), st.floats(-100, 100), st.integers(0, 1000))
def test_pearson_scoring_affine_invariant(scale, shift, seed):
    rng = np.random.default_rng(seed)
    pred = rng.standard_normal((30, 2))
    y = rng.standard_normal((30, 2))
    assert np.allclose(pearson_columns(pred, scale * y + shift), pearson_columns(pred, y), atol=1e-10)


def test_determinism_and_roundtrip(tmp_path):
    x, y = problem(5)
    a, b = fit_ridge(x, y, seed=3), fit_ridge(x, y, seed=3)
    assert np.array_equal(a.weights, b.weights)
    save_encoding_model(a, tmp_path / "m")
    back = load_encoding_model(tmp_path / "m")
    assert np.array_equal(predict(back, x), predict(a, x))
    assert set(a.alpha_per_target) <= set(a.alpha_grid)


def test_input_errors():
    x, y = problem(6)
    with pytest.raises(LengthMismatch):
        fit_ridge(x, y[:-1])
    y2 = y.copy()
    y2[0, 0] = np.nan
    with pytest.raises(NonFiniteInput):
        fit_ridge(x, y2)
    with pytest.raises(TooFewRows):
        fit_ridge(x[:5], y[:5])
    with pytest.raises(ConfigError):
        RidgeSpec(alpha_grid=[0.0, 1.0])
    with pytest.raises(ConfigError):
        RidgeSpec(folds=1)


def test_roi_targets_average_parcels():
    grid = VolumeGrid((3, 1, 1))
    mask = Mask.full(grid)
    s = VolumeSeries(grid, mask, 2.0, np.array([[1.0, 3.0, 10.0], [2.0, 4.0, 20.0]]))
    a = np.zeros((3, 1, 1), bool)
    a[:2] = True
    b = np.zeros((3, 1, 1), bool)
    b[2] = True
    out = targets_from_rois(s, Atlas(grid, [("A", a), ("B", b)]))
    assert out.tolist() == [[2.0, 10.0], [3.0, 20.0]]
    with pytest.raises(EmptyParcel):
        targets_from_rois(s, Atlas(grid, [("A", a), ("E", np.zeros((3, 1, 1), bool))]))
