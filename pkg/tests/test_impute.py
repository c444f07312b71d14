import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from textcaus.corpus import DocTermMatrix, Vocabulary
from textcaus.impute import (
    CovariateTable,
    ImputedSet,
    augment,
    cv_evaluate_many,
    imputation_rmse,
    mice,
    read_covariates_csv,
    rubin_pool,
    write_covariates_csv,
)


def _table(values, kinds=None):
    values = np.asarray(values, dtype=float)
    n, p = values.shape
    return CovariateTable([f"p{i}" for i in range(n)], [f"c{j}" for j in range(p)], values, kinds or [])


def _correlated(rng, n=150, p=4, miss=0.2, binary_last=False):
    h = rng.standard_normal(n)
    x = h[:, None] * 0.8 + rng.standard_normal((n, p)) * 0.6
    kinds = ["continuous"] * p
    if binary_last:
        x[:, -1] = (x[:, -1] > 0).astype(float)
        kinds[-1] = "binary"
    full = x.copy()
    mask = rng.random((n, p)) < miss
    mask[:, 0] = False
    x[mask] = np.nan
    return _table(x, kinds), full


def test_csv_roundtrip(tmp_path):
    t = _table([[1.5, np.nan], [0.0, 1.0]], ["continuous", "binary"])
    write_covariates_csv(t, tmp_path / "c.csv")
    back = read_covariates_csv(tmp_path / "c.csv", {"c1": "binary"})
    np.testing.assert_array_equal(back.values, t.values)
    assert back.kinds == t.kinds and back.ids == t.ids


def test_csv_errors(tmp_path):
    (tmp_path / "a.csv").write_text("id,x\n1,2\n")
    with pytest.raises(ValueError, match="patient_id"):
        read_covariates_csv(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("patient_id,x\n1,2,3\n")
    with pytest.raises(ValueError, match="b.csv:2"):
        read_covariates_csv(tmp_path / "b.csv")
    with pytest.raises(ValueError, match="binary"):
        _table([[0.5]], ["binary"])


def test_augment_columns_and_projection():
    rng = np.random.default_rng(0)
    x = _table(rng.standard_normal((10, 45)))
    aug = augment(x, rng.standard_normal((10, 45)), x.columns)
    assert aug.shape == (10, 90)
    assert aug.columns[45] == "sr__c0"
    back = aug.select(x.columns)
    np.testing.assert_array_equal(back.values, x.values)
    assert back.columns == x.columns


def test_zero_sr_scores_dropped_from_models():
    rng = np.random.default_rng(1)
    x, _ = _correlated(rng, n=60, p=3)
    aug = augment(x, np.zeros((60, 2)), ["a", "b"])
    with pytest.warns(UserWarning, match="zero-variance"):
        imp = mice(aug, m=1, n_iter=2, seed=0)
    assert not np.isnan(imp.completed[0]).any()


def test_complete_input_unchanged():
    rng = np.random.default_rng(2)
    x = _table(rng.standard_normal((20, 3)))
    imp = mice(x, m=3, seed=1)
    for c in imp.completed:
        np.testing.assert_array_equal(c, x.values)


def test_five_imputations_and_binary_draws():
    rng = np.random.default_rng(3)
    x, _ = _correlated(rng, binary_last=True)
    imp = mice(x, m=5, n_iter=3, seed=9)
    assert imp.m == 5 and len(imp.completed) == 5
    for c in imp.completed:
        assert np.isin(c[:, -1], (0.0, 1.0)).all()
    assert imp.table(2).kinds == x.kinds


def test_imputed_set_save_load(tmp_path):
    rng = np.random.default_rng(4)
    x, _ = _correlated(rng, n=30)
    imp = mice(x, m=2, n_iter=2, seed=0)
    imp.save(tmp_path)
    back = ImputedSet.load(tmp_path)
    for a, b in zip(back.completed, imp.completed):
        np.testing.assert_array_equal(a, b)


def test_entirely_missing_column_rejected():
    x = _table([[1.0, np.nan], [2.0, np.nan]])
    with pytest.raises(ValueError, match="entirely missing"):
        mice(x)


def test_pmm_beats_marginal_baseline():
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = 300
        a = rng.standard_normal(n)
        b = 2.0 * a + rng.normal(0, 0.3, n)
        truth = np.column_stack([a, b])
        x = truth.copy()
        mask = rng.random(n) < 0.2
        x[mask, 1] = np.nan
        imp = mice(_table(x), m=1, n_iter=5, seed=seed)
        rmse = math.sqrt(np.mean((imp.completed[0][mask, 1] - b[mask]) ** 2))
        baseline = b[~mask].std()
        wins += rmse < baseline
    assert wins == 20


def test_rubin_hand_cases():
    r = rubin_pool([1, 3], [1, 1])
    assert r["pooled_estimate"] == 2.0
    assert r["total"] == pytest.approx(4.0, abs=1e-12)
    assert r["pooled_se"] == pytest.approx(2.0, abs=1e-12)
    one = rubin_pool([0.7], [0.09])
    assert one["pooled_estimate"] == 0.7 and one["total"] == 0.09
    same = rubin_pool([1.2, 1.2, 1.2], [0.04, 0.09, 0.01])
    assert same["between"] == 0 and same["pooled_se"] == pytest.approx(math.sqrt(np.mean([0.04, 0.09, 0.01])))


def test_imputation_rmse_perfect_is_zero():
    rng = np.random.default_rng(5)
    x, full = _correlated(rng, n=40)
    perfect = ImputedSet(1, [full], 0, x.ids, x.columns, x.kinds)
    assert all(v == 0 for v in imputation_rmse(full, perfect, x.mask).values())


def test_cv_null_text_gives_no_gain():
    rng = np.random.default_rng(6)
    x, _ = _correlated(rng, n=400, p=4, miss=0.1)
    counts = sp.csr_matrix(rng.poisson(1.0, size=(400, 25)))
    dtm = DocTermMatrix(counts, Vocabulary([f"w{j}" for j in range(25)], np.diff(counts.tocsc().indptr)))
    res = cv_evaluate_many(x, dtm, ["c1", "c2"], folds=4, seed=0)
    for r in res.values():
        assert r["rmse_text"] >= 0.97 * r["rmse_structured"]


def test_cv_rejects_unknown_target():
    rng = np.random.default_rng(7)
    x, _ = _correlated(rng, n=30)
    dtm = DocTermMatrix(sp.csr_matrix(np.ones((30, 2), int)), Vocabulary(["a", "b"], [30, 30]))
    with pytest.raises(ValueError, match="unknown target"):
        cv_evaluate_many(x, dtm, ["nope"], folds=3)


# -- properties -------------------------------------------------------------

seeds = st.integers(0, 2**32 - 1)


@given(seeds, st.integers(1, 3), st.integers(1, 3))
def test_observed_cells_preserved_and_donors_observed(seed, m, n_iter):
    rng = np.random.default_rng(seed)
    x, _ = _correlated(rng, n=40, p=3, miss=0.3)
    x.values[:, 1:] = np.round(x.values[:, 1:], 1)
    imp = mice(x, m=m, n_iter=n_iter, seed=seed)
    obs = ~x.mask
    for c in imp.completed:
        assert np.array_equal(c[obs], x.values[obs])
        for j in range(3):
            pool = set(x.values[obs[:, j], j].tolist())
            assert set(c[x.mask[:, j], j].tolist()) <= pool


@given(seeds, st.integers(2, 4))
def test_threads_do_not_change_results(seed, threads):
    rng = np.random.default_rng(seed)
    x, _ = _correlated(rng, n=30, p=3, miss=0.25, binary_last=True)
    a = mice(x, m=3, n_iter=2, seed=seed, threads=1)
    b = mice(x, m=3, n_iter=2, seed=seed, threads=threads)
    for ca, cb in zip(a.completed, b.completed):
        assert np.array_equal(ca, cb)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(0.001, 5))
def test_rubin_zero_between_is_single_dataset(est_list, var):
    est = [est_list[0]] * len(est_list)
    r = rubin_pool(est, [var] * len(est))
    assert r["pooled_estimate"] == pytest.approx(est[0], abs=1e-12)
    assert r["pooled_se"] == pytest.approx(math.sqrt(var), rel=1e-12)
    assert r["between"] == 0.0
