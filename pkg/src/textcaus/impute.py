"""Chained-equations imputation over covariates augmented with text scores."""

from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import DocTermMatrix
from .mnir import MnirConfig, fit_mnir, sr_scores

SR_PREFIX = "sr__"
KINDS = ("continuous", "binary")


@dataclass
class CovariateTable:
    """Patient-by-covariate values; ``NaN`` marks a missing cell."""

    ids: list[str]
    columns: list[str]
    values: np.ndarray
    kinds: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not self.kinds:
            self.kinds = ["continuous"] * len(self.columns)
        if self.values.shape != (len(self.ids), len(self.columns)):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.ids)} ids x {len(self.columns)} columns"
            )
        if len(self.kinds) != len(self.columns):
            raise ValueError("one kind per column required")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column names")
        for j, kind in enumerate(self.kinds):
            if kind not in KINDS:
                raise ValueError(f"column {self.columns[j]!r}: unknown kind {kind!r}")
            if kind == "binary":
                col = self.values[:, j]
                obs = col[~np.isnan(col)]
                if not np.isin(obs, (0.0, 1.0)).all():
                    raise ValueError(f"binary column {self.columns[j]!r} has values outside {{0,1}}")

    @property
    def mask(self) -> np.ndarray:
        """True where a cell is missing."""
        return np.isnan(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def select(self, columns: Sequence[str]) -> "CovariateTable":
        idx = [self.columns.index(c) for c in columns]
        return CovariateTable(
            list(self.ids), list(columns), self.values[:, idx].copy(), [self.kinds[i] for i in idx]
        )

    def any_missing(self) -> np.ndarray:
        return self.mask.any(axis=1).astype(float)

    def complete_rows(self) -> np.ndarray:
        return ~self.mask.any(axis=1)


def read_covariates_csv(path: str | Path, kinds: dict[str, str] | None = None) -> CovariateTable:
    """Header row, ``patient_id`` first, empty fields for missing cells."""
    kinds = kinds or {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if not header or header[0] != "patient_id":
            raise ValueError(f"{path}: first column must be patient_id")
        ids, rows = [], []
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            ids.append(rec[0])
            try:
                rows.append([float(v) if v.strip() else math.nan for v in rec[1:]])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    columns = header[1:]
    unknown = set(kinds) - set(columns)
    if unknown:
        raise ValueError(f"column kinds given for unknown columns: {sorted(unknown)}")
    values = np.array(rows, dtype=float).reshape(len(ids), len(columns))
    return CovariateTable(ids, columns, values, [kinds.get(c, "continuous") for c in columns])


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_covariates_csv(table: CovariateTable, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", *table.columns])
        for pid, row in zip(table.ids, table.values):
            w.writerow([pid, *(_fmt(v) for v in row)])


def augment(x: CovariateTable, s: np.ndarray, names: Sequence[str] | None = None) -> CovariateTable:
    """Append fully observed SR-score columns (``sr__<name>``) to ``x``."""
    s = np.asarray(s, dtype=float)
    if s.ndim != 2 or s.shape[0] != x.shape[0]:
        raise ValueError(f"SR scores have {s.shape[0] if s.ndim else 0} rows, covariates {x.shape[0]}")
    if np.isnan(s).any():
        raise ValueError("SR scores must be fully observed")
    names = list(names) if names is not None else [f"s{k}" for k in range(s.shape[1])]
    cols = [SR_PREFIX + n for n in names]
    return CovariateTable(
        list(x.ids),
        x.columns + cols,
        np.hstack([x.values, s]),
        x.kinds + ["continuous"] * len(cols),
    )


@dataclass
class ImputedSet:
    m: int
    completed: list[np.ndarray]
    rng_seed: int
    ids: list[str]
    columns: list[str]
    kinds: list[str]
    n_iter: int = 10

    def table(self, k: int, columns: Sequence[str] | None = None) -> CovariateTable:
        t = CovariateTable(list(self.ids), list(self.columns), self.completed[k].copy(), list(self.kinds))
        return t.select(columns) if columns is not None else t

    def save(self, directory: str | Path, columns: Sequence[str] | None = None) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for k in range(self.m):
            p = directory / f"imputed_{k + 1}.csv"
            write_covariates_csv(self.table(k, columns), p)
            paths.append(p)
        manifest = {
            "m": self.m,
            "n_iter": self.n_iter,
            "seed": self.rng_seed,
            "columns": list(columns) if columns is not None else self.columns,
            "files": [p.name for p in paths],
        }
        with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return paths

    @classmethod
    def load(cls, directory: str | Path, kinds: dict[str, str] | None = None) -> "ImputedSet":
        directory = Path(directory)
        with open(directory / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
        tables = [read_covariates_csv(directory / f, kinds) for f in manifest["files"]]
        t0 = tables[0]
        return cls(
            m=manifest["m"],
            completed=[t.values for t in tables],
            rng_seed=manifest["seed"],
            ids=t0.ids,
            columns=t0.columns,
            kinds=t0.kinds,
            n_iter=manifest["n_iter"],
        )


# -- per-column conditional models ------------------------------------------

_RIDGE = 1e-5


def _design(values: np.ndarray, preds: np.ndarray) -> np.ndarray:
    X = values[:, preds]
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return np.hstack([np.ones((X.shape[0], 1)), (X - mu) / sd])


def _pmm_draw(X, y_obs, obs, mis, rng, donors=5):
    """Predictive mean matching with a posterior draw of the coefficients."""
    Xo = X[obs]
    n, q = Xo.shape
    xtx = Xo.T @ Xo
    xtx[np.diag_indices(q)] += _RIDGE * np.maximum(np.diag(xtx), 1.0)
    chol = np.linalg.cholesky(xtx)
    beta = np.linalg.solve(xtx, Xo.T @ y_obs)
    resid = y_obs - Xo @ beta
    dof = max(n - q, 1)
    sigma = math.sqrt(float(resid @ resid) / rng.chisquare(dof))
    # draw beta* ~ N(beta, sigma^2 (X'X)^-1)
    z = rng.standard_normal(q)
    beta_star = beta + sigma * np.linalg.solve(chol.T, z)
    yhat_obs = Xo @ beta
    yhat_mis = X[mis] @ beta_star

    order = np.argsort(yhat_obs, kind="stable")
    sorted_hat = yhat_obs[order]
    k = min(donors, n)
    pos = np.searchsorted(sorted_hat, yhat_mis)
    # candidate window of 2k neighbours around the insertion point
    offs = np.arange(-k, k)
    cand = np.clip(pos[:, None] + offs[None, :], 0, n - 1)
    dist = np.abs(sorted_hat[cand] - yhat_mis[:, None])
    # duplicates from clipping get pushed to the back
    dup = np.zeros_like(dist, dtype=bool)
    dup[:, 1:] = cand[:, 1:] == cand[:, :-1]
    dist[dup] = np.inf
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    pick = nearest[np.arange(len(mis)), rng.integers(0, k, size=len(mis))]
    return y_obs[order[cand[np.arange(len(mis)), pick]]]


def _logistic_draw(X, y_obs, obs, mis, rng, n_iter=25):
    Xo = X[obs]
    q = Xo.shape[1]
    beta = np.zeros(q)
    ridge = _RIDGE * max(1.0, len(y_obs) / 100.0)
    info = np.eye(q)
    for _ in range(n_iter):
        eta = np.clip(Xo @ beta, -30, 30)
        p = 1.0 / (1.0 + np.exp(-eta))
        W = p * (1 - p)
        info = (Xo * W[:, None]).T @ Xo + ridge * np.eye(q)
        step = np.linalg.solve(info, Xo.T @ (y_obs - p) - ridge * beta)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-8:
            break
    chol = np.linalg.cholesky(info)
    beta_star = beta + np.linalg.solve(chol.T, rng.standard_normal(q))
    p_mis = 1.0 / (1.0 + np.exp(-np.clip(X[mis] @ beta_star, -30, 30)))
    return (rng.random(len(mis)) < p_mis).astype(float)


def _chain(values, mask, kinds, order, predictors, n_iter, rng):
    data = values.copy()
    for j in order:
        mis = np.flatnonzero(mask[:, j])
        obs_vals = values[~mask[:, j], j]
        data[mis, j] = rng.choice(obs_vals, size=len(mis), replace=True)
    for _ in range(n_iter):
        for j in order:
            mis = np.flatnonzero(mask[:, j])
            obs = np.flatnonzero(~mask[:, j])
            X = _design(data, predictors[j])
            y_obs = values[obs, j]
            if kinds[j] == "binary":
                data[mis, j] = _logistic_draw(X, y_obs, obs, mis, rng)
            else:
                data[mis, j] = _pmm_draw(X, y_obs, obs, mis, rng)
    return data


def mice(
    x_star: CovariateTable,
    m: int = 5,
    n_iter: int = 10,
    seed: int = 0,
    threads: int = 1,
) -> ImputedSet:
    """Multiply impute every missing cell of ``x_star`` by chained equations.

    Continuous columns use predictive mean matching with five donors and
    binary columns use logistic draws. Columns are visited in ascending order
    of missingness. Each chain gets its own child seed, so results do not
    depend on ``threads``. Outcome and treatment never enter ``x_star``.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    values = x_star.values
    mask = x_star.mask
    n, p = values.shape
    n_mis = mask.sum(axis=0)
    full = np.flatnonzero(n_mis == n)
    if full.size:
        raise ValueError(f"columns entirely missing: {[x_star.columns[j] for j in full]}")

    usable = []
    for j in range(p):
        obs = values[~mask[:, j], j]
        if obs.size and np.ptp(obs) > 0:
            usable.append(j)
        else:
            warnings.warn(
                f"dropping zero-variance predictor {x_star.columns[j]!r} from imputation models",
                stacklevel=2,
            )
    usable_arr = np.array(usable, dtype=np.int64)
    order = [int(j) for j in np.argsort(n_mis, kind="stable") if n_mis[j] > 0]
    predictors = {j: usable_arr[usable_arr != j] for j in order}

    children = np.random.SeedSequence(seed).spawn(m)

    def run(k):
        if not order:
            return values.copy()
        return _chain(values, mask, x_star.kinds, order, predictors, n_iter, np.random.default_rng(children[k]))

    if threads > 1 and m > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            completed = list(ex.map(run, range(m)))
    else:
        completed = [run(k) for k in range(m)]
    for c in completed:
        c[~mask] = values[~mask]
    return ImputedSet(
        m=m,
        completed=completed,
        rng_seed=seed,
        ids=list(x_star.ids),
        columns=list(x_star.columns),
        kinds=list(x_star.kinds),
        n_iter=n_iter,
    )


# -- cross-validated imputation quality ---------------------------------------


def _ridge_path(X, y, lams):
    """Ridge coefficients for each penalty; X standardized, y centered."""
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    uty = U.T @ y
    return np.stack([Vt.T @ (s / (s**2 + lam) * uty) for lam in lams])


def _ridge_cv_fit(X, y, rng, inner_folds=5, lams=None):
    """Standardize, choose the ridge penalty by inner CV, return a predictor."""
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    keep = sd > 0
    Xs = (X[:, keep] - mu[keep]) / sd[keep]
    ybar = y.mean()
    yc = y - ybar
    n = len(y)
    if lams is None:
        lams = n * np.logspace(-4, 2, 25)
    fold = rng.permutation(n) % inner_folds
    err = np.zeros(len(lams))
    for f in range(inner_folds):
        tr = fold != f
        te = ~tr
        B = _ridge_path(Xs[tr], yc[tr] - yc[tr].mean(), lams * tr.mean())
        pred = Xs[te] @ B.T + yc[tr].mean()
        err += ((pred - yc[te, None]) ** 2).sum(axis=0)
    best = lams[int(np.argmin(err))]
    beta = _ridge_path(Xs, yc, [best])[0]

    def predict(Xnew):
        return (Xnew[:, keep] - mu[keep]) / sd[keep] @ beta + ybar

    return predict


def _fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xF01D])).permutation(n) % folds


def cv_evaluate_many(
    x: CovariateTable,
    dtm: DocTermMatrix,
    targets: Sequence[str],
    folds: int = 10,
    seed: int = 0,
    mnir_cfg: MnirConfig = MnirConfig(),
) -> dict[str, dict[str, float]]:
    """Held-out prediction quality of each target with and without SR scores.

    Folds are assigned once over all patients so the per-fold MNIR fit (on
    the training fold's complete cases only) is shared by every target. The
    target is standardized by its observed SD, so RMSEs are in SD units.
    """
    n, p = x.shape
    if dtm.n_docs != n:
        raise ValueError("DTM rows must align with covariate rows")
    fold = _fold_ids(n, folds, seed)
    complete = x.complete_rows()
    for t in targets:
        if t not in x.columns:
            raise ValueError(f"unknown target column {t!r}")
        obs = ~x.mask[:, x.columns.index(t)]
        if obs.sum() < folds:
            raise ValueError(f"target {t!r} has fewer than {folds} observed rows")
        missing_folds = set(range(folds)) - set(np.unique(fold[obs]).tolist())
        if missing_folds:
            raise ValueError(f"target {t!r} has no observed rows in folds {sorted(missing_folds)}")

    scores = {}
    for f in range(folds):
        cc = complete & (fold != f)
        model = fit_mnir(dtm.select_rows(np.flatnonzero(cc)), x.values[cc], mnir_cfg, x.columns)
        scores[f] = sr_scores(dtm, model)

    out = {}
    for t in targets:
        j = x.columns.index(t)
        obs = ~x.mask[:, j]
        y_all = x.values[:, j]
        y_sd = y_all[obs].std(ddof=1)
        others = [k for k in range(p) if k != j]
        preds_s = np.full(n, np.nan)
        preds_t = np.full(n, np.nan)
        rng = np.random.default_rng(np.random.SeedSequence([seed, j]))
        for f in range(folds):
            tr = obs & (fold != f)
            te = obs & (fold == f)
            Xo = x.values[:, others]
            col_means = np.nanmean(Xo[tr], axis=0)
            col_means = np.where(np.isnan(col_means), 0.0, col_means)
            Xo = np.where(np.isnan(Xo), col_means, Xo)
            y = y_all / y_sd
            fit_s = _ridge_cv_fit(Xo[tr], y[tr], rng)
            preds_s[te] = fit_s(Xo[te])
            Xt = np.hstack([Xo, scores[f]])
            fit_t = _ridge_cv_fit(Xt[tr], y[tr], rng)
            preds_t[te] = fit_t(Xt[te])
        y = y_all[obs] / y_sd
        ps, pt = preds_s[obs], preds_t[obs]
        out[t] = {
            "n_observed": int(obs.sum()),
            "n_missing": int((~obs).sum()),
            "rmse_structured": float(np.sqrt(np.mean((y - ps) ** 2))),
            "rmse_text": float(np.sqrt(np.mean((y - pt) ** 2))),
            "r2_structured": float(np.corrcoef(y, ps)[0, 1] ** 2),
            "r2_text": float(np.corrcoef(y, pt)[0, 1] ** 2),
        }
    return out


def cv_evaluate(
    x: CovariateTable,
    dtm: DocTermMatrix,
    target_column: str,
    folds: int = 10,
    seed: int = 0,
    mnir_cfg: MnirConfig = MnirConfig(),
) -> dict[str, float]:
    return cv_evaluate_many(x, dtm, [target_column], folds, seed, mnir_cfg)[target_column]


# -- combining rules ----------------------------------------------------------


def rubin_pool(estimates, variances, nu_com: float = math.inf) -> dict[str, float]:
    """Pool per-imputation estimates with Rubin's rules.

    ``df`` is the Barnard-Rubin small-sample value given the complete-data
    degrees of freedom ``nu_com`` (infinite by default, giving Rubin's
    original formula). With ``m == 1`` the between variance is taken as 0.
    """
    q = np.asarray(estimates, dtype=float).ravel()
    u = np.asarray(variances, dtype=float).ravel()
    m = q.size
    if m < 1 or u.size != m:
        raise ValueError("need one variance per estimate and at least one estimate")
    if (u < 0).any():
        raise ValueError("variances must be nonnegative")
    qbar = float(q.mean())
    W = float(u.mean())
    B = float(q.var(ddof=1)) if m > 1 and np.ptp(q) > 0 else 0.0
    T = W + (1.0 + 1.0 / m) * B
    if B == 0.0 or T == 0.0:
        df = nu_com
    else:
        lam = (1.0 + 1.0 / m) * B / T
        nu_old = (m - 1) / lam**2
        if math.isinf(nu_com):
            df = nu_old
        else:
            nu_obs = (nu_com + 1) / (nu_com + 3) * nu_com * (1 - lam)
            df = 1.0 / (1.0 / nu_old + 1.0 / nu_obs)
    return {
        "pooled_estimate": qbar,
        "pooled_se": math.sqrt(T),
        "df": float(df),
        "within": W,
        "between": B,
        "total": T,
    }


def imputation_rmse(truth: np.ndarray, imputed: ImputedSet, mask: np.ndarray, columns=None) -> dict:
    """RMSE of imputed cells against known truth, averaged over imputations."""
    cols = range(truth.shape[1]) if columns is None else columns
    out = {}
    for j in cols:
        cells = mask[:, j]
        if not cells.any():
            continue
        errs = [np.sqrt(np.mean((c[cells, j] - truth[cells, j]) ** 2)) for c in imputed.completed]
        out[imputed.columns[j]] = float(np.mean(errs))
    return out

