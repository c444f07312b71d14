"""Treatment effect estimation on matched samples and the subgroup interaction scan."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.stats import norm

from . import _kernels
from .corpus import DocTermMatrix
from .impute import rubin_pool

RULE_SOURCES = ("structured_threshold", "token_presence", "dtm_pca", "embedding_raw", "embedding_pca")
_PREFIX = {
    "structured_threshold": "structured",
    "token_presence": "token",
    "dtm_pca": "dtm_pc",
    "embedding_raw": "emb",
    "embedding_pca": "emb_pc",
}


@dataclass
class EffectEstimate:
    estimate: float
    se: float
    ci95: tuple[float, float]
    p_value: float
    n_effective: float
    df: float = math.inf

    @classmethod
    def from_normal(cls, est: float, se: float, n_eff: float = math.nan, df: float = math.inf):
        p = 2 * norm.sf(abs(est) / se) if se > 0 else (0.0 if est != 0 else 1.0)
        return cls(est, se, (est - 1.96 * se, est + 1.96 * se), float(p), n_eff, df)


def _cluster_index(set_ids) -> tuple[np.ndarray, int]:
    _, inv = np.unique(np.asarray(set_ids), return_inverse=True)
    return inv.ravel(), int(inv.max()) + 1 if inv.size else 0


def wls_cluster(X, y, w, set_ids) -> tuple[np.ndarray, np.ndarray]:
    """WLS coefficients and CR0 cluster sandwich scaled by G/(G-1)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    cl, G = _cluster_index(set_ids)
    if G < 2:
        raise ValueError("need at least 2 clusters for a cluster-robust standard error")
    Xw = X * w[:, None]
    bread = np.linalg.inv(X.T @ Xw)
    beta = bread @ (Xw.T @ y)
    e = y - X @ beta
    scores = np.zeros((G, X.shape[1]))
    np.add.at(scores, cl, Xw * e[:, None])
    meat = scores.T @ scores
    cov = bread @ meat @ bread * (G / (G - 1))
    return beta, cov


def att_estimate(y, z, weights, set_ids) -> EffectEstimate:
    """Weighted difference in means with matched sets as clusters."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    w = np.asarray(weights, dtype=float)
    keep = w > 0
    y, z, w, sid = y[keep], z[keep], w[keep], np.asarray(set_ids)[keep]
    if not (z == 1).any() or not (z == 0).any():
        raise ValueError("both arms need positive weight")
    X = np.column_stack([np.ones_like(z), z])
    beta, cov = wls_cluster(X, y, w, sid)
    wc = w[z == 0]
    n_eff = float(wc.sum() ** 2 / np.sum(wc**2))
    return EffectEstimate.from_normal(float(beta[1]), float(math.sqrt(max(cov[1, 1], 0.0))), n_eff)


def youden_threshold(x, y) -> tuple[float, float]:
    """Cut on x maximizing |J| over midpoints of sorted distinct values.

    Returns ``(threshold, J)`` where J is signed (positive when high x goes
    with y = 1). Ties go to the smaller threshold.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y).astype(int)
    if x.shape != y.shape:
        raise ValueError("x and y must align")
    ok = ~np.isnan(x)
    x, y = x[ok], y[ok]
    ux = np.unique(x)
    n1 = int(y.sum())
    n0 = y.size - n1
    if ux.size < 2 or n1 == 0 or n0 == 0:
        raise ValueError("degenerate input for Youden threshold")
    # counts of each class at or below each distinct value
    pos = np.searchsorted(ux, x)
    c1 = np.cumsum(np.bincount(pos, weights=y, minlength=ux.size))[:-1].astype(np.int64)
    c0 = np.cumsum(np.bincount(pos, weights=1 - y, minlength=ux.size))[:-1].astype(np.int64)
    # J * n0 * n1 = (n1 - c1) * n0 + c0 * n1 - n0 * n1, exact in integers
    jnum = (n1 - c1) * n0 + c0 * n1 - n0 * n1
    k = int(np.argmax(np.abs(jnum)))
    thr = float((ux[k] + ux[k + 1]) / 2.0)
    return thr, float(jnum[k]) / (n0 * n1)


@dataclass
class SubgroupRule:
    source: str
    label: str
    threshold: float | None
    indicator: np.ndarray = field(repr=False)


@dataclass
class SubgroupEffect:
    label: str
    source: str
    interaction_estimate: float
    se: float
    p_value: float
    q_value: float = math.nan
    shrunken_estimate: float = math.nan
    discovered: bool = False
    n_subgroup: int = 0


def pca_scores(matrix, k: int, scale: bool = False) -> np.ndarray:
    """Top-k principal component scores of the column-centered matrix.

    Sparse input is never densified: a truncated SVD runs on an implicit
    centered (and optionally unit-scaled) operator.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if sp.issparse(matrix) and min(matrix.shape) > 2 * k + 1:
        return _sparse_pca(sp.csr_matrix(matrix, dtype=float), k, scale)
    if sp.issparse(matrix):
        matrix = matrix.toarray()
    A = np.asarray(matrix, dtype=float)
    if not np.isfinite(A).all():
        raise ValueError("matrix must be finite")
    A = A - A.mean(axis=0)
    if scale:
        sd = A.std(axis=0)
        sd[sd == 0] = 1.0
        A = A / sd
    U, S, Vt = np.linalg.svd(A, full_matrices=False)
    return _finish_pca(U, S, Vt, k, max(A.shape))


def _finish_pca(U, S, Vt, k, size):
    tol = S.max(initial=0.0) * size * np.finfo(float).eps
    rank = int(np.sum(S > tol))
    if k > rank:
        warnings.warn(f"requested {k} components but rank is {rank}", stacklevel=3)
        k = rank
    U, S, Vt = U[:, :k], S[:k], Vt[:k]
    flip = np.sign(Vt[np.arange(k), np.argmax(np.abs(Vt), axis=1)])
    flip[flip == 0] = 1.0
    return U * S * flip


def _sparse_pca(A: sp.csr_matrix, k: int, scale: bool) -> np.ndarray:
    from scipy.sparse.linalg import LinearOperator, svds

    if not np.isfinite(A.data).all():
        raise ValueError("matrix must be finite")
    n, d = A.shape
    mu = np.asarray(A.mean(axis=0)).ravel()
    if scale:
        ex2 = np.asarray(A.multiply(A).mean(axis=0)).ravel()
        sd = np.sqrt(np.maximum(ex2 - mu**2, 0.0))
        sd[sd == 0] = 1.0
    else:
        sd = np.ones(d)
    inv = 1.0 / sd
    At = A.T.tocsr()

    def mv(v):
        v = np.asarray(v).reshape(d, -1) * inv[:, None]
        return A @ v - (mu @ v)[None, :]

    def rmv(u):
        u = np.asarray(u).reshape(n, -1)
        return (At @ u - np.outer(mu, u.sum(axis=0))) * inv[:, None]

    op = LinearOperator((n, d), matvec=mv, rmatvec=rmv, matmat=mv, rmatmat=rmv, dtype=float)
    v0 = np.full(min(n, d), 1.0 / np.sqrt(min(n, d)))
    U, S, Vt = svds(op, k=k, v0=v0, solver="arpack", tol=1e-10)
    order = np.argsort(-S, kind="stable")
    return _finish_pca(U[:, order], S[order], Vt[order], k, max(n, d))


def _threshold_rules(mat, outcome, source, names, retained=None):
    rules, dropped = [], 0
    for j, name in enumerate(names):
        col = mat[:, j]
        try:
            thr, _ = youden_threshold(col if retained is None else col[retained], outcome if retained is None else outcome[retained])
        except ValueError:
            dropped += 1
            continue
        ind = (col > thr).astype(np.int8)
        if ind.min() == ind.max():
            dropped += 1
            continue
        rules.append(SubgroupRule(source, f"{_PREFIX[source]}:{name}", thr, ind))
    return rules, dropped


def build_subgroups(
    method: str,
    *,
    x=None,
    names: Sequence[str] | None = None,
    outcome=None,
    dtm: DocTermMatrix | None = None,
    embeddings=None,
    k: int = 50,
    retained=None,
) -> tuple[list[SubgroupRule], int]:
    """Candidate subgroup rules for one method; returns ``(rules, n_dropped)``.

    Thresholds from the Youden cut are fit on ``retained`` units when given.
    """
    if method not in RULE_SOURCES:
        raise ValueError(f"unknown subgroup method {method!r}")
    if method == "token_presence":
        if dtm is None:
            raise ValueError("token rules need a DTM")
        pres = (dtm.counts > 0).astype(np.int8).tocsc()
        rules, dropped = [], 0
        n = dtm.n_docs
        for j, tok in enumerate(dtm.vocab.tokens):
            nnz = pres.indptr[j + 1] - pres.indptr[j]
            if nnz == 0 or nnz == n:
                dropped += 1
                continue
            ind = np.zeros(n, np.int8)
            ind[pres.indices[pres.indptr[j] : pres.indptr[j + 1]]] = 1
            rules.append(SubgroupRule(method, f"token:{tok}", None, ind))
        return rules, dropped
    if outcome is None:
        raise ValueError(f"{method} rules need the outcome for Youden thresholds")
    outcome = np.asarray(outcome)
    if method == "structured_threshold":
        mat = np.asarray(x, dtype=float)
        labels = list(names) if names is not None else [str(j) for j in range(mat.shape[1])]
    elif method == "dtm_pca":
        if dtm is None:
            raise ValueError("dtm_pca rules need a DTM")
        mat = pca_scores(dtm.counts.astype(float), min(k, min(dtm.counts.shape) - 1), scale=True)
        labels = [str(j + 1) for j in range(mat.shape[1])]
    elif method == "embedding_raw":
        mat = np.asarray(embeddings, dtype=float)
        labels = [str(j) for j in range(mat.shape[1])]
    else:
        mat = pca_scores(np.asarray(embeddings, dtype=float), min(k, *np.shape(embeddings)))
        labels = [str(j + 1) for j in range(mat.shape[1])]
    return _threshold_rules(mat, outcome, method, labels, retained)


def interaction_scan(
    y, z, rules: Sequence[SubgroupRule], weights, set_ids, min_subgroup: int = 20
) -> tuple[list[SubgroupEffect], list[str]]:
    """Per-rule treatment-by-subgroup interaction from the saturated 2x2 WLS fit.

    Returns ``(effects, skipped_labels)``; effects are ordered by label.
    """
    y = np.asarray(y, dtype=float)
    z = np.asarray(z).astype(np.int64)
    w = np.asarray(weights, dtype=float)
    keep = np.flatnonzero(w > 0)
    cl, G = _cluster_index(np.asarray(set_ids)[keep])
    if G < 2:
        raise ValueError("need at least 2 clusters for a cluster-robust standard error")
    rules = sorted(rules, key=lambda r: r.label)
    skipped: list[str] = []
    live: list[SubgroupRule] = []
    cols = []
    zk = z[keep]
    for r in rules:
        g = np.asarray(r.indicator)[keep].astype(bool)
        n1 = int(g.sum())
        if min(n1, g.size - n1) < min_subgroup or np.array_equal(g, zk.astype(bool)) or np.array_equal(g, ~zk.astype(bool)):
            skipped.append(r.label)
            continue
        live.append(r)
        cols.append(np.flatnonzero(g))
    out: list[SubgroupEffect] = []
    if not live:
        return out, skipped
    indptr = np.zeros(len(cols) + 1, np.int64)
    indptr[1:] = np.cumsum([c.size for c in cols])
    indices = np.concatenate(cols)
    cellW, cellM, var = _kernels.interaction_cells(indptr, indices, zk, w[keep], y[keep], cl, G)
    est = cellM[:, 3] - cellM[:, 1] - cellM[:, 2] + cellM[:, 0]
    var = var * (G / (G - 1))
    for r, e, v, c in zip(live, est, var, cols):
        if not np.isfinite(e) or not np.isfinite(v):
            skipped.append(r.label)
            continue
        se = math.sqrt(max(v, 0.0))
        p = 2 * norm.sf(abs(e) / se) if se > 0 else (0.0 if e != 0 else 1.0)
        out.append(SubgroupEffect(r.label, r.source, float(e), se, float(p), n_subgroup=int(c.size)))
    return out, skipped


def bh_fdr(p_values, q: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Benjamini-Hochberg step-up; returns ``(discovered, q_values)``."""
    p = np.asarray(p_values, dtype=float)
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    if ((p < 0) | (p > 1)).any():
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return np.zeros(0, bool), np.zeros(0)
    order = np.argsort(p, kind="stable")
    adj = p[order] * m / np.arange(1, m + 1)
    adj = np.minimum.accumulate(adj[::-1])[::-1]
    qv = np.empty(m)
    qv[order] = np.minimum(adj, 1.0)
    below = np.flatnonzero(p[order] <= q * np.arange(1, m + 1) / m)
    disc = np.zeros(m, bool)
    if below.size:
        disc[order[: below.max() + 1]] = True
    return disc, qv


def shrink(estimates, ses) -> np.ndarray:
    """Empirical-Bayes normal-normal shrinkage with DerSimonian-Laird between variance."""
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    if est.size <= 1:
        return est.copy()
    if (se <= 0).any():
        raise ValueError("standard errors must be positive")
    v = se**2
    w = 1.0 / v
    mu_fe = np.sum(w * est) / w.sum()
    Q = np.sum(w * (est - mu_fe) ** 2)
    denom = w.sum() - np.sum(w**2) / w.sum()
    tau2 = max(0.0, (Q - (est.size - 1)) / denom) if denom > 0 else 0.0
    wr = 1.0 / (v + tau2)
    mu = np.sum(wr * est) / wr.sum()
    return mu + tau2 / (tau2 + v) * (est - mu)


def finalize_scan(effects: list[SubgroupEffect], q: float = 0.05) -> list[SubgroupEffect]:
    if not effects:
        return effects
    disc, qv = bh_fdr([e.p_value for e in effects], q)
    shr = shrink([e.interaction_estimate for e in effects], [max(e.se, 1e-300) for e in effects])
    for e, d, qq, s in zip(effects, disc, qv, shr):
        e.discovered = bool(d)
        e.q_value = float(max(qq, e.p_value))
        e.shrunken_estimate = float(s)
    return effects


def pool_subgroup_scan(scans: Sequence[Sequence[SubgroupEffect]], q: float = 0.05) -> list[SubgroupEffect]:
    """Rubin-pool each rule across imputations, then BH and shrinkage on the pooled set."""
    if not scans:
        raise ValueError("no scans to pool")
    labels = [e.label for e in scans[0]]
    for s in scans[1:]:
        if [e.label for e in s] != labels:
            raise ValueError("rule sets differ across imputations")
    pooled = []
    for j, lab in enumerate(labels):
        ests = [s[j].interaction_estimate for s in scans]
        vars_ = [s[j].se**2 for s in scans]
        r = rubin_pool(ests, vars_)
        se = r["pooled_se"]
        z = abs(r["pooled_estimate"]) / se if se > 0 else math.inf
        if len(scans) > 1 and math.isfinite(r["df"]):
            from scipy.stats import t as tdist

            p = 2 * tdist.sf(z, r["df"])
        else:
            p = 2 * norm.sf(z)
        pooled.append(
            SubgroupEffect(lab, scans[0][j].source, float(r["pooled_estimate"]), float(se), float(p), n_subgroup=scans[0][j].n_subgroup)
        )
    return finalize_scan(pooled, q)


def common_rule_labels(rule_sets: Sequence[Sequence[SubgroupRule]]) -> set[str]:
    common = {r.label for r in rule_sets[0]}
    for rs in rule_sets[1:]:
        common &= {r.label for r in rs}
    return common


def pool_effects(estimates: Sequence[EffectEstimate]) -> EffectEstimate:
    """Rubin-pooled ATT across imputations."""
    r = rubin_pool([e.estimate for e in estimates], [e.se**2 for e in estimates])
    est, se, df = r["pooled_estimate"], r["pooled_se"], r["df"]
    out = EffectEstimate.from_normal(est, se, float(np.mean([e.n_effective for e in estimates])), df)
    if math.isfinite(df) and se > 0:
        from scipy.stats import t as tdist

        crit = tdist.ppf(0.975, df)
        out.p_value = float(2 * tdist.sf(abs(est) / se, df))
        out.ci95 = (est - crit * se, est + crit * se)
    return out


def write_scan_csv(path: str | Path, effects: Sequence[SubgroupEffect]) -> None:
    rows = sorted(effects, key=lambda e: (e.shrunken_estimate, e.label))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rule", "source", "estimate", "se", "p", "q", "shrunken", "discovered", "n_subgroup"])
        for e in rows:
            w.writerow(
                [e.label, e.source, repr(e.interaction_estimate), repr(e.se), repr(e.p_value), repr(e.q_value), repr(e.shrunken_estimate), int(e.discovered), e.n_subgroup]
            )


def read_scan_csv(path: str | Path) -> list[SubgroupEffect]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            SubgroupEffect(r["rule"], r["source"], float(r["estimate"]), float(r["se"]), float(r["p"]), float(r["q"]), float(r["shrunken"]), r["discovered"] == "1", int(r["n_subgroup"]))
            for r in csv.DictReader(fh)
        ]


def read_embeddings(path: str | Path, ids: Sequence[str]) -> np.ndarray:
    """Embedding matrix from CSV (``patient_id,e0,e1,...``) or ``.npy`` with a ``.ids`` sidecar, reordered to ``ids``."""
    path = Path(path)
    if path.suffix == ".npy":
        mat = np.load(path)
        row_ids = Path(str(path) + ".ids").read_text(encoding="utf-8").split()
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader)
            row_ids, vals = [], []
            for row in reader:
                row_ids.append(row[0])
                vals.append([float(v) for v in row[1:]])
        mat = np.asarray(vals, dtype=float)
    pos = {r: i for i, r in enumerate(row_ids)}
    missing = [i for i in ids if i not in pos]
    if missing:
        raise ValueError(f"embeddings missing {len(missing)} patients, e.g. {missing[:3]}")
    return mat[[pos[i] for i in ids]]


def write_embeddings(path: str | Path, ids: Sequence[str], mat: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id"] + [f"e{j}" for j in range(mat.shape[1])])
        for i, row in zip(ids, mat):
            w.writerow([i] + [repr(float(v)) for v in row])
