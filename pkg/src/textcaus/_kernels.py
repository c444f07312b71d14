"""Hot numeric kernels.

Every kernel here exists in a numba-compiled form and a plain numpy form.
Setting ``TEXTCAUS_DISABLE_NUMBA=1`` in the environment before import selects
the numpy path everywhere; otherwise numba is used when it is importable.
"""

from __future__ import annotations

import math
import os
import warnings

import numpy as np

warnings.filterwarnings("ignore", message=".*TBB threading layer.*")

DISABLE_FLAG = "TEXTCAUS_DISABLE_NUMBA"

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

NUMBA_ENABLED = _HAVE_NUMBA and os.environ.get(DISABLE_FLAG, "").strip().lower() not in {
    "1",
    "true",
    "yes",
    "on",
}

if NUMBA_ENABLED:
    prange = numba.prange
else:
    prange = range


def jit(**kwargs):
    """``numba.njit`` when enabled, identity otherwise."""

    def wrap(fn):
        if NUMBA_ENABLED:
            return numba.njit(cache=True, **kwargs)(fn)
        return fn

    return wrap


def set_threads(n: int | None) -> int:
    """Bound numba's worker pool; returns the count actually in effect."""
    if not NUMBA_ENABLED or n is None:
        return 1 if not NUMBA_ENABLED else numba.get_num_threads()
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


# --------------------------------------------------------------------------
# Poisson lasso with log-exposure offset, one fit per DTM column.
# --------------------------------------------------------------------------

_ETA_CLIP = 30.0


if NUMBA_ENABLED:

    @jit()
    def _soft(g, t):
        if g > t:
            return g - t
        if g < -t:
            return g + t
        return 0.0


    @jit()
    def _linpred(XT, offset, alpha, beta, out):
        p, n = XT.shape
        for i in range(n):
            out[i] = offset[i] + alpha
        for k in range(p):
            b = beta[k]
            if b != 0.0:
                for i in range(n):
                    out[i] += XT[k, i] * b
        for i in range(n):
            if out[i] > _ETA_CLIP:
                out[i] = _ETA_CLIP


    @jit()
    def _penalized_nll(y, eta, beta, lam):
        n = y.shape[0]
        s = 0.0
        for i in range(n):
            s += math.exp(eta[i]) - y[i] * eta[i]
        pen = 0.0
        for k in range(beta.shape[0]):
            pen += abs(beta[k])
        return s / n + lam * pen


    @jit()
    def _deviance(y, eta):
        dev = 0.0
        for i in range(y.shape[0]):
            mu = math.exp(eta[i])
            if y[i] > 0:
                dev += y[i] * math.log(y[i] / mu) - (y[i] - mu)
            else:
                dev += mu
        return 2.0 * dev


    @jit()
    def _cd_quadratic(XT, w, r, alpha, beta, a, active, lam, max_sweeps, tol):
        """Coordinate descent on the weighted least-squares surrogate.

        Only coordinates flagged in ``active`` are visited. ``r`` is the working
        residual and is updated in place; returns the new intercept.
        """
        p, n = XT.shape
        sw = 0.0
        for i in range(n):
            sw += w[i]
        thresh = n * lam
        full = True
        for _ in range(max_sweeps):
            maxdiff = 0.0
            num = 0.0
            for i in range(n):
                num += w[i] * r[i]
            da = num / sw
            if da != 0.0:
                alpha += da
                for i in range(n):
                    r[i] -= da
                maxdiff = max(maxdiff, sw * da * da)
            for k in range(p):
                if not active[k] or (not full and beta[k] == 0.0) or a[k] <= 0.0:
                    continue
                g = 0.0
                for i in range(n):
                    g += w[i] * XT[k, i] * r[i]
                g += a[k] * beta[k]
                new = _soft(g, thresh) / a[k]
                dlt = new - beta[k]
                if dlt != 0.0:
                    for i in range(n):
                        r[i] -= dlt * XT[k, i]
                    beta[k] = new
                    maxdiff = max(maxdiff, a[k] * dlt * dlt)
            if maxdiff < tol * sw:
                if full:
                    break
                full = True
            else:
                full = False
        return alpha


    @jit()
    def _gradient(XT, y, eta, grad):
        p, n = XT.shape
        res = np.empty(n)
        for i in range(n):
            res[i] = y[i] - math.exp(eta[i])
        for k in range(p):
            g = 0.0
            for i in range(n):
                g += XT[k, i] * res[i]
            grad[k] = g / n


    @jit()
    def _weighted_sq(XT, w, active, a):
        p, n = XT.shape
        for k in range(p):
            if active[k]:
                s = 0.0
                for i in range(n):
                    s += w[i] * XT[k, i] * XT[k, i]
                a[k] = s

else:

    def _soft(g, t):
        if g > t:
            return g - t
        if g < -t:
            return g + t
        return 0.0


    def _linpred(XT, offset, alpha, beta, out):
        nz = np.flatnonzero(beta)
        eta = offset + alpha
        if nz.size:
            eta = eta + beta[nz] @ XT[nz]
        np.minimum(eta, _ETA_CLIP, out=out)


    def _penalized_nll(y, eta, beta, lam):
        return float(np.sum(np.exp(eta) - y * eta)) / y.shape[0] + lam * float(np.abs(beta).sum())


    def _deviance(y, eta):
        mu = np.exp(eta)
        pos = y > 0
        return 2.0 * float(np.sum(y[pos] * np.log(y[pos] / mu[pos])) - np.sum(y - mu))


    def _gradient(XT, y, eta, grad):
        grad[:] = XT @ (y - np.exp(eta)) / y.shape[0]


    def _cd_quadratic(XT, w, r, alpha, beta, a, active, lam, max_sweeps, tol):
        p, n = XT.shape
        sw = float(w.sum())
        thresh = n * lam
        full = True
        for _ in range(max_sweeps):
            maxdiff = 0.0
            da = float(w @ r) / sw
            if da != 0.0:
                alpha += da
                r -= da
                maxdiff = sw * da * da
            for k in range(p):
                if not active[k] or (not full and beta[k] == 0.0) or a[k] <= 0.0:
                    continue
                xk = XT[k]
                g = float((w * xk) @ r) + a[k] * beta[k]
                new = _soft(g, thresh) / a[k]
                dlt = new - beta[k]
                if dlt != 0.0:
                    r -= dlt * xk
                    beta[k] = new
                    maxdiff = max(maxdiff, a[k] * dlt * dlt)
            if maxdiff < tol * sw:
                if full:
                    break
                full = True
            else:
                full = False
        return alpha


    def _weighted_sq(XT, w, active, a):
        idx = np.flatnonzero(active)
        a[idx] = (XT[idx] ** 2) @ w


@jit()
def _newton(XT, y, offset, eta, alpha, beta, active, lam, max_newton, max_sweeps, tol):
    """Proximal Newton iterations at one penalty; returns (alpha, converged)."""
    p, n = XT.shape
    w = np.empty(n)
    r = np.empty(n)
    a = np.zeros(p)
    beta_old = np.empty(p)
    b_full = np.empty(p)
    eta_new = np.empty(n)
    obj = _penalized_nll(y, eta, beta, lam)
    for _ in range(max_newton):
        w[:] = np.exp(eta)
        r[:] = (y - w) / w
        _weighted_sq(XT, w, active, a)
        alpha_old = alpha
        beta_old[:] = beta
        alpha = _cd_quadratic(XT, w, r, alpha, beta, a, active, lam, max_sweeps, tol)

        # backtracking on the penalized objective
        step = 1.0
        a_try = alpha
        b_full[:] = beta
        _linpred(XT, offset, alpha, beta, eta_new)
        obj_new = _penalized_nll(y, eta_new, beta, lam)
        while obj_new > obj + 1e-12 * abs(obj) and step > 1e-4:
            step *= 0.5
            a_try = alpha_old + step * (alpha - alpha_old)
            for k in range(p):
                beta[k] = beta_old[k] + step * (b_full[k] - beta_old[k])
            _linpred(XT, offset, a_try, beta, eta_new)
            obj_new = _penalized_nll(y, eta_new, beta, lam)
        alpha = a_try
        change = abs(alpha - alpha_old)
        for k in range(p):
            change = max(change, abs(beta[k] - beta_old[k]))
        eta[:] = eta_new
        done = abs(obj - obj_new) <= tol * (abs(obj_new) + tol) or change < 1e-7
        obj = obj_new
        if done:
            return alpha, True
    return alpha, False


@jit()
def _fit_token(XT, y, offset, lam_ratios, fixed_lambda, max_newton, max_sweeps, tol, patience):
    p, n = XT.shape
    beta = np.zeros(p)
    best_beta = np.zeros(p)
    sy = y.sum()
    se = np.exp(offset).sum()
    if sy <= 0.0:
        return best_beta, 0.0, 0.0, 0.0, 0, True

    alpha = math.log(sy / se)
    eta = np.empty(n)
    _linpred(XT, offset, alpha, beta, eta)
    grad = np.empty(p)
    _gradient(XT, y, eta, grad)
    lam_max = 0.0
    for k in range(p):
        lam_max = max(lam_max, abs(grad[k]))

    if fixed_lambda >= 0.0:
        lams = np.array([fixed_lambda])
    else:
        lams = lam_max * lam_ratios

    active = np.zeros(p, dtype=np.bool_)
    best_aicc = np.inf
    best_alpha = alpha
    best_lam = lams[0]
    best_dev = 0.0
    best_df = 0
    best_conv = False
    lam_prev = lam_max
    since_best = 0

    for li in range(lams.shape[0]):
        lam = lams[li]
        # sequential strong rule, then KKT repair
        for k in range(p):
            active[k] = beta[k] != 0.0 or abs(grad[k]) >= 2.0 * lam - lam_prev
        conv = True
        while True:
            n_active = 0
            for k in range(p):
                if active[k]:
                    n_active += 1
            if n_active > 0:
                alpha, ok = _newton(
                    XT, y, offset, eta, alpha, beta, active, lam, max_newton, max_sweeps, tol
                )
                conv = conv and ok
            _gradient(XT, y, eta, grad)
            violated = False
            for k in range(p):
                if not active[k] and abs(grad[k]) > lam * (1.0 + 1e-6):
                    active[k] = True
                    violated = True
            if not violated:
                break
        lam_prev = lam

        dev = _deviance(y, eta)
        df = 1
        for k in range(p):
            if beta[k] != 0.0:
                df += 1
        if n - df - 1 > 0:
            aicc = dev + 2.0 * df * n / (n - df - 1.0)
        else:
            aicc = np.inf
        if aicc < best_aicc or li == 0:
            since_best = 0
            best_aicc = aicc
            best_beta[:] = beta
            best_alpha = alpha
            best_lam = lam
            best_dev = dev
            best_df = df
            best_conv = conv
        else:
            since_best += 1
            if since_best >= patience:
                break
    return best_beta, best_alpha, best_lam, best_dev, best_df, best_conv


@jit(parallel=True)
def poisson_lasso_columns(
    XT, indptr, indices, counts, offset, lam_ratios, fixed_lambda, max_newton, max_sweeps, tol,
    patience,
):
    """Fit one penalized Poisson regression per CSC column of a count matrix.

    ``XT`` is the p x n transposed design. Returns ``(coef, intercept, lam, deviance, df, converged)``; ``coef`` has
    one row per column. A negative ``fixed_lambda`` means "select along the
    ``lam_ratios`` path by AICc"; the path stops early once AICc has not
    improved for ``patience`` consecutive penalties.
    """
    p, n = XT.shape
    d = indptr.shape[0] - 1
    coef = np.zeros((d, p))
    intercept = np.zeros(d)
    lam = np.zeros(d)
    dev = np.zeros(d)
    df = np.zeros(d, dtype=np.int64)
    conv = np.ones(d, dtype=np.bool_)
    for j in prange(d):
        y = np.zeros(n)
        for t in range(indptr[j], indptr[j + 1]):
            y[indices[t]] = counts[t]
        b, a0, lj, dj, dfj, cj = _fit_token(
            XT, y, offset, lam_ratios, fixed_lambda, max_newton, max_sweeps, tol, patience
        )
        coef[j, :] = b
        intercept[j] = a0
        lam[j] = lj
        dev[j] = dj
        df[j] = dfj
        conv[j] = cj
    return coef, intercept, lam, dev, df, conv


# --------------------------------------------------------------------------
# Cosine similarity over a list of row pairs of an L2-normalized CSR matrix.
# --------------------------------------------------------------------------


@jit()
def _edge_dot_nb(indptr, indices, data, rows_a, rows_b):
    m = rows_a.shape[0]
    out = np.zeros(m)
    for e in range(m):
        i = rows_a[e]
        j = rows_b[e]
        pa = indptr[i]
        pb = indptr[j]
        ea = indptr[i + 1]
        eb = indptr[j + 1]
        s = 0.0
        while pa < ea and pb < eb:
            ca = indices[pa]
            cb = indices[pb]
            if ca == cb:
                s += data[pa] * data[pb]
                pa += 1
                pb += 1
            elif ca < cb:
                pa += 1
            else:
                pb += 1
        out[e] = s
    return out


def _edge_dot_np(indptr, indices, data, rows_a, rows_b):
    import scipy.sparse as sp

    n = indptr.shape[0] - 1
    ncol = int(indices.max()) + 1 if indices.size else 1
    mat = sp.csr_matrix((data, indices, indptr), shape=(n, ncol))
    if rows_a.size == 0:
        return np.zeros(0)
    return np.asarray(mat[rows_a].multiply(mat[rows_b]).sum(axis=1)).ravel()


def edge_dot(indptr, indices, data, rows_a, rows_b):
    """Row-pair dot products of a CSR matrix with sorted column indices."""
    rows_a = np.ascontiguousarray(rows_a, dtype=np.int64)
    rows_b = np.ascontiguousarray(rows_b, dtype=np.int64)
    if NUMBA_ENABLED:
        return _edge_dot_nb(indptr, indices, data.astype(np.float64), rows_a, rows_b)
    return _edge_dot_np(indptr, indices, data, rows_a, rows_b)


# --------------------------------------------------------------------------
# Saturated 2x2 weighted interaction regressions, clustered.
#
# For each rule indicator g (CSC column of a 0/1 matrix) the four cells are
# (z, g) in {0,1}^2.  Outputs per-rule cell weights W[r, 2z+g], cell means,
# and the cluster-robust variance (CR0, no small-sample factor) of the
# interaction contrast ybar11 - ybar01 - ybar10 + ybar00.
# --------------------------------------------------------------------------


@jit(parallel=True)
def _interaction_cells_nb(g_indptr, g_indices, z, w, y, cluster, n_clusters):
    n = z.shape[0]
    R = g_indptr.shape[0] - 1
    # totals per cluster and arm
    Wc = np.zeros((n_clusters, 2))
    Sc = np.zeros((n_clusters, 2))
    for i in range(n):
        Wc[cluster[i], z[i]] += w[i]
        Sc[cluster[i], z[i]] += w[i] * y[i]
    Wt = np.zeros(2)
    St = np.zeros(2)
    for c in range(n_clusters):
        for a in range(2):
            Wt[a] += Wc[c, a]
            St[a] += Sc[c, a]

    cellW = np.zeros((R, 4))
    cellM = np.full((R, 4), np.nan)
    var = np.full(R, np.nan)
    for r in prange(R):
        W1 = np.zeros((n_clusters, 2))
        S1 = np.zeros((n_clusters, 2))
        for t in range(g_indptr[r], g_indptr[r + 1]):
            i = g_indices[t]
            W1[cluster[i], z[i]] += w[i]
            S1[cluster[i], z[i]] += w[i] * y[i]
        Wg = np.zeros(2)
        Sg = np.zeros(2)
        for c in range(n_clusters):
            for a in range(2):
                Wg[a] += W1[c, a]
                Sg[a] += S1[c, a]
        cw = np.empty(4)
        cm = np.empty(4)
        ok = True
        for a in range(2):
            cw[2 * a + 1] = Wg[a]
            cw[2 * a] = Wt[a] - Wg[a]
            s1 = Sg[a]
            s0 = St[a] - Sg[a]
            if cw[2 * a + 1] <= 0.0 or cw[2 * a] <= 1e-12 * Wt[a]:
                ok = False
            else:
                cm[2 * a + 1] = s1 / cw[2 * a + 1]
                cm[2 * a] = s0 / cw[2 * a]
        cellW[r, :] = cw
        if not ok:
            continue
        cellM[r, :] = cm
        v = 0.0
        for c in range(n_clusters):
            u = 0.0
            for a in range(2):
                sa = 1.0 if a == 1 else -1.0
                w1 = W1[c, a]
                s1 = S1[c, a]
                w0 = Wc[c, a] - w1
                s0 = Sc[c, a] - s1
                u += sa * (s1 - cm[2 * a + 1] * w1) / cw[2 * a + 1]
                u -= sa * (s0 - cm[2 * a] * w0) / cw[2 * a]
            v += u * u
        var[r] = v
    return cellW, cellM, var


def _interaction_cells_np(g_indptr, g_indices, z, w, y, cluster, n_clusters):
    import scipy.sparse as sp

    n = z.shape[0]
    R = g_indptr.shape[0] - 1
    G = sp.csc_matrix(
        (np.ones(g_indices.shape[0]), g_indices, g_indptr), shape=(n, R)
    )
    P = sp.csr_matrix((np.ones(n), (cluster, np.arange(n))), shape=(n_clusters, n))

    cellW = np.zeros((R, 4))
    cellM = np.full((R, 4), np.nan)
    U = np.zeros((n_clusters, R))
    valid = np.ones(R, dtype=bool)
    parts = []
    for a in (0, 1):
        arm = (z == a).astype(float)
        wa = w * arm
        sa = w * y * arm
        Wc = P @ wa
        Sc = P @ sa
        W1 = np.asarray((P @ sp.diags(wa) @ G).todense())
        S1 = np.asarray((P @ sp.diags(sa) @ G).todense())
        W0 = Wc[:, None] - W1
        S0 = Sc[:, None] - S1
        Wg1 = W1.sum(axis=0)
        Wg0 = wa.sum() - Wg1
        Sg1 = S1.sum(axis=0)
        Sg0 = sa.sum() - Sg1
        cellW[:, 2 * a + 1] = Wg1
        cellW[:, 2 * a] = Wg0
        valid &= (Wg1 > 0) & (Wg0 > 1e-12 * wa.sum())
        parts.append((W1, S1, W0, S0, Wg1, Wg0, Sg1, Sg0))
    with np.errstate(invalid="ignore", divide="ignore"):
        for a, (W1, S1, W0, S0, Wg1, Wg0, Sg1, Sg0) in zip((0, 1), parts):
            sign = 1.0 if a == 1 else -1.0
            m1 = Sg1 / Wg1
            m0 = Sg0 / Wg0
            cellM[:, 2 * a + 1] = m1
            cellM[:, 2 * a] = m0
            U += sign * (S1 - m1 * W1) / Wg1
            U -= sign * (S0 - m0 * W0) / Wg0
    var = np.where(valid, (U**2).sum(axis=0), np.nan)
    cellM[~valid] = np.nan
    return cellW, cellM, var


def interaction_cells(g_indptr, g_indices, z, w, y, cluster, n_clusters):
    """Cell weights, cell means and clustered interaction variance per rule."""
    args = (
        np.ascontiguousarray(g_indptr, dtype=np.int64),
        np.ascontiguousarray(g_indices, dtype=np.int64),
        np.ascontiguousarray(z, dtype=np.int64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
        np.ascontiguousarray(cluster, dtype=np.int64),
        int(n_clusters),
    )
    if NUMBA_ENABLED:
        return _interaction_cells_nb(*args)
    return _interaction_cells_np(*args)
