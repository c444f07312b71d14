"""Propensity scores, calipers, optimal full matching and balance checks.

Optimal full matching over an admissible bipartite graph is a minimum-cost
edge cover: every retained unit is touched by at least one chosen edge, and
an optimal cover with nonnegative costs can always be pruned to a forest of
stars (one treated with several controls, or one control with several
treated), which is exactly a full matching. Two exact solvers are provided:

* ``"assignment"`` reduces the cover to a sparse min-weight perfect matching
  (each vertex is either matched or pays its cheapest incident edge) and is
  solved with scipy's LAPJVsp;
* ``"flow"`` is the direct min-cost-flow formulation with unit lower bounds
  on treated supply and control demand arcs (networkx network simplex). It
  supports ratio limits on set sizes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import min_weight_full_bipartite_matching

from .corpus import DocTermMatrix, edge_cosine_distances

COST_SCALE = 1e8


class SeparationError(ValueError):
    """Treatment is perfectly predicted by the covariates."""


class InfeasibleMatchError(ValueError):
    """No full matching satisfies the graph and ratio constraints."""


@dataclass
class PropensityModel:
    coefficients: np.ndarray
    scores: np.ndarray
    linear_predictors: np.ndarray
    means: np.ndarray
    sds: np.ndarray


def fit_propensity(
    x: np.ndarray, z: np.ndarray, ridge: float = 1e-6, max_iter: int = 100, tol: float = 1e-10
) -> PropensityModel:
    """Logistic regression of treatment on standardized covariates by IRLS."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float).ravel()
    if x.ndim == 1:
        x = x[:, None]
    if np.isnan(x).any():
        raise ValueError("propensity covariates must be complete")
    if x.shape[0] != z.size:
        raise ValueError("x and z have different numbers of rows")
    if not (z == 1).any() or not (z == 0).any():
        raise ValueError("both treatment arms must be nonempty")
    means = x.mean(axis=0)
    sds = x.std(axis=0)
    live = sds > 0
    xs = np.zeros_like(x)
    xs[:, live] = (x[:, live] - means[live]) / sds[live]
    X = np.hstack([np.ones((x.shape[0], 1)), xs[:, live]])
    q = X.shape[1]
    pen = np.full(q, ridge)
    pen[0] = 0.0
    beta = np.zeros(q)
    beta[0] = math.log(z.mean() / (1 - z.mean()))
    for _ in range(max_iter):
        eta = X @ beta
        p = 1.0 / (1.0 + np.exp(-eta))
        W = np.maximum(p * (1 - p), 1e-12)
        H = (X * W[:, None]).T @ X + np.diag(pen)
        step = np.linalg.solve(H, X.T @ (z - p) - pen * beta)
        beta = beta + step
        if np.linalg.norm(beta[1:]) > 50 or not np.isfinite(beta).all():
            raise SeparationError(
                "perfect separation detected in the propensity model; "
                "increase matching.ridge in the run config"
            )
        if np.max(np.abs(step)) < tol:
            break
    eta = X @ beta
    if eta[z == 1].min() > eta[z == 0].max():
        raise SeparationError(
            "perfect separation detected in the propensity model; "
            "increase matching.ridge in the run config"
        )
    coef = np.zeros(x.shape[1] + 1)
    coef[0] = beta[0]
    coef[1:][live] = beta[1:]
    scores = np.clip(1.0 / (1.0 + np.exp(-eta)), 1e-15, 1 - 1e-15)
    return PropensityModel(coef, scores, eta, means, sds)


@dataclass
class CaliperGraph:
    """Admissible treated-control edges (unit indices), sorted by (treated, control)."""

    n_units: int
    treated: np.ndarray
    controls: np.ndarray
    edge_t: np.ndarray
    edge_c: np.ndarray
    threshold: float
    dropped_treated: np.ndarray
    dropped_control: np.ndarray

    @property
    def n_edges(self) -> int:
        return self.edge_t.size


def caliper_graph(
    scores, z, width_sds: float | None = 0.1, scale: str = "probability"
) -> CaliperGraph:
    """Edges with ``|score_t - score_c| <= width_sds * sd(scores)``.

    ``scores`` may be a ``PropensityModel`` or an array of probabilities.
    Units without any admissible partner are dropped and recorded.
    """
    if isinstance(scores, PropensityModel):
        scores = scores.scores
    s = np.asarray(scores, dtype=float).ravel()
    z = np.asarray(z).ravel().astype(bool)
    if scale == "logit":
        s = np.log(s / (1 - s))
    elif scale != "probability":
        raise ValueError(f"unknown caliper scale {scale!r}")
    n = s.size
    treated = np.flatnonzero(z)
    controls = np.flatnonzero(~z)
    if width_sds is None or math.isinf(width_sds):
        thr = math.inf
    else:
        if width_sds < 0:
            raise ValueError("caliper width must be nonnegative")
        thr = width_sds * float(np.std(s, ddof=1)) if n > 1 else 0.0

    order = controls[np.argsort(s[controls], kind="stable")]
    sc = s[order]
    lo = np.searchsorted(sc, s[treated] - thr, side="left")
    hi = np.searchsorted(sc, s[treated] + thr, side="right")
    counts = hi - lo
    et = np.repeat(treated, counts)
    ec = np.concatenate([np.sort(order[a:b]) for a, b in zip(lo, hi)]) if counts.sum() else np.zeros(0, np.int64)
    # guard the float boundary: keep exactly |diff| <= thr
    ok = np.abs(s[et] - s[ec]) <= thr
    et, ec = et[ok], ec[ok]
    dropped_t = np.setdiff1d(treated, et)
    if dropped_t.size == treated.size:
        raise InfeasibleMatchError("caliper too tight: every treated unit was dropped")
    dropped_c = np.setdiff1d(controls, ec)
    return CaliperGraph(
        n_units=n,
        treated=treated,
        controls=controls,
        edge_t=et.astype(np.int64),
        edge_c=ec.astype(np.int64),
        threshold=thr,
        dropped_treated=dropped_t,
        dropped_control=dropped_c,
    )


def complete_graph(z) -> CaliperGraph:
    return caliper_graph(np.zeros(len(z)) + 0.5, z, width_sds=None)


@dataclass
class MatchedSet:
    treated: tuple[int, ...]
    controls: tuple[int, ...]
    distances: tuple[float, ...]  # one per treated-control pair in the set


@dataclass
class MatchedSample:
    n_units: int
    sets: list[MatchedSet]
    dropped_treated: np.ndarray
    dropped_control: np.ndarray
    weights: np.ndarray
    total_distance: float
    set_ids: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)

    @property
    def retained(self) -> np.ndarray:
        return self.set_ids >= 0

    def validate(self) -> None:
        seen = set()
        for s in self.sets:
            if not ((len(s.treated) == 1 and len(s.controls) >= 1) or (len(s.controls) == 1 and len(s.treated) >= 1)):
                raise AssertionError(f"invalid set structure {s}")
            members = set(s.treated) | set(s.controls)
            if members & seen:
                raise AssertionError("matched sets overlap")
            seen |= members
            if not all(self.z[t] for t in s.treated) or any(self.z[c] for c in s.controls):
                raise AssertionError("treatment roles inconsistent")
        dropped = set(self.dropped_treated.tolist()) | set(self.dropped_control.tolist())
        if seen & dropped or len(seen | dropped) != self.n_units:
            raise AssertionError("retained and dropped units do not partition the sample")

    def save_csv(self, path: str | Path, ids: Sequence[str] | None = None) -> None:
        ids = list(ids) if ids is not None else [str(i) for i in range(self.n_units)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit_id", "set_id", "role", "weight", "dropped"])
            for i in range(self.n_units):
                w.writerow(
                    [
                        ids[i],
                        int(self.set_ids[i]) if self.set_ids[i] >= 0 else "",
                        "treated" if self.z[i] else "control",
                        repr(float(self.weights[i])),
                        int(self.set_ids[i] < 0),
                    ]
                )

    @classmethod
    def load_csv(cls, path: str | Path) -> tuple["MatchedSample", list[str]]:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        n = len(rows)
        ids = [r["unit_id"] for r in rows]
        z = np.array([r["role"] == "treated" for r in rows])
        set_ids = np.array([int(r["set_id"]) if r["set_id"] else -1 for r in rows])
        weights = np.array([float(r["weight"]) for r in rows])
        members: dict[int, tuple[list[int], list[int]]] = {}
        for i in range(n):
            if set_ids[i] >= 0:
                members.setdefault(int(set_ids[i]), ([], []))[0 if z[i] else 1].append(i)
        sets = [MatchedSet(tuple(t), tuple(c), ()) for _, (t, c) in sorted(members.items())]
        dropped = set_ids < 0
        sample = cls(
            n_units=n,
            sets=sets,
            dropped_treated=np.flatnonzero(dropped & z),
            dropped_control=np.flatnonzero(dropped & ~z),
            weights=weights,
            total_distance=math.nan,
            set_ids=set_ids,
            z=z,
        )
        return sample, ids


def _scaled_costs(distances: np.ndarray) -> np.ndarray:
    d = np.asarray(distances, dtype=float)
    if (d < 0).any() or not np.isfinite(d).all():
        raise ValueError("distances must be finite and nonnegative")
    return np.rint(d * COST_SCALE).astype(np.int64)


def _solve_assignment(nt, nc, et, ec, cost):
    """Min-cost edge cover via sparse perfect matching; returns chosen edge mask."""
    mu_t = np.full(nt, np.iinfo(np.int64).max)
    mu_c = np.full(nc, np.iinfo(np.int64).max)
    np.minimum.at(mu_t, et, cost)
    np.minimum.at(mu_c, ec, cost)
    E = et.size
    n = nt + nc
    # rows: treated then control-dummies; cols: controls then treated-dummies
    rows = np.concatenate([et, np.arange(nt), nt + ec, nt + np.arange(nc)])
    cols = np.concatenate([ec, nc + np.arange(nt), nc + et, np.arange(nc)])
    # +1 keeps zero-cost edges from vanishing in sparse storage; every perfect
    # matching has exactly n edges so the shift does not change the optimum
    vals = np.concatenate([cost, mu_t, np.zeros(E, np.int64), mu_c]).astype(np.float64) + 1.0
    M = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    try:
        row_ind, col_ind = min_weight_full_bipartite_matching(M)
    except ValueError as exc:  # pragma: no cover - graph always admits a cover
        raise InfeasibleMatchError(str(exc)) from exc
    partner = np.full(n, -1)
    partner[row_ind] = col_ind
    t_partner = partner[:nt]
    chosen = np.zeros(E, dtype=bool)
    edge_of = {(int(a), int(b)): k for k, (a, b) in enumerate(zip(et, ec))}
    covered_t = np.zeros(nt, bool)
    covered_c = np.zeros(nc, bool)
    for t in range(nt):
        c = t_partner[t]
        if c < nc:
            chosen[edge_of[(t, int(c))]] = True
            covered_t[t] = True
            covered_c[c] = True
    # uncovered vertices take their cheapest edge, lowest partner index on ties
    order = np.lexsort((ec, cost, et))
    first_t = {}
    for k in order:
        first_t.setdefault(int(et[k]), k)
    order = np.lexsort((et, cost, ec))
    first_c = {}
    for k in order:
        first_c.setdefault(int(ec[k]), k)
    for t in np.flatnonzero(~covered_t):
        chosen[first_t[int(t)]] = True
    for c in np.flatnonzero(~covered_c):
        chosen[first_c[int(c)]] = True
    return chosen


def _solve_flow(nt, nc, et, ec, cost, max_controls=None, max_treated=None):
    import networkx as nx

    G = nx.DiGraph()
    demand = {"s": 0, "k": 0}
    for t in range(nt):
        demand[("t", t)] = 0
    for c in range(nc):
        demand[("c", c)] = 0
    cap_t = (max_controls if max_controls is not None else nc) - 1
    cap_c = (max_treated if max_treated is not None else nt) - 1
    if cap_t < 0 or cap_c < 0:
        raise ValueError("ratio limits must be >= 1")
    # unit lower bound on s->t and c->k: shift one unit into node demands
    for t in range(nt):
        G.add_edge("s", ("t", t), capacity=cap_t, weight=0)
        demand["s"] += 1
        demand[("t", t)] -= 1
    for k in range(et.size):
        G.add_edge(("t", int(et[k])), ("c", int(ec[k])), capacity=1, weight=int(cost[k]))
    for c in range(nc):
        G.add_edge(("c", c), "k", capacity=cap_c, weight=0)
        demand[("c", c)] += 1
        demand["k"] -= 1
    G.add_edge("k", "s", capacity=nt * nc + 1, weight=0)
    for node, d in demand.items():
        G.nodes[node]["demand"] = d
    try:
        _, flow = nx.network_simplex(G)
    except nx.NetworkXUnfeasible as exc:
        raise InfeasibleMatchError(f"ratio limits make the matching infeasible: {exc}") from exc
    return np.array(
        [flow[("t", int(et[k]))][("c", int(ec[k]))] > 0 for k in range(et.size)], dtype=bool
    )


def _prune_to_stars(nt, nc, et, ec, cost, chosen):
    """Drop chosen edges whose endpoints are both covered elsewhere."""
    deg_t = np.bincount(et[chosen], minlength=nt)
    deg_c = np.bincount(ec[chosen], minlength=nc)
    idx = np.flatnonzero(chosen)
    # costliest first, then highest ids
    idx = idx[np.lexsort((-ec[idx], -et[idx], -cost[idx]))]
    for k in idx:
        if deg_t[et[k]] >= 2 and deg_c[ec[k]] >= 2:
            chosen[k] = False
            deg_t[et[k]] -= 1
            deg_c[ec[k]] -= 1
    return chosen


def optimal_full_match(
    graph: CaliperGraph,
    distances,
    solver: str = "assignment",
    max_controls: int | None = None,
    max_treated: int | None = None,
) -> MatchedSample:
    """Optimal full matching over the graph's admissible edges.

    ``distances`` holds one nonnegative distance per edge, aligned with
    ``graph.edge_t``/``graph.edge_c``. The objective is the total of
    within-set treated-control distances, computed exactly on integers after
    scaling distances by 1e8.
    """
    distances = np.asarray(distances, dtype=float).ravel()
    if distances.size != graph.n_edges:
        raise ValueError(f"{distances.size} distances for {graph.n_edges} edges")
    t_units = np.unique(graph.edge_t)
    c_units = np.unique(graph.edge_c)
    unmatched = np.setdiff1d(graph.treated, np.concatenate([t_units, graph.dropped_treated]))
    if unmatched.size:
        raise InfeasibleMatchError(f"treated units without admissible controls: {unmatched.tolist()}")
    if t_units.size == 0:
        raise InfeasibleMatchError("graph has no admissible edges")
    t_pos = np.searchsorted(t_units, graph.edge_t)
    c_pos = np.searchsorted(c_units, graph.edge_c)
    cost = _scaled_costs(distances)
    nt, nc = t_units.size, c_units.size
    if max_controls is not None or max_treated is not None or solver == "flow":
        chosen = _solve_flow(nt, nc, t_pos, c_pos, cost, max_controls, max_treated)
    elif solver == "assignment":
        chosen = _solve_assignment(nt, nc, t_pos, c_pos, cost)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    chosen = _prune_to_stars(nt, nc, t_pos, c_pos, cost, chosen)
    return _assemble(graph, t_units, c_units, t_pos, c_pos, distances, chosen)


def _assemble(graph, t_units, c_units, t_pos, c_pos, distances, chosen):
    n = graph.n_units
    nt = t_units.size
    parent = np.arange(nt + len(c_units))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for k in np.flatnonzero(chosen):
        a, b = find(t_pos[k]), find(nt + c_pos[k])
        if a != b:
            parent[max(a, b)] = min(a, b)
    groups: dict[int, list[int]] = {}
    for k in np.flatnonzero(chosen):
        groups.setdefault(int(find(t_pos[k])), []).append(int(k))

    raw_sets = []
    for edges in groups.values():
        ts = sorted({int(t_units[t_pos[k]]) for k in edges})
        cs = sorted({int(c_units[c_pos[k]]) for k in edges})
        ds = tuple(float(distances[k]) for k in sorted(edges, key=lambda k: (t_pos[k], c_pos[k])))
        raw_sets.append(MatchedSet(tuple(ts), tuple(cs), ds))
    raw_sets.sort(key=lambda s: min(s.treated + s.controls))

    z = np.zeros(n, dtype=bool)
    z[graph.treated] = True
    set_ids = np.full(n, -1, dtype=np.int64)
    weights = np.zeros(n)
    for sid, s in enumerate(raw_sets):
        for u in s.treated + s.controls:
            set_ids[u] = sid
        weights[list(s.treated)] = 1.0
        weights[list(s.controls)] = len(s.treated) / len(s.controls)
    retained = set_ids >= 0
    total = float(np.sum(distances[chosen]))
    return MatchedSample(
        n_units=n,
        sets=raw_sets,
        dropped_treated=np.flatnonzero(~retained & z),
        dropped_control=np.flatnonzero(~retained & ~z),
        weights=weights,
        total_distance=total,
        set_ids=set_ids,
        z=z,
    )


def propensity_distances(graph: CaliperGraph, scores) -> np.ndarray:
    if isinstance(scores, PropensityModel):
        scores = scores.scores
    s = np.asarray(scores, dtype=float)
    return np.abs(s[graph.edge_t] - s[graph.edge_c])


def text_match_within_calipers(dtm: DocTermMatrix, graph: CaliperGraph, **kwargs) -> MatchedSample:
    """Optimal full matching on DTM cosine distance over caliper-admissible edges."""
    if dtm.n_docs != graph.n_units:
        raise ValueError("DTM rows must align with units")
    return optimal_full_match(graph, edge_cosine_distances(dtm, graph.edge_t, graph.edge_c), **kwargs)


def full_match_weights(sample: MatchedSample, estimand: str = "ATT") -> np.ndarray:
    """ATT weights: treated 1, each control (#treated / #controls) in its set, dropped 0."""
    if estimand != "ATT":
        raise ValueError(f"unsupported estimand {estimand!r}")
    w = np.zeros(sample.n_units)
    for s in sample.sets:
        w[list(s.treated)] = 1.0
        w[list(s.controls)] = len(s.treated) / len(s.controls)
    return w


def effective_sample_size(weights) -> float:
    """Kish effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=float)
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    ss = float(np.sum(w**2))
    if ss == 0.0:
        raise ValueError("all weights are zero")
    return float(np.sum(w)) ** 2 / ss


@dataclass
class BalanceRow:
    name: str
    kind: str
    smd_before: float
    smd_after: float


@dataclass
class BalanceReport:
    rows: list[BalanceRow]
    flag: float = 0.1

    def flagged_before(self) -> list[str]:
        return [r.name for r in self.rows if abs(r.smd_before) > self.flag]

    def flagged_after(self) -> list[str]:
        return [r.name for r in self.rows if abs(r.smd_after) > self.flag]


def _smd(x, z, w, pooled_sd):
    t = z & (w > 0)
    c = ~z & (w > 0)
    if pooled_sd == 0 or not t.any() or not c.any():
        return math.nan
    mt = np.average(x[t], weights=w[t])
    mc = np.average(x[c], weights=w[c])
    return float((mt - mc) / pooled_sd)


def standardized_differences(x, z, weights=None) -> np.ndarray:
    """SMD per column; denominator from the unweighted full sample."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    z = np.asarray(z).astype(bool)
    w = np.ones(len(z)) if weights is None else np.asarray(weights, dtype=float)
    out = np.empty(x.shape[1])
    for j in range(x.shape[1]):
        vt = x[z, j].var(ddof=1) if z.sum() > 1 else 0.0
        vc = x[~z, j].var(ddof=1) if (~z).sum() > 1 else 0.0
        out[j] = _smd(x[:, j], z, w, math.sqrt((vt + vc) / 2.0))
    return out


def balance_table(
    x_structured,
    x_text,
    z,
    weights,
    structured_names: Sequence[str],
    text_names: Sequence[str] = (),
    missing_indicator=None,
    flag: float = 0.1,
) -> BalanceReport:
    """Before/after standardized mean differences for structured and text covariates."""
    xs = np.asarray(x_structured, dtype=float)
    names = list(structured_names)
    if missing_indicator is not None:
        xs = np.column_stack([xs, np.asarray(missing_indicator, dtype=float)])
        names.append("any_missing")
    rows = []
    for mat, labels, kind in ((xs, names, "structured"), (x_text, list(text_names), "text")):
        if mat is None or len(labels) == 0:
            continue
        mat = np.asarray(mat, dtype=float)
        before = standardized_differences(mat, z)
        after = standardized_differences(mat, z, weights)
        rows += [BalanceRow(n, kind, float(b), float(a)) for n, b, a in zip(labels, before, after)]
    return BalanceReport(rows, flag)


def _pool_smd(values: np.ndarray) -> tuple[float, float, float]:
    """Mean across imputations with a between-imputation 95% interval."""
    v = values[np.isfinite(values)]
    if v.size == 0:
        return math.nan, math.nan, math.nan
    mean = float(v.mean())
    if v.size < 2:
        return mean, mean, mean
    half = 1.96 * math.sqrt((1 + 1 / v.size) * float(v.var(ddof=1)))
    return mean, mean - half, mean + half


def write_balance_csv(
    path: str | Path,
    psm_reports: Sequence[BalanceReport],
    text_reports: Sequence[BalanceReport] = (),
) -> list[dict]:
    """Per covariate: before, after propensity matching, after text matching, pooled over imputations."""
    if not psm_reports:
        raise ValueError("need at least one balance report")
    names = [(r.name, r.kind) for r in psm_reports[0].rows]
    out = []
    for j, (name, kind) in enumerate(names):
        row: dict = {"covariate": name, "kind": kind}
        before = np.array([r.rows[j].smd_before for r in psm_reports])
        row["smd_before"], row["smd_before_lo"], row["smd_before_hi"] = _pool_smd(before)
        for label, reports in (("psm", psm_reports), ("text", text_reports)):
            if reports:
                vals = np.array([r.rows[j].smd_after for r in reports])
                row[f"smd_{label}"], row[f"smd_{label}_lo"], row[f"smd_{label}_hi"] = _pool_smd(vals)
        out.append(row)
    fields = list(out[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in out:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return out
