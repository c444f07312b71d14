#!/usr/bin/env python3
"""numba vs numpy timings for the hot kernels.

The backend is fixed at import time, so each backend runs in its own child
process with TEXTCAUS_DISABLE_NUMBA set or unset.

    python benchmarks/bench_kernels.py            # both backends, side by side
    python benchmarks/bench_kernels.py --quick    # smaller sizes
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_child(quick: bool) -> dict:
    import scipy.sparse as sp

    from textcaus import _kernels
    from textcaus.corpus import DocTermMatrix, Vocabulary, edge_cosine_distances
    from textcaus.effects import SubgroupRule, interaction_scan
    from textcaus.mnir import MnirConfig, fit_mnir

    rng = np.random.default_rng(0)
    out = {"numba": _kernels.NUMBA_ENABLED, "results": {}}

    # MNIR: per-token Poisson lasso
    n, d, p = (600, 60, 8) if quick else (2625, 300, 20)
    x = rng.normal(size=(n, p))
    phi = rng.normal(scale=0.4, size=(p, d)) * (rng.random((p, d)) < 0.3)
    counts = sp.csr_matrix(rng.poisson(np.exp(-1.5 + x @ phi) * rng.integers(5, 40, size=n)[:, None]))
    dtm = DocTermMatrix(counts, Vocabulary([f"w{j}" for j in range(d)], np.diff(counts.tocsc().indptr)))
    small = DocTermMatrix(counts[:60, :5], Vocabulary([f"w{j}" for j in range(5)], np.diff(counts[:60, :5].tocsc().indptr)))
    fit_mnir(small, x[:60], MnirConfig(n_lambda=2))  # compile
    out["results"][f"mnir n={n} d={d} p={p}"] = _time(lambda: fit_mnir(dtm, x), 1)

    # cosine distances over caliper edges
    n_docs, vocab, n_edges = (2000, 500, 50_000) if quick else (2625, 3000, 800_000)
    docs = sp.random(n_docs, vocab, density=0.05, format="csr", random_state=1)
    cd = DocTermMatrix(docs, Vocabulary([f"v{j}" for j in range(vocab)], np.diff(docs.tocsc().indptr)))
    et = rng.integers(0, n_docs, n_edges)
    ec = rng.integers(0, n_docs, n_edges)
    edge_cosine_distances(cd, et[:10], ec[:10])
    out["results"][f"edge cosine edges={n_edges}"] = _time(lambda: edge_cosine_distances(cd, et, ec), 3)

    # interaction scan
    n_units, n_rules = (2000, 100) if quick else (2625, 600)
    z = rng.integers(0, 2, n_units)
    y = rng.integers(0, 2, n_units).astype(float)
    w = rng.random(n_units) + 0.1
    sid = rng.integers(0, n_units // 3, n_units)
    rules = [SubgroupRule("token_presence", f"r{j}", None, (rng.random(n_units) < 0.3).astype(np.int8)) for j in range(n_rules)]
    interaction_scan(y, z, rules[:2], w, sid)
    out["results"][f"interaction scan rules={n_rules}"] = _time(lambda: interaction_scan(y, z, rules, w, sid), 3)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        print(json.dumps(run_child(args.quick)))
        return

    results = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, PYTHONWARNINGS="ignore")
        env.pop("TEXTCAUS_DISABLE_NUMBA", None)
        if backend == "numpy":
            env["TEXTCAUS_DISABLE_NUMBA"] = "1"
        cmd = [sys.executable, __file__, "--child"] + (["--quick"] if args.quick else [])
        res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
        results[backend] = json.loads(res.stdout.strip().splitlines()[-1])
        assert results[backend]["numba"] == (backend == "numba")

    print(f"{'kernel':<36} {'numpy (s)':>10} {'numba (s)':>10} {'speedup':>8}")
    print("-" * 68)
    for name, t_nb in results["numba"]["results"].items():
        t_np = results["numpy"]["results"][name]
        print(f"{name:<36} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
