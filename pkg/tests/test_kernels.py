"""The numba kernels and their numpy fallbacks must agree."""

import os
import subprocess
import sys
import textwrap

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from textcaus import _kernels

needs_numba = pytest.mark.skipif(not _kernels.NUMBA_ENABLED, reason="numba path disabled")

PROBE = textwrap.dedent(
    """
    import sys
    import numpy as np
    import scipy.sparse as sp
    from textcaus import _kernels
    from textcaus.corpus import DocTermMatrix, Vocabulary
    from textcaus.mnir import MnirConfig, fit_mnir, sr_scores

    rng = np.random.default_rng(2024)
    n, d, p = 160, 30, 4
    x = rng.normal(size=(n, p))
    phi = rng.normal(scale=0.6, size=(p, d)) * (rng.random((p, d)) < 0.4)
    rate = np.exp(-1.0 + x @ phi) * rng.integers(1, 6, size=n)[:, None]
    counts = sp.csr_matrix(rng.poisson(rate))
    vocab = Vocabulary([f"w{j}" for j in range(d)], np.diff(counts.tocsc().indptr))
    dtm = DocTermMatrix(counts, vocab)
    out = {"enabled": np.array(_kernels.NUMBA_ENABLED)}
    for name, cfg in (("aicc", MnirConfig()), ("fixed", MnirConfig(penalty=3.0))):
        model = fit_mnir(dtm, x, cfg)
        out[name + "_phi"] = model.phi
        out[name + "_sr"] = sr_scores(dtm, model)
    np.savez(sys.argv[1], **out)
    """
)


def _probe(tmp_path, disable: bool) -> dict:
    env = dict(os.environ)
    env.pop(_kernels.DISABLE_FLAG, None)
    if disable:
        env[_kernels.DISABLE_FLAG] = "1"
    target = tmp_path / f"probe_{int(disable)}.npz"
    res = subprocess.run([sys.executable, "-c", PROBE, str(target)], env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    return dict(np.load(target))


def test_mnir_fits_agree_across_backends(tmp_path):
    fast = _probe(tmp_path, disable=False)
    slow = _probe(tmp_path, disable=True)
    assert bool(fast["enabled"]) and not bool(slow["enabled"])
    for key in ("aicc_phi", "aicc_sr", "fixed_phi", "fixed_sr"):
        np.testing.assert_allclose(fast[key], slow[key], rtol=1e-9, atol=1e-9, err_msg=key)


def _csr(draw_data, n, k, density):
    rng = np.random.default_rng(draw_data)
    m = sp.random(n, k, density=density, format="csr", random_state=rng)
    m.sort_indices()
    return m


@needs_numba
@given(st.integers(0, 2**31), st.integers(1, 30), st.integers(1, 25), st.floats(0.0, 1.0), st.integers(0, 60))
def test_edge_dot_backends_agree(seed, n, k, density, n_edges):
    m = _csr(seed, n, k, density)
    rng = np.random.default_rng(seed + 1)
    a = rng.integers(0, n, n_edges)
    b = rng.integers(0, n, n_edges)
    nb = _kernels._edge_dot_nb(m.indptr, m.indices, m.data, a, b)
    ref = _kernels._edge_dot_np(m.indptr, m.indices, m.data, a, b)
    dense = (m.toarray()[a] * m.toarray()[b]).sum(axis=1)
    np.testing.assert_allclose(nb, ref, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(nb, dense, rtol=1e-12, atol=1e-14)


@needs_numba
@given(st.integers(0, 2**31), st.integers(4, 60), st.integers(1, 12), st.integers(1, 8))
def test_interaction_cells_backends_agree(seed, n, n_rules, n_clusters):
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 2, n)
    w = rng.choice([0.0, 0.5, 1.0, 2.5], n)
    y = rng.integers(0, 2, n).astype(float)
    cluster = rng.integers(0, n_clusters, n)
    g = sp.csc_matrix(rng.random((n, n_rules)) < rng.uniform(0.1, 0.9))
    g.sort_indices()
    args = (
        g.indptr.astype(np.int64),
        g.indices.astype(np.int64),
        z.astype(np.int64),
        w,
        y,
        cluster.astype(np.int64),
        n_clusters,
    )
    nbW, nbM, nbV = _kernels._interaction_cells_nb(*args)
    npW, npM, npV = _kernels._interaction_cells_np(*args)
    np.testing.assert_allclose(nbW, npW, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(nbM, npM, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(nbV, npV, rtol=1e-9, atol=1e-14)


def test_set_threads_is_bounded():
    got = _kernels.set_threads(10**6)
    assert got >= 1
    assert _kernels.set_threads(1) == 1
