"""Multinomial inverse regression via distributed Poisson lasso fits.

Each vocabulary column is regressed on the standardized covariates with a
log document-length offset; the stacked coefficients form the d x p loading
matrix, and documents project onto covariate space as ``C_i @ phi / m_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .corpus import DocTermMatrix

FORMAT_VERSION = 1
_GRID = 2.0**30


@dataclass(frozen=True)
class MnirConfig:
    n_lambda: int = 20
    lambda_min_ratio: float = 1e-2
    patience: int = 3
    penalty: float | None = None  # fixed L1 penalty; None selects by AICc
    max_iter: int = 50
    max_sweeps: int = 200
    tol: float = 1e-5

    def lambda_ratios(self) -> np.ndarray:
        if self.n_lambda < 1:
            raise ValueError("n_lambda must be >= 1")
        return np.logspace(0.0, np.log10(self.lambda_min_ratio), self.n_lambda)


@dataclass
class MnirModel:
    phi: np.ndarray
    covariate_means: np.ndarray
    covariate_sds: np.ndarray
    covariate_names: list[str]
    vocab_digest: str
    penalties: np.ndarray
    intercepts: np.ndarray
    converged: np.ndarray
    deviance: np.ndarray
    n_fit: int = 0
    config: MnirConfig = field(default_factory=MnirConfig)

    @property
    def n_tokens(self) -> int:
        return self.phi.shape[0]

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                format_version=np.array(FORMAT_VERSION),
                phi=self.phi,
                covariate_means=self.covariate_means,
                covariate_sds=self.covariate_sds,
                covariate_names=np.array(self.covariate_names, dtype=str),
                vocab_digest=np.array(self.vocab_digest),
                penalties=self.penalties,
                intercepts=self.intercepts,
                converged=self.converged,
                deviance=self.deviance,
                n_fit=np.array(self.n_fit),
            )

    @classmethod
    def load(cls, path: str | Path) -> "MnirModel":
        with np.load(path, allow_pickle=False) as z:
            version = int(z["format_version"])
            if version != FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported MNIR model version {version}")
            return cls(
                phi=z["phi"],
                covariate_means=z["covariate_means"],
                covariate_sds=z["covariate_sds"],
                covariate_names=[str(s) for s in z["covariate_names"]],
                vocab_digest=str(z["vocab_digest"]),
                penalties=z["penalties"],
                intercepts=z["intercepts"],
                converged=z["converged"],
                deviance=z["deviance"],
                n_fit=int(z["n_fit"]),
            )


def fit_mnir(
    dtm: DocTermMatrix,
    x: np.ndarray,
    cfg: MnirConfig = MnirConfig(),
    covariate_names: Sequence[str] | None = None,
) -> MnirModel:
    """Fit the per-token penalized Poisson regressions of ``dtm`` on ``x``.

    ``x`` must be complete (pass only complete cases); rows of ``dtm`` and
    ``x`` are aligned. Documents with no in-vocabulary tokens carry no
    information and are left out of the fits.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != dtm.n_docs:
        raise ValueError(f"x has shape {x.shape}, expected ({dtm.n_docs}, p)")
    n, p = x.shape
    names = list(covariate_names) if covariate_names is not None else [f"x{k}" for k in range(p)]
    if len(names) != p:
        raise ValueError("covariate_names length does not match x")
    if np.isnan(x).any():
        raise ValueError("fit_mnir requires complete covariates (use complete cases)")
    if n < p + 2:
        raise ValueError(f"need at least p + 2 = {p + 2} documents, got {n}")

    means = x.mean(axis=0)
    sds = x.std(axis=0, ddof=1)
    for k in range(p):
        if not sds[k] > 0:
            raise ValueError(f"covariate {names[k]!r} has zero variance")

    m = dtm.row_totals
    keep = m > 0
    # snapping to a 2^-30 grid removes rounding noise from the standardization,
    # so affinely rescaled covariates give bitwise-identical fits
    xs = np.round((x[keep] - means) / sds * _GRID) / _GRID
    xt = np.ascontiguousarray(xs.T)
    csc = dtm.counts[keep].tocsc()
    csc.sort_indices()
    fixed = -1.0 if cfg.penalty is None else float(cfg.penalty)
    if fixed < -0.5 and cfg.penalty is not None:
        raise ValueError("penalty must be nonnegative")

    phi, icpt, lam, dev, _, conv = _kernels.poisson_lasso_columns(
        xt,
        csc.indptr.astype(np.int64),
        csc.indices.astype(np.int64),
        csc.data.astype(np.float64),
        np.log(m[keep].astype(np.float64)),
        cfg.lambda_ratios(),
        fixed,
        int(cfg.max_iter),
        int(cfg.max_sweeps),
        float(cfg.tol),
        int(cfg.patience),
    )
    phi = np.array(phi)
    phi[~conv] = 0.0
    return MnirModel(
        phi=phi,
        covariate_means=means,
        covariate_sds=sds,
        covariate_names=names,
        vocab_digest=dtm.vocab.digest(),
        penalties=np.asarray(lam),
        intercepts=np.asarray(icpt),
        converged=np.asarray(conv, dtype=bool),
        deviance=np.asarray(dev),
        n_fit=int(keep.sum()),
        config=cfg,
    )


def sr_scores(dtm: DocTermMatrix, model: MnirModel) -> np.ndarray:
    """Sufficient-reduction projections ``C_i phi / m_i`` (zero rows when m_i = 0)."""
    if dtm.vocab.digest() != model.vocab_digest or len(dtm.vocab) != model.n_tokens:
        raise ValueError("DTM vocabulary does not match the MNIR model's vocabulary")
    m = dtm.row_totals.astype(float)
    proj = np.asarray(dtm.counts @ model.phi)
    scale = np.divide(1.0, m, out=np.zeros_like(m), where=m > 0)
    return proj * scale[:, None]
