"""Moment-based starting values and GLS estimates for every coefficient column.

With ``Sigma = s I + q Z Z'`` the Woodbury identity gives

    Sigma^-1 v = (v - Z (w * Z'v)) / s,    w_b = q / (s + q n_b),

where ``n_b`` counts the images of unit b. All computations below are
vectorized over columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from isofmm.fmm.design import DesignSpec

FLOOR_FRACTION = 1e-10


@dataclass
class InitEstimates:
    beta_hat: np.ndarray  # C x p
    V_hat: np.ndarray  # C x p
    q0: np.ndarray  # C (zeros when the design has no random effects)
    s0: np.ndarray  # C
    q_raw: np.ndarray  # unfloored moment estimates
    s_raw: np.ndarray

    @property
    def n_columns(self) -> int:
        return self.s0.size


def _residual_ss(A: np.ndarray, D: np.ndarray) -> tuple[np.ndarray, int]:
    """Residual sum of squares of each column of D after projecting out A."""
    coef, *_ = np.linalg.lstsq(A, D, rcond=None)
    resid = D - A @ coef
    rank = np.linalg.matrix_rank(A)
    return np.sum(resid * resid, axis=0), A.shape[0] - rank


def woodbury_weights(q: np.ndarray, s: np.ndarray, unit_sizes: np.ndarray) -> np.ndarray:
    """``w[c, b] = q_c / (s_c + q_c n_b)``."""
    q = np.asarray(q, dtype=np.float64)[:, None]
    s = np.asarray(s, dtype=np.float64)[:, None]
    return q / (s + q * unit_sizes[None, :])


def gls(D: np.ndarray, design: DesignSpec, q: np.ndarray, s: np.ndarray):
    """GLS estimates and their sampling variances for each column of ``D`` (N x C)."""
    X = design.X
    XtX = X.T @ X
    XtD = (X.T @ D).T  # C x p
    if design.m:
        w = woodbury_weights(q, s, design.unit_sizes)  # C x m
        ZtX = design.Z.T @ X  # m x p
        ZtD = (design.Z.T @ D).T  # C x m
        info = XtX[None] - np.einsum("bp,cb,bq->cpq", ZtX, w, ZtX)
        score = XtD - (w * ZtD) @ ZtX
    else:
        info = np.broadcast_to(XtX, (D.shape[1],) + XtX.shape)
        score = XtD
    info = info / s[:, None, None]
    score = score / s[:, None]
    cov = np.linalg.inv(info)
    beta = np.einsum("cpq,cq->cp", cov, score)
    return beta, np.diagonal(cov, axis1=1, axis2=2).copy()


def init_estimates(D, design: DesignSpec) -> InitEstimates:
    """Moment estimators of (q, s) followed by GLS for the fixed effects.

    ``s`` is the residual mean square after projecting out [X Z]; ``q`` is
    the excess of the X-residual sum of squares over its expectation under
    ``q = 0``, divided by ``tr(M_X Z Z')``. Both are unbiased before
    flooring at ``1e-10`` times the column's mean square.
    """
    D = getattr(D, "coefs", D)
    D = np.asarray(D, dtype=np.float64)
    X = design.X
    n, p = X.shape
    rss_x, df_x = _residual_ss(X, D)
    energy = np.mean(D * D, axis=0)
    floor = np.where(energy > 0, FLOOR_FRACTION * energy, FLOOR_FRACTION)
    if design.m:
        Z = design.Z
        rss_xz, df_xz = _residual_ss(np.column_stack([X, Z]), D)
        Mx = np.eye(n) - X @ np.linalg.pinv(X)
        trace = float(np.trace(Mx @ Z @ Z.T))
        if df_xz > 0:
            s_raw = rss_xz / df_xz
            if trace > 1e-12:
                q_raw = (rss_x - s_raw * df_x) / trace
            else:
                q_raw = s_raw.copy()
        else:
            # no replication within units: split the X-residual variance evenly
            s_raw = rss_x / df_x / 2.0
            q_raw = s_raw.copy()
        q0 = np.maximum(q_raw, floor)
    else:
        s_raw = rss_x / df_x
        q_raw = np.zeros_like(s_raw)
        q0 = q_raw.copy()
    s0 = np.maximum(s_raw, floor)
    beta, V = gls(D, design, q0, s0)
    return InitEstimates(beta, V, q0, s0, q_raw, s_raw)
