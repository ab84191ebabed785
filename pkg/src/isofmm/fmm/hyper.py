"""Empirical Bayes estimates of the spike-slab parameters.

Within a group (covariate a, scale j, orientation l) the starting estimates
are modeled as

    beta_hat_k ~ pi N(0, tau + V_k) + (1 - pi) N(0, V_k)

and (pi, tau) are fit by EM treating both the inclusion indicator and the
true coefficient as missing data, which gives closed-form M-steps even with
coefficient-specific V_k.
"""

from __future__ import annotations

import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from isofmm.errors import DataError
from isofmm.wavelet import CoefIndexMap

log = logging.getLogger(__name__)

MIN_GROUP = 5
MAX_EM_ITER = 500
# slab variances this small relative to the sampling variance are treated as no signal
NULL_TAU_FRACTION = 0.05


@dataclass
class Hyperparams:
    """Spike-slab parameters per (a, j, l) and inverse-gamma prior scales per column."""

    pi: dict[tuple[int, int, int], float]
    tau: dict[tuple[int, int, int], float]
    ig_scale_q: np.ndarray
    ig_scale_s: np.ndarray
    ig_shape: float = 1.0
    source: dict[tuple[int, int, int], str] = field(default_factory=dict)

    def __post_init__(self):
        for key, value in self.pi.items():
            if not 0.0 <= value <= 1.0:
                raise DataError(f"pi{key} = {value} outside [0, 1]")
        for key, value in self.tau.items():
            if not value >= 0.0:
                raise DataError(f"tau{key} = {value} must be nonnegative")
        if self.ig_shape <= 0:
            raise DataError("inverse-gamma shape must be positive")

    def column_arrays(self, index_map: CoefIndexMap, positions: np.ndarray, p: int):
        """Per-column ``(pi, tau)`` as C x p arrays."""
        j = index_map.scale[positions]
        l = index_map.orientation[positions]
        pi = np.empty((positions.size, p))
        tau = np.empty((positions.size, p))
        for a in range(p):
            for jj, ll in set(zip(j.tolist(), l.tolist())):
                sel = (j == jj) & (l == ll)
                pi[sel, a] = self.pi[(a, jj, ll)]
                tau[sel, a] = self.tau[(a, jj, ll)]
        return pi, tau


def _log_normal(x, var):
    return -0.5 * (np.log(2 * np.pi * var) + x * x / var)


def fit_spike_slab_em(beta_hat, V, max_iter: int = MAX_EM_ITER, tol: float = 1e-8):
    """EM for (pi, tau) in one group; returns ``(pi, tau, converged)``.

    ``pi`` is kept in ``[1/K, 1 - 1/K]``. EM creeps toward the boundary on
    groups without signal, so once the slab variance falls below 5% of the
    median sampling variance the group is declared null: ``pi`` goes to the
    lower clip and iteration stops.
    """
    b = np.asarray(beta_hat, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    K = b.size
    lo, hi = 1.0 / K, 1.0 - 1.0 / K
    med_v = float(np.median(V))
    pi = 0.5
    tau = max(float(np.mean(b * b - V)), float(np.mean(V)))
    ll_old = -np.inf
    converged = False
    for _ in range(max_iter):
        slab = np.log(pi) + _log_normal(b, tau + V)
        spike = np.log1p(-pi) + _log_normal(b, V)
        ll = float(np.sum(np.logaddexp(slab, spike)))
        w = np.exp(slab - np.logaddexp(slab, spike))
        shrink = tau / (tau + V)
        second_moment = shrink * V + (shrink * b) ** 2
        pi_new = float(np.clip(w.mean(), lo, hi))
        tau_new = float(np.sum(w * second_moment) / max(np.sum(w), 1e-300))
        done = abs(ll - ll_old) <= tol * (1.0 + abs(ll))
        pi, tau, ll_old = pi_new, tau_new, ll
        if tau <= NULL_TAU_FRACTION * med_v:
            return lo, tau, True
        if done:
            converged = True
            break
    return pi, tau, converged


def _fallback_order(j: int, levels_present: list[int]) -> list[int]:
    coarser = sorted(x for x in levels_present if x > j)
    finer = sorted((x for x in levels_present if x < j), reverse=True)
    return coarser + finer


def estimate_shrinkage_hyperparams(init, index_map: CoefIndexMap, positions=None) -> Hyperparams:
    """Fit (pi, tau) for every (covariate, scale, orientation) group.

    Scaling coefficients get ``pi = 1`` and a flat slab (``tau = inf``).
    Groups with fewer than five coefficients borrow the estimate of the
    nearest scale with the same orientation (coarser first, then finer),
    then the pooled detail coefficients of that covariate.
    """
    positions = np.arange(len(index_map)) if positions is None else np.asarray(positions)
    if positions.size != init.n_columns:
        raise DataError("initial estimates and retained positions disagree in length")
    j = index_map.scale[positions]
    l = index_map.orientation[positions]
    scaling = index_map.is_scaling()[positions]
    p = init.beta_hat.shape[1]
    keys = sorted(set(zip(j.tolist(), l.tolist())))
    pi: dict = {}
    tau: dict = {}
    source: dict = {}
    unconverged = []
    for a in range(p):
        b_all, V_all = init.beta_hat[:, a], init.V_hat[:, a]
        fitted: dict[tuple[int, int], tuple[float, float]] = {}
        for jj, ll in keys:
            sel = (j == jj) & (l == ll)
            if scaling[sel].any():
                continue
            if sel.sum() >= MIN_GROUP:
                g_pi, g_tau, ok = fit_spike_slab_em(b_all[sel], V_all[sel])
                if not ok:
                    unconverged.append((a + 1, jj, ll))
                fitted[(jj, ll)] = (g_pi, g_tau)
        detail = ~scaling
        pooled = None
        if detail.sum() >= MIN_GROUP:
            pooled = fit_spike_slab_em(b_all[detail], V_all[detail])[:2]
        for jj, ll in keys:
            key = (a, jj, ll)
            sel = (j == jj) & (l == ll)
            if scaling[sel].any():
                pi[key], tau[key], source[key] = 1.0, float("inf"), "scaling"
            elif (jj, ll) in fitted:
                pi[key], tau[key] = fitted[(jj, ll)]
                source[key] = "em"
            else:
                same_l = [x for (x, y) in fitted if y == ll]
                donor = next(iter(_fallback_order(jj, same_l)), None)
                if donor is not None:
                    pi[key], tau[key] = fitted[(donor, ll)]
                    source[key] = f"inherit:j={donor}"
                elif pooled is not None:
                    pi[key], tau[key] = pooled
                    source[key] = "pooled"
                else:
                    b, V = b_all[sel], V_all[sel]
                    pi[key] = 0.5
                    tau[key] = max(float(np.mean(b * b)), float(np.mean(V)))
                    source[key] = "default"
                    log.info("group %s has too few coefficients; using default prior", key)
    if unconverged:
        warnings.warn(f"EM did not converge within {MAX_EM_ITER} iterations for "
                      f"{len(unconverged)} group(s) {unconverged}; using last iterates")
    return Hyperparams(pi, tau, np.asarray(init.q0).copy(), np.asarray(init.s0).copy(), 1.0, source)


def write_hyperparams(path, hyper: Hyperparams, covariate_names=None, tag: str | None = None) -> None:
    buf = io.StringIO()
    if tag:
        buf.write(f"# {tag}\n")
    buf.write("a,j,l,pi,tau,source\n")
    for a, jj, ll in sorted(hyper.pi):
        buf.write(f"{a + 1},{jj},{ll},{hyper.pi[(a, jj, ll)]:.10g},"
                  f"{hyper.tau[(a, jj, ll)]:.10g},{hyper.source.get((a, jj, ll), '')}\n")
    Path(path).write_text(buf.getvalue())
