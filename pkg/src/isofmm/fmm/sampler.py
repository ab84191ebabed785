"""MCMC for the transformed-space mixed model, one coefficient column at a time.

Because the random-effect and residual covariances are diagonal across
coefficients and identity across images, the posterior factorizes over
columns. Each column k carries ``d_k = X beta_k + Z u_k + e_k`` with
``u_k ~ N(0, q_k I)``, ``e_k ~ N(0, s_k I)`` and a spike-slab prior on
``beta_k``. One sweep is

1. for each covariate a (ascending), draw ``(gamma_a, beta_a)`` from their
   joint conditional with ``u`` integrated out;
2. draw ``u`` from its Gaussian full conditional;
3. update ``(log q, log s)`` with a joint Gaussian random-walk
   Metropolis-Hastings step against the u-marginal likelihood and
   inverse-gamma priors.

Columns are processed in fixed blocks that are updated with vectorized
numpy operations; every block owns a random stream keyed by the run seed and
the block's first coefficient position, so results do not depend on the
number of workers or the order in which blocks run.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from isofmm.errors import ConfigError, NumericalError
from isofmm.fmm.design import DesignSpec
from isofmm.fmm.estimates import InitEstimates, init_estimates, woodbury_weights
from isofmm.fmm.hyper import Hyperparams

log = logging.getLogger(__name__)

EVAL_FLOOR = 1e-12  # relative to the prior scale; used only when evaluating densities


@dataclass(frozen=True)
class SamplerConfig:
    burn_in: int = 1000
    iterations: int = 20000
    thin: int = 10
    seed: int = 0
    proposal_sd: float = 0.5
    adapt: bool = True
    target_accept: float = 0.35
    block_size: int = 512
    update_variances: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.burn_in < 0 or self.iterations < 1 or self.thin < 1:
            raise ConfigError("need burn_in >= 0, iterations >= 1 and thin >= 1")
        if self.thin > self.iterations:
            raise ConfigError("thin larger than iterations keeps no draws")
        if self.proposal_sd < 0:
            raise ConfigError("proposal_sd must be nonnegative")
        if self.block_size < 1 or self.workers < 1:
            raise ConfigError("block_size and workers must be positive")

    @property
    def n_draws(self) -> int:
        return self.iterations // self.thin

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("workers")  # never affects results
        return d


@dataclass
class SamplerState:
    """State of a block of C columns."""

    beta: np.ndarray  # C x p
    gamma: np.ndarray  # C x p, bool
    u: np.ndarray  # C x m
    q: np.ndarray  # C
    s: np.ndarray  # C

    @classmethod
    def from_init(cls, init: InitEstimates, sl=slice(None), m: int = 0) -> "SamplerState":
        beta = np.array(init.beta_hat[sl], dtype=np.float64)
        return cls(beta, np.ones(beta.shape, dtype=bool),
                   np.zeros((beta.shape[0], m)), np.array(init.q0[sl], dtype=np.float64),
                   np.array(init.s0[sl], dtype=np.float64))


def gibbs_update_column(state: SamplerState, D: np.ndarray, design: DesignSpec,
                        pi: np.ndarray, tau: np.ndarray, rng: np.random.Generator,
                        column_ids=None) -> SamplerState:
    """Spike-slab Gibbs step for the fixed effects, then a draw of ``u``.

    ``D`` is C x N (one row per column); ``pi`` and ``tau`` are C x p. The
    state is updated in place and returned.
    """
    X = design.X
    C = D.shape[0]
    q, s = state.q, state.s
    if design.m:
        Z = design.Z
        n_b = design.unit_sizes
        w = woodbury_weights(q, s, n_b)  # C x m
    fitted = state.beta @ X.T  # C x N
    for a in range(design.p):
        xa = X[:, a]
        r = D - fitted + state.beta[:, a : a + 1] * xa
        if design.m:
            Zx = Z.T @ xa
            Zr = r @ Z
            info = (xa @ xa - w @ (Zx * Zx)) / s
            score = (r @ xa - (w * Zr) @ Zx) / s
        else:
            info = (xa @ xa) / s
            score = (r @ xa) / s
        V = 1.0 / info
        bhat = V * score
        t = tau[:, a]
        p_a = pi[:, a]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            shrink = 1.0 / (1.0 + V / t)
            log_odds = (np.log(p_a) - np.log1p(-p_a) + 0.5 * np.log(V / (V + t))
                        + 0.5 * bhat * bhat / V * shrink)
        incl_prob = np.where(p_a >= 1.0, 1.0, np.where(p_a <= 0.0, 0.0, expit(log_odds)))
        unif = rng.random(C)
        normal = rng.standard_normal(C)
        gamma = unif < incl_prob
        beta = np.where(gamma, bhat * shrink + np.sqrt(V * shrink) * normal, 0.0)
        if not np.all(np.isfinite(beta)):
            bad = np.flatnonzero(~np.isfinite(beta))
            ids = bad if column_ids is None else np.asarray(column_ids)[bad]
            raise NumericalError(f"non-finite fixed-effect draw for covariate {a + 1} "
                                 f"at coefficient column(s) {ids[:10].tolist()}")
        fitted += (beta - state.beta[:, a])[:, None] * xa
        state.beta[:, a] = beta
        state.gamma[:, a] = gamma
    if design.m:
        resid_sum = (D - fitted) @ design.Z  # C x m
        mean = w * resid_sum
        var = q[:, None] * s[:, None] / (s[:, None] + q[:, None] * design.unit_sizes[None, :])
        state.u = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
    return state


def _log_target(q, s, rr, Zr, design: DesignSpec, scale_q, scale_s, shape):
    """Log posterior of (log q, log s) up to a constant, u marginalized."""
    N = design.n
    se = np.maximum(s, EVAL_FLOOR * scale_s)
    out = -(shape + 1.0) * np.log(se) - scale_s / se + np.log(s)
    if design.m:
        qe = np.maximum(q, EVAL_FLOOR * scale_q)
        n_b = design.unit_sizes[None, :]
        w = qe[:, None] / (se[:, None] + qe[:, None] * n_b)
        quad = (rr - np.sum(w * Zr * Zr, axis=1)) / se
        logdet = N * np.log(se) + np.sum(np.log1p(qe[:, None] * n_b / se[:, None]), axis=1)
        out += -(shape + 1.0) * np.log(qe) - scale_q / qe + np.log(q)
    else:
        quad = rr / se
        logdet = N * np.log(se)
    return out - 0.5 * (logdet + quad)


def mh_update_variances(state: SamplerState, D: np.ndarray, design: DesignSpec,
                        scale_q: np.ndarray, scale_s: np.ndarray, rng: np.random.Generator,
                        proposal_sd, shape: float = 1.0) -> np.ndarray:
    """Joint log-scale random-walk update of (q, s); returns the acceptance mask.

    The priors are ``IG(shape, scale_q)`` and ``IG(shape, scale_s)``; with
    ``shape = 1`` and the starting estimates as scales these carry the
    information of two observations. Without random effects only ``s`` moves.
    """
    C = D.shape[0]
    r = D - state.beta @ design.X.T
    rr = np.sum(r * r, axis=1)
    Zr = r @ design.Z if design.m else None
    sd = np.broadcast_to(np.asarray(proposal_sd, dtype=np.float64), (C,))
    steps = rng.standard_normal((C, 2)) * sd[:, None]
    unif = rng.random(C)
    q_new = state.q * np.exp(steps[:, 0]) if design.m else state.q
    s_new = state.s * np.exp(steps[:, 1])
    cur = _log_target(state.q, state.s, rr, Zr, design, scale_q, scale_s, shape)
    prop = _log_target(q_new, s_new, rr, Zr, design, scale_q, scale_s, shape)
    with np.errstate(invalid="ignore"):
        accept = np.log(unif) < prop - cur
    accept &= np.isfinite(prop)
    state.q = np.where(accept, q_new, state.q)
    state.s = np.where(accept, s_new, state.s)
    return accept


def _block_rng(seed: int, first_position: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(first_position,))))


def _run_block(D: np.ndarray, design: DesignSpec, init: InitEstimates, pi, tau,
               scale_q, scale_s, shape, config: SamplerConfig, positions: np.ndarray):
    C = D.shape[0]
    p = design.p
    rng = _block_rng(config.seed, int(positions[0]))
    state = SamplerState(init.beta_hat.copy(), np.ones((C, p), dtype=bool),
                         np.zeros((C, design.m)), init.q0.copy(), init.s0.copy())
    n_draws = config.n_draws
    beta_out = np.empty((n_draws, p, C))
    gamma_out = np.empty((n_draws, p, C), dtype=bool)
    var_out = np.empty((n_draws, C, 2))
    log_sd = np.full(C, np.log(config.proposal_sd)) if config.proposal_sd > 0 else None
    accepted = np.zeros(C)
    k = 0
    for it in range(config.burn_in + config.iterations):
        gibbs_update_column(state, D, design, pi, tau, rng, positions)
        if config.update_variances:
            sd = np.exp(log_sd) if log_sd is not None else 0.0
            acc = mh_update_variances(state, D, design, scale_q, scale_s, rng, sd, shape)
            if it < config.burn_in:
                if config.adapt and log_sd is not None:
                    log_sd += (acc - config.target_accept) / (it + 1) ** 0.6
                    np.clip(log_sd, np.log(1e-3), np.log(10.0), out=log_sd)
            else:
                accepted += acc
        if not (np.all(state.s > 0) and np.all(np.isfinite(state.s)) and np.all(state.q >= 0)):
            bad = np.flatnonzero(~((state.s > 0) & np.isfinite(state.s) & (state.q >= 0)))
            raise NumericalError(f"invalid variance state at coefficient column(s) "
                                 f"{positions[bad][:10].tolist()}")
        t = it - config.burn_in + 1
        if t > 0 and t % config.thin == 0:
            beta_out[k] = state.beta.T
            gamma_out[k] = state.gamma.T
            var_out[k, :, 0] = state.q
            var_out[k, :, 1] = state.s
            k += 1
    return beta_out, gamma_out, var_out, accepted / config.iterations


def run_sampler(D, design: DesignSpec, hyper: Hyperparams, config: SamplerConfig,
                init: InitEstimates | None = None, positions=None, index_map=None,
                mask_hash: str = "", design_hash: str = "", level: float = 1.0,
                n_total: int | None = None):
    """Run the chain for every retained coefficient column.

    ``D`` is a :class:`~isofmm.wavelet.CoefSet` or an N x T* array (then
    ``positions``, ``index_map`` and ``n_total`` must be given or trivial).
    """
    from isofmm.fmm.draws import PosteriorDraws

    if hasattr(D, "coefs"):
        positions = D.retained if positions is None else positions
        index_map = D.index_map if index_map is None else index_map
        n_total = D.n_total if n_total is None else n_total
        data = D.coefs
    else:
        data = np.atleast_2d(np.asarray(D, dtype=np.float64))
    positions = np.arange(data.shape[1]) if positions is None else np.asarray(positions)
    if n_total is None:
        n_total = int(positions.max()) + 1 if positions.size else data.shape[1]
    if positions.size != data.shape[1] or (positions.size and positions.max() >= n_total):
        raise ConfigError("retained positions must match the data columns and lie below n_total")
    if init is None:
        init = init_estimates(data, design)
    if index_map is not None:
        pi, tau = hyper.column_arrays(index_map, positions, design.p)
    else:
        key = next(iter(hyper.pi))
        pi = np.full((data.shape[1], design.p), hyper.pi[key])
        tau = np.full((data.shape[1], design.p), hyper.tau[key])
    Dt = np.ascontiguousarray(data.T)
    T = Dt.shape[0]
    bounds = [(lo, min(lo + config.block_size, T)) for lo in range(0, T, config.block_size)]

    def work(bound):
        lo, hi = bound
        sl = slice(lo, hi)
        sub_init = InitEstimates(init.beta_hat[sl], init.V_hat[sl], init.q0[sl], init.s0[sl],
                                 init.q_raw[sl], init.s_raw[sl])
        return _run_block(Dt[sl], design, sub_init, pi[sl], tau[sl],
                          np.asarray(hyper.ig_scale_q)[sl], np.asarray(hyper.ig_scale_s)[sl],
                          hyper.ig_shape, config, positions[sl])

    if config.workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(work, bounds))
    else:
        results = [work(b) for b in bounds]
    n_draws = config.n_draws
    beta = np.empty((n_draws, design.p, T))
    gamma = np.empty((n_draws, design.p, T), dtype=bool)
    var = np.empty((n_draws, T, 2))
    accept = np.empty(T)
    for (lo, hi), (b, g, v, a) in zip(bounds, results):
        beta[:, :, lo:hi] = b
        gamma[:, :, lo:hi] = g
        var[:, lo:hi] = v
        accept[lo:hi] = a
    return PosteriorDraws(
        beta_draws=beta, gamma_draws=gamma, variance_draws=var, positions=positions,
        n_total=n_total, rng_seed=config.seed, config=config.to_dict(), accept_rate=accept,
        level=level, mask_hash=mask_hash, design_hash=design_hash or design.digest(),
        covariate_names=list(design.covariate_names),
    )
