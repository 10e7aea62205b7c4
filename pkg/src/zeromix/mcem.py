"""Stochastic EM engine for nonlinear mixed effects models.

The E-step runs, per individual, a Metropolis-Hastings independence
sampler whose proposal is the current latent prior N(m_k, Sigma_k);
the prior then cancels from the acceptance ratio, which reduces to the
conditional likelihood ratio of the observations.  The M-step combines
the closed-form mean update, the model-owned residual variance update
and the zero-constrained covariance solve.  Damped (stochastic
approximation) updates stabilize the iteration: full replacement
during a warm-up phase, then a decaying gain a / (k - k0)^b.

Chains are pre-generated: every proposal of an iteration is drawn and
scored in one vectorized pass, after which the sequential accept loop
only moves integer pointers.  Randomness is keyed by (master seed,
outer iteration, individual id), and cross-individual reductions run
in id-sorted order, so results do not depend on dataset ordering.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .covariance import SpdMatrix, SufficientStats, icf_solve
from .exceptions import DegenerateDrawError, ScheduleError
from .models import NlmeModel

__all__ = [
    "GammaSchedule",
    "FitConfig",
    "FitState",
    "TraceRow",
    "FitResult",
    "EStepOutput",
    "mh_chain",
    "run_estep",
    "m_update",
    "xtilde_update",
    "theta_update_cortisol",
    "saem_damp",
    "fit",
]


@dataclass(frozen=True)
class GammaSchedule:
    """Damping gains: gamma_k = 1 for k <= k0, then min(1, a / (k - k0)^b)."""

    a: float = 1.0
    b: float = 0.8
    k0: int = 50

    def __post_init__(self):
        if not (0.0 < self.b <= 1.0):
            raise ScheduleError("decay exponent b must lie in (0, 1], got %r" % (self.b,))
        if self.a <= 0.0:
            raise ScheduleError("gain scale a must be positive, got %r" % (self.a,))
        if self.k0 < 0:
            raise ScheduleError("warm-up length k0 must be >= 0, got %r" % (self.k0,))

    def gamma(self, k):
        if k <= self.k0:
            return 1.0
        return min(1.0, self.a / float(k - self.k0) ** self.b)


@dataclass(frozen=True)
class FitConfig:
    """Outer-loop configuration for ``fit``.

    The stopping tolerance is matched to the damping schedule: with
    gamma decaying like (k - k0)^-0.8 and chains of a few hundred
    draws, per-iteration relative changes settle near 1e-3, so a much
    tighter tolerance would never be reached.
    """

    chain_length: int = 500
    burn_in: int = 100
    schedule: GammaSchedule = field(default_factory=GammaSchedule)
    outer_tol: float = 2e-3
    max_outer: int = 400
    window: int = 10
    icf_tol: float = 1e-8
    icf_max_sweeps: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.chain_length < 1:
            raise ValueError("chain_length must be >= 1")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.outer_tol <= 0.0 or self.max_outer < 1 or self.window < 1:
            raise ValueError("invalid outer-loop configuration")


@dataclass
class FitState:
    """One outer iterate: latent mean, covariance, residual parameter."""

    m: np.ndarray
    sigma: SpdMatrix
    theta: float
    k: int = 0

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=float)
        if self.m.ndim != 1:
            raise ValueError("m must be a vector")
        if self.m.shape[0] != self.sigma.dim:
            raise ValueError("m and sigma dimensions differ")
        if self.theta <= 0.0:
            raise ValueError("residual variance theta must be positive")


@dataclass
class TraceRow:
    """Per-iteration record: damped state plus sampler summary."""

    k: int
    m: np.ndarray
    sigma: np.ndarray
    theta: float
    accept_rate: float
    delta: float


@dataclass
class FitResult:
    """Final state with convergence flag and full iteration trace."""

    state: FitState
    converged: bool
    iterations: int
    trace: list
    accept_rate: float
    domain_rejects: int


@dataclass
class EStepOutput:
    """Per-individual conditional-moment estimates from one E-step.

    Arrays are aligned with ``ids`` (dataset order).  ``ex`` and
    ``exx`` are chain averages of X and XX'; ``tstat`` is the chain
    average of the model's theta statistic; ``last_states`` seed the
    next iteration's chains.
    """

    ids: tuple
    ex: np.ndarray
    exx: np.ndarray
    tstat: np.ndarray
    accept_rate: np.ndarray
    domain_rejects: np.ndarray
    last_states: np.ndarray
    chain_length: int
    burn_in: int
    n_obs: int


def run_estep(model, ys, ids, m, sigma, theta, chain_length, burn_in, seeds, x0=None):
    """Metropolis-Hastings E-step over a batch of individuals.

    All proposals are drawn from N(m, Sigma) and scored up front; the
    accept loop tracks, per individual, an integer pointer into the
    proposal block.  Moments average the ``chain_length`` states after
    ``burn_in``.

    Parameters
    ----------
    ys : ndarray, shape (n, n_obs)
    ids : sequence of str
    seeds : sequence of seed material, one per individual
    x0 : ndarray (n, q), optional
        Warm-start states (previous iteration's chain ends); when
        absent each chain starts from its own extra proposal draw.

    Raises
    ------
    DegenerateDrawError
        If some chain has no domain-valid state anywhere in its
        averaging window (every proposal rejected as off-domain).
    """
    ys = np.asarray(ys, dtype=float)
    n = ys.shape[0]
    q = model.q
    t_total = burn_in + chain_length
    chol = sigma.chol_lower

    prop = np.empty((n, t_total + 1, q))
    logu = np.empty((n, t_total))
    for i in range(n):
        rng = np.random.default_rng(seeds[i])
        z = rng.standard_normal((t_total + 1, q))
        prop[i] = m[None, :] + z @ chol.T
        logu[i] = np.log(rng.random(t_total))
    if x0 is not None:
        prop[:, 0, :] = x0

    flat = prop.reshape(n * (t_total + 1), q)
    ys_rep = np.repeat(ys, t_total + 1, axis=0)
    logp_flat, ok_flat = model.log_cond_density_pairs(ys_rep, flat, theta)
    logp = logp_flat.reshape(n, t_total + 1)
    ok = ok_flat.reshape(n, t_total + 1)

    ptr = np.zeros(n, dtype=np.int64)
    lp_cur = logp[:, 0].copy()
    acc = np.zeros(n, dtype=np.int64)
    ptr_hist = np.empty((n, t_total), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        for t in range(1, t_total + 1):
            accept = logu[:, t - 1] < (logp[:, t] - lp_cur)
            ptr[accept] = t
            lp_cur[accept] = logp[accept, t]
            acc += accept
            ptr_hist[:, t - 1] = ptr

    ptr_ret = ptr_hist[:, burn_in:]
    lp_ret = np.take_along_axis(logp, ptr_ret, axis=1)
    if np.any(lp_ret == -np.inf):
        bad = [ids[i] for i in np.nonzero(np.any(lp_ret == -np.inf, axis=1))[0]]
        raise DegenerateDrawError(
            "chains stuck outside the model domain for individuals %s; "
            "parameters are implausible" % ", ".join(map(str, bad))
        )

    states = np.take_along_axis(prop, ptr_ret[:, :, None], axis=1)
    ex = states.mean(axis=1)
    exx = np.einsum("nlq,nlr->nqr", states, states) / chain_length
    stat_flat = model.theta_stat_pairs(
        np.repeat(ys, chain_length, axis=0), states.reshape(n * chain_length, q)
    )
    tstat = stat_flat.reshape(n, chain_length).mean(axis=1)

    return EStepOutput(
        ids=tuple(str(t) for t in ids),
        ex=ex,
        exx=exx,
        tstat=tstat,
        accept_rate=acc / float(t_total),
        domain_rejects=np.sum(~ok[:, 1:], axis=1),
        last_states=states[:, -1, :].copy(),
        chain_length=chain_length,
        burn_in=burn_in,
        n_obs=model.n_obs,
    )


def mh_chain(model, y_i, state, chain_length=500, burn_in=100, seed=0, x0=None):
    """Single-individual Metropolis-Hastings chain; see ``run_estep``.

    Deterministic given the seed.  Returns an EStepOutput whose arrays
    have one row.
    """
    x0 = None if x0 is None else np.asarray(x0, dtype=float)[None, :]
    return run_estep(
        model,
        np.asarray(y_i, dtype=float)[None, :],
        ("0",),
        state.m,
        state.sigma,
        state.theta,
        chain_length,
        burn_in,
        [seed],
        x0=x0,
    )


def _id_order(estep):
    return np.argsort(np.asarray(estep.ids))


def m_update(estep):
    """Mean of the per-individual conditional means, id-sorted reduction."""
    return estep.ex[_id_order(estep)].mean(axis=0)


def xtilde_update(estep, m_next):
    """Empirical conditional variance around ``m_next`` as SufficientStats."""
    order = _id_order(estep)
    exx_bar = estep.exx[order].mean(axis=0)
    ex_bar = estep.ex[order].mean(axis=0)
    m_next = np.asarray(m_next, dtype=float)
    xt = (
        exx_bar
        - np.outer(m_next, ex_bar)
        - np.outer(ex_bar, m_next)
        + np.outer(m_next, m_next)
    )
    xt = 0.5 * (xt + xt.T)
    return SufficientStats(xt, estep.ex.shape[0])


def _theta_aggregate(estep):
    return float(estep.tstat[_id_order(estep)].mean())


def theta_update_cortisol(estep):
    """Residual variance update for relative-error models.

    Averages the squared relative residuals over chain states,
    individuals and observation slots, so the result is the
    per-observation squared coefficient of variation.
    """
    return _theta_aggregate(estep) / estep.n_obs


def saem_damp(prev, raw, k, schedule):
    """Damped update: convex combination of previous state and raw M-step.

    ``raw`` is an (m, sigma, theta) triple.  The combination preserves
    positive definiteness (convexity of the cone) and the zero pattern
    (constrained entries are exactly zero on both sides).
    """
    gamma = schedule.gamma(k)
    m_raw, sigma_raw, theta_raw = raw
    sigma_raw_values = sigma_raw.values if isinstance(sigma_raw, SpdMatrix) else np.asarray(sigma_raw)
    m_new = (1.0 - gamma) * prev.m + gamma * np.asarray(m_raw, dtype=float)
    sig_new = (1.0 - gamma) * prev.sigma.values + gamma * sigma_raw_values
    theta_new = (1.0 - gamma) * prev.theta + gamma * float(theta_raw)
    sigma = SpdMatrix(sig_new, pattern=prev.sigma.pattern)
    return FitState(m=m_new, sigma=sigma, theta=theta_new, k=k)


def _relative_delta(prev, new):
    # block-scaled maximum relative change; floors keep zero-valued
    # parameters from blowing up the ratio
    floor = 1e-12
    m_scale = max(float(np.max(np.abs(prev.m))), floor)
    d_m = float(np.max(np.abs(new.m - prev.m))) / m_scale
    s_scale = max(float(np.max(np.diag(prev.sigma.values))), floor)
    d_s = float(np.max(np.abs(new.sigma.values - prev.sigma.values))) / s_scale
    t_scale = max(abs(prev.theta), floor)
    d_t = abs(new.theta - prev.theta) / t_scale
    return max(d_m, d_s, d_t)


def _exact_estep(model, data, state):
    """Closed-form E-step for models exposing exact posterior moments."""
    n = data.n
    q = model.q
    ex = np.zeros((n, q))
    exx = np.zeros((n, q, q))
    tstat = np.zeros(n)
    for i in range(n):
        mean, cov = model.posterior_moments(data.y[i], state.m, state.sigma, state.theta)
        ex[i] = mean
        exx[i] = cov + np.outer(mean, mean)
        r = data.y[i] - mean
        tstat[i] = float(r @ r) + float(np.trace(cov))
    return EStepOutput(
        ids=data.ids,
        ex=ex,
        exx=exx,
        tstat=tstat,
        accept_rate=np.ones(n),
        domain_rejects=np.zeros(n, dtype=np.int64),
        last_states=ex.copy(),
        chain_length=0,
        burn_in=0,
        n_obs=model.n_obs,
    )


def _iteration_seeds(master_seed, k, ids):
    seeds = []
    for ident in ids:
        key = zlib.crc32(str(ident).encode("utf-8"))
        seeds.append(np.random.SeedSequence((int(master_seed), int(k), int(key))))
    return seeds


def fit(model, data, pattern, init, config=None, estep_mode="mh"):
    """Maximum-likelihood fit by stochastic EM with a constrained covariance.

    One outer iteration runs the E-step at the current state, then the
    mean update, the residual variance update, the conditional
    variance matrix, the zero-constrained covariance solve (seeded
    from the current covariance), and finally the damped combination.
    Iteration stops when the block-scaled relative parameter change
    stays below ``config.outer_tol`` across a trailing window, or at
    ``config.max_outer`` (flagged, not raised).

    Parameters
    ----------
    model : NlmeModel
    data : Dataset
    pattern : ZeroPattern
        Zero constraints on the latent covariance; the empty pattern
        yields the unconstrained update (the conditional variance
        matrix itself).
    init : FitState
        Starting point; its covariance must conform to ``pattern``.
    config : FitConfig, optional
    estep_mode : {"mh", "exact"}
        "exact" substitutes closed-form posterior moments (validation
        models only) for the sampler.

    Returns
    -------
    FitResult
    """
    if config is None:
        config = FitConfig()
    if not isinstance(model, NlmeModel):
        raise TypeError("model must be an NlmeModel")
    if data.n_obs != model.n_obs:
        raise ValueError(
            "dataset has %d observations per individual, model expects %d"
            % (data.n_obs, model.n_obs)
        )
    if not np.array_equal(data.design, model.design):
        raise ValueError("dataset design grid differs from the model design")
    if estep_mode not in ("mh", "exact"):
        raise ValueError("estep_mode must be 'mh' or 'exact'")
    if estep_mode == "exact" and not hasattr(model, "posterior_moments"):
        raise ValueError("model does not expose exact posterior moments")

    sigma0 = init.sigma
    if sigma0.pattern != pattern:
        sigma0 = SpdMatrix(sigma0.values, pattern=pattern)
    state = FitState(m=init.m.copy(), sigma=sigma0, theta=init.theta, k=0)

    trace = []
    deltas = []
    x_last = None
    converged = False
    accept_mean = 1.0
    rejects_total = 0

    for k in range(1, config.max_outer + 1):
        if estep_mode == "exact":
            estep = _exact_estep(model, data, state)
        else:
            seeds = _iteration_seeds(config.seed, k, data.ids)
            estep = run_estep(
                model,
                data.y,
                data.ids,
                state.m,
                state.sigma,
                state.theta,
                config.chain_length,
                config.burn_in,
                seeds,
                x0=x_last,
            )
            x_last = estep.last_states

        m_next = m_update(estep)
        theta_next = model.theta_update(_theta_aggregate(estep))
        stats = xtilde_update(estep, m_next)
        sigma_next, _ = icf_solve(
            stats,
            pattern,
            init=None if pattern.is_empty() else state.sigma,
            tol=config.icf_tol,
            max_sweeps=config.icf_max_sweeps,
        )

        new_state = saem_damp(state, (m_next, sigma_next, theta_next), k, config.schedule)
        delta = _relative_delta(state, new_state)
        state = new_state
        deltas.append(delta)
        accept_mean = float(np.mean(estep.accept_rate))
        rejects_total += int(np.sum(estep.domain_rejects))
        trace.append(
            TraceRow(
                k=k,
                m=state.m.copy(),
                sigma=np.array(state.sigma.values),
                theta=state.theta,
                accept_rate=accept_mean,
                delta=delta,
            )
        )
        if len(deltas) >= config.window and max(deltas[-config.window :]) < config.outer_tol:
            converged = True
            break

    return FitResult(
        state=state,
        converged=converged,
        iterations=state.k,
        trace=trace,
        accept_rate=accept_mean,
        domain_rejects=rejects_total,
    )
