"""Observed-data likelihood, standard errors and pattern tests.

The marginal likelihood integrates the latent effects out of each
individual's conditional density; here the integral is estimated by
importance sampling with the latent prior N(m, Sigma) as proposal, so
the weights are conditional densities and log-sum-exp keeps them from
underflowing.  Standard errors come from a central finite-difference
Hessian of the negative log likelihood evaluated with common random
numbers, and the prescribed zero pattern is tested by a chi-square
likelihood ratio with one degree of freedom per constrained pair.
"""

from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2

from .covariance import (
    SpdMatrix,
    free_entry_indices,
    pack_free_entries,
    unpack_free_entries,
)
from .exceptions import DegenerateWeightError
from .models import NlmeModel

__all__ = [
    "LikelihoodEstimate",
    "FisherResult",
    "LrTestResult",
    "loglik_is",
    "fisher_se",
    "lr_test",
    "free_param_labels",
]


@dataclass(frozen=True)
class LikelihoodEstimate:
    """Importance-sampling estimate of the observed-data log likelihood."""

    loglik: float
    mc_se: float
    n_samples: int
    seed: int


@dataclass(frozen=True)
class LrTestResult:
    """Likelihood ratio test of the zero pattern against the free model."""

    stat: float
    df: int
    p_value: float


@dataclass
class FisherResult:
    """Standard errors for the free parameters (m, free Sigma entries, theta).

    ``se`` maps parameter label to standard error; coordinates whose
    curvature could not be inverted are absent from the map and
    ``flagged`` is set.  Constrained covariance entries are not free
    parameters and never appear.
    """

    se: dict
    labels: list
    flagged: bool


def _individual_seed(seed, ident):
    return np.random.SeedSequence((int(seed), zlib.crc32(str(ident).encode("utf-8"))))


def loglik_is(model, data, m, sigma, theta, n_samples=10000, seed=0, individual_seeds=None):
    """Observed-data log likelihood by prior-proposal importance sampling.

    Per individual, draws latent vectors from N(m, Sigma) and averages
    the conditional densities of the observations; the log of that
    average is the individual's contribution.  Off-domain draws carry
    zero weight.  Substreams are keyed by individual id, so the result
    is bitwise deterministic given the seed and unchanged by dataset
    reordering; ``individual_seeds`` (a mapping id -> seed) overrides
    the derivation.

    Returns
    -------
    LikelihoodEstimate
        With a delta-method Monte-Carlo standard error.

    Raises
    ------
    DegenerateWeightError
        If every weight of some individual underflows to zero.
    """
    if not isinstance(sigma, SpdMatrix):
        sigma = SpdMatrix(sigma)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    m = np.asarray(m, dtype=float)
    chol = sigma.chol_lower
    total = 0.0
    var_total = 0.0
    for i in range(data.n):
        if individual_seeds is not None:
            rng = np.random.default_rng(individual_seeds[data.ids[i]])
        else:
            rng = np.random.default_rng(_individual_seed(seed, data.ids[i]))
        xs = m[None, :] + rng.standard_normal((n_samples, model.q)) @ chol.T
        logw, _ = model.log_cond_density_many(data.y[i], xs, theta)
        lse1 = float(logsumexp(logw))
        if not np.isfinite(lse1):
            raise DegenerateWeightError(
                "all %d importance weights underflowed for individual %s"
                % (n_samples, data.ids[i])
            )
        log_mean = lse1 - np.log(n_samples)
        total += log_mean
        if n_samples > 1:
            # delta method: var(log W-bar) ~ sample_var(w) / (S * w-bar^2)
            log_mean_sq = float(logsumexp(2.0 * logw)) - np.log(n_samples)
            ratio = np.exp(log_mean_sq - 2.0 * log_mean)
            var_total += max(ratio - 1.0, 0.0) / (n_samples - 1)
    return LikelihoodEstimate(
        loglik=total, mc_se=float(np.sqrt(var_total)), n_samples=n_samples, seed=int(seed)
    )


def free_param_labels(pattern):
    """Labels of the free parameter vector: m, lower-triangle Sigma entries, theta."""
    labels = ["m%d" % (t + 1) for t in range(pattern.dim)]
    labels += ["sigma_%d_%d" % (i + 1, j + 1) for i, j in free_entry_indices(pattern)]
    labels.append("theta")
    return labels


def _pack_params(m, sigma, theta, pattern):
    return np.concatenate(
        [np.asarray(m, dtype=float), pack_free_entries(sigma, pattern), [float(theta)]]
    )


def _unpack_params(v, pattern):
    q = pattern.dim
    m = v[:q]
    sigma_vals = unpack_free_entries(v[q:-1], pattern)
    theta = float(v[-1])
    return m, sigma_vals, theta


def fisher_se(model, data, m, sigma, theta, pattern, n_samples=1000, seed=0, step_scale=1e-3):
    """Standard errors from a finite-difference Hessian of -loglik.

    The free parameter vector stacks m, the unconstrained lower-triangle
    entries of Sigma, and theta.  Every likelihood evaluation reuses the
    same seed (common random numbers), so the stochastic part of the
    objective cancels through the difference stencil.  Steps are
    per-coordinate, ``step_scale * max(|v_i|, 1e-6)``.

    When the Hessian is not positive definite, coordinates that cannot
    be covered by a positive definite principal submatrix are reported
    absent and the result is flagged.
    """
    v0 = _pack_params(m, sigma, theta, pattern)
    labels = free_param_labels(pattern)
    p = v0.shape[0]
    steps = step_scale * np.maximum(np.abs(v0), 1e-6)

    def neg_loglik(v):
        mm, sig_vals, th = _unpack_params(v, pattern)
        est = loglik_is(
            model, data, mm, SpdMatrix(sig_vals, pattern=pattern), th,
            n_samples=n_samples, seed=seed,
        )
        return -est.loglik

    evals = {}

    def f(offsets):
        key = tuple(sorted(offsets.items()))
        if key not in evals:
            v = v0.copy()
            for idx, mult in offsets.items():
                v[idx] += mult * steps[idx]
            evals[key] = neg_loglik(v)
        return evals[key]

    f0 = f({})
    hess = np.zeros((p, p))
    bad = np.zeros(p, dtype=bool)
    for i in range(p):
        try:
            hess[i, i] = (f({i: 1}) - 2.0 * f0 + f({i: -1})) / steps[i] ** 2
        except Exception:
            bad[i] = True
    for i in range(p):
        for j in range(i):
            if bad[i] or bad[j]:
                continue
            try:
                hess[i, j] = hess[j, i] = (
                    f({i: 1, j: 1}) - f({i: 1, j: -1}) - f({i: -1, j: 1}) + f({i: -1, j: -1})
                ) / (4.0 * steps[i] * steps[j])
            except Exception:
                bad[i] = bad[j] = True

    se = np.full(p, np.nan)
    flagged = bool(np.any(bad))
    keep = (~bad) & (np.diag(hess) > 0.0)
    while np.any(keep):
        idx = np.nonzero(keep)[0]
        sub = hess[np.ix_(idx, idx)]
        try:
            inv = np.linalg.inv(np.linalg.cholesky(sub))
            cov = inv.T @ inv
            d = np.diag(cov)
            if np.all(d > 0.0):
                se[idx] = np.sqrt(d)
                break
        except np.linalg.LinAlgError:
            pass
        # drop the coordinate with the smallest curvature and retry
        flagged = True
        keep[idx[np.argmin(np.diag(hess)[idx])]] = False
    flagged = flagged or not np.all(np.isfinite(se))

    se_map = {lab: float(s) for lab, s in zip(labels, se) if np.isfinite(s)}
    return FisherResult(se=se_map, labels=labels, flagged=flagged)


def lr_test(loglik_h0, loglik_h1, pattern, tol=1e-6):
    """Likelihood ratio test of the constrained model against the free one.

    stat = 2 (llh1 - llh0) clipped at zero, one chi-square degree of
    freedom per constrained pair.  A constrained log likelihood above
    the free one by more than ``tol`` draws a warning (Monte-Carlo
    noise in the estimates), not an error.
    """
    if loglik_h1 < loglik_h0 - tol:
        warnings.warn(
            "constrained log likelihood %.6g exceeds the free one %.6g; "
            "estimates are Monte-Carlo noisy" % (loglik_h0, loglik_h1),
            RuntimeWarning,
        )
    stat = max(0.0, 2.0 * (float(loglik_h1) - float(loglik_h0)))
    df = len(pattern)
    if df == 0:
        p = 1.0
    else:
        p = float(chi2.sf(stat, df))
    return LrTestResult(stat=stat, df=df, p_value=p)
