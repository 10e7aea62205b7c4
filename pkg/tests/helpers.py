"""Shared test utilities: random problem generators and an independent
brute-force oracle for the constrained covariance solve.

The oracle minimizes the Gaussian negative log-likelihood objective
logdet(Sigma) + tr(Sigma^{-1} Xtilde) over the free entries directly
with Nelder-Mead restarts and a positive-definiteness barrier.  It
shares no code path with the columnwise solver beyond the entry
packing order.
"""

import numpy as np
from scipy.optimize import minimize

from zeromix.covariance import ZeroPattern, free_entry_indices


def random_spd(rng, q, dof_extra=5):
    """Well-scaled random SPD matrix (Wishart-style)."""
    g = rng.standard_normal((q + dof_extra, q))
    return g.T @ g / (q + dof_extra)


def random_pattern(rng, q, max_pairs=3):
    """Random valid zero pattern with 1..max_pairs distinct pairs."""
    pairs = [(i, j) for j in range(2, q + 1) for i in range(1, j)]
    k = int(rng.integers(1, max_pairs + 1))
    chosen = rng.choice(len(pairs), size=min(k, len(pairs)), replace=False)
    return ZeroPattern([pairs[c] for c in chosen], dim=q)


def _unpack_raw(vec, pattern):
    """Free-entry vector to a full symmetric matrix, no PD validation."""
    q = pattern.dim
    out = np.zeros((q, q))
    for val, (i, j) in zip(vec, free_entry_indices(pattern)):
        out[i, j] = val
        out[j, i] = val
    return out


def _objective_raw(vec, pattern, xtilde, barrier=1e12):
    sigma = _unpack_raw(vec, pattern)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        return barrier
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    w = np.linalg.solve(sigma, xtilde)
    return logdet + float(np.trace(w))


def pack_raw(sigma, pattern):
    return np.array([sigma[i, j] for i, j in free_entry_indices(pattern)])


def brute_force_constrained_objective(xtilde, pattern, starts, max_restarts=6):
    """Best objective found by restarted Nelder-Mead over the free entries."""
    best = np.inf
    for start in starts:
        x = np.asarray(start, dtype=float)
        fval = _objective_raw(x, pattern, xtilde)
        for _ in range(max_restarts):
            res = minimize(
                _objective_raw, x, args=(pattern, xtilde),
                method="Nelder-Mead",
                options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000,
                         "maxfev": 4000},
            )
            improved = fval - res.fun
            x, fval = res.x, float(res.fun)
            if improved < 1e-12:
                break
        best = min(best, fval)
    return best


def oracle_starts(xtilde, pattern):
    """Two independent starting points: diagonal and repaired zero-forcing."""
    from zeromix.covariance import min_eig_repair, zero_forced
    diag_start = pack_raw(np.diag(np.diag(xtilde)), pattern)
    zf = zero_forced(xtilde, pattern)
    repaired = min_eig_repair(zf, 100).values
    return [diag_start, pack_raw(repaired, pattern)]
