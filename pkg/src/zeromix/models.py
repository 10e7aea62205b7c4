"""Observation models and datasets for nonlinear mixed effects estimation.

An observation model supplies the mean response F(x), the residual
scale matrix g(x, theta), conditional densities of the observations
given the latent individual effects, and the statistic driving the
theta update.  The estimation engine owns everything else, so a new
model only has to implement those hooks.

Two concrete models ship with the package: a sigmoid Emax
dose-response model with constant-coefficient-of-variation residuals
(latent effects: basal level, maximal increase, shape, half-effect
dose), and a linear-Gaussian model whose closed-form posterior and
marginal make it a validation target for the stochastic machinery.
"""

from __future__ import annotations

import csv

import numpy as np
import scipy.linalg

from .covariance import SpdMatrix
from .exceptions import (
    DataFormatError,
    DegenerateDrawError,
    DomainError,
)

__all__ = [
    "NlmeModel",
    "CortisolModel",
    "LinearGaussianModel",
    "Dataset",
    "DEFAULT_DOSES",
    "log_prior_density",
    "simulate_individual",
    "simulate_dataset",
    "load_dataset",
    "save_dataset",
]

DEFAULT_DOSES = (0.005, 0.01, 0.1, 0.5, 1.0, 2.0, 10.0)

_LOG_2PI = float(np.log(2.0 * np.pi))


class NlmeModel:
    """Base observation model: Y = F(X) + g(X, theta) eps, eps standard normal.

    Attributes
    ----------
    q : int
        Latent effect dimension.
    n_obs : int
        Observations per individual.
    design : ndarray, shape (n_obs,)
        Per-observation design value (dose for the Emax model).
    theta_dim : int
        Dimension of the residual parameter theta (scalar models only
        for now; theta is the residual variance).

    Subclasses must implement ``mean``, ``scale`` and ``theta_stat``;
    the batch methods have generic loop implementations they may
    override with vectorized ones.
    """

    name = "base"

    def __init__(self, q, n_obs, design):
        self.q = int(q)
        self.n_obs = int(n_obs)
        self.design = np.asarray(design, dtype=float)
        self.design.setflags(write=False)
        self.theta_dim = 1
        if self.design.shape != (self.n_obs,):
            raise ValueError("design must have shape (n_obs,)")

    # -- hooks ---------------------------------------------------------

    def mean(self, x):
        """Mean response F(x) at every design point.

        Raises DomainError outside the model domain.
        """
        raise NotImplementedError

    def scale(self, x, theta):
        """Residual scale matrix g(x, theta), an (n_obs, n_obs) factor."""
        raise NotImplementedError

    def theta_stat(self, y, x):
        """Per-state statistic whose conditional expectation drives the theta update."""
        raise NotImplementedError

    def theta_update(self, stat_mean):
        """Map the across-individual mean of theta_stat to the new theta.

        The default divides by n_obs so that a variance theta lands on
        the per-observation scale.
        """
        return float(stat_mean) / self.n_obs

    def draw_ok(self, x):
        """Whether a simulated latent vector keeps the model well defined."""
        return True

    # -- densities -----------------------------------------------------

    def log_cond_density(self, y, x, theta):
        """Log density of Y given X = x.

        Generic implementation through the scale matrix; subclasses
        override with closed forms.
        """
        f = self.mean(x)
        g = self.scale(x, theta)
        sign, logdet = np.linalg.slogdet(g)
        if sign == 0:
            raise DomainError("residual scale matrix is singular")
        z = np.linalg.solve(g, np.asarray(y, dtype=float) - f)
        return -0.5 * self.n_obs * _LOG_2PI - logdet - 0.5 * float(z @ z)

    # -- batch variants (hot path of the samplers) ----------------------

    def mean_many(self, xs):
        """Batch mean: (n, q) -> (values (n, n_obs), ok (n,) bool).

        Rows outside the domain get ok = False and unspecified values.
        """
        xs = np.asarray(xs, dtype=float)
        out = np.zeros((xs.shape[0], self.n_obs))
        ok = np.ones(xs.shape[0], dtype=bool)
        for t in range(xs.shape[0]):
            try:
                out[t] = self.mean(xs[t])
            except DomainError:
                ok[t] = False
        return out, ok

    def log_cond_density_pairs(self, ys, xs, theta):
        """Row-paired log conditional densities: (ys[t], xs[t]) -> logp[t].

        Returns (logp (n,), ok (n,) bool); rows outside the domain get
        logp = -inf and ok = False.  Generic loop; subclasses override
        with vectorized forms (this is the sampler's hot path).
        """
        ys = np.asarray(ys, dtype=float)
        xs = np.asarray(xs, dtype=float)
        logp = np.full(xs.shape[0], -np.inf)
        ok = np.zeros(xs.shape[0], dtype=bool)
        for t in range(xs.shape[0]):
            try:
                logp[t] = self.log_cond_density(ys[t], xs[t], theta)
                ok[t] = bool(np.isfinite(logp[t]))
            except DomainError:
                pass
        logp[~ok] = -np.inf
        return logp, ok

    def log_cond_density_many(self, y, xs, theta):
        """Batch log conditional density of one y against many latent rows."""
        xs = np.asarray(xs, dtype=float)
        ys = np.broadcast_to(np.asarray(y, dtype=float), (xs.shape[0], self.n_obs))
        return self.log_cond_density_pairs(ys, xs, theta)

    def theta_stat_pairs(self, ys, xs):
        """Row-paired theta_stat; states are assumed in-domain."""
        ys = np.asarray(ys, dtype=float)
        xs = np.asarray(xs, dtype=float)
        return np.array([self.theta_stat(ys[t], xs[t]) for t in range(xs.shape[0])])

    def theta_stat_many(self, y, xs):
        """Batch theta_stat of one y over chain states."""
        xs = np.asarray(xs, dtype=float)
        ys = np.broadcast_to(np.asarray(y, dtype=float), (xs.shape[0], self.n_obs))
        return self.theta_stat_pairs(ys, xs)


class CortisolModel(NlmeModel):
    """Sigmoid Emax dose-response with multiplicative residual noise.

    The mean at dose d is F(x) = x1 + x2 * d^x3 / (x4^x3 + d^x3): basal
    response x1, maximal increase x2, shape x3, half-effect dose x4.
    Residuals scale with the mean, g(x, sigma2) = sigma * diag(F(x)),
    so theta = sigma2 is the squared per-observation coefficient of
    variation.

    The domain requires x4 > 0 (the half-effect dose enters through
    x4^x3) and, for densities and simulation, F(x) bounded away from
    zero so the scale matrix stays invertible.
    """

    name = "cortisol"

    def __init__(self, doses=DEFAULT_DOSES):
        doses = np.asarray(doses, dtype=float)
        if np.any(doses <= 0.0):
            raise ValueError("doses must be positive")
        super().__init__(q=4, n_obs=doses.shape[0], design=doses)

    @property
    def doses(self):
        return self.design

    def mean(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (4,) or not np.all(np.isfinite(x)):
            raise DomainError("latent vector must be a finite 4-vector")
        if x[3] <= 0.0:
            raise DomainError("half-effect dose x4 must be positive, got %r" % (x[3],))
        with np.errstate(over="ignore", invalid="ignore"):
            da = self.design ** x[2]
            f = x[0] + x[1] * da / (x[3] ** x[2] + da)
        if not np.all(np.isfinite(f)):
            raise DomainError("mean response overflowed at x = %r" % (x,))
        return f

    def scale(self, x, theta):
        if theta < 0.0:
            raise DomainError("residual variance must be nonnegative")
        return np.sqrt(theta) * np.diag(self.mean(x))

    def log_cond_density(self, y, x, theta):
        f = self.mean(x)
        if np.any(f == 0.0):
            raise DomainError("mean response hits zero; residual scale is singular")
        if theta <= 0.0:
            raise DomainError("residual variance must be positive")
        y = np.asarray(y, dtype=float)
        r = (y - f) / f
        return float(
            -0.5 * self.n_obs * _LOG_2PI
            - 0.5 * self.n_obs * np.log(theta)
            - np.sum(np.log(np.abs(f)))
            - 0.5 * np.sum(r * r) / theta
        )

    def theta_stat(self, y, x):
        f = self.mean(x)
        r = (np.asarray(y, dtype=float) - f) / f
        return float(np.sum(r * r))

    def draw_ok(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)) or x[3] <= 0.0:
            return False
        with np.errstate(over="ignore", invalid="ignore"):
            da = self.design ** x[2]
            f = x[0] + x[1] * da / (x[3] ** x[2] + da)
        return bool(np.all(np.isfinite(f)) and np.all(f > 0.0))

    def _mean_block(self, xs):
        # vectorized mean with validity mask; invalid rows carry garbage
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            da = self.design[None, :] ** xs[:, 2:3]
            f = xs[:, 0:1] + xs[:, 1:2] * da / (xs[:, 3:4] ** xs[:, 2:3] + da)
        ok = (
            np.all(np.isfinite(xs), axis=1)
            & (xs[:, 3] > 0.0)
            & np.all(np.isfinite(f), axis=1)
        )
        return f, ok

    def mean_many(self, xs):
        xs = np.asarray(xs, dtype=float)
        return self._mean_block(xs)

    def log_cond_density_pairs(self, ys, xs, theta):
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        f, ok = self._mean_block(xs)
        ok = ok & np.all(f != 0.0, axis=1)
        safe = np.where(f == 0.0, 1.0, f)
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            r = (ys - safe) / safe
            logp = (
                -0.5 * self.n_obs * (_LOG_2PI + np.log(theta))
                - np.sum(np.log(np.abs(safe)), axis=1)
                - 0.5 * np.sum(r * r, axis=1) / theta
            )
        ok = ok & np.isfinite(logp)
        return np.where(ok, logp, -np.inf), ok

    def theta_stat_pairs(self, ys, xs):
        xs = np.asarray(xs, dtype=float)
        f, _ = self._mean_block(xs)
        r = (np.asarray(ys, dtype=float) - f) / f
        return np.sum(r * r, axis=1)


class LinearGaussianModel(NlmeModel):
    """Identity-mean Gaussian model: Y = X + sigma * eps.

    Every conditional and marginal quantity has a closed form, which
    makes this model the oracle for testing the stochastic E-step and
    the importance-sampling likelihood: marginally Y ~ N(m, Sigma +
    sigma2 I), and the posterior of X given Y is the conjugate normal.
    """

    name = "linear_gaussian"

    def __init__(self, q):
        super().__init__(q=q, n_obs=q, design=np.arange(1, q + 1, dtype=float))

    def mean(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.q,) or not np.all(np.isfinite(x)):
            raise DomainError("latent vector must be a finite %d-vector" % self.q)
        return x.copy()

    def scale(self, x, theta):
        if theta < 0.0:
            raise DomainError("residual variance must be nonnegative")
        return np.sqrt(theta) * np.eye(self.n_obs)

    def log_cond_density(self, y, x, theta):
        if theta <= 0.0:
            raise DomainError("residual variance must be positive")
        r = np.asarray(y, dtype=float) - self.mean(x)
        return float(
            -0.5 * self.n_obs * (_LOG_2PI + np.log(theta)) - 0.5 * np.sum(r * r) / theta
        )

    def theta_stat(self, y, x):
        r = np.asarray(y, dtype=float) - np.asarray(x, dtype=float)
        return float(np.sum(r * r))

    def log_cond_density_pairs(self, ys, xs, theta):
        xs = np.asarray(xs, dtype=float)
        r = np.asarray(ys, dtype=float) - xs
        logp = -0.5 * self.n_obs * (_LOG_2PI + np.log(theta)) - 0.5 * np.sum(
            r * r, axis=1
        ) / theta
        ok = np.isfinite(logp)
        return np.where(ok, logp, -np.inf), ok

    def theta_stat_pairs(self, ys, xs):
        xs = np.asarray(xs, dtype=float)
        r = np.asarray(ys, dtype=float) - xs
        return np.sum(r * r, axis=1)

    # -- closed forms used as oracles -----------------------------------

    def posterior_moments(self, y, m, sigma, theta):
        """Exact conditional mean and covariance of X given Y = y.

        Precision adds: V = (Sigma^-1 + I/theta)^-1, center
        V (Sigma^-1 m + y/theta).
        """
        if not isinstance(sigma, SpdMatrix):
            sigma = SpdMatrix(sigma)
        prec = sigma.inv() + np.eye(self.q) / theta
        cov = np.linalg.inv(prec)
        cov = 0.5 * (cov + cov.T)
        mean = cov @ (sigma.solve(np.asarray(m, dtype=float)) + np.asarray(y, dtype=float) / theta)
        return mean, cov

    def marginal_loglik(self, ys, m, sigma, theta):
        """Exact log likelihood of rows of ``ys`` under N(m, Sigma + theta I)."""
        if not isinstance(sigma, SpdMatrix):
            sigma = SpdMatrix(sigma)
        marg = SpdMatrix(sigma.values + theta * np.eye(self.q))
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        z = ys - np.asarray(m, dtype=float)[None, :]
        quad = np.sum(z * marg.solve(z.T).T, axis=1)
        return float(
            np.sum(-0.5 * self.q * _LOG_2PI - 0.5 * marg.logdet() - 0.5 * quad)
        )


def log_prior_density(x, m, sigma):
    """Multivariate normal log density of x under N(m, Sigma)."""
    if not isinstance(sigma, SpdMatrix):
        sigma = SpdMatrix(sigma)
    z = np.asarray(x, dtype=float) - np.asarray(m, dtype=float)
    w = scipy.linalg.solve_triangular(sigma.chol_lower, z, lower=True)
    return float(-0.5 * sigma.dim * _LOG_2PI - 0.5 * sigma.logdet() - 0.5 * (w @ w))


def _as_generator(rng_seed):
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def simulate_individual(model, m, sigma, theta, rng_seed, max_retries=100):
    """Draw one individual: X ~ N(m, Sigma), Y = F(X) + g(X, theta) eps.

    The latent draw is redrawn (up to ``max_retries`` times) while
    ``model.draw_ok`` rejects it, which keeps the residual scale
    invertible for models like the Emax one.  Deterministic given the
    seed.

    Returns
    -------
    (x, y) : the latent q-vector and the n_obs observation vector.

    Raises
    ------
    DegenerateDrawError
        If every retry lands outside the model domain; the parameters
        are implausible for the model.
    """
    rng = _as_generator(rng_seed)
    if not isinstance(sigma, SpdMatrix):
        sigma = SpdMatrix(sigma)
    m = np.asarray(m, dtype=float)
    chol = sigma.chol_lower
    for _ in range(max_retries):
        x = m + chol @ rng.standard_normal(model.q)
        if model.draw_ok(x):
            break
    else:
        raise DegenerateDrawError(
            "no domain-valid latent draw in %d attempts" % max_retries
        )
    eps = rng.standard_normal(model.n_obs)
    y = model.mean(x) + model.scale(x, theta) @ eps
    return x, y


def simulate_dataset(model, m, sigma, theta, n, seed):
    """Simulate a balanced dataset of ``n`` individuals.

    Individual ids are "1".."n"; each individual gets an independent
    child stream of the master seed, so the output is reproducible and
    unchanged by simulation order.

    Returns
    -------
    (Dataset, ndarray) : the dataset and the (n, q) matrix of latent draws.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    ids = []
    xs = np.zeros((n, model.q))
    ys = np.zeros((n, model.n_obs))
    for i in range(n):
        x, y = simulate_individual(model, m, sigma, theta, np.random.default_rng(children[i]))
        ids.append(str(i + 1))
        xs[i] = x
        ys[i] = y
    return Dataset(ids, ys, model.design), xs


class Dataset:
    """Balanced panel of individuals sharing one design grid.

    Parameters
    ----------
    ids : sequence of str
        Individual identifiers, unique.
    y : array_like, shape (n, n_obs)
        Observation rows, one per individual.
    design : array_like, shape (n_obs,)
        Design value per observation slot, common to all individuals.
    """

    def __init__(self, ids, y, design):
        self.ids = tuple(str(t) for t in ids)
        self.y = np.array(y, dtype=float)
        self.design = np.array(design, dtype=float)
        if self.y.ndim != 2:
            raise ValueError("y must be 2-d, got shape %r" % (self.y.shape,))
        if len(self.ids) != self.y.shape[0]:
            raise ValueError("ids and y row count differ")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("ids must be unique")
        if self.design.shape != (self.y.shape[1],):
            raise ValueError("design length must match observation count")
        self.y.setflags(write=False)
        self.design.setflags(write=False)

    @property
    def n(self):
        return len(self.ids)

    @property
    def n_obs(self):
        return self.y.shape[1]

    def __len__(self):
        return self.n


_HEADER = ["id", "obs_index", "design_value", "y"]


def load_dataset(path):
    """Read a dataset CSV with columns id, obs_index, design_value, y.

    Rows are grouped by individual id (first-appearance order); obs_index
    must cover 1..n_obs exactly once per individual, every individual
    must have the same number of observations, and the design grid must
    be identical across individuals.  Errors cite 1-based row numbers.
    """
    rows_by_id = {}
    order = []
    last_row = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("row 1: file is empty, expected header %s" % ",".join(_HEADER)) from None
        if [h.strip() for h in header] != _HEADER:
            raise DataFormatError(
                "row 1: expected header %s, got %s" % (",".join(_HEADER), ",".join(header))
            )
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataFormatError("row %d: expected 4 fields, got %d" % (rownum, len(row)))
            ident = row[0].strip()
            if not ident:
                raise DataFormatError("row %d: empty id" % rownum)
            try:
                obs_index = int(row[1])
            except ValueError:
                raise DataFormatError("row %d: obs_index %r is not an integer" % (rownum, row[1])) from None
            try:
                design_value = float(row[2])
                y_value = float(row[3])
            except ValueError:
                raise DataFormatError("row %d: non-numeric design_value or y" % rownum) from None
            if not np.isfinite(design_value) or not np.isfinite(y_value):
                raise DataFormatError("row %d: non-finite design_value or y" % rownum)
            if ident not in rows_by_id:
                rows_by_id[ident] = {}
                order.append(ident)
            if obs_index in rows_by_id[ident]:
                raise DataFormatError(
                    "row %d: duplicate obs_index %d for id %s" % (rownum, obs_index, ident)
                )
            rows_by_id[ident][obs_index] = (design_value, y_value)
            last_row[ident] = rownum
    if not order:
        raise DataFormatError("row 1: no data rows after header")

    first = order[0]
    n_obs = len(rows_by_id[first])
    design = None
    ys = []
    for ident in order:
        block = rows_by_id[ident]
        if len(block) != n_obs or sorted(block) != list(range(1, n_obs + 1)):
            raise DataFormatError(
                "row %d: id %s must have obs_index 1..%d exactly once (unbalanced panel)"
                % (last_row[ident], ident, n_obs)
            )
        d = np.array([block[k][0] for k in range(1, n_obs + 1)])
        y = np.array([block[k][1] for k in range(1, n_obs + 1)])
        if design is None:
            design = d
        elif not np.array_equal(design, d):
            raise DataFormatError(
                "row %d: id %s has a design grid different from id %s"
                % (last_row[ident], ident, first)
            )
        ys.append(y)
    return Dataset(order, np.array(ys), design)


def save_dataset(dataset, path):
    """Write a dataset to CSV in the load_dataset format, full precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HEADER)
        for i, ident in enumerate(dataset.ids):
            for j in range(dataset.n_obs):
                writer.writerow(
                    [ident, j + 1, repr(float(dataset.design[j])), repr(float(dataset.y[i, j]))]
                )
