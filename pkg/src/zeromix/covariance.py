"""Covariance estimation under a prescribed pattern of zeros.

The estimation target is the cone of symmetric positive definite q x q
matrices with exact zeros at a fixed set of off-diagonal positions.
Given an empirical conditional variance matrix X-tilde, the constrained
maximum-likelihood problem is

    minimize  tr(X-tilde Sigma^-1) + log det Sigma

over that cone.  The solver sweeps the columns of Sigma cyclically:
with the complementary principal block held fixed, the optimal column
is a least-squares solve in which the zero-constrained coordinates are
dropped, and positive definiteness is preserved automatically through
the Schur complement of the fixed block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .exceptions import (
    DiagonalZeroError,
    DuplicatePairError,
    IndexOutOfRangeError,
    NotPositiveDefiniteError,
    PatternViolationError,
    SingularNormalEquationsError,
)

__all__ = [
    "ZeroPattern",
    "SpdMatrix",
    "SchurSplit",
    "SufficientStats",
    "IcfDiagnostics",
    "validate_pattern",
    "zero_forced",
    "min_eig_repair",
    "schur_split",
    "icf_column_update",
    "icf_solve",
    "objective",
    "kkt_residual",
    "free_entry_indices",
    "pack_free_entries",
    "unpack_free_entries",
]


class ZeroPattern:
    """A set of off-diagonal index pairs constrained to exact zero.

    Pairs use 1-based indices and are stored in canonical (i, j) order
    with i < j; the reversed form of a pair denotes the same constraint
    because the matrices are symmetric.  The empty pattern is valid and
    means "unconstrained".

    Parameters
    ----------
    pairs : iterable of (int, int)
        Constrained positions.  Order within a pair does not matter.
    dim : int
        Matrix order q the pattern applies to.

    Raises
    ------
    DiagonalZeroError
        If a pair constrains a diagonal entry (i == j).
    IndexOutOfRangeError
        If an index falls outside [1, dim].
    DuplicatePairError
        If the same unordered pair appears more than once.
    """

    def __init__(self, pairs, dim):
        canon = []
        for pair in pairs:
            i, j = int(pair[0]), int(pair[1])
            if i > j:
                i, j = j, i
            canon.append((i, j))
        canon.sort()
        self.pairs = tuple(canon)
        self.dim = int(dim)
        validate_pattern(self, self.dim)

    def __len__(self):
        return len(self.pairs)

    def __contains__(self, pair):
        i, j = pair
        if i > j:
            i, j = j, i
        return (i, j) in self.pairs

    def __eq__(self, other):
        if not isinstance(other, ZeroPattern):
            return NotImplemented
        return self.dim == other.dim and self.pairs == other.pairs

    def __hash__(self):
        return hash((self.dim, self.pairs))

    def __repr__(self):
        return "ZeroPattern(pairs=%r, dim=%d)" % (list(self.pairs), self.dim)

    def is_empty(self):
        return not self.pairs

    def mask(self):
        """Boolean (dim, dim) array, True at constrained positions (both triangles)."""
        m = np.zeros((self.dim, self.dim), dtype=bool)
        for i, j in self.pairs:
            m[i - 1, j - 1] = True
            m[j - 1, i - 1] = True
        return m

    def conforms(self, entries):
        """True iff every constrained entry of ``entries`` equals 0.0 exactly."""
        a = np.asarray(entries)
        for i, j in self.pairs:
            if a[i - 1, j - 1] != 0.0 or a[j - 1, i - 1] != 0.0:
                return False
        return True


def validate_pattern(pattern, q):
    """Check a pattern's invariants against matrix order ``q``.

    Returns None on success; raises a subclass of PatternError otherwise.
    """
    seen = set()
    for i, j in pattern.pairs:
        if i == j:
            raise DiagonalZeroError(
                "pair (%d, %d) constrains a diagonal entry; the diagonal of a "
                "positive definite matrix cannot be zero" % (i, j)
            )
        if not (1 <= i <= q) or not (1 <= j <= q):
            raise IndexOutOfRangeError(
                "pair (%d, %d) outside [1, %d]" % (i, j, q)
            )
        if (i, j) in seen:
            raise DuplicatePairError("pair (%d, %d) appears more than once" % (i, j))
        seen.add((i, j))


class SpdMatrix:
    """Symmetric positive definite matrix, optionally tagged with a zero pattern.

    Symmetry is enforced bitwise by replicating the lower triangle.
    Positive definiteness is verified at construction by a Cholesky
    factorization, which is cached for log-determinants and solves.
    When a pattern is supplied, every constrained entry must equal 0.0
    exactly.

    Parameters
    ----------
    entries : array_like, shape (q, q)
        Matrix values; only the lower triangle is read.
    pattern : ZeroPattern, optional
        Zero pattern the matrix must conform to.

    Raises
    ------
    NotPositiveDefiniteError
        If the factorization fails or entries are non-finite.
    PatternViolationError
        If a constrained entry is nonzero.
    """

    def __init__(self, entries, pattern=None):
        m = np.array(entries, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("entries must be a square matrix, got shape %r" % (m.shape,))
        # bitwise symmetry: upper triangle is a copy of the lower
        m = np.tril(m) + np.tril(m, -1).T
        if not np.all(np.isfinite(m)):
            raise NotPositiveDefiniteError("matrix has non-finite entries")
        if pattern is not None:
            validate_pattern(pattern, m.shape[0])
            if not pattern.conforms(m):
                raise PatternViolationError(
                    "matrix has nonzero entries at constrained positions %r"
                    % (list(pattern.pairs),)
                )
        try:
            chol = np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(
                "symmetric factorization failed: matrix is not positive definite"
            ) from None
        m.setflags(write=False)
        chol.setflags(write=False)
        self._m = m
        self._chol = chol
        self.pattern = pattern

    @property
    def values(self):
        """The (read-only) q x q array of entries."""
        return self._m

    @property
    def dim(self):
        return self._m.shape[0]

    @property
    def chol_lower(self):
        """Cached lower Cholesky factor."""
        return self._chol

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self._chol))))

    def solve(self, rhs):
        """Solve Sigma x = rhs using the cached factorization."""
        return scipy.linalg.cho_solve((self._chol, True), rhs)

    def inv(self):
        return self.solve(np.eye(self.dim))

    def __repr__(self):
        return "SpdMatrix(dim=%d, pattern=%r)" % (self.dim, self.pattern)


@dataclass(frozen=True)
class SchurSplit:
    """One-column block split of an SPD matrix.

    For pivot column j, ``a`` is the complementary principal block,
    ``b`` the off-diagonal column, ``c`` the pivot diagonal entry and
    ``s = c - b' a^-1 b`` its Schur complement.  The determinant
    factorizes as det(Sigma) = det(a) * s, and s > 0 whenever the
    source matrix is positive definite.
    """

    j: int
    a: np.ndarray
    b: np.ndarray
    c: float
    s: float


class SufficientStats:
    """Conditional second-moment aggregates consumed by the column solver.

    Holds the empirical conditional variance matrix X-tilde (already
    divided by the sample count) together with the count n.  For any
    pivot, the per-pivot cross aggregates are sub-blocks of n * X-tilde
    and are derived on demand rather than stored.

    Parameters
    ----------
    xtilde : array_like, shape (q, q)
        Symmetric positive semidefinite moment matrix.
    n : int
        Number of individuals aggregated into ``xtilde``.
    """

    def __init__(self, xtilde, n):
        m = np.array(xtilde, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("xtilde must be square, got shape %r" % (m.shape,))
        if not np.all(np.isfinite(m)):
            raise ValueError("xtilde has non-finite entries")
        # bitwise symmetry, same convention as SpdMatrix
        m = np.tril(m) + np.tril(m, -1).T
        m.setflags(write=False)
        self.xtilde = m
        self.n = int(n)
        if self.n < 1:
            raise ValueError("sample count must be >= 1, got %d" % self.n)

    @property
    def dim(self):
        return self.xtilde.shape[0]

    def cross(self, j):
        """Per-pivot aggregates (sum E[UU'], sum E[VU], sum E[V^2]) for 1-based pivot j.

        U is the latent residual with component j removed and V its j-th
        component; the sums run over individuals, so each block equals
        n times the corresponding sub-block of X-tilde.
        """
        jj = j - 1
        rest = [t for t in range(self.dim) if t != jj]
        uu = self.n * self.xtilde[np.ix_(rest, rest)]
        vu = self.n * self.xtilde[rest, jj]
        vv = self.n * self.xtilde[jj, jj]
        return uu, vu, vv


@dataclass
class IcfDiagnostics:
    """Solver diagnostics: sweep count, final objective and stationarity residual."""

    sweeps: int
    objective: float
    kkt: float
    converged: bool
    ridged: bool


def _as_array(sigma):
    return sigma.values if isinstance(sigma, SpdMatrix) else np.asarray(sigma, dtype=float)


def _require_order(pattern, q):
    # a pattern built for one order must not be applied to another
    validate_pattern(pattern, q)
    if pattern.dim != q:
        raise ValueError(
            "pattern is declared for order %d but the matrix has order %d"
            % (pattern.dim, q)
        )


def zero_forced(sigma_uc, pattern):
    """Overwrite constrained entries (and transposes) with exact zeros.

    The result is a plain symmetric array: forcing zeros can destroy
    positive definiteness, so no PD tag is attached.
    """
    a = np.array(_as_array(sigma_uc), dtype=float)
    _require_order(pattern, a.shape[0])
    for i, j in pattern.pairs:
        a[i - 1, j - 1] = 0.0
        a[j - 1, i - 1] = 0.0
    return a


def min_eig_repair(sigma_zf, n):
    """Shift the diagonal just enough to restore positive definiteness.

    Adds (max(-lambda_min, 0) + 1/n^2) * I, so an already-PD input is
    only shifted by the vanishing 1/n^2 term.  Off-diagonal entries are
    untouched, hence any existing zeros survive.

    Parameters
    ----------
    sigma_zf : array_like
        Symmetric matrix, typically a zero-forced estimate.
    n : int
        Sample size behind the estimate; controls the 1/n^2 cushion.
    """
    a = np.asarray(_as_array(sigma_zf), dtype=float)
    if n < 1:
        raise ValueError("sample size must be >= 1, got %r" % (n,))
    lam_min = float(np.linalg.eigvalsh(a)[0])
    shift = max(-lam_min, 0.0) + 1.0 / float(n) ** 2
    return SpdMatrix(a + shift * np.eye(a.shape[0]))


def schur_split(sigma, j):
    """Split an SPD matrix around 1-based pivot column j.

    Returns a SchurSplit (a, b, c, s) with s = c - b' a^-1 b.

    Raises
    ------
    NotPositiveDefiniteError
        If the complementary block cannot be factorized.
    """
    m = _as_array(sigma)
    q = m.shape[0]
    if not (1 <= j <= q):
        raise IndexOutOfRangeError("pivot %d outside [1, %d]" % (j, q))
    jj = j - 1
    rest = [t for t in range(q) if t != jj]
    a = m[np.ix_(rest, rest)]
    b = m[rest, jj]
    c = float(m[jj, jj])
    try:
        chol_a = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            "complementary block at pivot %d is not positive definite" % j
        ) from None
    s = c - float(b @ scipy.linalg.cho_solve((chol_a, True), b))
    return SchurSplit(j=j, a=a, b=b, c=c, s=s)


def objective(sigma, stats):
    """Evaluate tr(X-tilde Sigma^-1) + log det Sigma."""
    if isinstance(sigma, SpdMatrix):
        return float(sigma.solve(stats.xtilde).trace()) + sigma.logdet()
    m = np.asarray(sigma, dtype=float)
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("objective requires a positive definite matrix") from None
    tr = float(scipy.linalg.cho_solve((chol, True), stats.xtilde).trace())
    return tr + 2.0 * float(np.sum(np.log(np.diag(chol))))


def kkt_residual(sigma, stats, pattern):
    """Max absolute gradient entry of the objective over free coordinates.

    The gradient with respect to Sigma is Sigma^-1 - Sigma^-1 X-tilde
    Sigma^-1; it must vanish at every position not in the pattern,
    diagonal included.
    """
    if not isinstance(sigma, SpdMatrix):
        sigma = SpdMatrix(sigma)
    _require_order(pattern, sigma.dim)
    inv = sigma.inv()
    grad = inv - inv @ stats.xtilde @ inv
    free = ~pattern.mask() if pattern.pairs else np.ones((sigma.dim, sigma.dim), dtype=bool)
    return float(np.max(np.abs(grad[free])))


def icf_column_update(sigma, stats, j, pattern):
    """Optimal replacement of one column/row of Sigma, zeros respected.

    With the complementary block A held fixed, the off-diagonal column
    minimizing the objective solves a least-squares problem in the free
    coordinates only; constrained coordinates are excluded from the
    solve and written as exact zeros.  The pivot diagonal becomes
    s_opt + b_opt' A^-1 b_opt, which keeps the full matrix positive
    definite whenever s_opt > 0.

    Parameters
    ----------
    sigma : SpdMatrix
        Current iterate, pattern-conformant.
    stats : SufficientStats
        Moment aggregates; the sample count cancels in the solve.
    j : int
        1-based pivot column.
    pattern : ZeroPattern
        Zero constraints.

    Returns
    -------
    SpdMatrix
        New iterate tagged with ``pattern``; the complementary block is
        bitwise unchanged.

    Raises
    ------
    NotPositiveDefiniteError
        If the complementary block (or the updated matrix) fails to factorize.
    SingularNormalEquationsError
        If the free-coordinate Gram matrix is singular (degenerate stats).
    """
    m = _as_array(sigma)
    q = m.shape[0]
    _require_order(pattern, q)
    if not (1 <= j <= q):
        raise IndexOutOfRangeError("pivot %d outside [1, %d]" % (j, q))
    jj = j - 1
    rest = [t for t in range(q) if t != jj]

    a = m[np.ix_(rest, rest)]
    try:
        chol_a = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(
            "complementary block at pivot %d is not positive definite" % j
        ) from None

    xt = stats.xtilde
    m_uu = xt[np.ix_(rest, rest)]
    h_vu = xt[rest, jj]
    v_vv = float(xt[jj, jj])

    # free coordinates of the column: positions (r+1, j) not constrained
    free = [t for t, r in enumerate(rest) if (r + 1, j) not in pattern]

    b_opt = np.zeros(q - 1)
    if free:
        # normal equations in the free coordinates, with A^-1 folded in:
        # [P' A^-1 M A^-1 P] b = P' A^-1 h   (sample count cancels)
        ainv_m = scipy.linalg.cho_solve((chol_a, True), m_uu)
        g_full = scipy.linalg.cho_solve((chol_a, True), ainv_m.T)
        g_full = 0.5 * (g_full + g_full.T)
        h_full = scipy.linalg.cho_solve((chol_a, True), h_vu)
        gram = g_full[np.ix_(free, free)]
        rhs = h_full[free]
        try:
            chol_g = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            raise SingularNormalEquationsError(
                "free-coordinate Gram matrix at pivot %d is singular; "
                "the moment matrix is degenerate" % j
            ) from None
        b_opt[free] = scipy.linalg.cho_solve((chol_g, True), rhs)

    beta = scipy.linalg.cho_solve((chol_a, True), b_opt)  # A^-1 b_opt
    s_opt = v_vv - 2.0 * float(beta @ h_vu) + float(beta @ m_uu @ beta)
    new_diag = s_opt + float(b_opt @ beta)

    out = np.array(m)  # complementary block kept bitwise
    out[rest, jj] = b_opt
    out[jj, rest] = b_opt
    out[jj, jj] = new_diag
    return SpdMatrix(out, pattern=pattern)


def _default_init(stats, pattern):
    return SpdMatrix(np.diag(np.diag(stats.xtilde)), pattern=pattern)


def icf_solve(stats, pattern, init=None, tol=1e-8, max_sweeps=500):
    """Constrained maximum-likelihood covariance by cyclic column updates.

    Sweeps pivots 1..q until the relative Frobenius change over one
    full sweep drops below ``tol`` or ``max_sweeps`` is reached (the
    latter is flagged in the diagnostics, not raised).  Two shortcuts
    need no iteration: the empty pattern returns X-tilde itself, and
    for q = 2 with the single pair constrained the zero-forced X-tilde
    is already optimal.

    A singular X-tilde is ridged by 1e-10 * tr(X-tilde)/q on the
    diagonal before solving, and the diagnostics flag it.

    Parameters
    ----------
    stats : SufficientStats
    pattern : ZeroPattern
    init : SpdMatrix, optional
        Starting point; defaults to the diagonal of X-tilde.
    tol : float
        Relative Frobenius sweep-change threshold.
    max_sweeps : int

    Returns
    -------
    (SpdMatrix, IcfDiagnostics)
    """
    if tol <= 0.0:
        raise ValueError("tol must be > 0, got %r" % (tol,))
    q = stats.dim
    _require_order(pattern, q)

    ridged = False
    xt = stats.xtilde
    try:
        np.linalg.cholesky(xt)
    except np.linalg.LinAlgError:
        ridge = 1e-10 * float(np.trace(xt)) / q
        xt = xt + ridge * np.eye(q)
        stats = SufficientStats(xt, stats.n)
        ridged = True

    def _diag(sig, sweeps, converged):
        return IcfDiagnostics(
            sweeps=sweeps,
            objective=objective(sig, stats),
            kkt=kkt_residual(sig, stats, pattern),
            converged=converged,
            ridged=ridged,
        )

    if pattern.is_empty():
        sig = SpdMatrix(stats.xtilde)
        return sig, _diag(sig, 0, True)
    if q == 2 and len(pattern) == 1:
        sig = SpdMatrix(zero_forced(stats.xtilde, pattern), pattern=pattern)
        return sig, _diag(sig, 0, True)

    if init is None:
        sigma = _default_init(stats, pattern)
    else:
        if not isinstance(init, SpdMatrix):
            init = SpdMatrix(init, pattern=pattern)
        elif not pattern.conforms(init.values):
            raise PatternViolationError("init violates the zero pattern")
        sigma = init

    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        prev = sigma.values
        for j in range(1, q + 1):
            sigma = icf_column_update(sigma, stats, j, pattern)
        sweeps += 1
        denom = max(float(np.linalg.norm(prev)), np.finfo(float).tiny)
        if float(np.linalg.norm(sigma.values - prev)) / denom < tol:
            converged = True
            break
    return sigma, _diag(sigma, sweeps, converged)


def free_entry_indices(pattern):
    """0-based lower-triangle (row, col) positions not constrained, diagonal included.

    Row-major order; this fixes the layout of packed free-entry vectors.
    """
    out = []
    for i in range(pattern.dim):
        for j in range(i + 1):
            if i == j or (j + 1, i + 1) not in pattern:
                out.append((i, j))
    return out


def pack_free_entries(sigma, pattern):
    """Flatten the free lower-triangle entries of a symmetric matrix."""
    a = _as_array(sigma)
    return np.array([a[i, j] for i, j in free_entry_indices(pattern)])


def unpack_free_entries(vec, pattern):
    """Rebuild a symmetric matrix from packed free entries; constrained entries are 0.0."""
    idx = free_entry_indices(pattern)
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (len(idx),):
        raise ValueError("expected %d entries, got shape %r" % (len(idx), vec.shape))
    q = pattern.dim
    a = np.zeros((q, q))
    for value, (i, j) in zip(vec, idx):
        a[i, j] = value
        a[j, i] = value
    return a
