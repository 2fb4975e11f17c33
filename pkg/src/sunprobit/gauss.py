"""Gaussian numerical kernels.

Jittered Cholesky factorization, multivariate normal CDFs (exact in one and
two dimensions, randomized lattice separation-of-variables above that),
multivariate normal sampling, and moments of lower-truncated normals.

Truncated normal sampling by minimax tilting lives in :mod:`sunprobit.tilting`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate, linalg, optimize, special
from scipy.sparse.csgraph import connected_components

from .errors import (
    DimensionMismatch,
    DimensionTooLarge,
    InfeasibleRegion,
    NotFactorizable,
    ToleranceNotMet,
)

JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)
INF_SENTINEL = 1e308
# correlations at or below this magnitude are treated as exact zeros when
# splitting a covariance into independent components
INDEPENDENCE_THRESHOLD = 1e-12
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SpdMatrix:
    """Symmetric positive (semi)definite matrix with its cached Cholesky factor.

    ``factor @ factor.T == values + jitter_applied * I`` up to rounding.
    """

    values: np.ndarray
    factor: np.ndarray
    jitter_applied: float = 0.0

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @cached_property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.factor))))

    def solve(self, b):
        return linalg.cho_solve((self.factor, True), b, check_finite=False)

    def half_solve(self, b):
        """Solve ``factor @ x = b``."""
        return linalg.solve_triangular(self.factor, b, lower=True, check_finite=False)

    @cached_property
    def inverse(self) -> np.ndarray:
        inv = self.solve(np.eye(self.dim))
        return 0.5 * (inv + inv.T)

    def to_json(self):
        return {"dim": self.dim, "values": self.values.tolist(),
                "jitter_applied": self.jitter_applied}


def chol_psd(A, check_symmetric: bool = True) -> SpdMatrix:
    """Cholesky factor ``A`` with the smallest diagonal jitter from the ladder that works.

    Raises NotFactorizable when every level in ``JITTER_LADDER`` fails.
    """
    if isinstance(A, SpdMatrix):
        return A
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise DimensionMismatch(f"expected a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NotFactorizable("matrix has non-finite entries")
    if check_symmetric:
        scale = max(float(np.max(np.abs(A))), 1.0)
        if np.max(np.abs(A - A.T)) > 1e-10 * scale:
            raise NotFactorizable("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    eye = np.eye(A.shape[0])
    for jitter in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(A + jitter * eye if jitter else A)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
            return SpdMatrix(values=A, factor=L, jitter_applied=jitter)
    raise NotFactorizable("matrix is not positive semidefinite within the jitter ladder")


def as_bounds(v) -> np.ndarray:
    """Convert bounds to float arrays, mapping the +-1e308 sentinels to +-inf."""
    v = np.atleast_1d(np.asarray(v, dtype=float)).copy()
    v[v >= INF_SENTINEL] = np.inf
    v[v <= -INF_SENTINEL] = -np.inf
    return v


# --------------------------------------------------------------------------
# CDF


@dataclass(frozen=True)
class CdfSettings:
    """Accuracy controls for multivariate normal CDF evaluations.

    The estimate is accepted when its error is below ``tol`` (absolute) and
    below ``rel_tol`` times the probability, so that log probabilities of
    small orthants stay accurate. The quasi-random shifts are drawn
    from ``seed`` unless an explicit generator is given, so a CDF call is a
    pure function of its inputs.
    """

    tol: float = 1e-6
    rel_tol: float = 1e-4
    max_points: int = 12 * 2**17
    shifts: int = 12
    seed: int = 20200101


DEFAULT_CDF = CdfSettings()


@dataclass(frozen=True)
class CdfResult:
    log_prob: float
    err_estimate: float
    points_used: int
    tol_met: bool = True
    rel_err: float = 0.0

    @property
    def prob(self) -> float:
        return math.exp(self.log_prob)


def _log_ndtr_upper(x):
    """log P(Z > x)."""
    return special.log_ndtr(-np.asarray(x, dtype=float))


def _mills(t):
    """phi(t) / P(Z > t), zero at t = -inf."""
    t = np.asarray(t, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.exp(-0.5 * t * t - 0.5 * LOG_2PI - _log_ndtr_upper(t))
    return np.where(np.isneginf(t), 0.0, out)


def log_bvn_cdf(a: float, b: float, rho: float) -> tuple[float, float]:
    """log P(X <= a, Y <= b) for standard bivariate normals with correlation rho.

    Integrates ``phi(x) Phi((b - rho x)/r)`` over ``x <= a`` in log space
    around the (unique) maximum of the log-concave integrand, which keeps
    relative accuracy deep in the tails. Returns ``(log_prob, rel_err)``.
    """
    if a == -np.inf or b == -np.inf:
        return -np.inf, 0.0
    if a == np.inf:
        return float(special.log_ndtr(b)), 0.0
    if b == np.inf:
        return float(special.log_ndtr(a)), 0.0
    rho = float(np.clip(rho, -1.0, 1.0))
    if abs(rho) > 1.0 - 1e-14:
        if rho > 0:
            return float(special.log_ndtr(min(a, b))), 0.0
        # P(X <= a, -X <= b) = P(-b <= X <= a)
        if a <= -b:
            return -np.inf, 0.0
        hi, lo = special.log_ndtr(a), special.log_ndtr(-b)
        return float(hi + np.log1p(-np.exp(lo - hi))), 0.0
    if rho == 0.0:
        return float(special.log_ndtr(a) + special.log_ndtr(b)), 0.0
    # integrate over the coordinate with the smaller upper limit
    if b < a:
        a, b = b, a
    r = math.sqrt((1.0 - rho) * (1.0 + rho))

    def logg(x):
        return -0.5 * x * x - 0.5 * LOG_2PI + special.log_ndtr((b - rho * x) / r)

    def dlogg(x):
        t = (b - rho * x) / r
        # d/dx log Phi(t) = -(rho/r) * phi(t)/Phi(t)
        lam = math.exp(-0.5 * t * t - 0.5 * LOG_2PI - special.log_ndtr(t))
        return -x - rho / r * lam

    if dlogg(a) >= 0.0:
        xstar = a
    else:
        lo = a - 1.0
        while dlogg(lo) < 0.0:
            lo = a - 2.0 * (a - lo)
        xstar = optimize.brentq(dlogg, lo, a, xtol=1e-12)
    top = float(logg(xstar))
    # the log-integrand is concave with curvature <= -1, so +-40 around the
    # maximum holds everything but exp(-800) of the mass
    lo, hi = xstar - 40.0, min(a, xstar + 40.0)
    points = [xstar] if lo < xstar < hi else None
    kink = b / rho
    if lo < kink < hi:
        points = sorted(set((points or []) + [kink]))
    val, err = integrate.quad(lambda x: math.exp(logg(x) - top), lo, hi, points=points,
                              epsabs=0.0, epsrel=1e-12, limit=200)
    if val <= 0.0:
        return -np.inf, 0.0
    return top + math.log(val), err / val


def _components(S: np.ndarray) -> list[np.ndarray]:
    d = S.shape[0]
    if d == 1:
        return [np.arange(1)]
    sd = np.sqrt(np.diag(S))
    corr = S / np.outer(sd, sd)
    adj = np.abs(corr) > INDEPENDENCE_THRESHOLD
    n, labels = connected_components(adj, directed=False)
    return [np.flatnonzero(labels == k) for k in range(n)]


def _primes(k: int) -> np.ndarray:
    out = []
    n = 2
    while len(out) < k:
        if all(n % p for p in out if p * p <= n):
            out.append(n)
        n += 1
    return np.array(out, dtype=float)


def _tilted_log_integrand(w: np.ndarray, Ls: np.ndarray, lo: np.ndarray,
                          mu: np.ndarray) -> np.ndarray:
    """Log importance weights of sequential tilted proposals at points ``w`` (n x d-1).

    The scaled problem is ``P((I + Ls) x >= lo)`` for standard normal ``x``;
    coordinate ``k`` is drawn from N(mu_k, 1) truncated to its feasible range
    by inversion, so ``mu = 0`` recovers plain separation of variables.
    """
    n = w.shape[0]
    d = len(lo)
    x = np.empty((n, d - 1))
    total = np.zeros(n)
    logw = np.log(w)
    for k in range(d):
        shift = x[:, :k] @ Ls[k, :k] if k else 0.0
        t = lo[k] - mu[k] - shift
        lp = special.log_ndtr(-t)
        total += lp + 0.5 * mu[k] ** 2
        if k < d - 1:
            z = np.maximum(-special.ndtri_exp(logw[:, k] + lp), t)
            x[:, k] = mu[k] + z
            total -= mu[k] * x[:, k]
    return total


def _qmc_log_cdf(b: np.ndarray, S: np.ndarray, tol: float, rel_tol: float, max_points: int,
                 shifts: int, rng: np.random.Generator):
    from .tilting import TILTING_DIM_LIMIT, _cholperm, _Tilted

    d = len(b)
    # P(Z <= b) = P(Z >= -b): reorder and tilt the lower-bound problem
    L, _, lo = _cholperm(S, -b)
    tilt = _Tilted(L, lo)
    mu = np.zeros(d)
    if d <= TILTING_DIM_LIMIT:
        sol = tilt.solve()
        if sol is not None:
            mu = sol[1]
    gen = np.sqrt(_primes(d - 1)) % 1.0
    shift_vals = rng.random((shifts, d - 1))
    # Kronecker lattices are extensible: doubling n only evaluates the new points
    logsums = np.full(shifts, -np.inf)
    done = 0
    n = 256
    while True:
        k = np.arange(done + 1, n + 1)[:, None]
        base = (k * gen) % 1.0
        for s in range(shifts):
            w = np.abs(2.0 * ((base + shift_vals[s]) % 1.0) - 1.0)
            w = np.clip(w, 1e-16, 1.0 - 1e-16)
            lv = _tilted_log_integrand(w, tilt.Ls, tilt.l, mu)
            logsums[s] = np.logaddexp(logsums[s], special.logsumexp(lv))
        done = n
        used = n * shifts
        logmeans = logsums - math.log(n)
        top = float(np.max(logmeans))
        if top == -np.inf:
            return -np.inf, 0.0, 0.0, used, True
        scaled = np.exp(logmeans - top)
        mean = float(np.mean(scaled))
        se = float(np.std(scaled, ddof=1) / math.sqrt(shifts))
        rel = 3.0 * se / mean
        log_p = top + math.log(mean)
        err = rel * math.exp(log_p)
        met = err <= tol and rel <= rel_tol
        if met or 2 * n * shifts > max_points:
            return log_p, err, rel, used, met
        n *= 2


def mvn_cdf(upper, cov, tol: float | None = None, max_points: int | None = None,
            rng: np.random.Generator | None = None, *, settings: CdfSettings | None = None,
            strict: bool = False) -> CdfResult:
    """P(Z <= upper) for Z ~ N(0, cov).

    Independent blocks of ``cov`` are integrated separately. One- and
    two-dimensional blocks are exact; larger blocks use randomized lattice
    quasi-Monte Carlo over ``settings.shifts`` shifts with the error reported
    as three shift-wise standard errors.
    """
    settings = settings or DEFAULT_CDF
    tol = settings.tol if tol is None else tol
    max_points = settings.max_points if max_points is None else max_points
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = as_bounds(upper)
    spd = cov if isinstance(cov, SpdMatrix) else chol_psd(cov)
    if spd.dim != len(b):
        raise DimensionMismatch(f"upper has length {len(b)} but cov is {spd.dim}x{spd.dim}")
    if rng is None:
        rng = np.random.default_rng(settings.seed)
    S = spd.values + spd.jitter_applied * np.eye(spd.dim)
    if np.any(np.isneginf(b)):
        return CdfResult(-np.inf, 0.0, 0)
    keep = ~np.isposinf(b)
    b, S = b[keep], S[np.ix_(keep, keep)]
    if len(b) == 0:
        return CdfResult(0.0, 0.0, 0)
    sd = np.sqrt(np.diag(S))
    b = b / sd
    S = S / np.outer(sd, sd)
    comps = _components(S)
    # independent component errors add in quadrature, so each gets an equal share
    n_qmc = sum(len(c) > 2 for c in comps)
    comp_rel = settings.rel_tol / math.sqrt(max(n_qmc, 1))
    comp_tol = tol / math.sqrt(max(n_qmc, 1))
    log_p, rel2, used = 0.0, 0.0, 0
    for comp in comps:
        if len(comp) == 1:
            lp = float(special.log_ndtr(b[comp[0]]))
            r = 0.0
        elif len(comp) == 2:
            i, j = comp
            lp, r = log_bvn_cdf(b[i], b[j], S[i, j])
        else:
            lp, _, r, u, _ = _qmc_log_cdf(b[comp], S[np.ix_(comp, comp)], comp_tol, comp_rel,
                                          max_points, settings.shifts, rng)
            used += u
        log_p += lp
        rel2 += r * r
        if log_p == -np.inf:
            break
    rel = math.sqrt(rel2)
    err = rel * math.exp(log_p) if log_p > -np.inf else 0.0
    # judged on the combined estimate: one component may miss its share
    met = err <= tol and rel <= max(settings.rel_tol, 1e-12)
    if strict and not met:
        raise ToleranceNotMet(f"CDF error estimate {err:.3g} above tolerance {tol:.3g}")
    return CdfResult(float(log_p), float(err), used, met, float(rel))


def log_orthant(mean, cov, settings: CdfSettings | None = None) -> CdfResult:
    """P(Z > 0) for Z ~ N(mean, cov), i.e. the CDF of N(0, cov) at ``mean``."""
    return mvn_cdf(mean, cov, settings=settings)


# --------------------------------------------------------------------------
# sampling


def sample_mvn(mean, cov, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. draws ``mean + factor @ eta`` as a (count, d) array."""
    spd = cov if isinstance(cov, SpdMatrix) else chol_psd(cov)
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (spd.dim,))
    if count < 1:
        raise ValueError("count must be >= 1")
    eta = rng.standard_normal((count, spd.dim))
    return mean + eta @ spd.factor.T


def trunc_std_normal_lower(lower, rng: np.random.Generator, size=None) -> np.ndarray:
    """Standard normal draws conditioned on ``z > lower`` by log-space inversion."""
    lower = np.asarray(lower, dtype=float)
    shape = lower.shape if size is None else size
    logu = np.log(rng.random(shape))
    z = -special.ndtri_exp(logu + special.log_ndtr(-lower))
    return np.maximum(z, np.nextafter(lower, np.inf))


# --------------------------------------------------------------------------
# truncated moments

MOMENT_DIM_CAP = 10
# the recursion needs ratios of orthant probabilities, so only relative accuracy
# matters; 1e-3 keeps the moments well inside Monte Carlo noise at a fraction of the cost
MOMENT_CDF = CdfSettings(tol=1.0, rel_tol=1e-3)


def _half_normal_moments(a: float, mean: float, var: float):
    sd = math.sqrt(var)
    if a == -np.inf:
        return mean, var
    t = (a - mean) / sd
    lam = float(_mills(t))
    m = mean + sd * lam
    v = var * max(1.0 + t * lam - lam * lam, 0.0)
    return m, v


def tmvn_moments(lower, mean, cov, settings: CdfSettings | None = None,
                 cap: int = MOMENT_DIM_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of N(mean, cov) restricted to ``z > lower``.

    Uses the Tallis reduction: the first moments need the one-dimensional
    marginal densities at the truncation points and the second moments the
    two-dimensional ones, each an (d-1)- or (d-2)-variate orthant probability.
    """
    a = as_bounds(lower)
    mu = np.atleast_1d(np.asarray(mean, dtype=float))
    spd = cov if isinstance(cov, SpdMatrix) else chol_psd(cov)
    settings = settings or MOMENT_CDF
    d = len(mu)
    if len(a) != d or spd.dim != d:
        raise DimensionMismatch("lower, mean and cov dimensions disagree")
    if d > cap:
        raise DimensionTooLarge(f"tmvn_moments supports d <= {cap}, got {d}")
    S = spd.values + spd.jitter_applied * np.eye(d)
    if d == 1:
        m, v = _half_normal_moments(float(a[0]), float(mu[0]), float(S[0, 0]))
        if not np.isfinite(m):
            raise InfeasibleRegion("truncation region has zero probability")
        return np.array([m]), np.array([[v]])
    a = a - mu
    log_alpha = mvn_cdf(-a, S, settings=settings).log_prob
    if not np.isfinite(log_alpha):
        raise InfeasibleRegion("truncation region has zero probability")
    finite = np.isfinite(a)
    sig = np.diag(S)
    F = np.zeros(d)
    for k in np.flatnonzero(finite):
        rest = np.delete(np.arange(d), k)
        s_rk = S[rest, k]
        cmean = s_rk * a[k] / sig[k]
        ccov = S[np.ix_(rest, rest)] - np.outer(s_rk, s_rk) / sig[k]
        lp = mvn_cdf(cmean - a[rest], _sym(ccov), settings=settings).log_prob
        logdens = -0.5 * a[k] ** 2 / sig[k] - 0.5 * (LOG_2PI + math.log(sig[k]))
        F[k] = math.exp(logdens + lp - log_alpha)
    F2 = np.zeros((d, d))
    fin = np.flatnonzero(finite)
    for ii, k in enumerate(fin):
        for q in fin[ii + 1:]:
            pair = np.array([k, q])
            rest = np.delete(np.arange(d), pair)
            Skq = S[np.ix_(pair, pair)]
            val = a[pair]
            sol = np.linalg.solve(Skq, val)
            det = Skq[0, 0] * Skq[1, 1] - Skq[0, 1] ** 2
            logdens = -0.5 * float(val @ sol) - LOG_2PI - 0.5 * math.log(det)
            if len(rest):
                Srp = S[np.ix_(rest, pair)]
                cmean = Srp @ sol
                ccov = S[np.ix_(rest, rest)] - Srp @ np.linalg.solve(Skq, Srp.T)
                lp = mvn_cdf(cmean - a[rest], _sym(ccov), settings=settings).log_prob
            else:
                lp = 0.0
            F2[k, q] = F2[q, k] = math.exp(logdens + lp - log_alpha)
    m = S @ F
    aF = np.zeros(d)
    aF[finite] = a[finite] * F[finite]
    F2S_diag = np.einsum("kq,qk->k", F2, S)
    E2 = S + (S * (aF / sig)) @ S + S @ F2 @ S - (S * (F2S_diag / sig)) @ S
    C = E2 - np.outer(m, m)
    return mu + m, 0.5 * (C + C.T)


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)


def gaussian_logpdf(x, mean, cov: SpdMatrix) -> np.ndarray:
    """Multivariate normal log density; ``x`` may be (d,) or (n, d)."""
    diff = np.atleast_2d(np.asarray(x, dtype=float) - mean)
    z = cov.half_solve(diff.T)
    out = -0.5 * np.sum(z * z, axis=0) - 0.5 * cov.dim * LOG_2PI - 0.5 * cov.logdet
    return out[0] if np.ndim(x) == 1 else out
