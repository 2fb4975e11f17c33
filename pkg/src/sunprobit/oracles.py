"""Slow, independent reference computations used to validate the main kernels.

None of these use the package's CDF, truncated normal or SUN density code;
they rely on scipy's own routines plus brute force. Only ``chol_psd`` is shared.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special, stats

from .errors import MaxTriesExceeded, QOverCap
from .gauss import chol_psd
from .models import ProbitLikelihood
from .sun import PosteriorDraws, SunParams


class OracleMethod(str, enum.Enum):
    GIBBS = "Gibbs"
    REJECTION = "Rejection"
    QUADRATURE = "Quadrature"
    PLAIN_MC = "PlainMC"


@dataclass
class OracleReport:
    estimate: object
    std_error: object
    draws_or_nodes: int
    method: OracleMethod


def batch_means_se(draws: np.ndarray, n_batches: int = 50) -> np.ndarray:
    """Autocorrelation-robust standard error of column means by non-overlapping batches."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    size = draws.shape[0] // n_batches
    means = draws[: size * n_batches].reshape(n_batches, size, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(n_batches)


def _trunc_normal_below(lower: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal draws with z > lower, by inversion on the safer tail."""
    u = rng.random(lower.shape)
    out = np.empty_like(lower)
    hi = lower > 0
    # upper tail: invert the survival function, which keeps precision for large lower
    sf = special.ndtr(-lower[hi])
    out[hi] = -special.ndtri(u[hi] * sf)
    lo = ~hi
    cdf = special.ndtr(lower[lo])
    out[lo] = special.ndtri(cdf + u[lo] * (1.0 - cdf))
    return np.maximum(out, lower)


def gibbs_sampler(prior: SunParams, lik: ProbitLikelihood, iters: int, rng: np.random.Generator,
                  burnin: int | None = None, thin: int = 10,
                  start: np.ndarray | None = None) -> PosteriorDraws:
    """Data-augmentation Gibbs sampler for a Gaussian prior.

    Alternates raw utilities ``u | beta``, truncated to ``u > 0`` with mean
    ``Xbar beta`` and block covariance ``Lambda`` (updated one within-unit
    position at a time, all units together), and ``beta | u``.
    """
    if prior.h:
        raise ValueError("the Gibbs oracle supports Gaussian priors only")
    burnin = iters // 5 if burnin is None else burnin
    q = prior.q
    Om = chol_psd(prior.Omega)
    Om_inv_xi = Om.solve(prior.xi)
    if lik.m == 0:
        keep = (iters - burnin + thin - 1) // thin
        draws = prior.xi + rng.standard_normal((keep, q)) @ Om.factor.T
        return PosteriorDraws(draws, None, {"method": "gibbs", "iters": iters})
    X = lik.Xbar
    Q = np.linalg.inv(lik.Lambda)
    Q = 0.5 * (Q + Q.T)
    prec = X.T @ Q @ X + Om.inverse
    Vb = chol_psd(np.linalg.inv(0.5 * (prec + prec.T)))
    XtQ = X.T @ Q
    positions = []
    for a, b in lik.unit_blocks:
        for j in range(b - a):
            while len(positions) <= j:
                positions.append([])
            positions[j].append(a + j)
    positions = [np.array(p) for p in positions]
    qd = np.diag(Q)
    beta = prior.xi.copy() if start is None else np.asarray(start, dtype=float).copy()
    u = np.abs(X @ beta) + 1.0
    out = []
    for t in range(iters):
        mu = X @ beta
        for rows in positions:
            resid = Q[rows] @ (u - mu) - qd[rows] * (u[rows] - mu[rows])
            cm = mu[rows] - resid / qd[rows]
            sd = 1.0 / np.sqrt(qd[rows])
            u[rows] = cm + sd * _trunc_normal_below(-cm / sd, rng)
        mean = Vb.values @ (XtQ @ u + Om_inv_xi)
        beta = mean + Vb.factor @ rng.standard_normal(q)
        if t >= burnin and (t - burnin) % thin == 0:
            out.append(beta.copy())
    return PosteriorDraws(np.array(out), None, {"method": "gibbs", "iters": iters,
                                                "burnin": burnin, "thin": thin})


def rejection_sample_sun(params: SunParams, T: int, rng: np.random.Generator,
                         max_tries: int = 10**8) -> PosteriorDraws:
    """Draws ``xi + omega U0`` with ``(U0, U1) ~ N(0, Omega*)`` kept when ``U1 + gamma > 0``."""
    q, h = params.q, params.h
    joint = np.block([[params.Omega_bar, params.Delta], [params.Delta.T, params.Gamma]])
    F = chol_psd(joint).factor
    kept, n_kept, tries = [], 0, 0
    batch = max(1000, 2 * T)
    while n_kept < T:
        if tries >= max_tries:
            raise MaxTriesExceeded(f"only {n_kept} of {T} draws accepted in {tries} proposals")
        U = rng.standard_normal((batch, q + h)) @ F.T
        tries += batch
        ok = np.all(U[:, q:] + params.gamma > 0, axis=1)
        kept.append(U[ok, :q])
        n_kept += int(ok.sum())
        rate = max(n_kept / tries, 1e-6)
        batch = int(min(max(1000, 1.2 * (T - n_kept) / rate), 10**6))
    U0 = np.concatenate(kept)[:T]
    draws = params.xi + params.omega * U0
    return PosteriorDraws(draws, None, {"method": "rejection", "acceptance": n_kept / tries,
                                        "proposals": tries})


def _scipy_orthant(mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """log P(Z <= mean_k) for Z ~ N(0, cov), one value per row of ``mean`` (d <= 2 fast path)."""
    mean = np.atleast_2d(mean)
    d = mean.shape[1]
    if np.count_nonzero(cov - np.diag(np.diag(cov))) == 0:
        return np.sum(special.log_ndtr(mean / np.sqrt(np.diag(cov))), axis=1)
    vals = np.atleast_1d(stats.multivariate_normal.cdf(
        mean, mean=np.zeros(d), cov=cov, allow_singular=True,
        abseps=1e-12, releps=1e-10, maxpts=10**6 * d))
    return np.log(np.maximum(vals, 1e-300))


def _log_prior(params: SunParams, grid: np.ndarray) -> np.ndarray:
    """SUN log density on rows of ``grid`` through scipy's normal routines."""
    out = stats.multivariate_normal(params.xi, params.Omega).logpdf(grid)
    out = np.atleast_1d(out)
    if params.h == 0:
        return out
    Ob = params.Omega_bar
    A = np.linalg.solve(Ob, params.Delta).T / params.omega
    cond = params.Gamma - params.Delta.T @ np.linalg.solve(Ob, params.Delta)
    args = params.gamma + (grid - params.xi) @ A.T
    num = _scipy_orthant(args, 0.5 * (cond + cond.T))
    den = _scipy_orthant(params.gamma[None, :], params.Gamma)[0]
    return out + num - den


def _log_lik(lik: ProbitLikelihood, grid: np.ndarray) -> np.ndarray:
    lin = grid @ lik.Xbar.T
    total = np.zeros(grid.shape[0])
    for (a, b), block in zip(lik.unit_blocks, lik.Lambda_blocks):
        total += _scipy_orthant(lin[:, a:b], block)
    return total


def quadrature_evidence(prior: SunParams, lik: ProbitLikelihood, nodes: int = 40,
                        rel_tol: float = 1e-7, max_panels: int = 64) -> OracleReport:
    """Evidence by direct numerical integration over ``xi +- 10 omega`` (q <= 2)."""
    q = prior.q
    if q > 2:
        raise QOverCap(f"quadrature evidence supports q <= 2, got {q}")
    lo = prior.xi - 10.0 * prior.omega
    hi = prior.xi + 10.0 * prior.omega
    if q == 1:
        def f(b):
            g = np.array([[b]])
            return math.exp(_log_prior(prior, g)[0] + _log_lik(lik, g)[0])

        val, err = integrate.quad(f, lo[0], hi[0], epsabs=0.0, epsrel=1e-10, limit=500)
        return OracleReport(val, err, 0, OracleMethod.QUADRATURE)
    x, w = np.polynomial.legendre.leggauss(nodes)
    prev = None
    panels = 4
    while True:
        edges0 = np.linspace(lo[0], hi[0], panels + 1)
        edges1 = np.linspace(lo[1], hi[1], panels + 1)

        def rule(edges):
            mid = 0.5 * (edges[1:] + edges[:-1])
            half = 0.5 * (edges[1:] - edges[:-1])
            pts = (mid[:, None] + half[:, None] * x[None, :]).ravel()
            wts = (half[:, None] * w[None, :]).ravel()
            return pts, wts

        p0, w0 = rule(edges0)
        p1, w1 = rule(edges1)
        B0, B1 = np.meshgrid(p0, p1, indexing="ij")
        grid = np.column_stack([B0.ravel(), B1.ravel()])
        logf = _log_prior(prior, grid) + _log_lik(lik, grid)
        W = np.outer(w0, w1).ravel()
        val = float(np.sum(W * np.exp(logf)))
        if prev is not None and abs(val - prev) <= rel_tol * abs(val):
            return OracleReport(val, abs(val - prev), grid.shape[0], OracleMethod.QUADRATURE)
        if panels >= max_panels:
            return OracleReport(val, abs(val - prev), grid.shape[0], OracleMethod.QUADRATURE)
        prev = val
        panels *= 2


def plain_mc_cdf(upper, cov, n: int, rng: np.random.Generator, chunk: int = 10**6) -> OracleReport:
    """P(Z <= upper) by counting, with its binomial standard error."""
    upper = np.asarray(upper, dtype=float)
    F = chol_psd(cov).factor
    hits = 0
    done = 0
    while done < n:
        k = min(chunk, n - done)
        Z = rng.standard_normal((k, len(upper))) @ F.T
        hits += int(np.sum(np.all(Z <= upper, axis=1)))
        done += k
    p = hits / n
    return OracleReport(p, math.sqrt(p * (1 - p) / n), n, OracleMethod.PLAIN_MC)


def rejection_tmvn_moments(lower, mean, cov, n: int, rng: np.random.Generator,
                           chunk: int = 10**6) -> OracleReport:
    """Mean and covariance of a lower-truncated normal from accepted plain draws.

    ``std_error`` holds the standard errors of the mean and of each covariance entry.
    """
    lower = np.asarray(lower, dtype=float)
    mean = np.asarray(mean, dtype=float)
    F = chol_psd(cov).factor
    d = len(mean)
    kept = []
    done = 0
    while done < n:
        k = min(chunk, n - done)
        Z = mean + rng.standard_normal((k, d)) @ F.T
        kept.append(Z[np.all(Z > lower, axis=1)])
        done += k
    Z = np.concatenate(kept)
    N = len(Z)
    m = Z.mean(axis=0)
    Zc = Z - m
    C = Zc.T @ Zc / N
    se_mean = np.sqrt(np.diag(C) / N)
    prod_var = (Zc**2).T @ (Zc**2) / N - C**2
    se_cov = np.sqrt(np.maximum(prod_var, 0.0) / N)
    return OracleReport((m, C), (se_mean, se_cov), N, OracleMethod.REJECTION)
