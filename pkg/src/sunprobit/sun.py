"""Unified skew-normal (SUN) distributions and the conjugate probit posterior.

A SUN_{q,h}(xi, Omega, Delta, gamma, Gamma) vector has density

    phi_q(b - xi; Omega) * Phi_h(gamma + Delta' Omegabar^{-1} omega^{-1} (b - xi);
                                 Gamma - Delta' Omegabar^{-1} Delta) / Phi_h(gamma; Gamma)

where omega is the diagonal scale of Omega and Omegabar the matching
correlation matrix. Gaussian priors are the case h = 0. Updating a SUN prior
with a probit likelihood ``Phi_m(Xbar b; Lambda)`` gives a SUN_{q,h+m}
posterior whose normalizing constant is the marginal likelihood.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from .errors import CapExceeded, DimensionMismatch, IndexOutOfRange, NotFactorizable
from .gauss import (
    DEFAULT_CDF,
    CdfResult,
    CdfSettings,
    SpdMatrix,
    chol_psd,
    gaussian_logpdf,
    mvn_cdf,
)
from .models import ModelSpec, ProbitLikelihood, unit_block
from .tilting import sample_tmvn

SAMPLER_CAP = 500
EVIDENCE_CAP = 1000


def _as_matrix(a, shape, name):
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return np.zeros(shape)
    a = a.reshape(shape) if a.size == shape[0] * shape[1] and a.ndim < 2 else a
    if a.shape != shape:
        raise DimensionMismatch(f"{name} has shape {a.shape}, expected {shape}")
    return a


@dataclass(frozen=True, eq=False)
class SunParams:
    """Parameters of a SUN_{q,h} distribution.

    ``Gamma`` must have a unit diagonal and the joint matrix
    ``[[Gamma, Delta'], [Delta, Omegabar]]`` must be positive semidefinite.
    """

    xi: np.ndarray
    Omega: np.ndarray
    Delta: np.ndarray
    gamma: np.ndarray
    Gamma: np.ndarray
    validate: bool = field(default=True, repr=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float)).ravel()
        q = len(xi)
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float)).ravel()
        h = len(gamma)
        Omega = _as_matrix(self.Omega, (q, q), "Omega")
        Delta = _as_matrix(self.Delta, (q, h), "Delta")
        Gamma = _as_matrix(self.Gamma, (h, h), "Gamma")
        for name, val in (("xi", xi), ("Omega", Omega), ("Delta", Delta), ("gamma", gamma),
                          ("Gamma", Gamma)):
            object.__setattr__(self, name, val)
        if q < 1:
            raise DimensionMismatch("q must be at least 1")
        if self.validate:
            if not np.all(np.isfinite(np.concatenate([xi, Omega.ravel(), Delta.ravel(),
                                                      gamma, Gamma.ravel()]))):
                raise ValueError("SUN parameters must be finite")
            if h and np.max(np.abs(np.diag(Gamma) - 1.0)) > 1e-10:
                raise ValueError("Gamma must have a unit diagonal")
            joint = np.block([[Gamma, Delta.T], [Delta, self.Omega_bar]])
            chol_psd(joint)

    # -- shapes and derived quantities

    @property
    def q(self) -> int:
        return len(self.xi)

    @property
    def h(self) -> int:
        return len(self.gamma)

    @classmethod
    def gaussian(cls, xi, Omega) -> "SunParams":
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        return cls(xi=xi, Omega=Omega, Delta=np.zeros((len(xi), 0)), gamma=np.zeros(0),
                   Gamma=np.zeros((0, 0)))

    @cached_property
    def omega(self) -> np.ndarray:
        d = np.diag(self.Omega)
        if np.any(d <= 0):
            raise NotFactorizable("Omega must have a positive diagonal")
        return np.sqrt(d)

    @cached_property
    def Omega_bar(self) -> np.ndarray:
        w = self.omega
        ob = self.Omega / np.outer(w, w)
        return 0.5 * (ob + ob.T)

    @cached_property
    def Omega_spd(self) -> SpdMatrix:
        return chol_psd(self.Omega)

    @cached_property
    def Omega_bar_spd(self) -> SpdMatrix:
        return chol_psd(self.Omega_bar)

    @cached_property
    def Gamma_spd(self) -> SpdMatrix:
        return chol_psd(self.Gamma)

    @cached_property
    def slope(self) -> np.ndarray:
        """``Delta' Omegabar^{-1} omega^{-1}``, the h x q map from ``b - xi`` to the CDF argument."""
        return self.Omega_bar_spd.solve(self.Delta).T / self.omega

    @cached_property
    def Gamma_cond(self) -> np.ndarray:
        """``Gamma - Delta' Omegabar^{-1} Delta``."""
        B = self.Omega_bar_spd.half_solve(self.Delta)
        C = self.Gamma - B.T @ B
        return 0.5 * (C + C.T)

    def log_normalizer(self, settings: CdfSettings | None = None) -> CdfResult:
        """log Phi_h(gamma; Gamma), cached per CDF settings."""
        settings = settings or DEFAULT_CDF
        key = ("norm", settings)
        if key not in self._cache:
            if self.h == 0:
                self._cache[key] = CdfResult(0.0, 0.0, 0)
            else:
                self._cache[key] = mvn_cdf(self.gamma, self.Gamma_spd, settings=settings)
        return self._cache[key]

    # -- serialization

    def to_json(self) -> dict:
        return {
            "q": self.q,
            "h": self.h,
            "xi": self.xi.tolist(),
            "Omega": self.Omega.tolist(),
            "Delta": self.Delta.tolist(),
            "gamma": self.gamma.tolist(),
            "Gamma": self.Gamma.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict, validate: bool = True) -> "SunParams":
        q, h = int(doc["q"]), int(doc["h"])
        return cls(
            xi=np.asarray(doc["xi"], dtype=float).reshape(q),
            Omega=np.asarray(doc["Omega"], dtype=float).reshape(q, q),
            Delta=np.asarray(doc["Delta"], dtype=float).reshape(q, h),
            gamma=np.asarray(doc["gamma"], dtype=float).reshape(h),
            Gamma=np.asarray(doc["Gamma"], dtype=float).reshape(h, h),
            validate=validate,
        )

    def equals(self, other: "SunParams") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("xi", "Omega", "Delta", "gamma", "Gamma"))


def skew_normal(delta: float) -> SunParams:
    """Standard skew-normal as SUN_{1,1}(0, 1, delta, 0, 1)."""
    return SunParams(xi=[0.0], Omega=[[1.0]], Delta=[[delta]], gamma=[0.0], Gamma=[[1.0]])


def sun_log_density(params: SunParams, beta, settings: CdfSettings | None = None) -> float:
    """Log density of the SUN distribution at ``beta``."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (params.q,):
        raise DimensionMismatch(f"beta must have length {params.q}")
    out = float(gaussian_logpdf(beta, params.xi, params.Omega_spd))
    if params.h == 0:
        return out
    arg = params.gamma + params.slope @ (beta - params.xi)
    num = mvn_cdf(arg, params.Gamma_cond, settings=settings).log_prob
    return out + num - params.log_normalizer(settings).log_prob


# --------------------------------------------------------------------------
# conjugate update


def posterior_update(prior: SunParams, lik: ProbitLikelihood) -> SunParams:
    """SUN_{q,h+m} posterior of a SUN prior under a probit likelihood."""
    if lik.q != prior.q:
        raise DimensionMismatch(f"likelihood has q={lik.q} but prior has q={prior.q}")
    if lik.m == 0:
        return prior
    X = lik.Xbar
    w = prior.omega
    OXt = prior.Omega @ X.T
    K = X @ OXt + lik.Lambda
    K = 0.5 * (K + K.T)
    s = np.sqrt(np.diag(K))
    if np.any(s <= 0):
        raise NotFactorizable("likelihood rows with zero total variance")
    Delta_new = OXt / w[:, None] / s[None, :]
    gamma_new = (X @ prior.xi) / s
    Gamma_new = K / np.outer(s, s)
    np.fill_diagonal(Gamma_new, 1.0)
    if prior.h == 0:
        Delta, gamma, Gamma = Delta_new, gamma_new, Gamma_new
    else:
        cross = (X @ (w[:, None] * prior.Delta)) / s[:, None]
        Delta = np.hstack([prior.Delta, Delta_new])
        gamma = np.concatenate([prior.gamma, gamma_new])
        Gamma = np.block([[prior.Gamma, cross.T], [cross, Gamma_new]])
    return SunParams(xi=prior.xi, Omega=prior.Omega, Delta=Delta, gamma=gamma, Gamma=Gamma,
                     validate=False)


# --------------------------------------------------------------------------
# sampling


@dataclass
class PosteriorDraws:
    draws: np.ndarray
    seed: int | None
    meta: dict

    @property
    def T(self) -> int:
        return self.draws.shape[0]


def _resolve_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), (None if rng is None else int(rng))


def sample_posterior(params: SunParams, T: int, rng=None, *, cap: int = SAMPLER_CAP) -> PosteriorDraws:
    """I.i.d. draws ``xi + omega (V0 + Delta Gamma^{-1} V1)``.

    ``V0 ~ N(0, Omegabar - Delta Gamma^{-1} Delta')`` and ``V1`` is ``N(0, Gamma)``
    truncated below ``-gamma``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if params.h > cap:
        raise CapExceeded(f"exact sampler supports h+m <= {cap}, got {params.h}; "
                          "use method=pfm for larger problems")
    rng, seed = _resolve_rng(rng)
    meta = {"h": params.h, "q": params.q}
    if params.h == 0:
        draws = params.xi + rng.standard_normal((T, params.q)) @ params.Omega_spd.factor.T
        meta["method"] = "gaussian"
        return PosteriorDraws(draws, seed, meta)
    G = params.Gamma_spd
    B = G.half_solve(params.Delta.T)
    cov0 = params.Omega_bar - B.T @ B
    cov0 = chol_psd(0.5 * (cov0 + cov0.T), check_symmetric=False)
    proj = linalg.solve_triangular(G.factor.T, B, lower=False, check_finite=False)
    V0 = rng.standard_normal((T, params.q)) @ cov0.factor.T
    V1, info = sample_tmvn(-params.gamma, np.zeros(params.h), G, T, rng, dim_cap=cap,
                           return_info=True)
    draws = params.xi + params.omega * (V0 + V1 @ proj)
    meta.update(method=info.method, acceptance=info.acceptance, proposals=info.proposals,
                flags=list(info.flags), jitter=max(cov0.jitter_applied, G.jitter_applied))
    return PosteriorDraws(draws, seed, meta)


# --------------------------------------------------------------------------
# evidence and prediction


@dataclass(frozen=True)
class EvidenceResult:
    log_evidence: float
    err_estimate: float
    tol_met: bool


def _check_cap(dim: int, cap: int):
    if dim > cap:
        raise CapExceeded(f"evidence and prediction support h+m <= {cap}, got {dim}; "
                          "use method=pfm for larger problems")


def evidence_details(prior: SunParams, lik: ProbitLikelihood, settings: CdfSettings | None = None,
                     *, cap: int = EVIDENCE_CAP) -> EvidenceResult:
    post = posterior_update(prior, lik)
    _check_cap(post.h, cap)
    num = post.log_normalizer(settings)
    den = prior.log_normalizer(settings)
    # first-order propagation of the absolute CDF errors to the log scale
    rel = (num.err_estimate / num.prob if num.prob > 0 else math.inf) + \
          (den.err_estimate / den.prob if den.prob > 0 else math.inf)
    return EvidenceResult(num.log_prob - den.log_prob, rel, num.tol_met and den.tol_met)


def log_evidence(prior: SunParams, lik: ProbitLikelihood, settings: CdfSettings | None = None,
                 *, cap: int = EVIDENCE_CAP) -> float:
    """log p(y) = log Phi_{h+m}(gamma_pst; Gamma_pst) - log Phi_h(gamma; Gamma)."""
    return evidence_details(prior, lik, settings, cap=cap).log_evidence


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray
    log_raw: np.ndarray
    tol_met: bool

    @property
    def raw(self) -> np.ndarray:
        return np.exp(self.log_raw)

    @property
    def raw_sum(self) -> float:
        return float(np.sum(self.raw))


def predict_from_posterior(post: SunParams, spec: ModelSpec, x_new,
                           settings: CdfSettings | None = None, *,
                           cap: int = EVIDENCE_CAP) -> Prediction:
    """Predictive class probabilities as ratios of posterior normalizing constants.

    Updating the posterior with one hypothetical unit gives the same parameters
    as updating the prior with the expanded data, so the ratio
    ``Phi(gamma_l; Gamma_l) / Phi(gamma_pst; Gamma_pst)`` is the predictive mass.
    """
    _check_cap(post.h + (spec.L - 1), cap)
    base = post.log_normalizer(settings)
    log_raw = np.empty(spec.L)
    met = base.tol_met
    for label in range(1, spec.L + 1):
        rows, block = unit_block(spec, x_new, label)
        unit = ProbitLikelihood(Xbar=rows, Lambda_blocks=(block,), unit_blocks=((0, rows.shape[0]),))
        res = posterior_update(post, unit).log_normalizer(settings)
        log_raw[label - 1] = res.log_prob - base.log_prob
        met = met and res.tol_met
    probs = np.exp(log_raw - np.logaddexp.reduce(log_raw))
    return Prediction(probs=probs, log_raw=log_raw, tol_met=met)


def predict_exact(prior: SunParams, spec: ModelSpec, lik: ProbitLikelihood, x_new,
                  settings: CdfSettings | None = None, *, cap: int = EVIDENCE_CAP) -> Prediction:
    """Exact posterior predictive probabilities for a new unit with predictors ``x_new``."""
    return predict_from_posterior(posterior_update(prior, lik), spec, x_new, settings, cap=cap)


def marginal_subset(params: SunParams, indices) -> SunParams:
    """SUN marginal of the coordinates ``indices`` (0-based)."""
    idx = np.asarray(indices, dtype=int).ravel()
    if len(idx) == 0:
        raise IndexOutOfRange("need at least one index")
    if np.any(idx < 0) or np.any(idx >= params.q):
        raise IndexOutOfRange(f"indices must lie in 0..{params.q - 1}")
    if len(np.unique(idx)) != len(idx):
        raise IndexOutOfRange("indices must be distinct")
    return SunParams(xi=params.xi[idx], Omega=params.Omega[np.ix_(idx, idx)],
                     Delta=params.Delta[idx], gamma=params.gamma, Gamma=params.Gamma,
                     validate=False)


def sun_moments(params: SunParams, settings: CdfSettings | None = None):
    """Mean and covariance, from the truncated moments of the latent part (h <= 10)."""
    from .gauss import tmvn_moments

    if params.h == 0:
        return params.xi.copy(), params.Omega.copy()
    G = params.Gamma_spd
    m1, C1 = tmvn_moments(-params.gamma, np.zeros(params.h), G, settings=settings)
    proj = G.solve(params.Delta.T).T
    B = params.Omega_bar - params.Delta @ proj.T
    w = params.omega
    mean = params.xi + w * (proj @ m1)
    cov = np.outer(w, w) * (B + proj @ C1 @ proj.T)
    return mean, 0.5 * (cov + cov.T)
