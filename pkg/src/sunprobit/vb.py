"""Blocked partially factorized variational Bayes for SUN posteriors.

The posterior is written in augmented form

    beta | zbar ~ N(xi + G (zbar - gamma_pst), V),
    zbar       ~ N(gamma_pst, Gamma_pst) truncated below 0,

with ``G = Omega X_pst' Gamma_pst^{-1}``. The approximation keeps the exact
conditional for beta and replaces the law of ``zbar`` by a product of
truncated normals over blocks, fitted by coordinate ascent. A classical
mean-field baseline and closed-form KL diagnostics are included.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DimensionMismatch, DimensionTooLarge
from .gauss import (
    MOMENT_DIM_CAP,
    CdfSettings,
    chol_psd,
    mvn_cdf,
    tmvn_moments,
)
from .models import ModelSpec, ProbitLikelihood, predict_frequencies
from .sun import PosteriorDraws, SunParams, _resolve_rng
from .tilting import sample_tmvn

LOG_2PI = math.log(2.0 * math.pi)


class AugmentedForm:
    """Augmented-data representation of a SUN posterior."""

    def __init__(self, post: SunParams):
        self.post = post
        X = post.slope
        self.X_pst = X
        self.gamma_pst = post.gamma
        self.eta_pst = post.gamma - X @ post.xi
        self.Sigma_pst = post.Gamma_cond
        self.xi = post.xi
        self.Omega = post.Omega
        if post.h == 0:
            # no latent rows: beta is exactly its Gaussian prior
            self.Gamma_pst = None
            self.Gamma_inv = np.zeros((0, 0))
            self.gain = np.zeros((post.q, 0))
            self.V_pst = post.Omega_spd
            return
        self.Gamma_pst = post.Gamma_spd
        P = self.Gamma_pst.inverse
        self.Gamma_inv = P
        OXt = post.Omega @ X.T
        self.gain = OXt @ P
        V = post.Omega - self.gain @ OXt.T
        self.V_pst = chol_psd(0.5 * (V + V.T), check_symmetric=False)

    @property
    def dim(self) -> int:
        return len(self.gamma_pst)

    @property
    def q(self) -> int:
        return len(self.xi)

    def beta_mean(self, z_mean: np.ndarray) -> np.ndarray:
        return self.xi + self.gain @ (z_mean - self.gamma_pst)

    @cached_property
    def V_direct(self) -> np.ndarray:
        """``(X' Sigma^{-1} X + Omega^{-1})^{-1}`` computed by brute force, for checks."""
        S = chol_psd(self.Sigma_pst, check_symmetric=False)
        prec = self.X_pst.T @ S.solve(self.X_pst) + np.linalg.inv(self.Omega)
        return np.linalg.inv(0.5 * (prec + prec.T))


def augmented_form(post: SunParams, lik: ProbitLikelihood | None = None) -> AugmentedForm:
    if lik is not None and post.h < lik.m:
        raise DimensionMismatch("posterior has fewer latent rows than the likelihood")
    return AugmentedForm(post)


# --------------------------------------------------------------------------
# blockings


@dataclass(frozen=True)
class Blocking:
    blocks: tuple

    def __post_init__(self):
        blocks = tuple(np.asarray(b, dtype=int) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)

    @property
    def sizes(self) -> list[int]:
        return [len(b) for b in self.blocks]

    @property
    def dim(self) -> int:
        return int(sum(self.sizes))

    def validate(self, dim: int, cap: int = MOMENT_DIM_CAP):
        allidx = np.concatenate(self.blocks) if self.blocks else np.zeros(0, int)
        if len(allidx) != dim or not np.array_equal(np.sort(allidx), np.arange(dim)):
            raise DimensionMismatch(f"blocks do not partition 0..{dim - 1}")
        if max(self.sizes, default=0) > cap:
            raise DimensionTooLarge(f"block of size {max(self.sizes)} exceeds the moment cap {cap}")

    def to_json(self):
        return [b.tolist() for b in self.blocks]


def default_blocking(lik: ProbitLikelihood, h: int = 0) -> Blocking:
    """One block per unit, preceded by one block for the prior's latent rows."""
    blocks = [np.arange(h)] if h else []
    blocks += [np.arange(a, b) + h for a, b in lik.unit_blocks]
    return Blocking(tuple(blocks))


def singleton_blocking(dim: int) -> Blocking:
    return Blocking(tuple(np.array([i]) for i in range(dim)))


def single_block(dim: int) -> Blocking:
    return Blocking((np.arange(dim),) if dim else ())


# --------------------------------------------------------------------------
# CAVI


@dataclass
class VBState:
    """Fitted block truncated normals ``TN(0; loc_c, Gamma_c)`` and their moments."""

    blocking: Blocking
    W: list
    Gamma_c: list
    loc: list
    mean: list
    cov: list
    iterations: int = 0
    converged: bool = False
    trace: list = field(default_factory=list)
    kl_trace: list = field(default_factory=list)

    def z_mean(self) -> np.ndarray:
        out = np.empty(self.blocking.dim)
        for b, m in zip(self.blocking.blocks, self.mean):
            out[b] = m
        return out

    def z_cov(self) -> np.ndarray:
        d = self.blocking.dim
        out = np.zeros((d, d))
        for b, c in zip(self.blocking.blocks, self.cov):
            out[np.ix_(b, b)] = c
        return out

    def to_json(self) -> dict:
        return {
            "blocks": self.blocking.to_json(),
            "W": [w.tolist() for w in self.W],
            "Gamma_c": [g.tolist() for g in self.Gamma_c],
            "loc": [l.tolist() for l in self.loc],
            "mean": [m.tolist() for m in self.mean],
            "cov": [c.tolist() for c in self.cov],
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": list(self.trace),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "VBState":
        blocking = Blocking(tuple(np.asarray(b, dtype=int) for b in doc["blocks"]))
        sizes = blocking.sizes
        d = blocking.dim

        def mats(key, shape_of):
            return [np.asarray(v, dtype=float).reshape(shape_of(n)) for v, n in zip(doc[key], sizes)]

        return cls(
            blocking=blocking,
            W=mats("W", lambda n: (n, d - n)),
            Gamma_c=mats("Gamma_c", lambda n: (n, n)),
            loc=mats("loc", lambda n: (n,)),
            mean=mats("mean", lambda n: (n,)),
            cov=mats("cov", lambda n: (n, n)),
            iterations=int(doc["iterations"]),
            converged=bool(doc["converged"]),
            trace=[float(t) for t in doc["trace"]],
        )


def _complement(block: np.ndarray, dim: int) -> np.ndarray:
    mask = np.ones(dim, dtype=bool)
    mask[block] = False
    return np.flatnonzero(mask)


def cavi_pfm(aug: AugmentedForm, blocking: Blocking | None = None, tol: float = 1e-6,
             max_iter: int = 1000, *, init: np.ndarray | None = None,
             settings: CdfSettings | None = None, track_kl: bool = False) -> VBState:
    """Coordinate ascent for the blocked partially factorized approximation.

    Block ``c`` is refreshed to ``TN(0; gamma_c + W_c (E[z_{-c}] - gamma_{-c}), Gamma_c)``
    in ascending block order with the freshest means. The starting point
    ignores the coupling (``W_c = 0``) unless ``init`` supplies E[zbar].
    """
    d = aug.dim
    blocking = blocking or single_block(d)
    blocking.validate(d)
    P = aug.Gamma_inv
    g = aug.gamma_pst
    comps, Ws, Gs = [], [], []
    for b in blocking.blocks:
        rest = _complement(b, d)
        Gc = np.linalg.inv(P[np.ix_(b, b)])
        Gc = 0.5 * (Gc + Gc.T)
        comps.append(rest)
        Gs.append(Gc)
        Ws.append(-Gc @ P[np.ix_(b, rest)])
    E = np.empty(d)
    locs, means, covs = [], [], []
    for b, rest, W, Gc in zip(blocking.blocks, comps, Ws, Gs):
        loc = g[b] + W @ (init[rest] - g[rest]) if init is not None else g[b].copy()
        m, c = tmvn_moments(np.zeros(len(b)), loc, Gc, settings=settings)
        locs.append(loc)
        means.append(m)
        covs.append(c)
        E[b] = m
    state = VBState(blocking, Ws, Gs, locs, means, covs)
    if track_kl:
        state.kl_trace.append(kl_zbar(state, aug, settings))
    for it in range(1, max_iter + 1):
        change = 0.0
        for k, (b, rest, W, Gc) in enumerate(zip(blocking.blocks, comps, Ws, Gs)):
            loc = g[b] + W @ (E[rest] - g[rest])
            m, c = tmvn_moments(np.zeros(len(b)), loc, Gc, settings=settings)
            change = max(change, float(np.max(np.abs(m - E[b]))))
            E[b] = m
            state.loc[k], state.mean[k], state.cov[k] = loc, m, c
        state.trace.append(change)
        state.iterations = it
        if track_kl:
            state.kl_trace.append(kl_zbar(state, aug, settings))
        if change <= tol:
            state.converged = True
            break
    return state


def vb_moments(state: VBState, aug: AugmentedForm) -> tuple[np.ndarray, np.ndarray]:
    """Approximate posterior mean and covariance of beta."""
    mean = aug.beta_mean(state.z_mean())
    G = aug.gain
    cov = aug.V_pst.values + G @ state.z_cov() @ G.T
    return mean, 0.5 * (cov + cov.T)


def sample_zbar(state: VBState, T: int, rng: np.random.Generator) -> np.ndarray:
    Z = np.empty((T, state.blocking.dim))
    for b, loc, Gc in zip(state.blocking.blocks, state.loc, state.Gamma_c):
        Z[:, b] = sample_tmvn(np.zeros(len(b)), loc, Gc, T, rng)
    return Z


def sample_vb(state: VBState, aug: AugmentedForm, T: int, rng=None) -> PosteriorDraws:
    """Draws from the approximate posterior: block latents first, then beta given them."""
    rng, seed = _resolve_rng(rng)
    Z = sample_zbar(state, T, rng)
    eps = rng.standard_normal((T, aug.q)) @ aug.V_pst.factor.T
    draws = aug.xi + (Z - aug.gamma_pst) @ aug.gain.T + eps
    meta = {"method": "pfm", "converged": state.converged, "iterations": state.iterations}
    return PosteriorDraws(draws, seed, meta)


def predict_vb(state: VBState, aug: AugmentedForm, spec: ModelSpec, x_new, T: int,
               rng=None) -> np.ndarray:
    """Class frequencies of simulated responses under approximate posterior draws."""
    rng, _ = _resolve_rng(rng)
    draws = sample_vb(state, aug, T, rng).draws
    return predict_frequencies(spec, x_new, draws, rng)


# --------------------------------------------------------------------------
# KL diagnostics


def _kl_blocks(aug: AugmentedForm, blocking: Blocking, locs, Gs, means, covs,
               settings: CdfSettings | None = None) -> float:
    """KL of a product of block truncated normals from the exact law of zbar."""
    d = aug.dim
    g = aug.gamma_pst
    P = aug.Gamma_inv
    E = np.empty(d)
    e_log_q = 0.0
    quad_trace = 0.0
    for b, loc, Gc, m, c in zip(blocking.blocks, locs, Gs, means, covs):
        E[b] = m
        spd = chol_psd(Gc, check_symmetric=False)
        diff = m - loc
        second = c + np.outer(diff, diff)
        log_z = mvn_cdf(loc, spd, settings=settings).log_prob
        e_log_q += (-0.5 * len(b) * LOG_2PI - 0.5 * spd.logdet
                    - 0.5 * float(np.sum(spd.inverse * second)) - log_z)
        quad_trace += float(np.sum(P[np.ix_(b, b)] * c))
    log_z_full = aug.post.log_normalizer(settings).log_prob
    r = E - g
    e_log_p = (-0.5 * d * LOG_2PI - 0.5 * aug.Gamma_pst.logdet
               - 0.5 * (float(r @ P @ r) + quad_trace) - log_z_full)
    return e_log_q - e_log_p


def kl_zbar(state: VBState, aug: AugmentedForm, settings: CdfSettings | None = None) -> float:
    """KL[q(zbar) || p(zbar | y)], which equals the joint KL for the fitted family."""
    return _kl_blocks(aug, state.blocking, state.loc, state.Gamma_c, state.mean, state.cov,
                      settings)


# --------------------------------------------------------------------------
# mean-field baseline


@dataclass
class MFState:
    beta_mean: np.ndarray
    beta_cov: np.ndarray
    blocking: Blocking
    loc: list
    Sigma_c: list
    mean: list
    cov: list
    iterations: int = 0
    converged: bool = False
    trace: list = field(default_factory=list)

    def z_mean(self) -> np.ndarray:
        out = np.empty(self.blocking.dim)
        for b, m in zip(self.blocking.blocks, self.mean):
            out[b] = m
        return out

    def z_cov(self) -> np.ndarray:
        d = self.blocking.dim
        out = np.zeros((d, d))
        for b, c in zip(self.blocking.blocks, self.cov):
            out[np.ix_(b, b)] = c
        return out


def cavi_mf(aug: AugmentedForm, blocking: Blocking, tol: float = 1e-6, max_iter: int = 1000,
            *, init_beta: np.ndarray | None = None,
            settings: CdfSettings | None = None) -> MFState:
    """Mean-field q(beta) q(zbar) with q(zbar) factorized over ``blocking``.

    Requires ``Sigma_pst`` to be block diagonal with respect to the blocking,
    which holds for unit blocks under the probit likelihoods.
    """
    d = aug.dim
    blocking.validate(d)
    S = aug.Sigma_pst
    for k, b in enumerate(blocking.blocks):
        rest = _complement(b, d)
        if len(rest) and np.max(np.abs(S[np.ix_(b, rest)])) > 1e-10:
            raise ValueError("Sigma_pst is not block diagonal with respect to the blocking")
    Sc = [0.5 * (S[np.ix_(b, b)] + S[np.ix_(b, b)].T) for b in blocking.blocks]
    mb = aug.xi.copy() if init_beta is None else np.asarray(init_beta, dtype=float).copy()
    E = np.full(d, np.nan)
    locs, means, covs, trace = [None] * len(Sc), [None] * len(Sc), [None] * len(Sc), []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        lin = aug.eta_pst + aug.X_pst @ mb
        newE = np.empty(d)
        for k, b in enumerate(blocking.blocks):
            loc = lin[b]
            m, c = tmvn_moments(np.zeros(len(b)), loc, Sc[k], settings=settings)
            locs[k], means[k], covs[k] = loc, m, c
            newE[b] = m
        change = float(np.max(np.abs(newE - E), initial=0.0)) if np.all(np.isfinite(E)) else math.inf
        E = newE
        mb = aug.beta_mean(E)
        trace.append(change)
        if change <= tol:
            converged = True
            break
    return MFState(beta_mean=mb, beta_cov=aug.V_pst.values.copy(), blocking=blocking, loc=locs,
                   Sigma_c=Sc, mean=means, cov=covs, iterations=it, converged=converged,
                   trace=trace)


def kl_mf(state: MFState, aug: AugmentedForm, settings: CdfSettings | None = None) -> float:
    """KL[q(beta) q(zbar) || p(beta, zbar | y)] for a mean-field solution.

    By the chain rule this is the KL of q(zbar) from p(zbar | y) plus the
    expected KL of q(beta) from the exact Gaussian p(beta | zbar).
    """
    kz = _kl_blocks(aug, state.blocking, state.loc, state.Sigma_c, state.mean, state.cov,
                    settings)
    G = aug.gain
    V = aug.V_pst
    r = state.beta_mean - aug.beta_mean(state.z_mean())
    A = V.half_solve(G)
    kb = 0.5 * (float(r @ V.solve(r)) + float(np.sum((A.T @ A) * state.z_cov())))
    return kz + kb
