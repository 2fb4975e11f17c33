"""Multinomial probit likelihoods written as Gaussian orthant probabilities.

Each family turns its data into a pair ``(Xbar, Lambda)`` such that

    p(y | beta) = Phi_m(Xbar @ beta; Lambda),

with ``Lambda`` block diagonal over units. Class labels are 1-based, as in the
usual statement of the models. Coefficients for the class-specific and
sequential families are stacked as ``(beta_1, ..., beta_{L-1})``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

from .errors import DimensionMismatch, UnknownLabel
from .gauss import CdfSettings, chol_psd, mvn_cdf


class Family(str, enum.Enum):
    DISCRETE_CHOICE = "DiscreteChoice"
    CLASS_SPECIFIC = "ClassSpecific"
    SEQUENTIAL = "Sequential"

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, cls):
            return value
        key = str(value).replace("_", "").replace("-", "").lower()
        for fam in cls:
            if fam.value.lower() == key:
                return fam
        raise ValueError(f"unknown model family {value!r}")


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    L: int
    p: int
    Sigma: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        if self.L < 2:
            raise ValueError("need at least two classes")
        if self.p < 1:
            raise ValueError("need at least one predictor")
        if self.family is Family.SEQUENTIAL or self.Sigma is None:
            object.__setattr__(self, "Sigma", np.eye(self.L))
        else:
            S = np.asarray(self.Sigma, dtype=float)
            if S.shape != (self.L, self.L):
                raise DimensionMismatch(f"Sigma must be {self.L}x{self.L}, got {S.shape}")
            chol_psd(S)
            object.__setattr__(self, "Sigma", S)

    @property
    def q(self) -> int:
        if self.family is Family.DISCRETE_CHOICE:
            return self.p
        return self.p * (self.L - 1)

    def x_shape(self) -> tuple[int, ...]:
        """Shape of one unit's predictor input."""
        if self.family is Family.DISCRETE_CHOICE:
            return (self.L, self.p)
        return (self.p,)


@dataclass(frozen=True)
class Dataset:
    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y).astype(int).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.shape[0] != y.shape[0]:
            raise DimensionMismatch(f"{len(y)} labels but {X.shape[0]} predictor rows")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class ProbitLikelihood:
    """Stacked design ``Xbar`` with per-unit blocks of ``Lambda``."""

    Xbar: np.ndarray
    Lambda_blocks: tuple
    unit_blocks: tuple

    @property
    def m(self) -> int:
        return self.Xbar.shape[0]

    @property
    def q(self) -> int:
        return self.Xbar.shape[1]

    @property
    def n_units(self) -> int:
        return len(self.unit_blocks)

    @cached_property
    def Lambda(self) -> np.ndarray:
        if not self.Lambda_blocks:
            return np.zeros((0, 0))
        return linalg.block_diag(*self.Lambda_blocks)

    def append(self, rows: np.ndarray, block: np.ndarray) -> "ProbitLikelihood":
        start = self.m
        return ProbitLikelihood(
            Xbar=np.vstack([self.Xbar, rows]),
            Lambda_blocks=self.Lambda_blocks + (block,),
            unit_blocks=self.unit_blocks + ((start, start + rows.shape[0]),),
        )

    @classmethod
    def empty(cls, q: int) -> "ProbitLikelihood":
        return cls(Xbar=np.zeros((0, q)), Lambda_blocks=(), unit_blocks=())


def _check_label(label: int, L: int) -> int:
    label = int(label)
    if not 1 <= label <= L:
        raise UnknownLabel(f"label {label} outside 1..{L}")
    return label


def discrete_choice_block(x: np.ndarray, label: int, Sigma: np.ndarray):
    """Rows ``x_y - x_k`` for ``k != y`` in ascending order and the matching covariance."""
    L = x.shape[0]
    y = _check_label(label, L) - 1
    others = [k for k in range(L) if k != y]
    rows = x[y] - x[others]
    V = np.zeros((L - 1, L))
    V[:, y] = 1.0
    V[np.arange(L - 1), others] = -1.0
    block = V @ Sigma @ V.T
    return rows, 0.5 * (block + block.T)


def class_specific_covariates(x: np.ndarray, L: int) -> np.ndarray:
    """Working covariates ``vbar_l kron x`` for every class; the last class is zero."""
    p = x.shape[0]
    out = np.zeros((L, p * (L - 1)))
    for l in range(L - 1):
        out[l, l * p:(l + 1) * p] = x
    return out


def sequential_block(x: np.ndarray, label: int, L: int):
    """Rows ``-x`` for every class before ``label`` and ``+x`` at ``label`` (absent if last)."""
    y = _check_label(label, L)
    p = x.shape[0]
    n_i = min(y, L - 1)
    rows = np.zeros((n_i, p * (L - 1)))
    for l in range(n_i):
        sign = 1.0 if l == y - 1 else -1.0
        rows[l, l * p:(l + 1) * p] = sign * x
    return rows, np.eye(n_i)


def unit_block(spec: ModelSpec, x, label: int):
    """``(rows, Lambda_block)`` contributed by one unit."""
    x = np.asarray(x, dtype=float)
    if x.shape != spec.x_shape():
        raise DimensionMismatch(f"unit predictors have shape {x.shape}, expected {spec.x_shape()}")
    if spec.family is Family.DISCRETE_CHOICE:
        return discrete_choice_block(x, label, spec.Sigma)
    if spec.family is Family.CLASS_SPECIFIC:
        _check_label(label, spec.L)
        return discrete_choice_block(class_specific_covariates(x, spec.L), label, spec.Sigma)
    return sequential_block(x, label, spec.L)


def _build(spec: ModelSpec, data: Dataset) -> ProbitLikelihood:
    if data.n and data.X.shape[1:] != spec.x_shape():
        raise DimensionMismatch(f"predictors have shape {data.X.shape}, expected (n, *{spec.x_shape()})")
    rows, blocks, bounds = [], [], []
    start = 0
    for x, label in zip(data.X, data.y):
        r, b = unit_block(spec, x, label)
        rows.append(r)
        blocks.append(b)
        bounds.append((start, start + r.shape[0]))
        start += r.shape[0]
    Xbar = np.vstack(rows) if rows else np.zeros((0, spec.q))
    return ProbitLikelihood(Xbar=Xbar, Lambda_blocks=tuple(blocks), unit_blocks=tuple(bounds))


def build_discrete_choice(spec: ModelSpec, data: Dataset) -> ProbitLikelihood:
    if spec.family is not Family.DISCRETE_CHOICE:
        raise ValueError("spec is not a discrete choice model")
    return _build(spec, data)


def build_class_specific(spec: ModelSpec, data: Dataset) -> ProbitLikelihood:
    if spec.family is not Family.CLASS_SPECIFIC:
        raise ValueError("spec is not a class-specific model")
    return _build(spec, data)


def build_sequential(spec: ModelSpec, data: Dataset) -> ProbitLikelihood:
    if spec.family is not Family.SEQUENTIAL:
        raise ValueError("spec is not a sequential model")
    return _build(spec, data)


def build_likelihood(spec: ModelSpec, data: Dataset) -> ProbitLikelihood:
    return _build(spec, data)


def build_expanded(lik: ProbitLikelihood, spec: ModelSpec, x_new, label: int) -> ProbitLikelihood:
    """Append the block of a hypothetical new unit with response ``label``."""
    rows, block = unit_block(spec, x_new, label)
    return lik.append(rows, block)


def unit_log_likelihoods(lik: ProbitLikelihood, beta, settings: CdfSettings | None = None,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (lik.q,):
        raise DimensionMismatch(f"beta must have length {lik.q}")
    lin = lik.Xbar @ beta
    out = np.empty(lik.n_units)
    for i, ((a, b), block) in enumerate(zip(lik.unit_blocks, lik.Lambda_blocks)):
        out[i] = mvn_cdf(lin[a:b], block, settings=settings, rng=rng).log_prob
    return out


def likelihood_eval(lik: ProbitLikelihood, beta, settings: CdfSettings | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """log p(y | beta), summed over independent unit blocks."""
    return float(np.sum(unit_log_likelihoods(lik, beta, settings, rng)))


def class_log_probs(spec: ModelSpec, x, beta, settings: CdfSettings | None = None) -> np.ndarray:
    """log P(y = l | beta, x) for every class ``l``."""
    beta = np.asarray(beta, dtype=float)
    out = np.empty(spec.L)
    for label in range(1, spec.L + 1):
        rows, block = unit_block(spec, x, label)
        out[label - 1] = mvn_cdf(rows @ beta, block, settings=settings).log_prob
    return out


# --------------------------------------------------------------------------
# generative side


def utilities_mean(spec: ModelSpec, X: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Noise-free latent utilities, shape ``(n, L)`` or ``(n, L-1)`` for sequential."""
    if spec.family is Family.DISCRETE_CHOICE:
        return X @ beta
    B = beta.reshape(spec.L - 1, spec.p)
    mean = X @ B.T
    if spec.family is Family.CLASS_SPECIFIC:
        mean = np.hstack([mean, np.zeros((X.shape[0], 1))])
    return mean


def labels_from_latents(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    """1-based labels implied by latent draws ``z`` with shape ``(..., L)`` or ``(..., L-1)``.

    Choice models take the argmax (ties to the smallest index); the sequential
    model stops at the first positive latent and falls through to class L.
    """
    if spec.family is Family.SEQUENTIAL:
        pos = z > 0
        first = np.argmax(pos, axis=-1)
        return np.where(pos.any(axis=-1), first + 1, spec.L)
    return np.argmax(z, axis=-1) + 1


def simulate_labels(spec: ModelSpec, X: np.ndarray, beta: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw responses from the model at coefficient ``beta``."""
    mean = utilities_mean(spec, X, np.asarray(beta, dtype=float))
    if spec.family is Family.SEQUENTIAL:
        noise = rng.standard_normal(mean.shape)
    else:
        noise = rng.standard_normal(mean.shape) @ chol_psd(spec.Sigma).factor.T
    return labels_from_latents(spec, mean + noise)


def draw_utilities(spec: ModelSpec, x, betas: np.ndarray) -> np.ndarray:
    """Noise-free latent utilities of one unit under each row of ``betas``."""
    x = np.asarray(x, dtype=float)
    if x.shape != spec.x_shape():
        raise DimensionMismatch(f"unit predictors have shape {x.shape}, expected {spec.x_shape()}")
    betas = np.atleast_2d(betas)
    if spec.family is Family.DISCRETE_CHOICE:
        return betas @ x.T
    mean = betas.reshape(len(betas), spec.L - 1, spec.p) @ x
    if spec.family is Family.CLASS_SPECIFIC:
        mean = np.hstack([mean, np.zeros((len(betas), 1))])
    return mean


def predict_frequencies(spec: ModelSpec, x, betas: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Relative class frequencies of responses simulated once per coefficient draw."""
    mean = draw_utilities(spec, x, betas)
    if spec.family is Family.SEQUENTIAL:
        noise = rng.standard_normal(mean.shape)
    else:
        noise = rng.standard_normal(mean.shape) @ chol_psd(spec.Sigma).factor.T
    labels = labels_from_latents(spec, mean + noise)
    return np.bincount(labels - 1, minlength=spec.L) / len(labels)
