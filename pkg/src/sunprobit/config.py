"""Run configuration for the command line interface."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .gauss import CdfSettings
from .models import Family
from .sun import SunParams

METHODS = ("exact", "pfm", "mf")


def parse_number(v):
    """Float from a JSON value, accepting the strings "inf" and "-inf"."""
    if isinstance(v, str):
        key = v.strip().lower()
        if key in ("inf", "+inf", "infinity"):
            return math.inf
        if key in ("-inf", "-infinity"):
            return -math.inf
        raise ConfigError(f"expected a number, got {v!r}")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"expected a number, got {v!r}")
    return float(v)


def parse_array(v, name: str) -> np.ndarray:
    def walk(x):
        if isinstance(x, list):
            return [walk(e) for e in x]
        return parse_number(x)

    try:
        arr = np.asarray(walk(v), dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{name}: ragged array") from exc
    return arr


@dataclass
class PriorConfig:
    kind: str = "gaussian"
    xi: object = 0.0
    omega_scale: float | None = 5.0
    Omega: object = None
    Delta: object = None
    gamma: object = None
    Gamma: object = None

    def build(self, q: int) -> SunParams:
        """Prior over ``q`` coefficients; scalars broadcast."""
        xi = parse_array(self.xi, "prior.xi")
        if xi.ndim == 0:
            xi = np.full(q, float(xi))
        if xi.shape != (q,):
            raise ConfigError(f"prior.xi must have length {q}, got {xi.shape}")
        if self.Omega is not None:
            Omega = parse_array(self.Omega, "prior.Omega")
            if Omega.shape != (q, q):
                raise ConfigError(f"prior.Omega must be {q}x{q}, got {Omega.shape}")
        else:
            if self.omega_scale is None or self.omega_scale <= 0:
                raise ConfigError("prior.omega_scale must be positive")
            Omega = self.omega_scale**2 * np.eye(q)
        if self.kind == "gaussian":
            try:
                return SunParams.gaussian(xi, Omega)
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise ConfigError(f"invalid Gaussian prior: {exc}") from exc
        gamma = parse_array(self.gamma if self.gamma is not None else [], "prior.gamma").ravel()
        h = len(gamma)
        Delta = parse_array(self.Delta if self.Delta is not None else [], "prior.Delta")
        Gamma = parse_array(self.Gamma if self.Gamma is not None else [], "prior.Gamma")
        if Delta.size != q * h or Gamma.size != h * h:
            raise ConfigError(f"prior.Delta must be {q}x{h} and prior.Gamma {h}x{h}")
        try:
            return SunParams(xi=xi, Omega=Omega, Delta=Delta.reshape(q, h), gamma=gamma,
                             Gamma=Gamma.reshape(h, h))
        except Exception as exc:
            raise ConfigError(f"invalid SUN prior: {exc}") from exc


@dataclass
class RunConfig:
    family: Family | None = None
    L: int | None = None
    response: str = "y"
    predictors: list | None = None
    attributes: list | None = None
    prior: PriorConfig = field(default_factory=PriorConfig)
    Sigma: object = "identity"
    method: str = "exact"
    draws: int = 10000
    seed: int | None = None
    standardize: bool = True
    intercept: bool = True
    evidence: bool = False
    cdf_tol: float = 1e-5
    cdf_rel_tol: float = 1e-3
    cdf_max_points: int = 12 * 2**17
    vb_tol: float = 1e-6
    vb_max_iter: int = 1000
    predict_draws: int = 10000
    folds: int | None = None

    @property
    def cdf(self) -> CdfSettings:
        return CdfSettings(tol=self.cdf_tol, rel_tol=self.cdf_rel_tol,
                           max_points=self.cdf_max_points)

    def sigma_matrix(self, L: int) -> np.ndarray | None:
        if self.Sigma is None or (isinstance(self.Sigma, str) and self.Sigma == "identity"):
            return None
        S = parse_array(self.Sigma, "Sigma")
        if S.shape != (L, L):
            raise ConfigError(f"Sigma must be {L}x{L}, got {S.shape}")
        return S


_TOP_KEYS = {
    "family", "L", "response", "predictors", "attributes", "prior", "Sigma", "method", "draws",
    "seed", "standardize", "intercept", "evidence", "tolerances", "predict_draws", "holdout",
}
_TOL_KEYS = {"cdf_tol", "cdf_rel_tol", "cdf_max_points", "vb_tol", "vb_max_iter"}
_PRIOR_KEYS = {"type", "xi", "omega_scale", "Omega", "Delta", "gamma", "Gamma"}


def _int(v, name, minimum=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{name} must be >= {minimum}")
    return v


def _bool(v, name):
    if not isinstance(v, bool):
        raise ConfigError(f"{name} must be true or false")
    return v


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig()
    if "family" in doc:
        try:
            cfg.family = Family.parse(doc["family"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if "L" in doc:
        cfg.L = _int(doc["L"], "L", 2)
    if "response" in doc:
        if not isinstance(doc["response"], str):
            raise ConfigError("response must be a column name")
        cfg.response = doc["response"]
    for key in ("predictors", "attributes"):
        if key in doc:
            v = doc[key]
            if not isinstance(v, list) or not all(isinstance(e, str) for e in v):
                raise ConfigError(f"{key} must be a list of column names")
            setattr(cfg, key, list(v))
    if "prior" in doc:
        p = doc["prior"]
        if not isinstance(p, dict):
            raise ConfigError("prior must be an object")
        unknown = set(p) - _PRIOR_KEYS
        if unknown:
            raise ConfigError(f"unknown prior keys: {sorted(unknown)}")
        kind = p.get("type", "gaussian")
        if kind not in ("gaussian", "sun"):
            raise ConfigError("prior.type must be 'gaussian' or 'sun'")
        scale = p.get("omega_scale", 5.0 if "Omega" not in p else None)
        cfg.prior = PriorConfig(
            kind=kind, xi=p.get("xi", 0.0),
            omega_scale=None if scale is None else parse_number(scale),
            Omega=p.get("Omega"), Delta=p.get("Delta"), gamma=p.get("gamma"), Gamma=p.get("Gamma"),
        )
    if "Sigma" in doc:
        cfg.Sigma = doc["Sigma"]
        if isinstance(cfg.Sigma, str) and cfg.Sigma != "identity":
            raise ConfigError("Sigma must be 'identity' or a matrix")
    if "method" in doc:
        if doc["method"] not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        cfg.method = doc["method"]
    if "draws" in doc:
        cfg.draws = _int(doc["draws"], "draws", 1)
    if "predict_draws" in doc:
        cfg.predict_draws = _int(doc["predict_draws"], "predict_draws", 1)
    if "seed" in doc and doc["seed"] is not None:
        cfg.seed = _int(doc["seed"], "seed", 0)
    for key in ("standardize", "intercept", "evidence"):
        if key in doc:
            setattr(cfg, key, _bool(doc[key], key))
    if "tolerances" in doc:
        t = doc["tolerances"]
        if not isinstance(t, dict) or set(t) - _TOL_KEYS:
            raise ConfigError(f"tolerances accepts only {sorted(_TOL_KEYS)}")
        for key in ("cdf_tol", "cdf_rel_tol", "vb_tol"):
            if key in t:
                val = parse_number(t[key])
                if not val > 0:
                    raise ConfigError(f"{key} must be positive")
                setattr(cfg, key, val)
        for key in ("cdf_max_points", "vb_max_iter"):
            if key in t:
                setattr(cfg, key, _int(t[key], key, 1))
    if "holdout" in doc:
        h = doc["holdout"]
        if not isinstance(h, dict) or set(h) - {"folds"}:
            raise ConfigError("holdout accepts only {'folds': k}")
        cfg.folds = _int(h["folds"], "holdout.folds", 2)
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(doc)
