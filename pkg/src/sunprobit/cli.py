"""Batch command line interface: ``sunprobit fit|evidence|predict``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np
from scipy import stats

from .config import RunConfig, config_from_dict, load_config
from .errors import (
    CapExceeded,
    ConfigError,
    DataError,
    DimensionMismatch,
    DimensionTooLarge,
    QOverCap,
    SunProbitError,
)
from .ingest import Preprocessor, fit_preprocessor, ingest, ingest_new, read_table
from .models import Dataset, Family, build_likelihood, predict_frequencies
from .sun import SAMPLER_CAP, SunParams, evidence_details, posterior_update, \
    predict_from_posterior, sample_posterior
from .vb import MFState, VBState, augmented_form, cavi_mf, cavi_pfm, default_blocking, \
    sample_vb, vb_moments

SCHEMA = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CAP = 0, 2, 3, 4, 5
QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)

# independent random streams per stage, derived from the master seed
STAGE_FIT, STAGE_PREDICT, STAGE_FOLDS = 1, 2, 3


def stage_rng(seed: int, *stage) -> np.random.Generator:
    return np.random.default_rng([seed, *stage])


class Timer:
    def __init__(self):
        self.stages = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = timer.stages.get(name, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


# --------------------------------------------------------------------------
# fitted model


class Fitted:
    """Posterior plus whatever the chosen method needs for summaries and prediction."""

    def __init__(self, cfg: RunConfig, cfg_doc: dict, pre: Preprocessor, post: SunParams,
                 seed: int | None, vb: VBState | None = None, mf: MFState | None = None):
        self.cfg, self.cfg_doc, self.pre, self.post, self.seed = cfg, cfg_doc, pre, post, seed
        self.vb, self.mf = vb, mf
        self.spec = pre.spec(cfg.sigma_matrix(pre.L) if pre.family is not Family.SEQUENTIAL
                             else None)
        self._aug = None

    @property
    def aug(self):
        if self._aug is None:
            self._aug = augmented_form(self.post)
        return self._aug

    def to_json(self) -> dict:
        doc = {"config": self.cfg_doc, "preprocess": self.pre.to_json(), "seed": self.seed,
               "posterior": self.post.to_json()}
        if self.vb is not None:
            doc["vb"] = self.vb.to_json()
        if self.mf is not None:
            doc["mf"] = {"beta_mean": self.mf.beta_mean.tolist(),
                         "iterations": self.mf.iterations, "converged": self.mf.converged}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Fitted":
        cfg = config_from_dict(doc["config"])
        pre = Preprocessor.from_json(doc["preprocess"])
        post = SunParams.from_json(doc["posterior"], validate=False)
        vb = VBState.from_json(doc["vb"]) if "vb" in doc else None
        fitted = cls(cfg, doc["config"], pre, post, doc.get("seed"), vb=vb)
        if "mf" in doc:
            m = doc["mf"]
            fitted.mf = MFState(beta_mean=np.asarray(m["beta_mean"], dtype=float),
                                beta_cov=fitted.aug.V_pst.values, blocking=None, loc=[],
                                Sigma_c=[], mean=[], cov=[], iterations=int(m["iterations"]),
                                converged=bool(m["converged"]))
        return fitted


def _require_seed(seed, what):
    if seed is None:
        raise ConfigError(f"{what} is stochastic and needs a seed (--seed or config 'seed')")
    return seed


def _check_sigma(cfg: RunConfig, pre: Preprocessor, flags: list):
    S = cfg.sigma_matrix(pre.L)
    if S is None:
        return
    if pre.family is Family.SEQUENTIAL:
        flags.append({"kernel": "config", "message": "Sigma is ignored for the Sequential family"})
    elif not np.allclose(np.diag(S), 1.0):
        flags.append({"kernel": "config",
                      "message": "Sigma is not correlation-normalized; coefficients may not be "
                                 "identified"})


def _post_flags(post: SunParams, flags: list):
    jit = max(post.Gamma_spd.jitter_applied, post.Omega_spd.jitter_applied) if post.h else \
        post.Omega_spd.jitter_applied
    if jit > 0:
        flags.append({"kernel": "gauss", "message": f"jitter {jit!r} added to a factorization"})


def fit_model(cfg: RunConfig, cfg_doc: dict, pre: Preprocessor, data: Dataset, seed,
              flags: list, timer: Timer) -> Fitted:
    _check_sigma(cfg, pre, flags)
    with timer("likelihood"):
        try:
            spec = pre.spec(cfg.sigma_matrix(pre.L) if pre.family is not Family.SEQUENTIAL
                            else None)
        except DimensionMismatch as exc:
            raise ConfigError(str(exc)) from exc
        lik = build_likelihood(spec, data)
        prior = cfg.prior.build(spec.q)
        if cfg.method == "exact" and prior.h + lik.m > SAMPLER_CAP:
            raise CapExceeded(f"method=exact supports h+m <= {SAMPLER_CAP}, got "
                              f"{prior.h + lik.m}; use method=pfm for larger problems")
        post = posterior_update(prior, lik)
    fitted = Fitted(cfg, cfg_doc, pre, post, seed)
    if cfg.method == "exact":
        return fitted
    with timer("cavi"):
        blocking = default_blocking(lik, prior.h)
        aug = fitted.aug
        try:
            if cfg.method == "pfm":
                fitted.vb = cavi_pfm(aug, blocking, cfg.vb_tol, cfg.vb_max_iter, settings=None)
                state = fitted.vb
            else:
                fitted.mf = cavi_mf(aug, blocking, cfg.vb_tol, cfg.vb_max_iter)
                state = fitted.mf
        except DimensionTooLarge as exc:
            raise CapExceeded(str(exc)) from exc
        except ValueError as exc:
            raise ConfigError(f"method={cfg.method}: {exc}") from exc
    if not state.converged:
        flags.append({"kernel": "vb", "message": f"CAVI did not converge in {state.iterations} "
                                                 "iterations; moments are from the last sweep"})
    return fitted


def _summaries(names, mean, sd, quant):
    out = []
    for k, name in enumerate(names):
        row = {"name": name, "mean": float(mean[k]), "sd": float(sd[k])}
        for level, val in zip(QUANTILES, quant[:, k]):
            row[f"q{level:g}"] = float(val)
        out.append(row)
    return out


def posterior_summary(fitted: Fitted, seed, T: int, flags: list, timer: Timer):
    """Coefficient summaries, method metadata and optional draws."""
    cfg, post = fitted.cfg, fitted.post
    names = fitted.pre.coefficient_names
    meta = {"method": cfg.method, "q": post.q, "h_plus_m": post.h}
    draws = None
    if cfg.method == "exact":
        seed = _require_seed(seed, "method=exact")
        with timer("sampling"):
            res = sample_posterior(post, cfg.draws, stage_rng(seed, STAGE_FIT))
        draws = res.draws
        meta.update(draws=cfg.draws, sampler=res.meta.get("method"))
        if "acceptance" in res.meta:
            meta["acceptance"] = res.meta["acceptance"]
        for f in res.meta.get("flags", []):
            flags.append({"kernel": "tmvn", "message": f})
        if res.meta.get("jitter", 0) > 0:
            flags.append({"kernel": "gauss", "message": f"jitter {res.meta['jitter']!r} added"})
        mean, sd = draws.mean(axis=0), draws.std(axis=0, ddof=1) if cfg.draws > 1 else \
            np.zeros(post.q)
        quant = np.quantile(draws, QUANTILES, axis=0)
    elif cfg.method == "pfm":
        seed = _require_seed(seed, "method=pfm")
        aug = fitted.aug
        mean, cov = vb_moments(fitted.vb, aug)
        sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
        with timer("sampling"):
            draws = sample_vb(fitted.vb, aug, cfg.draws, stage_rng(seed, STAGE_FIT)).draws
        quant = np.quantile(draws, QUANTILES, axis=0)
        meta.update(draws=cfg.draws, iterations=fitted.vb.iterations,
                    converged=fitted.vb.converged)
    else:
        mean = fitted.mf.beta_mean
        sd = np.sqrt(np.diag(fitted.mf.beta_cov))
        quant = mean + np.outer(stats.norm.ppf(QUANTILES), sd)
        meta.update(iterations=fitted.mf.iterations, converged=fitted.mf.converged)
    return _summaries(names, mean, sd, quant), meta, draws


def mf_draws(fitted: Fitted, T: int, rng: np.random.Generator) -> np.ndarray:
    F = fitted.aug.V_pst.factor
    return fitted.mf.beta_mean + rng.standard_normal((T, len(fitted.mf.beta_mean))) @ F.T


# --------------------------------------------------------------------------
# prediction


def predict_rows(fitted: Fitted, X: np.ndarray, rng_seed, flags: list, timer: Timer) -> np.ndarray:
    """Predictive class probabilities, one row per unit of ``X``."""
    cfg, spec = fitted.cfg, fitted.spec
    P = np.empty((X.shape[0], spec.L))
    with timer("prediction"):
        if cfg.method == "exact":
            missed = 0
            for i in range(X.shape[0]):
                pred = predict_from_posterior(fitted.post, spec, X[i], cfg.cdf)
                P[i] = pred.probs
                missed += not pred.tol_met
            if missed:
                flags.append({"kernel": "gauss", "message": f"CDF tolerance not met for {missed} "
                                                            "predictive evaluations"})
            return P
        seed = _require_seed(rng_seed, f"prediction with method={cfg.method}")
        rng = stage_rng(seed, STAGE_PREDICT)
        if cfg.method == "pfm":
            draws = sample_vb(fitted.vb, fitted.aug, cfg.predict_draws, rng).draws
        else:
            draws = mf_draws(fitted, cfg.predict_draws, rng)
        for i in range(X.shape[0]):
            P[i] = predict_frequencies(spec, X[i], draws, rng)
    return P


def prediction_table(P: np.ndarray, y, pre: Preprocessor) -> dict:
    # ties resolve to the lowest class index
    labels = np.argmax(P, axis=1) + 1
    rows = []
    for i, (p, lab) in enumerate(zip(P, labels)):
        row = {"row": i + 1, "probs": [float(v) for v in p], "label": int(lab)}
        if pre.label_map is not None:
            row["label_name"] = pre.label_map[lab - 1]
        if y is not None:
            row["observed"] = int(y[i])
        rows.append(row)
    out = {"rows": rows}
    if y is not None and len(y):
        out["accuracy"] = float(np.mean(labels == y))
    return out


# --------------------------------------------------------------------------
# commands


def _load(args):
    if not args.config:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    cfg_doc = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.folds is not None:
        cfg.folds = args.folds
    return cfg, cfg_doc


def _need_data(args):
    if not args.data:
        raise ConfigError("--data is required")
    return args.data


def cmd_fit(args, timer, flags):
    cfg, cfg_doc = _load(args)
    with timer("ingest"):
        data, pre = ingest(_need_data(args), cfg)
    fitted = fit_model(cfg, cfg_doc, pre, data, cfg.seed, flags, timer)
    _post_flags(fitted.post, flags)
    summary, meta, draws = posterior_summary(fitted, cfg.seed, cfg.draws, flags, timer)
    result = {"command": "fit", "seed": cfg.seed,
              "model": {"family": pre.family.value, "L": pre.L, "p": pre.p, "q": fitted.post.q,
                        "n": data.n},
              "preprocessing": pre.report, "method": meta, "coefficients": summary}
    if cfg.evidence:
        with timer("evidence"):
            result["evidence"] = _evidence(cfg, pre, data, flags)
    if args.newdata:
        X, y = ingest_new(args.newdata, pre, cfg.response)
        result["predictions"] = prediction_table(predict_rows(fitted, X, cfg.seed, flags, timer),
                                                 y, pre)
    if args.draws_out:
        if draws is None:
            draws = mf_draws(fitted, cfg.draws, stage_rng(_require_seed(cfg.seed, "draws"),
                                                          STAGE_FIT))
        write_draws(args.draws_out, draws)
    result["fitted"] = fitted.to_json()
    return result


def _evidence(cfg, pre, data, flags):
    spec = pre.spec(cfg.sigma_matrix(pre.L) if pre.family is not Family.SEQUENTIAL else None)
    lik = build_likelihood(spec, data)
    prior = cfg.prior.build(spec.q)
    res = evidence_details(prior, lik, cfg.cdf)
    if not res.tol_met:
        flags.append({"kernel": "gauss", "message": "CDF tolerance not met for the evidence"})
    return {"log_evidence": res.log_evidence, "rel_err_estimate": res.err_estimate,
            "tol_met": res.tol_met, "m": lik.m}


def cmd_evidence(args, timer, flags):
    cfg, _ = _load(args)
    with timer("ingest"):
        data, pre = ingest(_need_data(args), cfg)
    _check_sigma(cfg, pre, flags)
    with timer("evidence"):
        ev = _evidence(cfg, pre, data, flags)
    return {"command": "evidence", "model": {"family": pre.family.value, "L": pre.L, "p": pre.p,
                                             "n": data.n},
            "preprocessing": pre.report, **ev}


def cmd_predict(args, timer, flags):
    if args.fitted:
        try:
            doc = json.loads(Path(args.fitted).read_text())
            fitted = Fitted.from_json(doc["fitted"] if "fitted" in doc else doc)
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"cannot load fitted model {args.fitted}: {exc}") from exc
        if args.seed is not None:
            fitted.seed = args.seed
        if not args.newdata:
            raise ConfigError("--newdata is required with --fitted")
        X, y = ingest_new(args.newdata, fitted.pre, fitted.cfg.response)
        P = predict_rows(fitted, X, fitted.seed, flags, timer)
        return {"command": "predict", "seed": fitted.seed, "method": fitted.cfg.method,
                "predictions": prediction_table(P, y, fitted.pre)}
    cfg, cfg_doc = _load(args)
    if cfg.folds and not args.newdata:
        return cross_validate(cfg, cfg_doc, _need_data(args), flags, timer)
    with timer("ingest"):
        data, pre = ingest(_need_data(args), cfg)
    if not args.newdata:
        raise ConfigError("predict needs --newdata, --fitted or --folds")
    fitted = fit_model(cfg, cfg_doc, pre, data, cfg.seed, flags, timer)
    X, y = ingest_new(args.newdata, pre, cfg.response)
    P = predict_rows(fitted, X, cfg.seed, flags, timer)
    return {"command": "predict", "seed": cfg.seed, "method": cfg.method,
            "predictions": prediction_table(P, y, pre)}


def cross_validate(cfg, cfg_doc, path, flags, timer):
    """K-fold holdout accuracy; fold assignment and per-fold streams come from the seed."""
    seed = _require_seed(cfg.seed, "cross-validation")
    table = read_table(path)
    K = cfg.folds
    if table.n < K:
        raise ConfigError(f"{K} folds need at least {K} rows")
    perm = stage_rng(seed, STAGE_FOLDS).permutation(table.n)
    folds = np.array_split(perm, K)
    out, correct = [], 0
    for k, test in enumerate(folds):
        test_set = set(test.tolist())
        train_rows = [r for i, r in enumerate(table.rows) if i not in test_set]
        test_rows = [table.rows[i] for i in sorted(test_set)]
        train = type(table)(table.header, train_rows)
        pre = fit_preprocessor(train, cfg)
        data = Dataset(pre.labels(train.column(cfg.response)), pre.design(train))
        fold_seed = int(stage_rng(seed, STAGE_FOLDS, k).integers(2**63))
        fitted = fit_model(cfg, cfg_doc, pre, data, fold_seed, flags, timer)
        test_tab = type(table)(table.header, test_rows)
        X = pre.design(test_tab)
        y = pre.labels(test_tab.column(cfg.response))
        P = predict_rows(fitted, X, fold_seed, flags, timer)
        acc = float(np.mean(np.argmax(P, axis=1) + 1 == y))
        correct += int(round(acc * len(y)))
        out.append({"fold": k + 1, "n_test": len(y), "accuracy": acc, "seed": fold_seed})
    return {"command": "predict", "seed": seed, "method": cfg.method, "folds": out,
            "accuracy": correct / table.n}


def cmd_oracle(args, timer, flags):
    """Reference values for the given data: quadrature evidence and rejection moments."""
    from .oracles import quadrature_evidence, rejection_sample_sun

    cfg, _ = _load(args)
    data, pre = ingest(_need_data(args), cfg)
    spec = pre.spec(cfg.sigma_matrix(pre.L) if pre.family is not Family.SEQUENTIAL else None)
    lik = build_likelihood(spec, data)
    prior = cfg.prior.build(spec.q)
    out = {"command": "oracle", "seed": cfg.seed}
    if prior.q <= 2:
        rep = quadrature_evidence(prior, lik)
        out["evidence"] = {"value": rep.estimate, "std_error": rep.std_error,
                           "nodes": rep.draws_or_nodes}
    seed = _require_seed(cfg.seed, "oracle")
    rep = rejection_sample_sun(posterior_update(prior, lik), cfg.draws, stage_rng(seed, STAGE_FIT))
    d = rep.draws
    out["rejection"] = {"mean": d.mean(axis=0).tolist(), "sd": d.std(axis=0, ddof=1).tolist(),
                        "draws": rep.T, "acceptance": rep.meta["acceptance"]}
    return out


def write_draws(path, draws: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"β_{k + 1}" for k in range(draws.shape[1])])
        for row in draws:
            w.writerow([repr(float(v)) for v in row])


# --------------------------------------------------------------------------
# entry point

COMMANDS = {"fit": cmd_fit, "evidence": cmd_evidence, "predict": cmd_predict, "oracle": cmd_oracle}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sunprobit",
                                     description="Bayesian multinomial probit regression.")
    sub = parser.add_subparsers(dest="command", metavar="{fit,evidence,predict}", required=True)
    helps = {"fit": "posterior summaries", "evidence": "log marginal likelihood",
             "predict": "predictive class probabilities", "oracle": None}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text) if text else sub.add_parser(name)
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--data", help="training data (CSV with header)")
        p.add_argument("--newdata", help="rows to predict (CSV)")
        p.add_argument("--fitted", help="fit output to predict from")
        p.add_argument("--out", help="write result JSON here instead of stdout")
        p.add_argument("--seed", type=int, help="master seed, overrides the config")
        p.add_argument("--draws-out", help="write posterior draws to this CSV")
        p.add_argument("--folds", type=int, help="K-fold holdout accuracy on --data")
        p.add_argument("--timing", action="store_true", help="include wall-clock timings")
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, (CapExceeded, DimensionTooLarge, QOverCap)):
        return EXIT_CAP
    return EXIT_NUMERIC


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    timer = Timer()
    flags: list = []
    try:
        result = COMMANDS[args.command](args, timer, flags)
    except SunProbitError as exc:
        print(f"sunprobit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"sunprobit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    result = {"schema": SCHEMA, **result, "flags": flags}
    if args.timing:
        result["timing"] = timer.stages
    text = json.dumps(result, indent=1, allow_nan=False) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
