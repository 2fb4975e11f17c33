"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and shown in the pytest terminal summary.
"""
import csv
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from instances import (
    CONJUGACY_CASES,
    EVIDENCE_CASES,
    PREDICTION_CASES,
    SAMPLER_CASES,
    instance,
    make_instance,
)
from sunprobit.gauss import CdfSettings, mvn_cdf, tmvn_moments
from sunprobit.models import Dataset, ModelSpec, build_likelihood, likelihood_eval, predict_frequencies
from sunprobit.oracles import batch_means_se, gibbs_sampler
from sunprobit.sun import (
    SunParams,
    log_evidence,
    posterior_update,
    predict_exact,
    sample_posterior,
    skew_normal,
    sun_log_density,
)
from sunprobit.vb import (
    augmented_form,
    cavi_pfm,
    default_blocking,
    kl_zbar,
    single_block,
    singleton_blocking,
    vb_moments,
)

DERIVED = json.loads((Path(__file__).parent / "fixtures" / "derived.json").read_text())
RESULTS = []


def report(k, ok, detail, started, budget):
    elapsed = time.perf_counter() - started
    ok = bool(ok) and elapsed < budget
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({elapsed:.1f}s < {budget}s)"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_c01_conjugacy_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for case in CONJUGACY_CASES:
        spec, data, lik, prior = instance(case)
        assert spec.q == 1 and spec.L in (2, 3) and data.n <= 4
        post = posterior_update(prior, lik)
        ev = log_evidence(prior, lik)
        grid = np.linspace(prior.xi[0] - 4 * prior.omega[0], prior.xi[0] + 4 * prior.omega[0], 50)
        for b in grid:
            r = (sun_log_density(prior, [b]) + likelihood_eval(lik, [b]) - ev
                 - sun_log_density(post, [b]))
            worst = max(worst, abs(r))
    report(1, worst <= 1e-4, f"max |residual| = {worst:.2e} (<= 1e-4, 5 instances x 50 points)",
           t0, 60)


def test_c02_evidence():
    t0 = time.perf_counter()
    worst = 0.0
    refs = {json.dumps(e["case"], sort_keys=True): e for e in DERIVED["evidence"]}
    for case in EVIDENCE_CASES:
        ref = refs[json.dumps(case, sort_keys=True)]
        spec, data, lik, prior = instance(case)
        assert spec.q <= 2
        worst = max(worst, abs(math.exp(log_evidence(prior, lik)) / ref["evidence"] - 1))
    spec = ModelSpec("Sequential", 2, 1)
    half = math.exp(log_evidence(SunParams.gaussian([0.0], [[1.0]]),
                                 build_likelihood(spec, Dataset([1], [[1.0]]))))
    third = math.exp(log_evidence(SunParams.gaussian([0.0], [[1.0]]),
                                  build_likelihood(spec, Dataset([1, 1], [[1.0], [1.0]]))))
    closed = max(abs(half - 0.5), abs(third - 1 / 3))
    report(2, worst <= 1e-3 and closed <= 1e-6,
           f"max rel err vs quadrature = {worst:.2e} (<= 1e-3); closed forms off by {closed:.1e}",
           t0, 60)


def test_c03_exact_sampler():
    t0 = time.perf_counter()
    T = 10**5
    worst = 0.0
    for k, ref in enumerate(DERIVED["sampler"]):
        spec, data, lik, prior = instance(ref["case"])
        post = posterior_update(prior, lik)
        assert spec.q <= 5 and post.h <= 6 and ref["case"] == SAMPLER_CASES[k]
        D = sample_posterior(post, T, np.random.default_rng(500 + k)).draws
        var, rvar = D.var(axis=0, ddof=1), np.asarray(ref["var"])
        se_mean = np.sqrt(var / T + rvar / ref["T"])
        m4 = ((D - D.mean(axis=0)) ** 4).mean(axis=0)
        se_var = np.sqrt((m4 - var**2) / T + (np.asarray(ref["m4"]) - rvar**2) / ref["T"])
        z = max(np.max(np.abs(D.mean(axis=0) - ref["mean"]) / se_mean),
                np.max(np.abs(var - rvar) / se_var))
        worst = max(worst, float(z))
    delta = 1 / math.sqrt(2)
    S = sample_posterior(skew_normal(delta), T, np.random.default_rng(510)).draws[:, 0]
    sd = math.sqrt(1 - 2 * delta**2 / math.pi)
    z_skew = abs(S.mean() - 1 / math.sqrt(math.pi)) / (sd / math.sqrt(T))
    report(3, worst <= 4 and z_skew <= 4,
           f"max z vs rejection = {worst:.2f} (<= 4); skew-normal mean z = {z_skew:.2f}", t0, 300)


def test_c04_prediction():
    t0 = time.perf_counter()
    T = 10**5
    settings = CdfSettings()
    worst_z, worst_sum = 0.0, 0.0
    for k, case in enumerate(PREDICTION_CASES):
        spec, data, lik, prior = instance(case)
        x = np.random.default_rng(600 + k).standard_normal(spec.x_shape())
        pred = predict_exact(prior, spec, lik, x, settings)
        rng = np.random.default_rng(610 + k)
        draws = sample_posterior(posterior_update(prior, lik), T, rng).draws
        freq = predict_frequencies(spec, x, draws, rng)
        p = pred.probs
        worst_z = max(worst_z, float(np.max(np.abs(freq - p) / np.sqrt(p * (1 - p) / T))))
        worst_sum = max(worst_sum, abs(pred.raw_sum - 1))
    # raw probabilities are ratios of orthant probabilities, so their error is relative
    bound = 5 * settings.rel_tol
    report(4, worst_z <= 4 and worst_sum <= bound,
           f"max binomial z = {worst_z:.2f} (<= 4); |raw sum - 1| = {worst_sum:.1e} "
           f"(<= 5 x rel_tol = {bound:.0e})", t0, 300)


def test_c05_gibbs_cross_check():
    t0 = time.perf_counter()
    worst = 0.0
    for k, family in enumerate(("Sequential", "ClassSpecific")):
        spec, data, lik, prior = make_instance(family, 3, 3, 10, 700 + k)
        post = posterior_update(prior, lik)
        T = 5 * 10**4
        D = sample_posterior(post, T, np.random.default_rng(710 + k)).draws
        G = gibbs_sampler(prior, lik, 10**5, np.random.default_rng(720 + k), thin=1).draws
        se = np.sqrt(D.var(axis=0, ddof=1) / T + batch_means_se(G) ** 2)
        worst = max(worst, float(np.max(np.abs(D.mean(axis=0) - G.mean(axis=0)) / se)))
    report(5, worst <= 4, f"max z (ESS-adjusted) = {worst:.2f} (<= 4)", t0, 600)


def test_c06_vb_exact_factor():
    t0 = time.perf_counter()
    spec, data, lik, prior = make_instance("Sequential", 3, 2, 3, 800)
    post = posterior_update(prior, lik)
    aug = augmented_form(post)
    state = cavi_pfm(aug, single_block(aug.dim), tol=1e-8)
    kl = kl_zbar(state, aug)
    vm, _ = vb_moments(state, aug)
    T = 10**5
    D = sample_posterior(post, T, np.random.default_rng(801)).draws
    z = float(np.max(np.abs(D.mean(axis=0) - vm) / (D.std(axis=0, ddof=1) / math.sqrt(T))))
    report(6, z <= 4 and kl <= 1e-6, f"m = {lik.m}, max z = {z:.2f} (<= 4); KL = {kl:.1e}", t0, 60)


def test_c07_vb_quality_when_p_exceeds_n():
    t0 = time.perf_counter()
    spec, data, lik, _ = make_instance("Sequential", 3, 60, 20, 71)
    prior = SunParams.gaussian(np.zeros(spec.q), 25.0 * np.eye(spec.q))
    post = posterior_update(prior, lik)
    aug = augmented_form(post)
    state = cavi_pfm(aug, default_blocking(lik), tol=1e-8)
    vm, vC = vb_moments(state, aug)
    D = sample_posterior(post, 10**5, np.random.default_rng(901)).draws
    em, es = D.mean(axis=0), D.std(axis=0, ddof=1)
    rel_rmse = float(np.linalg.norm(vm - em) / np.linalg.norm(em))
    frac = float(np.mean(np.abs(np.sqrt(np.diag(vC)) / es - 1) <= 0.10))
    report(7, state.converged and rel_rmse <= 0.05 and frac >= 0.95,
           f"q = {spec.q}, m = {lik.m}: relative RMSE = {rel_rmse:.3f} (<= 0.05), "
           f"sds within 10% for {frac:.0%} (>= 95%)", t0, 600)


def test_c08_kl_ordering():
    t0 = time.perf_counter()
    gap, rise = -np.inf, -np.inf
    for seed in (1001, 1002, 1003):
        spec, data, lik, prior = make_instance("ClassSpecific", 3, 2, 4, seed)
        aug = augmented_form(posterior_update(prior, lik))
        unit = cavi_pfm(aug, default_blocking(lik), tol=1e-8, track_kl=True)
        single = cavi_pfm(aug, singleton_blocking(aug.dim), tol=1e-8, track_kl=True)
        gap = max(gap, kl_zbar(unit, aug) - kl_zbar(single, aug))
        for state in (unit, single):
            rise = max(rise, float(np.max(np.diff(state.kl_trace), initial=-np.inf)))
    report(8, gap <= 1e-6 and rise <= 1e-6,
           f"max KL(unit) - KL(singleton) = {gap:.2e}; largest sweep increase = {rise:.1e}",
           t0, 300)


def test_c09_kernels():
    t0 = time.perf_counter()
    arc = 0.0
    for rho in np.round(np.arange(-0.9, 0.91, 0.1), 10):
        p = mvn_cdf([0.0, 0.0], [[1.0, rho], [rho, 1.0]]).prob
        arc = max(arc, abs(p - (0.25 + math.asin(rho) / (2 * math.pi))))
    m, C = tmvn_moments([0.0], [0.0], [[1.0]])
    half = max(abs(m[0] - math.sqrt(2 / math.pi)), abs(C[0, 0] - (1 - 2 / math.pi)))
    ref = DERIVED["tmvn_rho05"]
    m2, C2 = tmvn_moments([0.0, 0.0], [0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]])
    z = max(np.max(np.abs(m2 - ref["mean"]) / ref["se_mean"]),
            np.max(np.abs(C2 - ref["cov"]) / ref["se_cov"]))
    report(9, arc <= 1e-5 and half <= 1e-10 and z <= 4,
           f"arcsin err = {arc:.1e}; half-normal err = {half:.1e}; rho=0.5 max z = {z:.2f}",
           t0, 60)


def _cli(args, threads):
    env = dict(os.environ, OPENBLAS_NUM_THREADS=str(threads), OMP_NUM_THREADS=str(threads),
               MKL_NUM_THREADS=str(threads))
    return subprocess.run([sys.executable, "-m", "sunprobit.cli", *args], env=env,
                          capture_output=True, check=True)


def test_c10_determinism(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1100)
    with open(tmp_path / "d.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "x1", "x2"])
        for _ in range(6):
            w.writerow([int(rng.integers(1, 4)), *np.round(rng.standard_normal(2), 3)])
    (tmp_path / "exact.json").write_text(json.dumps({"L": 3, "seed": 3, "draws": 1000}))
    (tmp_path / "pfm.json").write_text(json.dumps({"L": 3, "seed": 3, "draws": 1000,
                                                   "method": "pfm"}))
    data = str(tmp_path / "d.csv")
    runs = {
        "fit exact": ["fit", "--config", str(tmp_path / "exact.json"), "--data", data],
        "fit pfm": ["fit", "--config", str(tmp_path / "pfm.json"), "--data", data,
                    "--newdata", data],
        "predict folds": ["predict", "--config", str(tmp_path / "pfm.json"), "--data", data,
                          "--folds", "2"],
    }
    differing = []
    for name, args in runs.items():
        outs = [_cli(args, 1).stdout, _cli(args, 1).stdout, _cli(args, 4).stdout]
        if not (outs[0] == outs[1] == outs[2]):
            differing.append(name)
    report(10, not differing,
           f"{len(runs)} stochastic commands x (2 runs at 1 thread + 1 at 4 threads); "
           f"differing: {differing or 'none'}", t0, 60)
