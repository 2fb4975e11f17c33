"""Regenerate tests/fixtures/derived.json from the slow reference oracles.

Run with ``python3 tests/derive_fixtures.py``. Only oracle code and plain
numpy/scipy are used here; the library kernels under test are not called.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

import instances as inst  # noqa: E402
from sunprobit.oracles import (  # noqa: E402
    plain_mc_cdf,
    quadrature_evidence,
    rejection_sample_sun,
    rejection_tmvn_moments,
)
from sunprobit.sun import posterior_update  # noqa: E402

OUT = Path(__file__).parent / "fixtures" / "derived.json"


def main():
    out = {}
    rng = np.random.default_rng(inst.MVN_D4_SEED)
    S = inst.random_corr(4, rng)
    rep = plain_mc_cdf(inst.MVN_D4_UPPER, S, 10**7, np.random.default_rng(1))
    out["mvn_d4"] = {"cov": S.tolist(), "upper": inst.MVN_D4_UPPER, "prob": rep.estimate,
                     "se": rep.std_error, "draws": rep.draws_or_nodes}

    rep = rejection_tmvn_moments([0.0, 0.0], [0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]], 10**7,
                                 np.random.default_rng(2))
    (m, C), (sm, sC) = rep.estimate, rep.std_error
    out["tmvn_rho05"] = {"mean": m.tolist(), "cov": C.tolist(), "se_mean": sm.tolist(),
                         "se_cov": sC.tolist(), "accepted": rep.draws_or_nodes}

    ev = []
    for case in inst.EVIDENCE_CASES + [inst.EVIDENCE_Q1]:
        spec, data, lik, prior = inst.instance(case)
        rep = quadrature_evidence(prior, lik)
        ev.append({"case": case, "evidence": rep.estimate, "err": rep.std_error})
        print("evidence", case, rep.estimate, rep.std_error, flush=True)
    out["evidence"] = ev

    samp = []
    for k, case in enumerate(inst.SAMPLER_CASES):
        spec, data, lik, prior = inst.instance(case)
        post = posterior_update(prior, lik)
        rep = rejection_sample_sun(post, 10**5, np.random.default_rng(300 + k))
        D = rep.draws
        samp.append({"case": case, "h_plus_m": post.h, "mean": D.mean(axis=0).tolist(),
                     "var": D.var(axis=0, ddof=1).tolist(),
                     "m4": ((D - D.mean(axis=0)) ** 4).mean(axis=0).tolist(), "T": len(D),
                     "acceptance": rep.meta["acceptance"]})
        print("sampler", case, post.h, rep.meta["acceptance"], flush=True)
    out["sampler"] = samp

    OUT.parent.mkdir(exist_ok=True)
    OUT.write_text(json.dumps(out, indent=1) + "\n")


if __name__ == "__main__":
    main()
