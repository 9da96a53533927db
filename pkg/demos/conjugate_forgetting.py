"""Forget datums from a conjugate Gaussian posterior and compare with the exact answer.

The one-dimensional Gaussian-mean model has a closed-form posterior, so the
retrained posterior is known exactly.  This script removes a growing number
of datums with the variational influence update and prints how far the
processed posterior lands from the exact one, together with the KL
certificate and the gap to it.

    python3 demos/conjugate_forgetting.py --n 800 --remove 1 4 16
"""
import argparse
import math

import numpy as np

from bayesforget.core import Dataset
from bayesforget.forget import ForgetRequest, forget_vi, kl_meanfield, vi_certificate
from bayesforget.influence import InfluenceConfig, ScalePolicy
from bayesforget.models import ConjugateGaussianMeanModel
from bayesforget.vi import MeanFieldGaussianParams


def exact_posterior(model, X):
    mean, var = model.posterior(X)
    return MeanFieldGaussianParams(mean, np.full(model.dim_param, math.sqrt(var)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=800)
    ap.add_argument("--remove", type=int, nargs="+", default=[1, 4, 16, 64])
    ap.add_argument("--batch", type=int, default=4, help="datums removed per influence step")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = ConjugateGaussianMeanModel(1, 1.0)
    S = Dataset(np.random.default_rng(args.seed).normal(0.5, 1.0, size=(args.n, 1)))
    lam = exact_posterior(model, S.X)
    inf = InfluenceConfig(neumann_j=64, scale=ScalePolicy(0.45))

    print(f"posterior on all {args.n} datums: mu={lam.mu[0]:.5f} sigma={lam.sigma[0]:.5f}")
    print(f"{'k':>5} {'|processed-exact|':>18} {'|original-exact|':>17} {'KL':>10} {'epsilon':>10}")
    for k in args.remove:
        req = ForgetRequest(tuple(range(k)), args.batch, inf)
        lam_m, S_m, _ = forget_vi(lam, model, S, req)
        ref = exact_posterior(model, S_m.active_data()[0])
        # tight sigma bounds make the certificate informative on this family
        lo = 0.9 * min(lam_m.sigma.min(), ref.sigma.min())
        hi = 1.1 * max(lam_m.sigma.max(), ref.sigma.max())
        cert = vi_certificate(lam_m, ref, lo, hi)
        print(f"{k:>5} {np.linalg.norm(lam_m.flat - ref.flat):>18.3e} "
              f"{np.linalg.norm(lam.flat - ref.flat):>17.3e} {kl_meanfield(lam_m, ref):>10.2e} "
              f"{cert.epsilon:>10.2e}")


if __name__ == "__main__":
    main()
