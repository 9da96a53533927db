import logging
import math

import numpy as np
import pytest

from bayesforget.core import Dataset, dense_solve
from bayesforget.errors import (
    MixedTargets,
    NeumannDiverged,
    SpectralBoundViolated,
    StationarityViolated,
)
from bayesforget.influence import (
    InfluenceConfig,
    InfluenceVector,
    ScalePolicy,
    buffer_draw_indices,
    group_influence,
    mcmc_influence,
    neumann_inverse_dense,
    neumann_inverse_hvp,
    spectral_norm_dense,
    spectral_norm_estimate,
    vi_influence,
)
from bayesforget.models import ConjugateGaussianMeanModel, GmmModel
from bayesforget.vi import MeanFieldGaussianParams, variational_energy

from conftest import random_spd


def _conj(n, seed=0, dim=1):
    m = ConjugateGaussianMeanModel(dim, 1.0)
    S = Dataset(np.random.default_rng(seed).normal(0.5, 1.0, size=(n, dim)))
    return m, S


def _exact_lam(m, X):
    mean, var = m.posterior(X)
    return MeanFieldGaussianParams(mean, np.full(m.dim_param, math.sqrt(var)))


def _cfg(**kw):
    base = dict(neumann_j=64, scale=ScalePolicy(0.45))
    base.update(kw)
    return InfluenceConfig(**base)


def _counting(H):
    calls = []

    def hvp(v):
        calls.append(1)
        return H @ v

    return hvp, calls


@pytest.mark.parametrize("j,expect", [(0, 1.0), (1, 1.5), (3, 1.875)])
def test_scalar_geometric_series(j, expect):
    hvp = lambda v: 0.5 * v
    out = neumann_inverse_hvp(hvp, np.array([1.0]), j, 1.0)
    assert out[0] == pytest.approx(expect, abs=1e-15)
    assert out[0] == pytest.approx(2 * (1 - 0.5 ** (j + 1)), abs=1e-15)
    assert neumann_inverse_dense(np.array([[0.5]]), [1.0], j, 1.0)[0] == pytest.approx(expect, abs=1e-15)


def test_scalar_limit():
    out = neumann_inverse_hvp(lambda v: 0.5 * v, np.array([1.0]), 200, 1.0)
    assert out[0] == pytest.approx(2.0, abs=1e-14)


@pytest.mark.parametrize("j", [1, 5, 40])
def test_identity_returns_v(j, np_rng):
    v = np_rng.normal(size=6)
    assert np.allclose(neumann_inverse_hvp(lambda x: x, v, j, 1.0), v, atol=0, rtol=0)


def test_exactly_j_hvp_calls(np_rng):
    H = random_spd(np_rng, 5)
    hvp, calls = _counting(H)
    neumann_inverse_hvp(hvp, np.ones(5), 17, 0.9 / np.linalg.eigvalsh(H).max(), spectral_norm=0.9)
    assert len(calls) == 17


def test_matches_dense_solve(np_rng):
    # the truncation error after j steps is at most (1 - 0.9 / cond)**(j + 1)
    for _ in range(10):
        H = random_spd(np_rng, 10, cond=30.0)
        v = np_rng.normal(size=10)
        c = 0.9 / np.linalg.eigvalsh(H).max()
        ref = dense_solve(H, v)
        out = neumann_inverse_hvp(lambda x: H @ x, v, 500, c)
        assert np.linalg.norm(out - ref) / np.linalg.norm(ref) <= 1e-4
        dense = neumann_inverse_dense(H, v, 500, c)
        assert np.allclose(dense, out, rtol=1e-10, atol=1e-12)


def test_linearity(np_rng):
    H = random_spd(np_rng, 10)
    c = 0.9 / np.linalg.eigvalsh(H).max()
    v1, v2 = np_rng.normal(size=(2, 10))
    f = lambda v: neumann_inverse_hvp(lambda x: H @ x, v, 60, c, spectral_norm=0.9)
    lhs = f(2.5 * v1 - 0.7 * v2)
    rhs = 2.5 * f(v1) - 0.7 * f(v2)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)


def test_residual_non_increasing(np_rng):
    for _ in range(10):
        H = random_spd(np_rng, 10)
        c = 0.95 / np.linalg.eigvalsh(H).max()
        v = np_rng.normal(size=10)
        res = [np.linalg.norm(H @ neumann_inverse_hvp(lambda x: H @ x, v, j, c, spectral_norm=0.95) - v)
               for j in range(0, 60, 3)]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(res, res[1:]))


def test_spectral_estimates(np_rng):
    H = random_spd(np_rng, 8, cond=10.0)
    lam_max = np.linalg.eigvalsh(H).max()
    est = spectral_norm_estimate(lambda x: H @ x, 8, 1.0 / lam_max)
    assert 0.9 < est <= 1.0 + 1e-12
    assert spectral_norm_dense(H, 1.0 / lam_max) == pytest.approx(est, rel=1e-10)


def test_spectral_violation_and_warning(caplog):
    H = np.diag([1.0, 0.2])
    with pytest.raises(SpectralBoundViolated):
        neumann_inverse_hvp(lambda x: H @ x, np.ones(2), 5, 1.2)
    with pytest.raises(SpectralBoundViolated):
        neumann_inverse_dense(H, np.ones(2), 5, 1.2)
    with caplog.at_level(logging.WARNING, logger="bayesforget.influence"):
        neumann_inverse_hvp(lambda x: H @ x, np.ones(2), 5, 1.03)
    assert any("above 1" in r.message for r in caplog.records)


def test_non_finite_iterate():
    with pytest.raises(NeumannDiverged):
        neumann_inverse_hvp(lambda x: x * np.nan, np.ones(2), 3, 1.0, spectral_norm=0.5)


def test_vi_influence_zero_gradient():
    # datum at the posterior mean with sigma at zero: h_vi gradient is (mu - z, sigma)
    m, S = _conj(50)
    lam = _exact_lam(m, S.X)
    S2 = Dataset(np.vstack([S.X, lam.mu[None, :]]))
    lam2 = _exact_lam(m, S2.X)
    en = variational_energy(m)
    g = en.grad_h_sum(lam2.flat, S2.X[-1:])
    assert g[0] == pytest.approx(0.0, abs=1e-15)
    I = vi_influence(m, lam2, S2, [S2.n - 1], _cfg())
    assert I.delta[0] == pytest.approx(0.0, abs=1e-15)


def test_vi_influence_conjugate_closed_form():
    n = 100
    m, S = _conj(n)
    lam = _exact_lam(m, S.X)
    I = vi_influence(m, lam, S, [3], _cfg())
    lam_minus = lam.flat - I.delta
    ref = _exact_lam(m, S.remove([3]).active_data()[0])
    assert abs(lam_minus[0] - ref.mu[0]) <= 10.0 / n**2
    # first-order shift is (mu - z_j) / (n + 1); the exact one is (mu - z_j) / n
    assert lam_minus[0] - lam.mu[0] == pytest.approx((lam.mu[0] - S.X[3, 0]) / (n + 1), rel=1e-10)


def _slope(ns, ys):
    return float(np.polyfit(np.log(ns), np.log(ys), 1)[0])


def test_vi_influence_rate():
    ns = [100, 200, 400, 800]
    errs, norms = [], []
    for n in ns:
        m, S = _conj(n, seed=n)
        lam = _exact_lam(m, S.X)
        I = vi_influence(m, lam, S, [0], _cfg())
        ref = _exact_lam(m, S.remove([0]).active_data()[0])
        errs.append(np.linalg.norm(lam.flat - I.delta - ref.flat))
        norms.append(I.norm)
    assert _slope(ns, errs) <= -1.8
    assert -1.2 <= _slope(ns, norms) <= -0.8


def test_stationarity_and_boundary_checks():
    m, S = _conj(100)
    lam = _exact_lam(m, S.X)
    far = MeanFieldGaussianParams(lam.mu + 3.0, lam.sigma)
    with pytest.raises(StationarityViolated):
        vi_influence(m, far, S, [0], _cfg())
    vi_influence(m, far, S, [0], _cfg(stationarity_tol=None))
    edge = MeanFieldGaussianParams(lam.mu, np.array([1e-3]))
    with pytest.raises(StationarityViolated):
        vi_influence(m, edge, S, [0], _cfg(stationarity_tol=None))


def test_group_additivity():
    m, S = _conj(200, dim=2)
    lam = _exact_lam(m, S.X)
    singles = [vi_influence(m, lam, S, [j], _cfg()) for j in (1, 5, 9, 11)]
    grp = group_influence(singles)
    assert np.array_equal(grp.delta, ((singles[0].delta + singles[1].delta) + singles[2].delta) + singles[3].delta)
    assert grp.removed == frozenset({1, 5, 9, 11})
    joint = vi_influence(m, lam, S, [1, 5, 9, 11], _cfg())
    assert np.allclose(joint.delta, grp.delta, rtol=1e-12, atol=1e-15)
    assert np.array_equal(group_influence(singles[:1]).delta, singles[0].delta)


def test_group_rejects_mixed_targets():
    a = InfluenceVector(np.zeros(2), "vi", frozenset({1}))
    b = InfluenceVector(np.zeros(2), "mcmc", frozenset({2}))
    with pytest.raises(MixedTargets):
        group_influence([a, b])


def test_buffer_draw_indices():
    assert buffer_draw_indices(500, 5).tolist() == [0, 125, 250, 374, 499]
    seen = set()
    for r in range(6):
        idx = buffer_draw_indices(500, 5, r)
        assert idx.size == 5 and np.all(np.diff(idx) > 0)
        seen.add(tuple(idx))
    assert len(seen) == 6
    with pytest.raises(ValueError):
        buffer_draw_indices(3, 5)


def _posterior_draws(m, X, size, seed):
    mean, var = m.posterior(X)
    return mean + math.sqrt(var) * np.random.default_rng(seed).standard_normal((size, m.dim_param))


def test_mcmc_influence_zero_b():
    m, S = _conj(50)
    draws = np.full((10, 1), 0.25)
    S2 = Dataset(np.vstack([S.X, [[0.25]]]))
    I = mcmc_influence(m, draws, S2, [S2.n - 1], _cfg(mc_samples=5))
    assert I.delta[0] == 0.0


def test_mcmc_influence_conjugate_closed_form():
    n = 400
    m, S = _conj(n)
    draws = _posterior_draws(m, S.X, 500, 1)
    cfg = _cfg(mc_samples=5)
    I = mcmc_influence(m, draws, S, [7], cfg)
    chosen = draws[buffer_draw_indices(500, 5)]
    # A = n + 1 exactly; b = mean(theta) - z_j
    expect = -(chosen.mean(0) - S.X[7]) / (n + 1)
    assert np.allclose(I.delta, expect, rtol=1e-10)
    mean, _ = m.posterior(S.X)
    mean_r, _ = m.posterior(S.remove([7]).active_data()[0])
    shift = -I.delta
    mc_part = abs(chosen.mean(0)[0] - mean[0]) / (n + 1)
    assert abs(shift[0] - (mean_r[0] - mean[0])) <= 10.0 / n**2 + mc_part


def test_mcmc_m5_versus_full_buffer():
    n = 400
    m, S = _conj(n)
    draws = _posterior_draws(m, S.X, 500, 2)
    I5 = mcmc_influence(m, draws, S, [0], _cfg(mc_samples=5))
    Iall = mcmc_influence(m, draws, S, [0], _cfg(mc_samples=500))
    sd = draws.std(ddof=1)
    assert abs(I5.delta[0] - Iall.delta[0]) <= 3 * sd / math.sqrt(5) / (n + 1)


def test_mcmc_subsets_agree_within_mc_noise():
    n = 400
    m, S = _conj(n)
    draws = _posterior_draws(m, S.X, 500, 3)
    vals = np.array([mcmc_influence(m, draws, S, [4], _cfg(mc_samples=5), rotation=r).delta[0] for r in range(20)])
    sd = draws.std(ddof=1)
    assert vals.std(ddof=1) <= 3 * sd / math.sqrt(5) / (n + 1)


def test_mcmc_influence_rate():
    ns = [100, 200, 400, 800, 1600]
    norms = []
    for n in ns:
        m, S = _conj(n, seed=n)
        draws = _posterior_draws(m, S.X, 500, n)
        # a datum far from the mean keeps the O(1/n) signal above the MC noise
        S2 = Dataset(np.vstack([S.X, [[4.0]]]))
        norms.append(mcmc_influence(m, draws, S2, [n], _cfg(mc_samples=5)).norm)
    assert -1.2 <= _slope(ns, norms) <= -0.8


def test_gmm_vi_influence_dense_and_operator_agree():
    rng = np.random.default_rng(0)
    means = np.array([[2, 2], [-2, 2], [2, -2], [-2, -2]], float)
    X = np.concatenate([mu + rng.standard_normal((50, 2)) for mu in means])
    m = GmmModel(4, 2)
    S = Dataset(X)
    lam = MeanFieldGaussianParams(means.reshape(-1), np.full(8, 0.15))
    cfg = InfluenceConfig(neumann_j=32, scale=ScalePolicy(1.0), stationarity_tol=None)
    I = vi_influence(m, lam, S, [0, 1, 2, 3], cfg)
    en = variational_energy(m)
    H = en.grad_hess_h_sum(lam.flat, X)[1] + en.hess_f(lam.flat)
    g = en.grad_h_sum(lam.flat, X[:4])
    c = 1.0 / S.n
    ref = -neumann_inverse_hvp(lambda v: H @ v, g, 32, c)
    assert np.allclose(I.delta, ref, rtol=1e-9, atol=1e-12)
    assert I.spectral_norm <= 1.0
