import math

import numpy as np
import pytest

from bayesforget.core import Dataset, RngStream
from bayesforget.errors import ChainDiverged, EmptyActiveSet
from bayesforget.models import ConjugateGaussianMeanModel, GmmModel, grad_energy
from bayesforget.schedules import Schedule
from bayesforget.sgmcmc import (
    ChainConfig,
    SampleBuffer,
    load_buffer,
    run_chain,
    save_buffer,
    sghmc_alpha,
    sghmc_step,
    sgld_step,
    stochastic_grad_U,
)


def ess(x):
    """Effective sample size by Geyer's initial positive sequence."""
    x = np.asarray(x, float) - np.mean(x)
    n = x.size
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (x @ x)
    tau = 1.0
    for k in range(1, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair <= 0:
            break
        tau += 2 * pair
    return n / tau


@pytest.fixture(scope="module")
def conj400():
    m = ConjugateGaussianMeanModel(1, 1.0)
    S = Dataset(np.random.default_rng(11).normal(0.5, 1.0, size=(400, 1)))
    return m, S


def test_full_batch_equals_grad_energy(conj400):
    m, S = conj400
    theta = np.array([0.3])
    g = stochastic_grad_U(m, theta, S, np.arange(S.n))
    assert np.array_equal(g, grad_energy(m, theta, S))


def test_flat_prior_stationary_at_batch_mean():
    m = ConjugateGaussianMeanModel(2, 1e12)
    S = Dataset(np.random.default_rng(0).normal(size=(30, 2)))
    g = stochastic_grad_U(m, S.X.mean(0), S, np.arange(30))
    assert np.linalg.norm(g) < 1e-12


def test_stochastic_gradient_unbiased(conj400):
    m, S = conj400
    theta = np.array([0.1])
    rng = RngStream(2)
    draws = np.array([stochastic_grad_U(m, theta, S, 16, rng)[0] for _ in range(10_000)])
    exact = grad_energy(m, theta, S)[0]
    se = draws.std(ddof=1) / math.sqrt(draws.size)
    assert abs(draws.mean() - exact) <= 3 * se


def test_batch_skips_removed(conj400):
    m, S = conj400
    T = S.remove(range(0, 400, 2))
    before = S.audit.removed_reads
    rng = RngStream(0)
    for _ in range(50):
        stochastic_grad_U(m, np.zeros(1), T, 32, rng)
    assert S.audit.removed_reads == before
    with pytest.raises(EmptyActiveSet):
        stochastic_grad_U(m, np.zeros(1), S.remove(range(400)), 4, rng)


def test_sgld_pure_diffusion():
    xi = np.array([0.3, -1.2])
    out = sgld_step(np.array([1.0, 2.0]), np.zeros(2), 0.02, xi=xi)
    assert np.array_equal(out, np.array([1.0, 2.0]) + math.sqrt(0.04) * xi)


def test_sgld_small_step_continuity():
    theta = np.array([0.7])
    rng = RngStream(0)
    gaps = [abs(sgld_step(theta, np.array([5.0]), eps, rng)[0] - theta[0]) for eps in (1e-2, 1e-6, 1e-12)]
    assert gaps[-1] < 1e-5
    assert gaps[-1] < gaps[0]


def test_sgld_first_step_size():
    assert Schedule("power", 4.0, -0.15)(1, 2000) == pytest.approx(0.002)


def test_sghmc_memoryless_at_alpha_one():
    xi = np.array([0.5, -0.25])
    theta, v = np.array([0.0, 1.0]), np.array([3.0, -4.0])
    th2, v2 = sghmc_step(theta, v, np.zeros(2), 0.01, 1.0, xi=xi)
    assert np.array_equal(th2, theta + v)
    assert np.array_equal(v2, math.sqrt(0.02) * xi)


def test_sghmc_step_formula():
    xi = np.array([0.1])
    th, v = sghmc_step(np.array([1.0]), np.array([0.2]), np.array([3.0]), 0.01, 0.4, xi=xi)
    assert th[0] == 1.2
    assert v[0] == pytest.approx(0.6 * 0.2 - 0.03 + math.sqrt(2 * 0.4 * 0.01) * 0.1, rel=1e-15)


def test_alpha_decay_coupling():
    a1 = sghmc_alpha(0.4, 0.01, 0.01)
    assert a1 == 0.4
    assert sghmc_alpha(0.4, 0.005, 0.01) == pytest.approx(0.4 * math.sqrt(0.5), rel=1e-15)
    s = Schedule("power", 2.0, -0.15)
    e1 = s(1, 2000)
    assert e1 == pytest.approx(0.001)
    assert sghmc_alpha(0.4, s(50, 2000), e1) == pytest.approx(0.4 * 50 ** -0.075, rel=1e-12)


def test_step_validation():
    with pytest.raises(ValueError):
        sgld_step(np.zeros(1), np.zeros(1), 0.0, xi=np.zeros(1))
    with pytest.raises(ValueError):
        sghmc_step(np.zeros(1), np.zeros(1), np.zeros(1), 0.1, 0.0, xi=np.zeros(1))
    with pytest.raises(ValueError):
        ChainConfig(iterations=100, retain_last=500)


@pytest.mark.parametrize("kind", ["sgld", "sghmc"])
def test_buffer_length_and_determinism(kind):
    m = GmmModel(4, 2)
    rng = np.random.default_rng(0)
    S = Dataset(np.concatenate([c + rng.standard_normal((100, 2)) for c in ([2, 2], [-2, 2], [2, -2], [-2, -2])]))
    cfg = ChainConfig(iterations=2000, batch_size=64, retain_last=500, seed=4,
                      step_schedule=Schedule("power", 4.0 if kind == "sgld" else 2.0, -0.15))
    a, b = run_chain(m, S, cfg, kind), run_chain(m, S, cfg, kind)
    assert len(a) == 500
    assert np.array_equal(a.samples, b.samples)


def _chain_cfg(seed, a=0.5, iterations=2000, retain=500, batch=64):
    return ChainConfig(iterations=iterations, batch_size=batch, step_schedule=Schedule("power", a, -0.15),
                       retain_last=retain, seed=seed)


@pytest.mark.parametrize("kind", ["sgld", "sghmc"])
def test_conjugate_buffer_mean(conj400, kind):
    m, S = conj400
    mean, var = m.posterior(S.X)
    for seed in range(5):
        buf = run_chain(m, S, _chain_cfg(seed), kind)
        assert abs(buf.mean()[0] - mean[0]) <= 4 * math.sqrt(var) / math.sqrt(100)


def test_sgld_long_chain_mean_within_ess_band(conj400):
    m, S = conj400
    mean, var = m.posterior(S.X)
    buf = run_chain(m, S, _chain_cfg(1, iterations=6000, retain=5000), "sgld")
    n_eff = ess(buf.samples[:, 0])
    assert n_eff >= 100
    assert abs(buf.mean()[0] - mean[0]) <= 3 * math.sqrt(var) / math.sqrt(n_eff)


def test_sghmc_covariance(conj400):
    # small steps: the velocity update uses the gradient at the previous position,
    # whose stationary variance exceeds 1/H by a factor growing with eta * H / alpha
    m = ConjugateGaussianMeanModel(2, 1.0)
    S = Dataset(np.random.default_rng(0).normal(0.5, 1.0, size=(400, 2)))
    _, var = m.posterior(S.X)
    buf = run_chain(m, S, _chain_cfg(0, a=0.05, iterations=20000, retain=15000, batch=400), "sghmc")
    target = var * np.eye(2)
    assert np.linalg.norm(buf.covariance() - target) / np.linalg.norm(target) <= 0.2


@pytest.mark.parametrize("kind", ["sgld", "sghmc"])
def test_error_decreases_with_iterations(conj400, kind):
    m, S = conj400
    mean, _ = m.posterior(S.X)
    errs = []
    for it in (250, 500, 1000, 2000):
        e = [abs(run_chain(m, S, _chain_cfg(s, iterations=it, retain=it // 2), kind, init=np.array([3.0])).mean()[0]
                 - mean[0]) for s in range(10)]
        errs.append(np.mean(e))
    assert all(b < a for a, b in zip(errs, errs[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(conj400):
    m, S = conj400
    cfg = ChainConfig(iterations=200, batch_size=400, step_schedule=Schedule("constant", 50.0), retain_last=10)
    with pytest.raises(ChainDiverged):
        run_chain(m, S, cfg, "sgld")


def test_buffer_shift_geometry_and_json(tmp_path):
    rng = np.random.default_rng(0)
    buf = SampleBuffer(rng.normal(size=(20, 3)), "sghmc", 5, 20, "gmm")
    moved = buf.shifted(np.array([0.1, -0.2, 0.3])).shifted(np.array([1e-3, 0, 0]))
    assert np.array_equal(moved.pairwise_differences(), buf.pairwise_differences())
    assert np.array_equal(moved.covariance(), buf.covariance())
    assert np.allclose(moved.samples, buf.samples - [0.101, -0.2, 0.3], atol=1e-15)
    save_buffer(moved, tmp_path / "b.json")
    back = load_buffer(tmp_path / "b.json")
    assert np.array_equal(back.samples, moved.samples)
    assert back.kind == "sghmc" and back.seed == 5 and back.retain_last == 20
    plain = SampleBuffer.from_json({"samples": [[1.0], [2.0]], "kind": "sgld", "seed": 0, "retain_last": 2})
    assert plain.mean()[0] == 1.5
