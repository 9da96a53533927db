"""Mean-field Gaussian variational inference.

The negative ELBO is itself an energy in the variational parameters
``lam = (mu_1..mu_p, sigma_1..sigma_p)``:

    -ELBO(lam, S) = sum_i h_vi(lam, z_i) + f_vi(lam),
    h_vi(lam, z) = -E_q log p(z | theta),   f_vi(lam) = KL(q_lam || prior).

:func:`variational_energy` builds that energy for a base model.  The
conjugate and GMM models have closed forms (the GMM one uses the local
assignment family ``q(c_i = k) = phi_ik``); everything else goes through the
reparameterised Monte Carlo estimator ``theta = mu + sigma * eps``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp, softmax

from .core import Dataset, EpochBatcher, RngStream, as_param, seeded_rng
from .errors import BoundsViolated, TrainingDiverged
from .models import (
    LOG_2PI,
    ConjugateGaussianMeanModel,
    EnergyModel,
    GmmModel,
    energy,
    grad_energy,
)
from .schedules import Schedule

__all__ = [
    "MeanFieldGaussianParams",
    "ViConfig",
    "ConjugateVariationalEnergy",
    "GmmVariationalEnergy",
    "MonteCarloVariationalEnergy",
    "variational_energy",
    "elbo",
    "elbo_grad",
    "vi_train",
    "save_params",
    "load_params",
]

SIGMA_MIN = 1e-3
SIGMA_MAX = 1e3


@dataclass(frozen=True)
class MeanFieldGaussianParams:
    """``q = N(mu, diag(sigma^2))`` with ``sigma_min <= sigma <= sigma_max``."""

    mu: np.ndarray
    sigma: np.ndarray
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX

    def __post_init__(self):
        mu = as_param(self.mu, name="mu")
        sigma = as_param(self.sigma, mu.shape[0], name="sigma")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise BoundsViolated("need 0 < sigma_min <= sigma_max")
        if np.any(sigma < self.sigma_min) or np.any(sigma > self.sigma_max):
            raise BoundsViolated(
                f"sigma outside [{self.sigma_min}, {self.sigma_max}]: "
                f"min {sigma.min():.3g}, max {sigma.max():.3g}"
            )
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.mu, self.sigma])

    @classmethod
    def from_flat(cls, lam, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX, project=False):
        lam = as_param(lam, name="lambda")
        if lam.shape[0] % 2:
            raise ValueError("flat variational vector must have even length")
        d = lam.shape[0] // 2
        sigma = lam[d:]
        if project:
            sigma = np.clip(sigma, sigma_min, sigma_max)
        return cls(lam[:d], sigma, sigma_min, sigma_max)

    def interior(self, rtol: float = 1e-9) -> bool:
        """True when every sigma is strictly inside its bounds."""
        return bool(
            np.all(self.sigma > self.sigma_min * (1 + rtol))
            and np.all(self.sigma < self.sigma_max * (1 - rtol))
        )

    def to_json(self, model: str = "", seed: int = 0) -> dict:
        return {
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "model": model,
            "seed": int(seed),
        }


@dataclass(frozen=True)
class ViConfig:
    """Training knobs.

    ``average_tail`` is the fraction of final iterates averaged into the
    returned parameters (0 returns the last iterate).
    """

    iterations: int = 2000
    batch_size: int = 64
    lr_schedule: Schedule = field(default_factory=lambda: Schedule("constant", a=2.0))
    mc_samples: int = 5
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    sigma_init: float = 1.0
    average_tail: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.average_tail < 1.0:
            raise ValueError("average_tail must lie in [0, 1)")
        if not self.sigma_min <= self.sigma_init <= self.sigma_max:
            raise ValueError("sigma_init outside the sigma bounds")


# ---------------------------------------------------------------------------
# energies in variational-parameter space


class ConjugateVariationalEnergy(EnergyModel):
    """Closed-form ``-ELBO`` pieces for :class:`ConjugateGaussianMeanModel`.

    ``h_vi = ||z - mu||^2/2 + sum(sigma^2)/2`` (same dropped constant as the
    base ``h``) and ``f_vi`` is the exact Gaussian KL to the prior.
    """

    def __init__(self, base: ConjugateGaussianMeanModel):
        self.base = base
        self.p = base.dim_param
        self.dim_param = 2 * self.p
        self.dim_datum = base.dim_datum
        self.name = f"vi[{base.name}]"

    def _split(self, lam):
        return lam[: self.p], lam[self.p :]

    def h(self, lam, X, y=None):
        mu, s = self._split(lam)
        return 0.5 * np.sum((X - mu) ** 2, axis=1) + 0.5 * float(s @ s)

    def f(self, lam):
        mu, s = self._split(lam)
        s0 = self.base.prior_std
        return float(np.sum(np.log(s0 / s) + (s**2 + mu**2) / (2 * s0**2) - 0.5))

    def grad_h(self, lam, X, y=None):
        mu, s = self._split(lam)
        m = X.shape[0]
        return np.concatenate([mu[None, :] - X, np.broadcast_to(s, (m, self.p))], axis=1)

    def grad_h_sum(self, lam, X, y=None):
        mu, s = self._split(lam)
        m = X.shape[0]
        return np.concatenate([m * mu - X.sum(axis=0), m * s])

    def grad_f(self, lam):
        mu, s = self._split(lam)
        prec = self.base.prior_precision
        return np.concatenate([mu * prec, s * prec - 1.0 / s])

    def hess_h_sum(self, lam, X, y=None):
        return X.shape[0] * np.eye(self.dim_param)

    def hess_f(self, lam):
        _, s = self._split(lam)
        prec = self.base.prior_precision
        return np.diag(np.concatenate([np.full(self.p, prec), prec + 1.0 / s**2]))


class GmmVariationalEnergy(EnergyModel):
    """Closed-form ``-ELBO`` for the GMM with structured assignments.

    With ``a_ik = x_i . m_k - (||m_k||^2 + ||s_k||^2) / 2`` and the optimal
    local factor ``phi_i = softmax(a_i)``, the per-datum term collapses to
    ``h_vi = -logsumexp_k a_ik + ||x_i||^2/2 + log K + (d/2) log 2 pi``.
    Because ``phi`` is a deterministic function of ``lam``, derivatives here
    are total derivatives through ``phi``.  With ``hessian="fixed"`` the
    Hessian instead holds ``phi`` constant, which keeps only the diagonal
    ``sum_i phi_ik`` blocks; this exists to measure how much the choice matters.
    """

    def __init__(self, base: GmmModel, hessian: str = "total"):
        if hessian not in ("total", "fixed"):
            raise ValueError(f"hessian must be 'total' or 'fixed', got {hessian!r}")
        self.base = base
        self.hessian = hessian
        self.K, self.d = base.K, base.d
        self.p = base.dim_param
        self.dim_param = 2 * self.p
        self.dim_datum = base.d
        self.name = f"vi[{base.name}]"

    def _split(self, lam):
        return lam[: self.p].reshape(self.K, self.d), lam[self.p :].reshape(self.K, self.d)

    def _scores(self, lam, X):
        m, s = self._split(lam)
        a = X @ m.T - 0.5 * (np.sum(m**2, axis=1) + np.sum(s**2, axis=1))[None, :]
        return a, m, s

    def assignments(self, lam, X) -> np.ndarray:
        """``phi_ik = q(c_i = k)``."""
        a, _, _ = self._scores(lam, X)
        return softmax(a, axis=1)

    def h(self, lam, X, y=None):
        a, _, _ = self._scores(lam, X)
        const = np.log(self.K) + 0.5 * self.d * LOG_2PI
        return -logsumexp(a, axis=1) + 0.5 * np.sum(X**2, axis=1) + const

    def f(self, lam):
        m, s = self._split(lam)
        s0 = self.base.prior_std
        return float(np.sum(np.log(s0 / s) + (s**2 + m**2) / (2 * s0**2) - 0.5))

    def grad_h(self, lam, X, y=None):
        a, m, s = self._scores(lam, X)
        phi = softmax(a, axis=1)
        n = X.shape[0]
        gm = -phi[:, :, None] * (X[:, None, :] - m[None])
        gs = phi[:, :, None] * s[None]
        return np.concatenate([gm.reshape(n, -1), gs.reshape(n, -1)], axis=1)

    def grad_h_sum(self, lam, X, y=None):
        a, m, s = self._scores(lam, X)
        phi = softmax(a, axis=1)
        Nk = phi.sum(axis=0)
        gm = Nk[:, None] * m - phi.T @ X
        gs = Nk[:, None] * s
        return np.concatenate([gm.reshape(-1), gs.reshape(-1)])

    def grad_f(self, lam):
        m, s = self._split(lam)
        prec = 1.0 / self.base.prior_std**2
        return np.concatenate([(m * prec).reshape(-1), (s * prec - 1.0 / s).reshape(-1)])

    def hess_h_sum(self, lam, X, y=None):
        return self.grad_hess_h_sum(lam, X, y)[1]

    def grad_hess_h_sum(self, lam, X, y=None):
        # grad a_ik is g_ik = (x_i - m_k, -s_k) on the (m_k, s_k) blocks and
        # Hess a_ik is -I there, so
        # Hess h_i = sum_k phi_ik (I_k - g_ik g_ik^T) + u_i u_i^T,  u_i = sum_k phi_ik g_ik
        a, m, s = self._scores(lam, X)
        phi = softmax(a, axis=1)
        n, K, d, p = X.shape[0], self.K, self.d, self.p
        Nk = phi.sum(axis=0)
        PX = phi.T @ X  # sum_i phi_ik x_i
        Sa = PX - Nk[:, None] * m  # sum_i phi_ik (x_i - m_k)
        grad = np.concatenate([-Sa.reshape(-1), (Nk[:, None] * s).reshape(-1)])
        Nd = np.repeat(Nk, d)
        if self.hessian == "fixed":
            return grad, np.diag(np.concatenate([Nd, Nd]))
        # U = [phi_ik (x_i - m_k) | -phi_ik s_k] expanded as phi (x) X minus rank-K terms
        PXf = (phi[:, :, None] * X[:, None, :]).reshape(n, p)
        mf, sf = m.reshape(-1), s.reshape(-1)
        phid = np.repeat(phi, d, axis=1)
        U = np.concatenate([PXf - phid * mf, -phid * sf], axis=1)
        H = U.T @ U
        for k in range(K):
            mk = slice(k * d, (k + 1) * d)
            sk = slice(p + k * d, p + (k + 1) * d)
            # sum_i phi_ik (x_i - m_k)(x_i - m_k)^T from weighted moments
            Mxx = (X * phi[:, k, None]).T @ X
            Baa = Mxx - np.outer(PX[k], m[k]) - np.outer(m[k], PX[k]) + Nk[k] * np.outer(m[k], m[k])
            H[mk, mk] -= Baa
            H[mk, sk] += np.outer(Sa[k], s[k])
            H[sk, mk] += np.outer(s[k], Sa[k])
            H[sk, sk] -= Nk[k] * np.outer(s[k], s[k])
        H[np.diag_indices(2 * p)] += np.concatenate([Nd, Nd])
        return grad, H

    def hess_f(self, lam):
        _, s = self._split(lam)
        prec = 1.0 / self.base.prior_std**2
        return np.diag(np.concatenate([np.full(self.p, prec), prec + 1.0 / s.reshape(-1) ** 2]))


class MonteCarloVariationalEnergy(EnergyModel):
    """Reparameterised estimator of ``-ELBO`` with frozen noise ``eps``.

    ``eps`` has shape ``(S, p)``; ``theta_s = mu + sigma * eps_s``.  With the
    noise held fixed the energy is a smooth deterministic function of ``lam``,
    so finite-difference curvature is well defined.
    """

    def __init__(self, base: EnergyModel, eps: np.ndarray):
        self.base = base
        self.p = base.dim_param
        self.eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
        if self.eps.shape[1] != self.p:
            raise ValueError("eps must have shape (samples, base.dim_param)")
        self.dim_param = 2 * self.p
        self.dim_datum = base.dim_datum
        self.name = f"vi-mc[{base.name}]"

    def _thetas(self, lam):
        mu, s = lam[: self.p], lam[self.p :]
        return mu[None, :] + s[None, :] * self.eps

    def h(self, lam, X, y=None):
        return np.mean([self.base.h(t, X, y) for t in self._thetas(lam)], axis=0)

    def grad_h(self, lam, X, y=None):
        out = np.zeros((X.shape[0], self.dim_param))
        for t, e in zip(self._thetas(lam), self.eps):
            g = self.base.grad_h(t, X, y)
            out[:, : self.p] += g
            out[:, self.p :] += g * e
        return out / self.eps.shape[0]

    def grad_h_sum(self, lam, X, y=None):
        out = np.zeros(self.dim_param)
        for t, e in zip(self._thetas(lam), self.eps):
            g = self.base.grad_h_sum(t, X, y)
            out[: self.p] += g
            out[self.p :] += g * e
        return out / self.eps.shape[0]

    def _log_q(self, lam):
        s = lam[self.p :]
        return -np.sum(np.log(s)) - 0.5 * np.sum(self.eps**2, axis=1) - 0.5 * self.p * LOG_2PI

    def f_samples(self, lam) -> np.ndarray:
        """Per-sample ``-log p(theta_s) + log q(theta_s)``."""
        prior = np.array([self.base.f(t) for t in self._thetas(lam)])
        return prior + self.base.prior_log_normalizer + self._log_q(lam)

    def f(self, lam):
        return float(np.mean(self.f_samples(lam)))

    def grad_f(self, lam):
        out = np.zeros(self.dim_param)
        for t, e in zip(self._thetas(lam), self.eps):
            g = self.base.grad_f(t)
            out[: self.p] += g
            out[self.p :] += g * e
        out /= self.eps.shape[0]
        out[self.p :] -= 1.0 / lam[self.p :]
        return out


def variational_energy(
    model: EnergyModel,
    method: str = "auto",
    eps: Optional[np.ndarray] = None,
    gmm_hessian: str = "total",
) -> EnergyModel:
    """The ``-ELBO`` energy of ``model`` in variational-parameter space.

    ``method`` is ``"auto"`` (closed form when available), ``"analytic"`` or
    ``"mc"`` (requires ``eps``).  ``gmm_hessian`` is passed to
    :class:`GmmVariationalEnergy`.
    """
    if method not in ("auto", "analytic", "mc"):
        raise ValueError(f"unknown method {method!r}")
    if method != "mc":
        if isinstance(model, ConjugateGaussianMeanModel):
            return ConjugateVariationalEnergy(model)
        if isinstance(model, GmmModel):
            return GmmVariationalEnergy(model, gmm_hessian)
        if method == "analytic":
            raise ValueError(f"no closed-form ELBO for model {model.name!r}")
    if eps is None:
        raise ValueError("Monte Carlo energy needs eps samples")
    return MonteCarloVariationalEnergy(model, eps)


def has_analytic_elbo(model: EnergyModel) -> bool:
    return isinstance(model, (ConjugateGaussianMeanModel, GmmModel))


def _check_lam(lam) -> MeanFieldGaussianParams:
    if not isinstance(lam, MeanFieldGaussianParams):
        raise TypeError("expected MeanFieldGaussianParams")
    return lam


def elbo(
    model: EnergyModel,
    lam: MeanFieldGaussianParams,
    S: Dataset,
    mc_samples: int = 5,
    rng: Optional[RngStream] = None,
    method: str = "auto",
    return_stderr: bool = False,
):
    """Evidence lower bound of ``q_lam`` on the active items of ``S``.

    Closed-form models return the exact value (``mc_samples`` ignored).
    Otherwise ``E_eps[log p(theta, S) - log q(theta)]`` is estimated with
    ``mc_samples`` reparameterised draws; ``return_stderr`` adds the
    standard error of that estimate (0 on the analytic path).
    """
    lam = _check_lam(lam)
    if method != "mc" and has_analytic_elbo(model):
        value = -energy(variational_energy(model, "analytic"), lam.flat, S)
        return (value, 0.0) if return_stderr else value
    rng = rng if rng is not None else seeded_rng(0)
    eps = rng.standard_normal((mc_samples, lam.dim))
    en = MonteCarloVariationalEnergy(model, eps)
    X, y = S.active_data()
    thetas = en._thetas(lam.flat)
    data = np.array([np.sum(model.h(t, X, y)) if X.shape[0] else 0.0 for t in thetas])
    per_sample = -(data + en.f_samples(lam.flat))
    value = float(per_sample.mean())
    if return_stderr:
        se = float(per_sample.std(ddof=1) / np.sqrt(mc_samples)) if mc_samples > 1 else np.inf
        return value, se
    return value


def elbo_grad(
    model: EnergyModel,
    lam: MeanFieldGaussianParams,
    S: Dataset,
    mc_samples: int = 5,
    rng: Optional[RngStream] = None,
    method: str = "auto",
) -> np.ndarray:
    """Gradient of :func:`elbo` with respect to ``(mu, sigma)`` (length ``2p``)."""
    lam = _check_lam(lam)
    if method != "mc" and has_analytic_elbo(model):
        return -grad_energy(variational_energy(model, "analytic"), lam.flat, S)
    rng = rng if rng is not None else seeded_rng(0)
    eps = rng.standard_normal((mc_samples, lam.dim))
    return -grad_energy(MonteCarloVariationalEnergy(model, eps), lam.flat, S)


def vi_train(
    model: EnergyModel,
    S: Dataset,
    cfg: ViConfig,
    init: Optional[MeanFieldGaussianParams] = None,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> MeanFieldGaussianParams:
    """Stochastic gradient ascent on the ELBO.

    Each step uses a mini-batch of active items; the data term is scaled by
    ``n / |batch|`` and the KL term counted once.  Scales are projected onto
    ``[sigma_min, sigma_max]`` after every step.  The returned parameters are
    the average of the final ``average_tail`` fraction of iterates.

    Raises
    ------
    TrainingDiverged
        If an iterate becomes non-finite.
    """
    root = seeded_rng(cfg.seed)
    init_rng, batch_rng, eps_rng = root.spawn(0), root.spawn(1), root.spawn(2)
    X, y = S.active_data()
    n = X.shape[0]
    if init is None:
        mu0 = model.init_params(init_rng, X) if n else np.zeros(model.dim_param)
        lam = np.concatenate([mu0, np.full(model.dim_param, cfg.sigma_init)])
    else:
        lam = init.flat.copy()
    p = model.dim_param
    analytic = has_analytic_elbo(model)
    en = variational_energy(model, "analytic") if analytic else None
    batcher = EpochBatcher(n, cfg.batch_size, batch_rng) if n else None
    tail_start = cfg.iterations - int(np.floor(cfg.average_tail * cfg.iterations))
    acc = np.zeros_like(lam)
    n_acc = 0
    for t in range(1, cfg.iterations + 1):
        if not analytic:
            en = MonteCarloVariationalEnergy(model, eps_rng.standard_normal((cfg.mc_samples, p)))
        g = en.grad_f(lam)
        if n:
            idx = batcher.next()
            yb = None if y is None else y[idx]
            g = g + (n / idx.size) * en.grad_h_sum(lam, X[idx], yb)
        lam = lam - cfg.lr_schedule(t, max(n, 1)) * g
        lam[p:] = np.clip(lam[p:], cfg.sigma_min, cfg.sigma_max)
        if not np.all(np.isfinite(lam)):
            raise TrainingDiverged(f"non-finite variational parameters at iteration {t}")
        if t > tail_start:
            acc += lam
            n_acc += 1
        if callback is not None:
            callback(t, lam)
    out = acc / n_acc if n_acc else lam
    return MeanFieldGaussianParams(out[:p], out[p:], cfg.sigma_min, cfg.sigma_max)


def save_params(path, lam: MeanFieldGaussianParams, model: str, seed: int) -> None:
    Path(path).write_text(json.dumps(lam.to_json(model, seed), indent=2) + "\n", encoding="utf-8")


def load_params(path, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX) -> tuple[MeanFieldGaussianParams, dict]:
    """Read a checkpoint; returns the parameters and the raw JSON record."""
    rec = json.loads(Path(path).read_text(encoding="utf-8"))
    lam = MeanFieldGaussianParams(np.array(rec["mu"]), np.array(rec["sigma"]), sigma_min, sigma_max)
    return lam, rec
