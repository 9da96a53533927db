"""Energy models ``F(gamma, S) = sum_i h(gamma, z_i) + f(gamma)``.

Every model supplies the per-datum energy ``h`` and the prior energy ``f``
together with analytic gradients.  Hessian-vector products default to a
forward difference of the gradient; models with a cheap closed-form Hessian
override :meth:`EnergyModel.hess_h_sum` / :meth:`EnergyModel.hess_f`.

Methods are vectorised over datums: ``X`` has shape ``(m, dim_datum)`` and
``y`` (labels, optional) shape ``(m,)``.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp, softmax

from .core import Dataset, as_param
from .errors import DegenerateCurvature, DimensionMismatch

__all__ = [
    "EnergyModel",
    "ConjugateGaussianMeanModel",
    "GmmModel",
    "BayesianClassifierModel",
    "energy",
    "grad_energy",
    "hvp_energy",
    "hessian_operator",
    "fd_step",
]

LOG_2PI = np.log(2.0 * np.pi)


def fd_step(gamma: np.ndarray) -> float:
    """Forward-difference step ``sqrt(machine eps) * (1 + ||gamma||)``."""
    return float(np.sqrt(np.finfo(np.float64).eps) * (1.0 + np.linalg.norm(gamma)))


class EnergyModel:
    """Base class: subclasses implement ``h``, ``f`` and their gradients."""

    name = "energy-model"
    dim_param: int
    dim_datum: int
    # constant dropped from ``f`` (added back where a normalised log-density is needed)
    prior_log_normalizer = 0.0
    multimodal = False

    def h(self, gamma, X, y=None) -> np.ndarray:
        raise NotImplementedError

    def f(self, gamma) -> float:
        raise NotImplementedError

    def grad_h(self, gamma, X, y=None) -> np.ndarray:
        raise NotImplementedError

    def grad_f(self, gamma) -> np.ndarray:
        raise NotImplementedError

    def grad_h_sum(self, gamma, X, y=None) -> np.ndarray:
        return self.grad_h(gamma, X, y).sum(axis=0)

    # Optional closed-form curvature; ``None`` means "use finite differences".
    def hess_h_sum(self, gamma, X, y=None) -> Optional[np.ndarray]:
        return None

    def hess_f(self, gamma) -> Optional[np.ndarray]:
        return None

    def grad_hess_h_sum(self, gamma, X, y=None):
        """``(grad_h_sum, hess_h_sum)``; models may share work between the two."""
        return self.grad_h_sum(gamma, X, y), self.hess_h_sum(gamma, X, y)

    @property
    def has_analytic_hessian(self) -> bool:
        return type(self).hess_h_sum is not EnergyModel.hess_h_sum

    def init_params(self, rng, X) -> np.ndarray:
        return np.zeros(self.dim_param)

    def check_param(self, gamma) -> np.ndarray:
        return as_param(gamma, self.dim_param)

    def describe(self) -> dict:
        return {"name": self.name}


class ConjugateGaussianMeanModel(EnergyModel):
    """Gaussian mean with known unit noise and an isotropic Gaussian prior.

    ``h(theta, z) = ||z - theta||^2 / 2`` and
    ``f(theta) = ||theta||^2 / (2 prior_std^2)``; the Gaussian normalising
    constants are dropped from both.  The posterior is available in closed form.
    """

    name = "conjugate"

    def __init__(self, dim: int = 1, prior_std: float = 1.0):
        if prior_std <= 0:
            raise ValueError("prior_std must be positive")
        self.dim_param = int(dim)
        self.dim_datum = int(dim)
        self.prior_std = float(prior_std)
        self.prior_log_normalizer = 0.5 * dim * np.log(2 * np.pi * prior_std**2)

    @property
    def prior_precision(self) -> float:
        return 1.0 / self.prior_std**2

    def h(self, gamma, X, y=None):
        return 0.5 * np.sum((X - gamma) ** 2, axis=1)

    def f(self, gamma):
        return 0.5 * float(gamma @ gamma) * self.prior_precision

    def grad_h(self, gamma, X, y=None):
        return gamma[None, :] - X

    def grad_h_sum(self, gamma, X, y=None):
        return X.shape[0] * gamma - X.sum(axis=0)

    def grad_f(self, gamma):
        return gamma * self.prior_precision

    def hess_h_sum(self, gamma, X, y=None):
        return X.shape[0] * np.eye(self.dim_param)

    def hess_f(self, gamma):
        return self.prior_precision * np.eye(self.dim_param)

    def posterior(self, X) -> tuple[np.ndarray, float]:
        """Exact posterior ``N(mean, var * I)`` given the rows of ``X``."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.dim_param)
        precision = X.shape[0] + self.prior_precision
        return X.sum(axis=0) / precision, 1.0 / precision

    def log_evidence(self, X) -> float:
        """``log int exp(-F(theta, S)) N(theta; 0, prior_std^2 I) dtheta`` (h constants dropped)."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, self.dim_param)
        precision = X.shape[0] + self.prior_precision
        s = X.sum(axis=0)
        quad = -0.5 * (np.sum(X**2, axis=0) - s**2 / precision)
        return float(np.sum(quad - 0.5 * np.log(precision * self.prior_std**2)))

    def describe(self):
        return {"name": self.name, "dim": self.dim_param, "prior_std": self.prior_std}


class GmmModel(EnergyModel):
    """Equal-weight mixture of ``K`` unit-covariance Gaussians over R^d.

    Parameters are the stacked centres ``(mu_1, ..., mu_K)`` (length ``K d``).
    The assignment variables are summed out, so
    ``h(mu, x) = -log((1/K) sum_k N(x; mu_k, I))`` and
    ``f(mu) = -log N(mu; 0, prior_std^2 I)``, all constants kept.
    """

    name = "gmm"
    multimodal = True

    def __init__(self, n_components: int = 4, dim: int = 2, prior_std: float = 1.0):
        self.K = int(n_components)
        self.d = int(dim)
        self.prior_std = float(prior_std)
        self.dim_param = self.K * self.d
        self.dim_datum = self.d

    def centers(self, gamma) -> np.ndarray:
        return np.asarray(gamma, dtype=np.float64).reshape(self.K, self.d)

    def _log_components(self, gamma, X):
        mu = self.centers(gamma)
        diff = X[:, None, :] - mu[None, :, :]
        return -0.5 * np.einsum("ikj,ikj->ik", diff, diff), diff

    def responsibilities(self, gamma, X) -> np.ndarray:
        s, _ = self._log_components(gamma, X)
        return softmax(s, axis=1)

    def h(self, gamma, X, y=None):
        s, _ = self._log_components(gamma, X)
        return -logsumexp(s, axis=1) + np.log(self.K) + 0.5 * self.d * LOG_2PI

    def f(self, gamma):
        var = self.prior_std**2
        return 0.5 * float(gamma @ gamma) / var + 0.5 * self.dim_param * np.log(2 * np.pi * var)

    def grad_h(self, gamma, X, y=None):
        s, diff = self._log_components(gamma, X)
        r = softmax(s, axis=1)
        return -(r[:, :, None] * diff).reshape(X.shape[0], self.dim_param)

    def grad_h_sum(self, gamma, X, y=None):
        s, diff = self._log_components(gamma, X)
        r = softmax(s, axis=1)
        return -np.einsum("ik,ikj->kj", r, diff).reshape(-1)

    def grad_f(self, gamma):
        return gamma / self.prior_std**2

    def hess_h_sum(self, gamma, X, y=None):
        s, diff = self._log_components(gamma, X)
        r = softmax(s, axis=1)
        K, d = self.K, self.d
        H = np.zeros((K * d, K * d))
        U = (r[:, :, None] * diff).reshape(X.shape[0], K * d)
        H += U.T @ U
        for k in range(K):
            sl = slice(k * d, (k + 1) * d)
            A = diff[:, k, :]
            H[sl, sl] += r[:, k].sum() * np.eye(d) - (A * r[:, k, None]).T @ A
        return H

    def hess_f(self, gamma):
        return np.eye(self.dim_param) / self.prior_std**2

    def init_params(self, rng, X) -> np.ndarray:
        """k-means++ seeding on the rows of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        centers = [X[int(rng.integers(X.shape[0]))]]
        for _ in range(1, self.K):
            d2 = np.min(((X[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
            p = d2 / d2.sum()
            centers.append(X[int(rng.choice(X.shape[0], p=p))])
        return np.concatenate(centers)

    def describe(self):
        return {"name": self.name, "K": self.K, "dim": self.d, "prior_std": self.prior_std}


class BayesianClassifierModel(EnergyModel):
    """Softmax classifier, either linear or with one ``tanh`` hidden layer.

    Parameter layout: linear ``(W (d x C), b (C))``; hidden
    ``(W1 (d x H), b1 (H), W2 (H x C), b2 (C))``, each flattened row-major.
    ``h`` is the negative log softmax likelihood of the label and ``f`` the
    normalised isotropic Gaussian prior energy.
    """

    name = "classifier"
    MAX_HIDDEN = 16

    def __init__(self, dim: int = 2, n_classes: int = 3, hidden: int = 0, prior_std: float = 0.15):
        if hidden < 0 or hidden > self.MAX_HIDDEN:
            raise ValueError(f"hidden units must be in [0, {self.MAX_HIDDEN}]")
        self.d = int(dim)
        self.C = int(n_classes)
        self.H = int(hidden)
        self.prior_std = float(prior_std)
        if self.H == 0:
            self._shapes = [(self.d, self.C), (self.C,)]
        else:
            self._shapes = [(self.d, self.H), (self.H,), (self.H, self.C), (self.C,)]
        self.dim_param = int(sum(np.prod(s) for s in self._shapes))
        self.dim_datum = self.d

    def unpack(self, gamma):
        out, start = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(gamma[start : start + size].reshape(shape))
            start += size
        return out

    def _forward(self, gamma, X):
        parts = self.unpack(gamma)
        if self.H == 0:
            W, b = parts
            return X @ W + b, None
        W1, b1, W2, b2 = parts
        a = np.tanh(X @ W1 + b1)
        return a @ W2 + b2, a

    def logits(self, gamma, X) -> np.ndarray:
        return self._forward(gamma, X)[0]

    def predict_proba(self, gamma, X) -> np.ndarray:
        return softmax(self.logits(gamma, X), axis=1)

    def h(self, gamma, X, y=None):
        z, _ = self._forward(gamma, X)
        return logsumexp(z, axis=1) - z[np.arange(X.shape[0]), y]

    def f(self, gamma):
        var = self.prior_std**2
        return 0.5 * float(gamma @ gamma) / var + 0.5 * self.dim_param * np.log(2 * np.pi * var)

    def grad_h(self, gamma, X, y=None):
        z, a = self._forward(gamma, X)
        m = X.shape[0]
        dz = softmax(z, axis=1)
        dz[np.arange(m), y] -= 1.0
        if self.H == 0:
            dW = X[:, :, None] * dz[:, None, :]
            return np.concatenate([dW.reshape(m, -1), dz], axis=1)
        _, _, W2, _ = self.unpack(gamma)
        dW2 = a[:, :, None] * dz[:, None, :]
        da = (dz @ W2.T) * (1.0 - a**2)
        dW1 = X[:, :, None] * da[:, None, :]
        return np.concatenate([dW1.reshape(m, -1), da, dW2.reshape(m, -1), dz], axis=1)

    def grad_f(self, gamma):
        return gamma / self.prior_std**2

    def hess_f(self, gamma):
        return np.eye(self.dim_param) / self.prior_std**2

    def init_params(self, rng, X) -> np.ndarray:
        return 0.1 * self.prior_std * rng.standard_normal(self.dim_param)

    def describe(self):
        return {
            "name": self.name,
            "dim": self.d,
            "n_classes": self.C,
            "hidden": self.H,
            "prior_std": self.prior_std,
        }


# ---------------------------------------------------------------------------
# dataset-level energy, gradient and curvature


def _data(model: EnergyModel, gamma, S: Dataset):
    gamma = model.check_param(gamma)
    if S.dim != model.dim_datum:
        raise DimensionMismatch(f"datum dim {S.dim} != model datum dim {model.dim_datum}")
    X, y = S.active_data()
    return gamma, X, y


def energy(model: EnergyModel, gamma, S: Dataset) -> float:
    """``sum over active z of h(gamma, z) + f(gamma)``."""
    gamma, X, y = _data(model, gamma, S)
    total = float(np.sum(model.h(gamma, X, y))) if X.shape[0] else 0.0
    return total + float(model.f(gamma))


def grad_energy(model: EnergyModel, gamma, S: Dataset) -> np.ndarray:
    gamma, X, y = _data(model, gamma, S)
    g = model.grad_f(gamma).astype(np.float64)
    if X.shape[0]:
        g = g + model.grad_h_sum(gamma, X, y)
    return g


def hessian_operator(
    model: EnergyModel,
    gamma,
    X,
    y=None,
    extra: Optional[tuple] = None,
    damping: float = 0.0,
    dense: Optional[bool] = None,
) -> Callable[[np.ndarray], np.ndarray]:
    """Return ``v -> (Hess F(gamma) + tau Hess h(gamma, z_j) + damping I) v``.

    With an analytic Hessian (and ``dense`` not False) the matrix is formed
    once and every call is a mat-vec.  Otherwise each call is a forward
    difference of the gradient with step :func:`fd_step`.
    ``extra = (tau, X_j, y_j)`` adds the ``tau``-weighted per-datum curvature.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if extra is not None:
        tau, Xj, yj = extra
        if not -1.0 <= tau <= 0.0:
            raise ValueError("tau must lie in [-1, 0]")
    use_dense = model.has_analytic_hessian if dense is None else dense
    if use_dense and model.has_analytic_hessian:
        H = model.hess_f(gamma).copy()
        if X.shape[0]:
            H += model.hess_h_sum(gamma, X, y)
        if extra is not None:
            H += tau * model.hess_h_sum(gamma, Xj, yj)
        if damping:
            H[np.diag_indices_from(H)] += damping
        if not np.all(np.isfinite(H)):
            raise DegenerateCurvature("non-finite Hessian")

        def hvp(v):
            return H @ v

        hvp.matrix = H
        return hvp

    def grad(g_at):
        g = model.grad_f(g_at)
        if X.shape[0]:
            g = g + model.grad_h_sum(g_at, X, y)
        if extra is not None:
            g = g + tau * model.grad_h_sum(g_at, Xj, yj)
        return g

    g0 = grad(gamma)
    step = fd_step(gamma)

    def hvp(v):
        v = np.asarray(v, dtype=np.float64)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return np.zeros_like(v)
        t = step / nv
        out = (grad(gamma + t * v) - g0) / t
        if damping:
            out = out + damping * v
        if not np.all(np.isfinite(out)):
            raise DegenerateCurvature("non-finite Hessian-vector product")
        return out

    hvp.matrix = None
    return hvp


def hvp_energy(model: EnergyModel, gamma, S: Dataset, v, extra=None, dense=None) -> np.ndarray:
    """``(Hess F(gamma, S) + tau Hess h(gamma, z_j)) v``.

    ``extra`` is ``(tau, j)`` with ``tau`` in ``[-1, 0]`` and ``j`` a dataset index.
    """
    gamma, X, y = _data(model, gamma, S)
    v = as_param(v, model.dim_param, "v")
    ex = None
    if extra is not None:
        tau, j = extra
        Xj, yj = S.take([j])
        ex = (tau, Xj, yj)
    return hessian_operator(model, gamma, X, y, extra=ex, dense=dense)(v)
