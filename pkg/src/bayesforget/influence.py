"""Influence functions and the scaled Neumann inverse-HVP.

Both influence functions have the form ``I = -A^{-1} b`` where ``A`` is an
(averaged) energy Hessian and ``b`` the gradient of the removed datums'
per-datum energy.  Removing the datums then moves the parameters to
``gamma - I``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Dataset, seeded_rng
from .errors import (
    DegenerateCurvature,
    MixedTargets,
    NeumannDiverged,
    SpectralBoundViolated,
    StationarityViolated,
)
from .models import EnergyModel, hessian_operator
from .vi import MeanFieldGaussianParams, has_analytic_elbo, variational_energy

__all__ = [
    "ScalePolicy",
    "InfluenceConfig",
    "InfluenceVector",
    "spectral_norm_estimate",
    "neumann_inverse_hvp",
    "vi_influence",
    "mcmc_influence",
    "group_influence",
    "buffer_draw_indices",
    "spectral_norm_dense",
    "neumann_inverse_dense",
]

log = logging.getLogger(__name__)

SPECTRAL_WARN = 1.0
SPECTRAL_MAX = 1.05
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class ScalePolicy:
    """``c(n') = factor / n'``."""

    factor: float = 1.0

    def __call__(self, n_active: int) -> float:
        return self.factor / max(int(n_active), 1)


@dataclass(frozen=True)
class InfluenceConfig:
    neumann_j: int = 32
    scale: ScalePolicy = field(default_factory=ScalePolicy)
    mc_samples: int = 5
    damping: float = 0.0
    power_iters: int = 20
    # ||grad F|| / n' must not exceed this at the expansion point (None: skip)
    stationarity_tol: Optional[float] = 0.05
    vi_method: str = "auto"
    vi_mc_seed: int = 0
    # "total" differentiates the GMM ELBO through the responsibilities, "fixed" holds them constant
    gmm_hessian: str = "total"

    def __post_init__(self):
        if self.neumann_j < 1:
            raise ValueError("neumann_j must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be nonnegative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


@dataclass(frozen=True)
class InfluenceVector:
    """Parameter displacement attributed to a set of removed datums.

    ``target`` is ``"vi"`` (variational parameters) or ``"mcmc"`` (a drift of
    posterior samples).  ``spectral_norm`` is the estimate of ``||c A||`` used
    for the solve, when one was computed.
    """

    delta: np.ndarray
    target: str
    removed: frozenset
    c: float = float("nan")
    spectral_norm: float = float("nan")

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.delta))


def spectral_norm_estimate(
    hvp: Callable[[np.ndarray], np.ndarray], dim: int, c: float = 1.0, iters: int = 20
) -> float:
    """Power-iteration estimate of ``||c H||`` for symmetric ``H``.

    The start vector is fixed (all ones plus a deterministic ramp), so the
    estimate is reproducible.
    """
    x = np.ones(dim) + np.linspace(0.0, 0.5, dim)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = c * hvp(x)
        est = float(np.linalg.norm(y))
        if not np.isfinite(est):
            raise NeumannDiverged("non-finite value in power iteration")
        if est == 0.0:
            return 0.0
        x = y / est
    return est


def neumann_inverse_hvp(
    hvp: Callable[[np.ndarray], np.ndarray],
    v,
    j: int,
    c: float,
    spectral_norm: Optional[float] = None,
    power_iters: int = 20,
) -> np.ndarray:
    """Approximate ``H^{-1} v`` as ``c (cH)_j^{-1} v``.

    The truncated series obeys ``x_0 = v`` and ``x_k = v + (I - cH) x_{k-1}``;
    the recursion makes exactly ``j`` calls to ``hvp``.  Unless
    ``spectral_norm`` is supplied, ``||cH||`` is first estimated with
    ``power_iters`` extra calls.

    Raises
    ------
    SpectralBoundViolated
        If the estimate of ``||cH||`` exceeds 1.05 (a warning is logged for
        values in ``(1, 1.05]``).
    NeumannDiverged
        If an iterate becomes non-finite.
    """
    if c <= 0:
        raise ValueError("scale c must be positive")
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if spectral_norm is None:
        spectral_norm = spectral_norm_estimate(hvp, v.shape[0], c, power_iters)
    if spectral_norm > SPECTRAL_MAX:
        raise SpectralBoundViolated(f"||cH|| estimated at {spectral_norm:.4f} > {SPECTRAL_MAX}")
    if spectral_norm > SPECTRAL_WARN:
        log.warning("||cH|| estimated at %.4f, above 1; proceeding", spectral_norm)
    x = v.copy()
    for _ in range(j):
        x = v + x - c * hvp(x)
    # non-finite values propagate through the affine recursion, so one check suffices
    if not np.all(np.isfinite(x)):
        raise NeumannDiverged("non-finite Neumann iterate")
    return c * x


def _mat_power(A: np.ndarray, k: int) -> np.ndarray:
    """``A**k`` up to a positive scale factor (rescaled to avoid overflow)."""
    result = np.eye(A.shape[0])
    base = A / max(np.linalg.norm(A), np.finfo(float).tiny)
    while k:
        if k & 1:
            result = result @ base
            result /= max(np.linalg.norm(result), np.finfo(float).tiny)
        k >>= 1
        if k:
            base = base @ base
            base /= max(np.linalg.norm(base), np.finfo(float).tiny)
    return result


def spectral_norm_dense(A: np.ndarray, c: float = 1.0, iters: int = 20) -> float:
    """Same estimate as :func:`spectral_norm_estimate` for an explicit matrix.

    The ``iters``-step power iteration from the fixed start vector returns
    ``||c A x|| / ||x||`` with ``x = A**(iters-1) x_0``; the power is formed
    by repeated squaring, so the cost is logarithmic in ``iters``.
    """
    dim = A.shape[0]
    x = np.ones(dim) + np.linspace(0.0, 0.5, dim)
    x = _mat_power(A, iters - 1) @ x
    nx = np.linalg.norm(x)
    if not np.isfinite(nx):
        raise NeumannDiverged("non-finite value in power iteration")
    if nx == 0.0:
        return 0.0
    return float(np.linalg.norm(c * (A @ (x / nx))))


def neumann_inverse_dense(
    A: np.ndarray, v, j: int, c: float, spectral_norm: Optional[float] = None, power_iters: int = 20
) -> np.ndarray:
    """The truncated series of :func:`neumann_inverse_hvp` for an explicit ``A``.

    ``x_j = sum_{i=0}^{j} (I - cA)^i v`` is evaluated by doubling
    (``G_{2k} = G_k + M^k G_k``), which needs ``O(log j)`` matrix products
    instead of ``j`` mat-vecs.  The value agrees with the recursion up to
    rounding; the same spectral checks apply.
    """
    if c <= 0:
        raise ValueError("scale c must be positive")
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if spectral_norm is None:
        spectral_norm = spectral_norm_dense(A, c, power_iters)
    if spectral_norm > SPECTRAL_MAX:
        raise SpectralBoundViolated(f"||cH|| estimated at {spectral_norm:.4f} > {SPECTRAL_MAX}")
    if spectral_norm > SPECTRAL_WARN:
        log.warning("||cH|| estimated at %.4f, above 1; proceeding", spectral_norm)
    eye = np.eye(A.shape[0])
    M = eye - c * A
    # G = sum_{i<k} M^i and P = M^k, built over the bits of k = j + 1
    G = np.zeros_like(M)
    P = eye
    for bit in bin(j + 1)[2:]:
        G = G + P @ G
        P = P @ P
        if bit == "1":
            G = eye + M @ G
            P = M @ P
    x = G @ v
    if not np.all(np.isfinite(x)):
        raise NeumannDiverged("non-finite Neumann iterate")
    return c * x


def _solve(hvp, A, v, cfg: "InfluenceConfig", c: float):
    """Spectral check plus truncated-series solve, dense when ``A`` is known."""
    if A is not None:
        rho = spectral_norm_dense(A, c, cfg.power_iters)
        return neumann_inverse_dense(A, v, cfg.neumann_j, c, spectral_norm=rho), rho
    rho = spectral_norm_estimate(hvp, v.shape[0], c, cfg.power_iters)
    return neumann_inverse_hvp(hvp, v, cfg.neumann_j, c, spectral_norm=rho), rho


def _matvec(H: np.ndarray):
    def hvp(v):
        return H @ v

    hvp.matrix = H
    return hvp


def _indices(z_idx) -> np.ndarray:
    return np.atleast_1d(np.asarray(z_idx, dtype=np.int64))


def vi_influence(
    model: EnergyModel,
    lam: MeanFieldGaussianParams,
    S: Dataset,
    z_idx,
    cfg: InfluenceConfig,
    c: Optional[float] = None,
) -> InfluenceVector:
    """Variational influence ``I = -H^{-1} g`` of the datums ``z_idx``.

    ``H`` is the Hessian of ``-ELBO(., S)`` at ``lam`` and ``g`` the summed
    gradient of ``h_vi(lam, z_j) = -E_q log p(z_j | theta)``.  For several
    indices this equals the sum of the single-datum influences.

    Raises
    ------
    StationarityViolated
        If ``lam`` touches a sigma bound, or the gradient check fails.
    """
    idx = _indices(z_idx)
    if not lam.interior():
        raise StationarityViolated("variational scales sit on a projection bound")
    if cfg.vi_method == "mc" or (cfg.vi_method == "auto" and not has_analytic_elbo(model)):
        eps = seeded_rng(cfg.vi_mc_seed).standard_normal((cfg.mc_samples, lam.dim))
        en = variational_energy(model, "mc", eps)
    else:
        en = variational_energy(model, "analytic", gmm_hessian=cfg.gmm_hessian)
    gamma = lam.flat
    X, y = S.active_data()
    n_active = X.shape[0]
    c = cfg.scale(n_active) if c is None else c
    if en.has_analytic_hessian:
        # one pass over the data yields both the stationarity gradient and H
        g_all, H = en.grad_hess_h_sum(gamma, X, y)
        H = H + en.hess_f(gamma)
        if cfg.damping:
            H[np.diag_indices_from(H)] += cfg.damping
        if not np.all(np.isfinite(H)):
            raise DegenerateCurvature("non-finite Hessian")
        hvp = _matvec(H)
    else:
        hvp = hessian_operator(en, gamma, X, y, damping=cfg.damping)
        g_all = en.grad_h_sum(gamma, X, y) if cfg.stationarity_tol is not None else None
    if cfg.stationarity_tol is not None:
        gnorm = np.linalg.norm(en.grad_f(gamma) + g_all)
        if gnorm > cfg.stationarity_tol * max(n_active, 1):
            raise StationarityViolated(
                f"||grad(-ELBO)|| = {gnorm:.3g} exceeds {cfg.stationarity_tol} * n'"
            )
    Xj, yj = S.take(idx)
    g = en.grad_h_sum(gamma, Xj, yj)
    solved, rho = _solve(hvp, hvp.matrix, g, cfg, c)
    return InfluenceVector(-solved, "vi", frozenset(idx.tolist()), c, rho)


def buffer_draw_indices(length: int, m: int, rotation: int = 0) -> np.ndarray:
    """``m`` evenly spaced positions over a buffer of ``length`` samples.

    ``rotation`` shifts the whole grid by a golden-ratio multiple of its
    spacing (modulo the buffer), so successive calls with ``rotation = 0, 1,
    2, ...`` visit different, well-spread subsets of the buffer.
    """
    if m > length:
        raise ValueError("more draws requested than samples retained")
    base = np.round(np.linspace(0, length - 1, m)).astype(np.int64)
    if rotation == 0:
        return base
    spacing = length / m
    shift = int(np.floor(((rotation * _GOLDEN) % 1.0) * spacing))
    return np.sort((base + shift) % length)


def mcmc_influence(
    model: EnergyModel,
    samples: np.ndarray,
    S: Dataset,
    z_idx,
    cfg: InfluenceConfig,
    c: Optional[float] = None,
    rotation: int = 0,
) -> InfluenceVector:
    """Sample-drift influence ``I = -A^{-1} b``.

    ``A v = mean_theta Hess F(theta, S) v`` and
    ``b = mean_theta sum_j grad h(theta, z_j)``, both over ``cfg.mc_samples``
    evenly spaced posterior draws (the same draws serve ``A`` and ``b``);
    ``rotation`` selects which evenly spaced subset, see
    :func:`buffer_draw_indices`.
    ``samples`` is an array of draws or a :class:`~bayesforget.sgmcmc.SampleBuffer`.
    """
    draws = samples.samples if hasattr(samples, "samples") else np.asarray(samples)
    if draws.ndim != 2 or draws.shape[0] == 0:
        raise ValueError("need a nonempty (m, p) array of posterior draws")
    idx = _indices(z_idx)
    chosen = draws[buffer_draw_indices(draws.shape[0], cfg.mc_samples, rotation)]
    X, y = S.active_data()
    c = cfg.scale(X.shape[0]) if c is None else c
    Xj, yj = S.take(idx)
    ops = [hessian_operator(model, th, X, y) for th in chosen]
    p = draws.shape[1]
    A = None
    if all(op.matrix is not None for op in ops):
        A = np.mean([op.matrix for op in ops], axis=0)
        if cfg.damping:
            A[np.diag_indices(p)] += cfg.damping

        def hvp(v):
            return A @ v

    else:

        def hvp(v):
            out = np.mean([op(v) for op in ops], axis=0)
            return out + cfg.damping * v if cfg.damping else out

    b = np.mean([model.grad_h_sum(th, Xj, yj) for th in chosen], axis=0)
    solved, rho = _solve(hvp, A, b, cfg, c)
    return InfluenceVector(-solved, "mcmc", frozenset(idx.tolist()), c, rho)


def group_influence(single_influences: Sequence[InfluenceVector]) -> InfluenceVector:
    """Componentwise sum of influences sharing a target; removed sets are unioned."""
    items = list(single_influences)
    if not items:
        raise ValueError("need at least one influence vector")
    targets = {it.target for it in items}
    if len(targets) != 1:
        raise MixedTargets(f"cannot add influences with targets {sorted(targets)}")
    delta = items[0].delta.copy()
    for it in items[1:]:
        if it.delta.shape != delta.shape:
            raise MixedTargets("influence vectors differ in dimension")
        delta = delta + it.delta
    removed = frozenset().union(*(it.removed for it in items))
    return InfluenceVector(delta, items[0].target, removed, items[0].c, items[0].spectral_norm)
