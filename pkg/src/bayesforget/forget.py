"""Batched forgetting operators, removal certificates and PAC-Bayes bounds.

``forget_vi`` moves variational parameters by ``lam <- lam - I_VI`` and
``forget_mcmc`` moves every retained posterior sample by ``theta <- theta -
I_MCMC``; both remove the request in batches and refresh the influence at the
new state (current parameters, shrunken active set, ``c = scale(n')``)
before each batch.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Dataset
from .errors import BayesForgetError, BoundsViolated, DegenerateCurvature, DimensionMismatch
from .influence import InfluenceConfig, group_influence, mcmc_influence, vi_influence
from .models import EnergyModel, fd_step
from .sgmcmc import SampleBuffer
from .vi import MeanFieldGaussianParams

__all__ = [
    "ForgetRequest",
    "Certificate",
    "BoundReport",
    "forget_vi",
    "forget_mcmc",
    "kl_meanfield",
    "kl_gaussian",
    "vi_certificate",
    "mcmc_certificate",
    "fisher_estimate",
    "generalization_bound",
    "pac_bayes_bound",
]


@dataclass(frozen=True)
class ForgetRequest:
    """Indices to remove, processed ``batch_size`` at a time in the given order."""

    indices: tuple
    batch_size: int = 4
    influence: InfluenceConfig = field(default_factory=InfluenceConfig)

    def __post_init__(self):
        idx = tuple(int(i) for i in np.asarray(self.indices, dtype=np.int64).reshape(-1))
        if len(set(idx)) != len(idx):
            raise ValueError("forget request contains duplicate indices")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        object.__setattr__(self, "indices", idx)

    def batches(self):
        for start in range(0, len(self.indices), self.batch_size):
            yield np.asarray(self.indices[start : start + self.batch_size], dtype=np.int64)


def _audit_row(b, idx, n_before, infl, damping, elapsed, state):
    return {
        "batch": b,
        "removed": [int(i) for i in idx],
        "n_active": n_before - len(idx),
        "influence_norm": infl.norm,
        "c": infl.c,
        "damping": damping,
        "spectral_norm": infl.spectral_norm,
        "elapsed": elapsed,
        "state": state,
    }


def _check_active(S: Dataset, req: ForgetRequest):
    if req.indices:
        S.remove(req.indices)  # validates range and activity without keeping the copy


def forget_vi(
    lam: MeanFieldGaussianParams,
    model: EnergyModel,
    S: Dataset,
    req: ForgetRequest,
    record_states: bool = False,
):
    """Remove ``req.indices`` from a variational posterior.

    Returns
    -------
    lam_minus : MeanFieldGaussianParams
    S_minus : Dataset
        ``S`` with every requested index masked.
    audit : list of dict
        One row per batch: removed indices, ``n'`` after the batch, ``||I||``,
        ``c``, damping, spectral-norm estimate and elapsed seconds.  With
        ``record_states`` the row also carries the flat parameters.

    On failure the raised error carries ``audit`` and ``partial = (lam, S)``
    for the batches already processed.
    """
    _check_active(S, req)
    audit: list = []
    cur, Sc = lam, S
    t0 = time.perf_counter()
    for b, idx in enumerate(req.batches()):
        try:
            infl = group_influence([vi_influence(model, cur, Sc, idx, req.influence)])
            cur = MeanFieldGaussianParams.from_flat(
                cur.flat - infl.delta, cur.sigma_min, cur.sigma_max, project=True
            )
        except BayesForgetError as exc:
            exc.audit = audit
            exc.partial = (cur, Sc)
            raise
        n_before = Sc.n_active
        Sc = Sc.remove(idx)
        state = cur.flat.tolist() if record_states else None
        audit.append(
            _audit_row(b, idx, n_before, infl, req.influence.damping, time.perf_counter() - t0, state)
        )
    return cur, Sc, audit


def forget_mcmc(
    buffer: SampleBuffer,
    model: EnergyModel,
    S: Dataset,
    req: ForgetRequest,
    record_states: bool = False,
):
    """Remove ``req.indices`` from a sample buffer by drifting every sample.

    Each batch uses a different evenly spaced subset of the buffer for the
    Monte Carlo expectations (see ``rotation`` in
    :func:`~bayesforget.influence.mcmc_influence`).  Returns ``(buffer',
    S_minus, audit)`` like :func:`forget_vi`; recorded states are the
    cumulative drift.
    """
    _check_active(S, req)
    audit: list = []
    cur, Sc = buffer, S
    t0 = time.perf_counter()
    for b, idx in enumerate(req.batches()):
        try:
            infl = group_influence(
                [mcmc_influence(model, cur, Sc, idx, req.influence, rotation=b)]
            )
            cur = cur.shifted(infl.delta)
        except BayesForgetError as exc:
            exc.audit = audit
            exc.partial = (cur, Sc)
            raise
        n_before = Sc.n_active
        Sc = Sc.remove(idx)
        state = cur.drift.tolist() if record_states else None
        audit.append(
            _audit_row(b, idx, n_before, infl, req.influence.damping, time.perf_counter() - t0, state)
        )
    return cur, Sc, audit


# ---------------------------------------------------------------------------
# certificates


@dataclass(frozen=True)
class Certificate:
    """A removal certificate ``KL(processed || retrained) <= epsilon``.

    ``components`` holds the named addends whose sum is ``epsilon``;
    ``inputs`` records what the value was computed from.
    """

    epsilon: float
    kind: str
    components: dict
    inputs: dict
    caveat: Optional[str] = None

    def summary(self) -> str:
        return f"ε={self.epsilon:.6g} kind={self.kind} n={self.inputs.get('n', '-')}"

    def to_json(self) -> dict:
        out = {
            "epsilon": self.epsilon,
            "kind": self.kind,
            "components": dict(self.components),
            "inputs": dict(self.inputs),
        }
        if self.caveat:
            out["caveat"] = self.caveat
        return out


def kl_meanfield(lam1: MeanFieldGaussianParams, lam2: MeanFieldGaussianParams) -> float:
    """Exact ``KL(N(mu1, diag sigma1^2) || N(mu2, diag sigma2^2))``."""
    mu1, s1 = np.asarray(lam1.mu), np.asarray(lam1.sigma)
    mu2, s2 = np.asarray(lam2.mu), np.asarray(lam2.sigma)
    if mu1.shape != mu2.shape:
        raise DimensionMismatch("variational parameters differ in dimension")
    if np.any(s1 <= 0) or np.any(s2 <= 0):
        raise BoundsViolated("scales must be positive")
    r = (s1 / s2) ** 2
    return float(0.5 * np.sum(r - 1.0 + (mu1 - mu2) ** 2 / s2**2 - np.log(r)))


def kl_gaussian(m1, C1, m2, C2) -> float:
    """Exact KL between full-covariance Gaussians ``N(m1, C1) || N(m2, C2)``."""
    m1, m2 = np.atleast_1d(m1).astype(float), np.atleast_1d(m2).astype(float)
    C1, C2 = np.atleast_2d(C1).astype(float), np.atleast_2d(C2).astype(float)
    L2 = np.linalg.cholesky(C2)
    sol = np.linalg.solve(L2, m2 - m1)
    tr = np.trace(np.linalg.solve(C2, C1))
    logdet1 = np.linalg.slogdet(C1)[1]
    logdet2 = 2.0 * np.sum(np.log(np.diag(L2)))
    return float(0.5 * (tr + sol @ sol - m1.shape[0] + logdet2 - logdet1))


def vi_certificate(
    lam_minus: MeanFieldGaussianParams,
    lam_retrain: MeanFieldGaussianParams,
    M1: float,
    M2: float,
    n: Optional[int] = None,
) -> Certificate:
    """``eps = (2 (M1 + M2) ||D||_1 + ||D||_2^2) / (2 M1^2)`` with ``D = lam_minus - lam_retrain``.

    Raises
    ------
    BoundsViolated
        If either scale vector leaves ``[M1, M2]``.

    ``n`` (the remaining training-set size) is only recorded.
    """
    if not 0 < M1 <= M2:
        raise BoundsViolated("need 0 < M1 <= M2")
    for lam in (lam_minus, lam_retrain):
        if np.any(lam.sigma < M1) or np.any(lam.sigma > M2):
            raise BoundsViolated(f"sigma outside [{M1}, {M2}]")
    D = lam_minus.flat - lam_retrain.flat
    l1 = float(np.sum(np.abs(D)))
    l2sq = float(D @ D)
    a = 2.0 * (M1 + M2) * l1 / (2.0 * M1**2)
    b = l2sq / (2.0 * M1**2)
    return Certificate(
        epsilon=a + b,
        kind="vi-meanfield",
        components={"linear": a, "quadratic": b},
        inputs={"M1": M1, "M2": M2, "dim": lam_minus.dim, "l1": l1, "l2_squared": l2sq,
                **({} if n is None else {"n": int(n)})},
    )


def _require_spd(J: np.ndarray, name: str) -> np.ndarray:
    J = np.atleast_2d(np.asarray(J, dtype=np.float64))
    if J.shape[0] != J.shape[1] or not np.allclose(J, J.T, rtol=1e-10, atol=1e-12):
        raise DegenerateCurvature(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(J)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCurvature(f"{name} is not positive definite") from exc
    return J


def mcmc_certificate(theta1_p, theta2, J1, J2, n: int, caveat: Optional[str] = None) -> Certificate:
    """``eps = (n-1) D' J2 D + tr(J1^{-1} (J2 - J1)) + log(|J1| / |J2|)`` with ``D = theta1' - theta2``.

    ``J1`` and ``J2`` are the Fisher information at the processed and the
    retrained parameters.  The value presumes asymptotically Gaussian
    posteriors; ``caveat`` records when that is doubtful.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    J1 = _require_spd(J1, "J1")
    J2 = _require_spd(J2, "J2")
    D = np.atleast_1d(np.asarray(theta1_p, float) - np.asarray(theta2, float))
    if D.shape[0] != J1.shape[0] or J1.shape != J2.shape:
        raise DimensionMismatch("parameter and Fisher dimensions differ")
    quad = float((n - 1) * D @ J2 @ D)
    trace = float(np.trace(np.linalg.solve(J1, J2 - J1)))
    logdet = float(np.linalg.slogdet(J1)[1] - np.linalg.slogdet(J2)[1])
    return Certificate(
        epsilon=quad + trace + logdet,
        kind="mcmc-gaussian",
        components={"drift": quad, "trace": trace, "log_det": logdet},
        inputs={"n": int(n), "dim": int(D.shape[0]), "drift_norm": float(np.linalg.norm(D))},
        caveat=caveat,
    )


def fisher_estimate(model: EnergyModel, theta, S: Dataset) -> np.ndarray:
    """Observed Fisher information: mean of ``Hess h(theta, z)`` over active ``z``.

    Uses the analytic curvature when the model has it and central
    differences of the summed gradient otherwise; the result is symmetrised.
    """
    theta = model.check_param(theta)
    X, y = S.active_data()
    n = X.shape[0]
    if n == 0:
        raise ValueError("no active datums")
    if model.has_analytic_hessian:
        H = model.hess_h_sum(theta, X, y)
    else:
        p = theta.shape[0]
        step = fd_step(theta)
        H = np.empty((p, p))
        for k in range(p):
            e = np.zeros(p)
            e[k] = step
            H[:, k] = (model.grad_h_sum(theta + e, X, y) - model.grad_h_sum(theta - e, X, y)) / (2 * step)
    H = H / n
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# generalization bounds


@dataclass(frozen=True)
class BoundReport:
    """PAC-Bayes bound ``empirical_risk + sqrt(radicand)``; ``terms`` are the named addends."""

    kind: str
    bound: float
    empirical_risk: float
    C: float
    n: int
    delta: float
    terms: dict

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "bound": self.bound,
            "empirical_risk": self.empirical_risk,
            "C": self.C,
            "n": self.n,
            "delta": self.delta,
            "terms": dict(self.terms),
        }


def _check_common(n, delta, emp):
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if not 0.0 <= emp <= 1.0:
        raise ValueError("empirical risk must lie in [0, 1]")
    if n < 1:
        raise ValueError("n must be >= 1")


def pac_bayes_bound(kl: float, n: int, delta: float, empirical_risk: float) -> BoundReport:
    """Generic form ``R_hat + sqrt((KL + log(1/delta) + log n + 2) / (2n - 1))``."""
    _check_common(n, delta, empirical_risk)
    if kl < 0:
        raise ValueError("KL must be nonnegative")
    rad = (kl + np.log(1.0 / delta) + np.log(n) + 2.0) / (2 * n - 1)
    return BoundReport(
        "pac-bayes",
        float(empirical_risk + np.sqrt(rad)),
        float(empirical_risk),
        float(kl),
        int(n),
        float(delta),
        {"kl": float(kl), "radicand": float(rad)},
    )


def generalization_bound(
    kind: str,
    *,
    n: int,
    delta: float,
    empirical_risk: float,
    lam=None,
    delta_lam=None,
    theta=None,
    delta_theta=None,
    J=None,
    kl: Optional[float] = None,
) -> BoundReport:
    """Evaluate a bound on the risk of the processed posterior.

    ``kind="vi"``: mean-field Gaussian ``lam = (mu, sigma)`` with influence
    ``delta_lam = (D_mu, D_sigma)``::

        C = ||D||^2 + 2 ||lam|| ||D|| + ||lam||^2 - 2 sum_k log(sigma_k - D_sigma_k)
        bound = R_hat + sqrt((C + 2 log(1/delta) + 2 log n - d + 4) / (4n - 2))

    ``kind="mcmc"``: Gaussian posterior at ``theta`` with Fisher matrix ``J``
    and drift ``delta_theta``::

        C = ||D||^2 + 2 ||theta|| ||D|| + ||theta||^2 + tr(J^{-1}) / n + log|J|
        bound = R_hat + sqrt((C + 2 log(1/delta) + (d + 2) log n - d + 4) / (4n - 2))

    ``kind="pac-bayes"``: the generic form with a given ``kl``.
    """
    if kind == "pac-bayes":
        if kl is None:
            raise ValueError("pac-bayes bound needs kl")
        return pac_bayes_bound(kl, n, delta, empirical_risk)
    _check_common(n, delta, empirical_risk)
    if kind == "vi":
        lam = np.asarray(lam.flat if hasattr(lam, "flat") else lam, dtype=np.float64)
        D = np.asarray(delta_lam, dtype=np.float64).reshape(-1)
        if lam.shape != D.shape or lam.shape[0] % 2:
            raise DimensionMismatch("lam and delta_lam must share an even dimension")
        d = lam.shape[0] // 2
        shrunk = lam[d:] - D[d:]
        if np.any(shrunk <= 0):
            raise BoundsViolated("sigma - delta_sigma must be positive")
        nl, nd = float(np.linalg.norm(lam)), float(np.linalg.norm(D))
        log_term = float(-2.0 * np.sum(np.log(shrunk)))
        C = nd**2 + 2 * nl * nd + nl**2 + log_term
        terms = {"delta_sq": nd**2, "cross": 2 * nl * nd, "param_sq": nl**2, "log_sigma": log_term}
        num = C + 2 * np.log(1 / delta) + 2 * np.log(n) - d + 4
    elif kind == "mcmc":
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        D = np.atleast_1d(np.asarray(delta_theta, dtype=np.float64))
        J = _require_spd(J, "J")
        if theta.shape != D.shape or J.shape[0] != theta.shape[0]:
            raise DimensionMismatch("theta, delta_theta and J dimensions differ")
        d = theta.shape[0]
        nt, nd = float(np.linalg.norm(theta)), float(np.linalg.norm(D))
        tr = float(np.trace(np.linalg.inv(J))) / n
        logdet = float(np.linalg.slogdet(J)[1])
        C = nd**2 + 2 * nt * nd + nt**2 + tr + logdet
        terms = {"delta_sq": nd**2, "cross": 2 * nt * nd, "param_sq": nt**2, "trace": tr, "log_det": logdet}
        num = C + 2 * np.log(1 / delta) + (d + 2) * np.log(n) - d + 4
    else:
        raise ValueError(f"unknown bound kind {kind!r}")
    rad = num / (4 * n - 2)
    if rad < 0:
        raise ValueError("bound radicand is negative for these inputs")
    terms["radicand"] = float(rad)
    return BoundReport(
        kind,
        float(empirical_risk + np.sqrt(rad)),
        float(empirical_risk),
        float(C),
        int(n),
        float(delta),
        terms,
    )
