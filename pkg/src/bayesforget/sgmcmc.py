"""Stochastic-gradient MCMC: SGLD and SGHMC with a retained-sample buffer.

Both samplers target ``p(theta | S) ~ exp(-F(theta, S))`` using the
mini-batch potential gradient

    grad U~(theta) = (n / |B|) sum_{z in B} grad h(theta, z) + grad f(theta).

Noise arguments are variances throughout: ``N(0, 2 eps)`` is drawn as
``sqrt(2 eps) * xi`` with ``xi`` standard normal.  No Metropolis-Hastings
correction is applied.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .core import Dataset, EpochBatcher, RngStream, as_param
from .errors import ChainDiverged, EmptyActiveSet
from .models import EnergyModel
from .schedules import Schedule

__all__ = [
    "ChainConfig",
    "SampleBuffer",
    "stochastic_grad_U",
    "sgld_step",
    "sghmc_step",
    "sghmc_alpha",
    "run_chain",
    "save_buffer",
    "load_buffer",
]

KINDS = ("sgld", "sghmc")


@dataclass(frozen=True)
class ChainConfig:
    """Sampler settings.

    ``step_schedule`` gives ``eps_t`` (SGLD) or ``eta_t`` (SGHMC).  ``alpha0``
    is the SGHMC friction at ``t = 1``; it then follows ``alpha0 *
    sqrt(eta_t / eta_1)``.
    """

    iterations: int = 2000
    batch_size: int = 64
    step_schedule: Schedule = field(
        default_factory=lambda: Schedule("power", a=4.0, b=-0.15)
    )
    alpha0: float = 0.4
    retain_last: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.retain_last <= self.iterations:
            raise ValueError("need 0 < retain_last <= iterations")
        if not 0.0 < self.alpha0 <= 1.0:
            raise ValueError("alpha0 must lie in (0, 1]")


class SampleBuffer:
    """Retained posterior draws plus a cumulative drift.

    The chain's draws are stored untouched; forgetting accumulates the shift
    in ``drift`` and the working samples are ``draws - drift``.  Geometry
    computed from the stored draws (pairwise differences, covariance) is
    therefore exactly invariant under forgetting.
    """

    def __init__(
        self,
        draws,
        kind: str = "sgld",
        seed: int = 0,
        retain_last: Optional[int] = None,
        model: str = "",
        drift=None,
    ):
        draws = np.array(draws, dtype=np.float64, copy=True)
        if draws.ndim != 2 or draws.shape[0] == 0:
            raise ValueError("draws must be a nonempty (m, p) array")
        if not np.all(np.isfinite(draws)):
            raise ChainDiverged("non-finite sample in buffer")
        if kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        draws.setflags(write=False)
        self.draws = draws
        self.kind = kind
        self.seed = int(seed)
        self.retain_last = int(draws.shape[0] if retain_last is None else retain_last)
        self.model = model
        d = np.zeros(draws.shape[1]) if drift is None else as_param(drift, draws.shape[1], "drift")
        d.setflags(write=False)
        self.drift = d

    def __len__(self) -> int:
        return self.draws.shape[0]

    @property
    def dim(self) -> int:
        return self.draws.shape[1]

    @property
    def samples(self) -> np.ndarray:
        return self.draws - self.drift

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0) - self.drift

    def covariance(self) -> np.ndarray:
        return np.atleast_2d(np.cov(self.draws, rowvar=False))

    def pairwise_differences(self) -> np.ndarray:
        """``D[a, b] = theta_a - theta_b`` for every retained pair."""
        return self.draws[:, None, :] - self.draws[None, :, :]

    def shifted(self, delta) -> "SampleBuffer":
        """Copy with every sample moved by ``-delta``."""
        delta = as_param(delta, self.dim, "delta")
        return SampleBuffer(
            self.draws, self.kind, self.seed, self.retain_last, self.model, self.drift + delta
        )

    def to_json(self) -> dict:
        return {
            "samples": self.samples.tolist(),
            "kind": self.kind,
            "seed": self.seed,
            "retain_last": self.retain_last,
            "model": self.model,
            "base_samples": self.draws.tolist(),
            "drift": self.drift.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SampleBuffer":
        if "base_samples" in obj:
            return cls(
                obj["base_samples"],
                obj["kind"],
                obj["seed"],
                obj["retain_last"],
                obj.get("model", ""),
                obj.get("drift"),
            )
        return cls(obj["samples"], obj["kind"], obj["seed"], obj["retain_last"], obj.get("model", ""))


def save_buffer(buf: SampleBuffer, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(buf.to_json(), indent=1) + "\n", encoding="utf-8")


def load_buffer(path: Union[str, Path]) -> SampleBuffer:
    return SampleBuffer.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# single steps


def _grad_U(model, theta, X, y, n):
    m = X.shape[0]
    return (n / m) * model.grad_h_sum(theta, X, y) + model.grad_f(theta)


def stochastic_grad_U(
    model: EnergyModel, theta, S: Dataset, batch, rng: Optional[RngStream] = None
) -> np.ndarray:
    """Mini-batch potential gradient ``(n/|B|) sum_B grad h + grad f``.

    ``batch`` is either an array of dataset indices (all active) or an int
    batch size, in which case active indices are drawn without replacement
    from ``rng``.
    """
    theta = model.check_param(theta)
    n = S.n_active
    if n == 0:
        raise EmptyActiveSet("no active datums")
    if np.isscalar(batch):
        if rng is None:
            raise ValueError("an rng is needed to sample a batch")
        size = min(int(batch), n)
        batch = S.active_indices[rng.choice(n, size=size, replace=False)]
    X, y = S.take(batch)
    return _grad_U(model, theta, X, y, n)


def sgld_step(theta, g, eps: float, rng: Union[RngStream, None] = None, xi=None) -> np.ndarray:
    """``theta - eps g + N(0, 2 eps)``; ``xi`` overrides the standard-normal draw."""
    if eps <= 0:
        raise ValueError("step size must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    if xi is None:
        xi = rng.standard_normal(theta.shape)
    return theta - eps * np.asarray(g) + np.sqrt(2.0 * eps) * xi


def sghmc_step(theta, v, g, eta: float, alpha: float, rng=None, xi=None):
    """``theta' = theta + v`` and ``v' = (1 - alpha) v - eta g + N(0, 2 alpha eta)``."""
    if eta <= 0:
        raise ValueError("step size must be positive")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    theta = np.asarray(theta, dtype=np.float64)
    if xi is None:
        xi = rng.standard_normal(theta.shape)
    v = np.asarray(v, dtype=np.float64)
    return theta + v, (1.0 - alpha) * v - eta * np.asarray(g) + np.sqrt(2.0 * alpha * eta) * xi


def sghmc_alpha(alpha0: float, eta_t: float, eta_1: float) -> float:
    """Friction coupled to the step size: decaying eta by ``c`` decays alpha by ``sqrt(c)``."""
    return min(1.0, alpha0 * np.sqrt(eta_t / eta_1))


# ---------------------------------------------------------------------------


def run_chain(
    model: EnergyModel,
    S: Dataset,
    cfg: ChainConfig,
    kind: str = "sgld",
    init=None,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
) -> SampleBuffer:
    """Run SGLD or SGHMC on the active datums of ``S``.

    Random streams are spawned from ``cfg.seed``: 0 for initialisation, 1 for
    batches, 2 for the injected noise.

    Raises
    ------
    ChainDiverged
        If the state becomes non-finite.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    X, y = S.active_data()
    n = X.shape[0]
    if n == 0:
        raise EmptyActiveSet("no active datums")
    root = RngStream(cfg.seed)
    theta = (
        model.check_param(init)
        if init is not None
        else model.init_params(root.spawn(0), X)
    )
    batcher = EpochBatcher(n, cfg.batch_size, root.spawn(1))
    noise = root.spawn(2)
    sched = cfg.step_schedule
    eta1 = sched(1, n)
    v = noise.normal(eta1, theta.shape) if kind == "sghmc" else None
    kept = np.empty((cfg.retain_last, theta.shape[0]))
    start = cfg.iterations - cfg.retain_last
    for t in range(1, cfg.iterations + 1):
        pos = batcher.next()
        Xb = X[pos]
        yb = None if y is None else y[pos]
        g = _grad_U(model, theta, Xb, yb, n)
        step = sched(t, n)
        xi = noise.standard_normal(theta.shape)
        if kind == "sgld":
            theta = sgld_step(theta, g, step, xi=xi)
        else:
            theta, v = sghmc_step(theta, v, g, step, sghmc_alpha(cfg.alpha0, step, eta1), xi=xi)
        if not np.all(np.isfinite(theta)):
            raise ChainDiverged(f"non-finite state at iteration {t}")
        if t > start:
            kept[t - start - 1] = theta
        if callback is not None:
            callback(t, theta)
    return SampleBuffer(kept, kind, cfg.seed, cfg.retain_last, getattr(model, "name", ""))
