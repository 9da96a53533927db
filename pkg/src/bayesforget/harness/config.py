"""Experiment configuration: a flat TOML file of typed keys.

Grammar
-------
One ``key = value`` per line (TOML syntax).  Values are strings, integers,
floats or lists of numbers.  Unknown keys are rejected.  Keys left out take
defaults that depend on ``model`` and ``inference``; :func:`load_config`
materialises them, so a written config is always fully explicit.

Schedules are templates with parameters: ``schedule = "power"``,
``schedule_a = 4.0``, ``schedule_b = -0.15`` means ``4.0 * t**-0.15 / n``.
``schedule = "step"`` uses ``schedule_gamma`` and ``schedule_every``.
"""
from __future__ import annotations

import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..errors import ConfigError
from ..influence import InfluenceConfig, ScalePolicy
from ..schedules import Schedule
from ..sgmcmc import ChainConfig
from ..vi import ViConfig

__all__ = ["ExperimentConfig", "load_config", "save_config", "apply_overrides", "MODELS", "INFERENCE"]

MODELS = ("gmm", "conjugate", "classifier")
INFERENCE = ("vi", "sgld", "sghmc")
CORNERS = [2.0, 2.0, -2.0, 2.0, -2.0, -2.0, 2.0, -2.0]

# model/inference specific defaults, applied where a key is left unset (None)
_DEFAULTS = {
    "gmm": dict(
        n=2000, dim=2, n_components=4, prior_std=1.0, n_test=400, iterations=2000,
        batch_size=64, forget_batch_size=4, neumann_j=32, remove_classes=[0, 2],
        remove_per_class=400, alpha0=0.4, retain_last=500, stationarity_tol=0.05,
    ),
    "conjugate": dict(
        n=400, dim=1, n_components=1, prior_std=1.0, n_test=200, iterations=2000,
        batch_size=400, forget_batch_size=4, neumann_j=64, remove_classes=[0],
        remove_per_class=8, alpha0=0.4, retain_last=500, stationarity_tol=0.05,
    ),
    "classifier": dict(
        n=600, dim=2, n_components=3, prior_std=0.15, n_test=300, iterations=3000,
        batch_size=128, forget_batch_size=64, neumann_j=64, remove_classes=[0],
        remove_per_class=128, alpha0=0.4, retain_last=500, stationarity_tol=0.25,
    ),
}
_SCHEDULES = {
    ("gmm", "vi"): ("constant", 2.0, 0.0, 1.0, 0),
    ("gmm", "sgld"): ("power", 4.0, -0.15, 1.0, 0),
    ("gmm", "sghmc"): ("power", 2.0, -0.15, 1.0, 0),
    ("conjugate", "vi"): ("constant", 0.5, 0.0, 1.0, 0),
    ("conjugate", "sgld"): ("power", 0.5, -0.15, 1.0, 0),
    ("conjugate", "sghmc"): ("power", 0.5, -0.15, 1.0, 0),
    ("classifier", "vi"): ("step", 0.5, 0.0, 0.1, 1200),
    ("classifier", "sgld"): ("power", 0.5, -0.5, 1.0, 0),
    ("classifier", "sghmc"): ("power", 0.5, -0.5, 1.0, 0),
}
_SCALE = {
    ("gmm", "vi"): 1.0,
    ("gmm", "sgld"): 1.0,
    ("gmm", "sghmc"): 1.0,
    ("conjugate", "vi"): 0.45,
    ("conjugate", "sgld"): 0.9,
    ("conjugate", "sghmc"): 0.9,
    ("classifier", "vi"): 0.1,
    ("classifier", "sgld"): 0.005,
    ("classifier", "sghmc"): 0.05,
}


@dataclass
class ExperimentConfig:
    """Every knob of one train / forget / retrain / certify run."""

    model: str = "gmm"
    inference: str = "vi"
    seed: int = 0
    data_seed: int = 0
    # data
    n: Optional[int] = None
    dim: Optional[int] = None
    n_components: Optional[int] = None
    cluster_means: Optional[list] = None
    n_test: Optional[int] = None
    hidden: int = 0
    prior_std: Optional[float] = None
    # training
    iterations: Optional[int] = None
    batch_size: Optional[int] = None
    schedule: Optional[str] = None
    schedule_a: Optional[float] = None
    schedule_b: Optional[float] = None
    schedule_gamma: Optional[float] = None
    schedule_every: Optional[int] = None
    vi_mc_samples: int = 5
    sigma_min: float = 1e-3
    sigma_max: float = 1e3
    sigma_init: float = 1.0
    average_tail: float = 0.5
    alpha0: Optional[float] = None
    retain_last: Optional[int] = None
    # forgetting
    remove_classes: Optional[list] = None
    remove_per_class: Optional[int] = None
    remove_indices: list = field(default_factory=list)
    forget_batch_size: Optional[int] = None
    neumann_j: Optional[int] = None
    scale_factor: Optional[float] = None
    influence_mc_samples: int = 5
    damping: float = 0.0
    gmm_hessian: str = "total"
    # ||grad F|| / n' allowed at the expansion point; <= 0 disables the check
    stationarity_tol: Optional[float] = None
    # reporting
    bound_delta: float = 0.05
    risk_draws: int = 20
    out_dir: str = ""

    # ------------------------------------------------------------------
    def resolved(self) -> "ExperimentConfig":
        """Copy with every unset key filled from the model/inference defaults."""
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.inference not in INFERENCE:
            raise ConfigError(f"inference must be one of {INFERENCE}, got {self.inference!r}")
        vals = asdict(self)
        for k, v in _DEFAULTS[self.model].items():
            if vals[k] is None:
                vals[k] = v
        kind, a, b, gamma, every = _SCHEDULES[(self.model, self.inference)]
        for k, v in zip(("schedule", "schedule_a", "schedule_b", "schedule_gamma", "schedule_every"),
                        (kind, a, b, gamma, every)):
            if vals[k] is None:
                vals[k] = v
        if vals["scale_factor"] is None:
            vals["scale_factor"] = _SCALE[(self.model, self.inference)]
        if vals["cluster_means"] is None:
            vals["cluster_means"] = _default_means(self.model, vals["n_components"], vals["dim"])
        cfg = ExperimentConfig(**vals)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.n > 0 and self.dim > 0 and self.n_components > 0, "n, dim, n_components must be positive")
        need(self.n % self.n_components == 0, "n must be divisible by n_components")
        need(len(self.cluster_means) == self.n_components * self.dim,
             "cluster_means must list n_components * dim numbers")
        need(self.iterations > 0 and self.batch_size > 0, "iterations and batch_size must be positive")
        need(0 < self.retain_last <= self.iterations, "need 0 < retain_last <= iterations")
        need(self.forget_batch_size > 0 and self.neumann_j > 0, "forget_batch_size and neumann_j must be positive")
        need(self.scale_factor > 0, "scale_factor must be positive")
        need(0 < self.bound_delta < 1, "bound_delta must lie in (0, 1)")
        need(0 <= self.hidden <= 16, "hidden must lie in [0, 16]")
        need(self.model != "conjugate" or self.n_components == 1, "the conjugate model has one component")
        need(self.remove_per_class <= self.n // self.n_components, "remove_per_class exceeds class size")
        need(all(0 <= c < self.n_components for c in self.remove_classes), "remove_classes out of range")
        need(self.gmm_hessian in ("total", "fixed"), "gmm_hessian must be 'total' or 'fixed'")
        try:
            self.schedule_obj()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # ------------------------------------------------------------------
    def schedule_obj(self) -> Schedule:
        return Schedule(self.schedule, self.schedule_a, self.schedule_b, self.schedule_gamma,
                        self.schedule_every)

    def vi_config(self, seed: Optional[int] = None) -> ViConfig:
        return ViConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            lr_schedule=self.schedule_obj(),
            mc_samples=self.vi_mc_samples,
            sigma_min=self.sigma_min,
            sigma_max=self.sigma_max,
            sigma_init=self.sigma_init,
            average_tail=self.average_tail,
            seed=self.seed if seed is None else seed,
        )

    def chain_config(self, seed: Optional[int] = None) -> ChainConfig:
        return ChainConfig(
            iterations=self.iterations,
            batch_size=self.batch_size,
            step_schedule=self.schedule_obj(),
            alpha0=self.alpha0,
            retain_last=self.retain_last,
            seed=self.seed if seed is None else seed,
        )

    def influence_config(self) -> InfluenceConfig:
        return InfluenceConfig(
            neumann_j=self.neumann_j,
            scale=ScalePolicy(self.scale_factor),
            mc_samples=self.influence_mc_samples,
            damping=self.damping,
            stationarity_tol=self.stationarity_tol if self.stationarity_tol > 0 else None,
            vi_mc_seed=self.seed,
            gmm_hessian=self.gmm_hessian,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _default_means(model: str, K: int, d: int) -> list:
    if model == "gmm" and K == 4 and d == 2:
        return list(CORNERS)
    if model == "conjugate":
        return [2.0] * d
    # K points on a circle of radius 2 (extra dims zero)
    out = []
    for k in range(K):
        ang = 2 * math.pi * k / K
        v = [0.0] * d
        v[0] = round(2.0 * math.cos(ang), 12)
        if d > 1:
            v[1] = round(2.0 * math.sin(ang), 12)
        out.extend(v)
    return out


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}
_INT_KEYS = {"seed", "data_seed", "n", "dim", "n_components", "n_test", "hidden", "iterations",
             "batch_size", "schedule_every", "vi_mc_samples", "retain_last", "remove_per_class",
             "forget_batch_size", "neumann_j", "influence_mc_samples", "risk_draws"}
_STR_KEYS = {"model", "inference", "schedule", "gmm_hessian", "out_dir"}
_LIST_KEYS = {"cluster_means", "remove_classes", "remove_indices"}


def _coerce(key: str, value: Any):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        if key in _STR_KEYS:
            if not isinstance(value, str):
                raise TypeError
            return value
        if key in _LIST_KEYS:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            if key == "cluster_means":
                return [float(v) for v in value]
            return [int(v) for v in value]
        if key in _INT_KEYS:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(value, bool):
            raise TypeError
        return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r} for key {key!r}") from exc


def load_config(source: Union[str, Path, dict, None] = None, overrides: Optional[dict] = None,
                env: Optional[dict] = None) -> ExperimentConfig:
    """Parse a TOML file (or a dict), apply overrides and ``BIF_SEED``, resolve defaults."""
    raw: dict = {}
    if isinstance(source, dict):
        raw = dict(source)
    elif source is not None:
        try:
            raw = tomllib.loads(Path(source).read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {source}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read {source}: {exc}") from exc
    raw.update(overrides or {})
    env = os.environ if env is None else env
    if env.get("BIF_SEED"):
        raw["seed"] = env["BIF_SEED"]
    vals = {k: _coerce(k, v) for k, v in raw.items()}
    return ExperimentConfig(**vals).resolved()


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    vals = {k: _coerce(k, v) for k, v in overrides.items()}
    return replace(cfg, **vals).resolved()


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_config(cfg), encoding="utf-8")


def dumps_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())
