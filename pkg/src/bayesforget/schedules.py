"""Closed-form step-size schedules, all expressed per datum (divided by ``n``)."""
from __future__ import annotations

from dataclasses import asdict, dataclass
import math

__all__ = ["Schedule"]

_KINDS = ("constant", "power", "step")


@dataclass(frozen=True)
class Schedule:
    """Step size at iteration ``t`` (1-based) for a training set of size ``n``.

    * ``constant``: ``a / n``
    * ``power``: ``a * t**b / n``
    * ``step``: ``a * gamma**floor((t - 1) / every) / n``
    """

    kind: str = "constant"
    a: float = 1.0
    b: float = 0.0
    gamma: float = 1.0
    every: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {_KINDS}")
        if self.a <= 0:
            raise ValueError("schedule scale a must be positive")
        if self.kind == "step" and (self.every <= 0 or self.gamma <= 0):
            raise ValueError("step schedule needs every > 0 and gamma > 0")

    def __call__(self, t: int, n: int) -> float:
        if self.kind == "constant":
            return self.a / n
        if self.kind == "power":
            return self.a * float(t) ** self.b / n
        return self.a * self.gamma ** math.floor((t - 1) / self.every) / n

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(**d)
