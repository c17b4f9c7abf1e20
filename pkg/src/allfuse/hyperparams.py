"""The mixed categorical/continuous hyperparameter space searched by BO."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

UNITS_CHOICES = (128, 256, 512, 1024)
OPTIMIZERS = ("SGD", "RMSprop")
LR_BOUNDS = (1e-5, 1e-1)
MOMENTUM_BOUNDS = (0.0, 0.99)
DROPOUT_BOUNDS = (0.0, 0.5)


@dataclass(frozen=True)
class HyperParams:
    units: int = 512
    optimizer: str = "SGD"
    learning_rate: float = 0.01
    momentum: float = 0.9
    dropout_rate: float = 0.1
    activation: str = "softmax"

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(
            units=int(d["units"]),
            optimizer=str(d["optimizer"]),
            learning_rate=float(d["learning_rate"]),
            momentum=float(d["momentum"]),
            dropout_rate=float(d["dropout_rate"]),
            activation=str(d.get("activation", "softmax")),
        )

    def with_overrides(self, **kw) -> "HyperParams":
        return replace(self, **kw)


def _within(v, lo, hi, rel=1e-12):
    slack = rel * max(abs(lo), abs(hi), 1.0)
    return lo - slack <= v <= hi + slack


def validate(h: HyperParams):
    if h.units not in UNITS_CHOICES:
        raise ValueError(f"units must be one of {UNITS_CHOICES}, got {h.units}")
    if h.optimizer not in OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {h.optimizer!r}")
    if h.activation != "softmax":
        raise ValueError("the output activation is fixed to softmax")
    if not (math.isfinite(h.learning_rate) and _within(h.learning_rate, *LR_BOUNDS)):
        raise ValueError(f"learning_rate {h.learning_rate} outside {LR_BOUNDS}")
    if not _within(h.momentum, *MOMENTUM_BOUNDS):
        raise ValueError(f"momentum {h.momentum} outside {MOMENTUM_BOUNDS}")
    if not _within(h.dropout_rate, *DROPOUT_BOUNDS):
        raise ValueError(f"dropout_rate {h.dropout_rate} outside {DROPOUT_BOUNDS}")


# values reported after tuning, keyed by architecture (a: Inception-like, b: MobileNet-like,
# c: EfficientNet-like)
TUNED = {
    "a": HyperParams(units=512, optimizer="SGD", learning_rate=0.01, momentum=0.3, dropout_rate=0.4),
    "b": HyperParams(units=512, optimizer="SGD", learning_rate=0.01, momentum=0.9, dropout_rate=0.1),
    "c": HyperParams(units=256, optimizer="RMSprop", learning_rate=0.0001, momentum=0.5, dropout_rate=0.1),
}
