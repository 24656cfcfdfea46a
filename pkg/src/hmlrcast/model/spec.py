"""Model taxonomy (covariance x trend x count distribution, plus the pooled baseline)."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Covariance(str, Enum):
    SHARED = "S"
    INDIVIDUAL = "I"
    CORRELATED = "C"


class Trend(str, Enum):
    LINEAR = "L"
    CUBIC = "C"

    @property
    def P(self) -> int:
        return 2 if self is Trend.LINEAR else 4


class Likelihood(str, Enum):
    MULTINOMIAL = "M"
    DIRICHLET_MULTINOMIAL = "D"


@dataclass(frozen=True)
class ModelSpec:
    covariance: Covariance = Covariance.SHARED
    trend: Trend = Trend.LINEAR
    likelihood: Likelihood = Likelihood.MULTINOMIAL
    is_baseline: bool = False

    def __post_init__(self):
        if self.is_baseline and (
            self.covariance is not Covariance.SHARED
            or self.trend is not Trend.LINEAR
            or self.likelihood is not Likelihood.MULTINOMIAL
        ):
            raise ValueError("the baseline is pooled, linear and multinomial")

    @property
    def code(self) -> str:
        if self.is_baseline:
            return "baseline"
        return self.covariance.value + self.trend.value + self.likelihood.value

    @property
    def P(self) -> int:
        return self.trend.P

    @property
    def is_dm(self) -> bool:
        return self.likelihood is Likelihood.DIRICHLET_MULTINOMIAL

    @classmethod
    def parse(cls, code: str) -> "ModelSpec":
        code = code.strip()
        if code.lower() == "baseline":
            return BASELINE
        if len(code) != 3:
            raise ValueError(f"unknown model code {code!r}")
        try:
            return cls(Covariance(code[0]), Trend(code[1]), Likelihood(code[2]))
        except ValueError:
            raise ValueError(f"unknown model code {code!r}") from None

    def __str__(self) -> str:
        return self.code


BASELINE = ModelSpec(is_baseline=True)

HMLR_SPECS: tuple[ModelSpec, ...] = tuple(
    ModelSpec(c, t, d)
    for c in Covariance
    for t in Trend
    for d in Likelihood
)
ALL_SPECS: tuple[ModelSpec, ...] = HMLR_SPECS + (BASELINE,)


def parse_specs(text: str | list[str]) -> list[ModelSpec]:
    """Parse ``"all"``, ``"hmlr"`` or a comma list of codes."""
    items = text.split(",") if isinstance(text, str) else list(text)
    out: list[ModelSpec] = []
    for item in items:
        item = item.strip()
        if item.lower() == "all":
            out.extend(ALL_SPECS)
        elif item.lower() == "hmlr":
            out.extend(HMLR_SPECS)
        elif item:
            out.append(ModelSpec.parse(item))
    seen = set()
    return [s for s in out if not (s in seen or seen.add(s))]


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Polynomial time covariates ``x[t, p] = scaled(t) ** p`` for p = 0..P-1.

    ``days`` are raw indices (0 = first training day); ``center``/``scale`` map
    them affinely so the training window spans [-1, 1].  Prediction rows reuse
    the same map via :meth:`at`.
    """

    days: np.ndarray
    P: int
    center: float
    scale: float

    @classmethod
    def for_window(cls, n_days: int, P: int) -> "DesignMatrix":
        half = max(n_days - 1, 1) / 2.0
        return cls(np.arange(n_days), P, half, half)

    def at(self, days) -> "DesignMatrix":
        return DesignMatrix(np.asarray(days), self.P, self.center, self.scale)

    def with_degree(self, P: int) -> "DesignMatrix":
        return DesignMatrix(self.days, P, self.center, self.scale)

    @property
    def scaled_time(self) -> np.ndarray:
        return (np.asarray(self.days, dtype=float) - self.center) / self.scale

    @property
    def X(self) -> np.ndarray:
        return self.scaled_time[:, None] ** np.arange(self.P)

    def to_dict(self) -> dict:
        return {"P": self.P, "center": self.center, "scale": self.scale}
