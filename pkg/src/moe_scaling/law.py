"""The joint dense/MoE scaling law.

    L(N, D, E) = a Ê^δ N^(α + γ ln Ê) + b Ê^ω D^(β + ζ ln Ê) + c

where Ê is a saturating transform of the expert count bounded by
``e_start`` (at E = 1) and ``e_max`` (as E grows). All logarithms are
natural. At a fixed E the law is a Chinchilla-form law ``m N^μ + n D^ν + c``.

Functions accept scalars or numpy arrays and broadcast.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InvalidCoefficients

COEFFICIENTS_ENV = "MOE_SCALING_COEFFICIENTS"


@dataclass(frozen=True)
class ScalingCoefficients:
    a: float
    alpha: float
    delta: float
    gamma: float
    b: float
    beta: float
    omega: float
    zeta: float
    e_start: float
    e_max: float
    c: float

    def __post_init__(self):
        values = asdict(self)
        bad = [k for k, v in values.items() if not math.isfinite(v)]
        if bad:
            raise InvalidCoefficients(f"non-finite coefficients: {', '.join(bad)}")
        for name in ("a", "b", "c", "e_start", "e_max"):
            if values[name] <= 0:
                raise InvalidCoefficients(f"{name} must be positive, got {values[name]}")
        if self.e_start >= self.e_max:
            raise InvalidCoefficients(
                f"e_start ({self.e_start}) must be below e_max ({self.e_max})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScalingCoefficients":
        names = [f.name for f in fields(cls)]
        missing = [n for n in names if n not in data]
        if missing:
            raise InvalidCoefficients(f"missing coefficients: {', '.join(missing)}")
        unknown = sorted(set(data) - set(names))
        if unknown:
            raise InvalidCoefficients(f"unknown coefficients: {', '.join(unknown)}")
        try:
            return cls(**{n: float(data[n]) for n in names})
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidCoefficients):
                raise
            raise InvalidCoefficients(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def load(cls, path) -> "ScalingCoefficients":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidCoefficients(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidCoefficients(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


@dataclass(frozen=True)
class ChinchillaCoefficients:
    m: float
    mu: float
    n: float
    nu: float
    c: float

    def loss(self, n_act, tokens):
        return self.m * np.power(n_act, self.mu) + self.n * np.power(tokens, self.nu) + self.c

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LrRule:
    intercept: float = 8.39
    n_slope: float = -0.81
    e_slope: float = -0.25

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_LR_RULE = LrRule()


def default_coefficients() -> ScalingCoefficients:
    """The published fitted coefficients shipped with the package."""
    text = resources.files("moe_scaling").joinpath("data/default_coefficients.json").read_text()
    return ScalingCoefficients.from_dict(json.loads(text))


def resolve_coefficients(path=None) -> ScalingCoefficients:
    """Load ``path``, else the file named by ``$MOE_SCALING_COEFFICIENTS``, else the default."""
    path = path or os.environ.get(COEFFICIENTS_ENV)
    if path:
        return ScalingCoefficients.load(path)
    return default_coefficients()


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def e_hat(experts, coeffs: ScalingCoefficients):
    if coeffs.e_start >= coeffs.e_max:
        raise InvalidCoefficients("e_start must be below e_max")
    experts = np.asarray(experts, dtype=float)
    if np.any(experts < 1):
        raise ValueError("experts must be >= 1")
    offset = 1.0 / (1.0 / coeffs.e_start - 1.0 / coeffs.e_max)
    inv = 1.0 / (experts - 1.0 + offset) + 1.0 / coeffs.e_max
    # E = 1 collapses to e_start algebraically; return it without rounding.
    return _scalar(np.where(experts == 1.0, coeffs.e_start, 1.0 / inv))


def reduce_to_chinchilla(coeffs: ScalingCoefficients, experts) -> ChinchillaCoefficients:
    h = math.log(e_hat(experts, coeffs))
    return ChinchillaCoefficients(
        m=coeffs.a * math.exp(coeffs.delta * h),
        mu=coeffs.alpha + coeffs.gamma * h,
        n=coeffs.b * math.exp(coeffs.omega * h),
        nu=coeffs.beta + coeffs.zeta * h,
        c=coeffs.c,
    )


def log_loss(n_act, tokens, experts, coeffs: ScalingCoefficients):
    """Natural log of the predicted loss, via logsumexp of the three terms."""
    h = np.log(e_hat(experts, coeffs))
    log_n = np.log(np.asarray(n_act, dtype=float))
    log_d = np.log(np.asarray(tokens, dtype=float))
    t1 = math.log(coeffs.a) + coeffs.delta * h + (coeffs.alpha + coeffs.gamma * h) * log_n
    t2 = math.log(coeffs.b) + coeffs.omega * h + (coeffs.beta + coeffs.zeta * h) * log_d
    t3 = np.full(np.broadcast(t1, t2).shape, math.log(coeffs.c))
    return _scalar(np.logaddexp(np.logaddexp(t1, t2), t3))


def loss(n_act, tokens, experts, coeffs: ScalingCoefficients):
    return _scalar(np.exp(log_loss(n_act, tokens, experts, coeffs)))


def peak_learning_rate(n_act_nonemb, experts, rule: LrRule = DEFAULT_LR_RULE):
    """Peak learning rate from active non-embedding parameters and expert count."""
    return _scalar(
        np.exp(
            rule.intercept
            + rule.n_slope * np.log(np.asarray(n_act_nonemb, dtype=float))
            + rule.e_slope * np.log(np.asarray(experts, dtype=float))
        )
    )
