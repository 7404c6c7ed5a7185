"""Choose model size, token count and expert count under compute, memory and inference budgets.

Every problem fixes E and searches over active parameters N, with tokens
implied by the FLOP identity ``6 N D + 2 N D_inf = F``. Loss along that
constraint is unimodal in ``log N``, so a memory cap only clamps N from
above: the constrained optimum is ``min(N_free, N_cap)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

from scipy.optimize import bisect

from . import accounting
from .errors import DegenerateExponents, Infeasible, NoCrossing, NoRoot
from .law import ScalingCoefficients, loss, reduce_to_chinchilla
from .optimize import golden_section

DEFAULT_EXPERTS = (1, 2, 4, 8, 16, 32)
SEARCH_BRACKET = (1e6, 1e13)
_MIN_N_ACT = accounting.standard_active(float(accounting.HEAD_DIM))


@dataclass(frozen=True)
class BudgetSpec:
    train_flops: float
    inference_tokens: float = 0.0
    memory_cap: float | None = None
    kv_tokens: float = 0.0
    bytes_per_element: int = 2
    expert_choices: tuple = DEFAULT_EXPERTS

    def __post_init__(self):
        if not self.train_flops > 0:
            raise ValueError("train_flops must be positive")
        if self.inference_tokens < 0 or self.kv_tokens < 0:
            raise ValueError("token counts must be non-negative")
        if self.memory_cap is not None and not self.memory_cap > 0:
            raise ValueError("memory_cap must be positive")
        if self.bytes_per_element not in accounting.BYTES_PER_ELEMENT:
            raise ValueError(f"bytes_per_element must be one of {accounting.BYTES_PER_ELEMENT}")


@dataclass(frozen=True)
class PlanResult:
    experts: int
    n_act: float
    n_total: float
    tokens: float
    predicted_loss: float
    memory: float
    flops_train: float
    flops_inference: float
    binding_constraint: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class IsoflopPoint:
    tokens: float
    n_act: float
    n_total: float | None
    loss: float
    memory_bytes: float | None


@dataclass(frozen=True)
class RuleOfThumb:
    loss_dense: float
    loss_moe: float
    verdict: str
    n_act_moe: float
    tokens_dense: float
    tokens_moe: float
    guaranteed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _exponents(coeffs, experts):
    red = reduce_to_chinchilla(coeffs, experts)
    if red.mu >= 0 or red.nu >= 0:
        raise DegenerateExponents(f"reduced exponents must be negative at E={experts}")
    return red


def compute_optimal(flops: float, experts, coeffs: ScalingCoefficients) -> tuple[float, float]:
    """Loss-minimizing ``(n_act, tokens)`` with ``6 N D = flops``, in closed form.

    Written with positive exponent magnitudes ``A = -mu``, ``B = -nu``:
    ``N = G (F/6)^(B/(A+B))`` and ``D = (F/6)^(A/(A+B)) / G`` where
    ``G = (A m / (B n))^(1/(A+B))``.
    """
    if flops < 6:
        raise ValueError("flops must be at least 6")
    red = _exponents(coeffs, experts)
    pa, pb = -red.mu, -red.nu
    g = (pa * red.m / (pb * red.n)) ** (1.0 / (pa + pb))
    half = flops / 6.0
    n_act = g * half ** (pb / (pa + pb))
    return n_act, half / n_act


def _standard_total(n_act, experts, d_vocab=accounting.D_VOCAB):
    try:
        d = accounting.shape_from_active(n_act, d_vocab).d_model
    except NoRoot:
        return None, None
    return d, accounting.standard_total(d, experts, d_vocab)


def _n_cap(budget: BudgetSpec, experts) -> float:
    if budget.memory_cap is None:
        return math.inf
    try:
        d = accounting.shape_from_memory(
            budget.memory_cap, experts, budget.kv_tokens, budget.bytes_per_element
        ).d_model
    except NoRoot:
        low = accounting.standard_memory(64.0, experts, budget.kv_tokens, budget.bytes_per_element)
        if budget.memory_cap < low:
            raise Infeasible(
                f"smallest standard shape with E={experts} needs {low:.4g} bytes > cap {budget.memory_cap:.4g}"
            ) from None
        return math.inf
    return accounting.standard_active(d)


def _free_optimum(budget: BudgetSpec, experts, coeffs, n_max: float) -> float:
    """Unconstrained optimum of loss along the joint FLOP identity."""
    f, d_inf = budget.train_flops, budget.inference_tokens
    if d_inf == 0:
        return compute_optimal(f, experts, coeffs)[0]

    def objective(log_n):
        n = math.exp(log_n)
        d = (f - 2.0 * n * d_inf) / (6.0 * n)
        return loss(n, d, experts, coeffs) if d > 0 else math.inf

    lo, hi = (math.log(x) for x in SEARCH_BRACKET)
    ceiling = math.log(n_max) + math.log1p(-1e-9)
    hi = min(hi, ceiling)
    lo = min(lo, hi - 1.0)
    for _ in range(8):
        x, _ = golden_section(objective, lo, hi, rtol=1e-12)
        width = hi - lo
        if x - lo < 1e-6 * width:
            lo -= width
        elif hi - x < 1e-6 * width and hi < ceiling:
            hi = min(hi + width, ceiling)
        else:
            break
    return math.exp(x)


def _plan(budget: BudgetSpec, experts, coeffs: ScalingCoefficients) -> PlanResult:
    f, d_inf = budget.train_flops, budget.inference_tokens
    n_max = math.inf
    if d_inf > 0:
        n_max = f / (2.0 * d_inf)
        if n_max <= _MIN_N_ACT:
            raise Infeasible("inference alone exhausts the FLOP budget for the smallest model")
    n_cap = _n_cap(budget, experts)
    n_free = _free_optimum(budget, experts, coeffs, n_max)
    if n_cap < n_free:
        n_act, binding = n_cap, "memory"
    else:
        n_act, binding = n_free, "compute"
    tokens = (f - 2.0 * n_act * d_inf) / (6.0 * n_act)
    if tokens <= 0:
        raise Infeasible("no training tokens left at the optimum")
    d, n_total = _standard_total(n_act, experts)
    memory = (
        accounting.standard_memory(d, experts, budget.kv_tokens, budget.bytes_per_element)
        if d is not None
        else math.nan
    )
    return PlanResult(
        experts=experts,
        n_act=n_act,
        n_total=n_total if n_total is not None else math.nan,
        tokens=tokens,
        predicted_loss=loss(n_act, tokens, experts, coeffs),
        memory=memory,
        flops_train=6.0 * n_act * tokens,
        flops_inference=2.0 * n_act * d_inf,
        binding_constraint=binding,
    )


def memory_optimal(budget: BudgetSpec, experts, coeffs: ScalingCoefficients) -> PlanResult:
    """Compute-optimal plan with total weights plus KV cache capped at ``budget.memory_cap``.

    Inference tokens in the budget are ignored here; see :func:`inference_optimal`.
    """
    if budget.inference_tokens:
        budget = BudgetSpec(
            budget.train_flops, 0.0, budget.memory_cap, budget.kv_tokens,
            budget.bytes_per_element, budget.expert_choices,
        )
    return _plan(budget, experts, coeffs)


def inference_optimal(budget: BudgetSpec, experts, coeffs: ScalingCoefficients) -> PlanResult:
    """Best plan when training and ``inference_tokens`` of serving share the FLOP budget."""
    return _plan(budget, experts, coeffs)


def optimal_experts(budget: BudgetSpec, coeffs: ScalingCoefficients) -> tuple[int, PlanResult]:
    """Lowest-loss expert count among ``budget.expert_choices``; ties go to fewer experts."""
    if not budget.expert_choices:
        raise ValueError("expert_choices is empty")
    best = None
    for e in sorted(budget.expert_choices):
        try:
            plan = _plan(budget, e, coeffs)
        except Infeasible:
            continue
        if best is None or plan.predicted_loss < best.predicted_loss:
            best = plan
    if best is None:
        raise Infeasible("no expert count is feasible under this budget")
    return best.experts, best


def isoflop_curve(
    flops: float,
    experts,
    token_grid: Sequence[float],
    coeffs: ScalingCoefficients,
    kv_tokens: float = 0.0,
    bytes_per_element: int = 2,
) -> list[IsoflopPoint]:
    """Loss along ``6 N D = flops`` at each token count of ``token_grid``."""
    points = []
    for d in token_grid:
        d = float(d)
        n = flops / (6.0 * d)
        if n < 1:
            raise ValueError(f"tokens={d:.4g} leaves fewer than one parameter")
        width, n_total = _standard_total(n, experts)
        mem = (
            accounting.standard_memory(width, experts, kv_tokens, bytes_per_element)
            if width is not None
            else None
        )
        points.append(IsoflopPoint(d, n, n_total, loss(n, d, experts, coeffs), mem))
    return points


def optimal_loss(flops: float, experts, coeffs: ScalingCoefficients) -> float:
    n, d = compute_optimal(flops, experts, coeffs)
    return loss(n, d, experts, coeffs)


def flops_savings(flops: float, experts, coeffs: ScalingCoefficients) -> float:
    """Fraction of ``flops`` saved by a compute-optimal MoE matching the compute-optimal dense loss."""
    if experts == 1:
        return 0.0
    target = optimal_loss(flops, 1, coeffs)

    def gap(log_f):
        return optimal_loss(math.exp(log_f), experts, coeffs) - target

    hi = math.log(flops)
    lo = math.log(max(flops * 1e-6, 6.0))
    if gap(hi) >= 0 or gap(lo) <= 0:
        raise NoCrossing(f"E={experts} never matches the dense loss within [F*1e-6, F]")
    root = bisect(gap, lo, hi, xtol=1e-6, rtol=1e-12)
    return 1.0 - math.exp(root) / flops


def dense_optimal_tokens(n_act: float, coeffs: ScalingCoefficients) -> float:
    """Tokens at which a dense model of ``n_act`` parameters is compute-optimal."""
    red = _exponents(coeffs, 1)
    pa, pb = -red.mu, -red.nu
    g = (pa * red.m / (pb * red.n)) ** (1.0 / (pa + pb))
    half = (n_act / g) ** ((pa + pb) / pb)
    return half / n_act


def rule_of_thumb_compare(
    n_total: float,
    experts: int,
    coeffs: ScalingCoefficients,
    dense_tokens: float | None = None,
    compute_matched: bool = False,
) -> RuleOfThumb:
    """Dense model of ``n_total`` parameters vs an equal-memory MoE with ``experts`` experts.

    The dense side trains on ``dense_tokens`` (its compute-optimal count by
    default). The MoE trains on ``experts`` times as many tokens, or on the
    dense model's FLOPs when ``compute_matched``.
    """
    if dense_tokens is None:
        dense_tokens = dense_optimal_tokens(n_total, coeffs)
    if experts == 1:
        n_act = n_total
    else:
        n_act = accounting.standard_active(accounting.shape_from_total(n_total, experts).d_model)
    if compute_matched:
        tokens_moe = dense_tokens * n_total / n_act
    else:
        tokens_moe = dense_tokens * experts
    loss_dense = loss(n_total, dense_tokens, 1, coeffs)
    loss_moe = loss(n_act, tokens_moe, experts, coeffs)
    if abs(loss_moe - loss_dense) <= 1e-12 * loss_dense:
        verdict = "tie"
    else:
        verdict = "moe_wins" if loss_moe < loss_dense else "dense_wins"
    return RuleOfThumb(
        loss_dense=loss_dense,
        loss_moe=loss_moe,
        verdict=verdict,
        n_act_moe=n_act,
        tokens_dense=dense_tokens,
        tokens_moe=tokens_moe,
        guaranteed=2 <= experts <= 8,
    )

