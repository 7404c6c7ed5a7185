"""Fit the joint law to run records.

The law is evaluated in log space as a logsumexp of three affine terms and
fit to log losses by minimizing a weighted Huber objective with L-BFGS from
every point of a fixed initialization grid. Each candidate is scored by
training RMSE plus RMSE on a held-out set of the lowest-loss runs, and the
best score wins.

The optimized vector is::

    (log a, alpha, delta, gamma, log b, beta, omega, zeta, log c,
     log e_start, log(e_max - e_start))

so positivity and ``e_start < e_max`` hold by construction.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import _backend
from .dataio import RunRecord
from .errors import EmptyDataset, NonFinite, TooFewRecords, Underdetermined, ValidationError
from .law import ChinchillaCoefficients, LrRule, ScalingCoefficients
from .optimize import lbfgs

THETA_NAMES = (
    "log_a", "alpha", "delta", "gamma", "log_b", "beta",
    "omega", "zeta", "log_c", "log_e_start", "log_e_gap",
)
N_THETA = len(THETA_NAMES)
LOG_C = THETA_NAMES.index("log_c")
HOLDOUT_SIZE = 30
MIN_RECORDS = N_THETA
MIN_GROUP_RECORDS = 5

# Published initialization grid. Exponent seeds for N and D are stated as
# positive magnitudes and negated on load.
GRID_ALPHA = (0.05, 0.25, 0.5)
GRID_BETA = (0.05, 0.25, 0.5)
GRID_A = (30.0, 100.0, 300.0)
GRID_B = (30.0, 100.0, 300.0)
GRID_C = (0.5, 1.0, 2.0)
GRID_INTERACTION = (-0.5, 0.0, 0.5)
SEED_E_START = 2.0
SEED_E_MAX = 512.0

_CHINCHILLA_FREE = np.array([1, 1, 0, 0, 1, 1, 0, 0, 1, 0, 0], dtype=bool)


def theta_from_coefficients(coeffs: ScalingCoefficients) -> np.ndarray:
    return np.array([
        math.log(coeffs.a), coeffs.alpha, coeffs.delta, coeffs.gamma,
        math.log(coeffs.b), coeffs.beta, coeffs.omega, coeffs.zeta,
        math.log(coeffs.c), math.log(coeffs.e_start), math.log(coeffs.e_max - coeffs.e_start),
    ])


def coefficients_from_theta(theta) -> ScalingCoefficients:
    t = [float(v) for v in theta]
    e_start = math.exp(t[9])
    return ScalingCoefficients(
        a=math.exp(t[0]), alpha=t[1], delta=t[2], gamma=t[3],
        b=math.exp(t[4]), beta=t[5], omega=t[6], zeta=t[7],
        c=math.exp(t[8]), e_start=e_start, e_max=e_start + math.exp(t[10]),
    )


def predict_log_loss(theta, log_n: float, log_d: float, experts: float) -> float:
    """Log of the predicted loss for one configuration; ``theta`` as in :data:`THETA_NAMES`."""
    t = [float(v) for v in theta]
    e_start = math.exp(t[9])
    e_max = e_start + math.exp(t[10])
    offset = 1.0 / (1.0 / e_start - 1.0 / e_max)
    h = -math.log(1.0 / (experts - 1.0 + offset) + 1.0 / e_max)
    terms = (
        t[0] + t[2] * h + (t[1] + t[3] * h) * log_n,
        t[4] + t[6] * h + (t[5] + t[7] * h) * log_d,
        t[8],
    )
    top = max(terms)
    if top == -math.inf:
        return -math.inf
    return top + math.log(sum(math.exp(x - top) for x in terms))


def huber(residual, delta: float):
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = np.abs(residual)
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if np.ndim(out) == 0 else out


def run_weights(records: Sequence[RunRecord]) -> list[float]:
    """Down-weight runs in proportion to their loss: ``w_i = min(L) / L_i``."""
    if not records:
        raise EmptyDataset("no records to weight")
    losses = [_loss_of(r) for r in records]
    low = min(losses)
    return [low / v for v in losses]


def uniform_weights(records: Sequence[RunRecord]) -> list[float]:
    if not records:
        raise EmptyDataset("no records to weight")
    return [1.0] * len(records)


WEIGHTING = {"inverse_loss": run_weights, "uniform": uniform_weights}


def _loss_of(r: RunRecord) -> float:
    if r.observed_loss is None:
        raise ValidationError("fitting requires observed losses; got a config-only record", "loss")
    return r.observed_loss


@dataclass
class FitConfig:
    huber_delta: float = 0.01
    step_size: float = 1e-4
    weight_decay: float = 1e-5
    max_iterations: int = 2000
    history_size: int = 10
    tolerance: float = 1e-10
    init_grid: list | None = None
    grid_sample: int | None = None
    seed: int = 0
    holdout: int = HOLDOUT_SIZE
    weighting: str | Callable = "inverse_loss"
    decay_log_c: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class FitReport:
    coefficients: ScalingCoefficients
    rmse_train: float
    rmse_val: float
    score: float
    per_record_residuals: list[float]
    converged: bool
    iterations: int
    rmse_train_raw: float = math.nan
    rmse_val_raw: float = math.nan
    seed_index: int = -1
    n_seeds: int = 0

    def to_dict(self) -> dict:
        return {
            "coefficients": self.coefficients.to_dict(),
            "rmse_train": self.rmse_train,
            "rmse_val": self.rmse_val,
            "score": self.score,
            "rmse_train_raw": self.rmse_train_raw,
            "rmse_val_raw": self.rmse_val_raw,
            "iterations": self.iterations,
            "converged": self.converged,
            "seed_index": self.seed_index,
            "n_seeds": self.n_seeds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class SeparateFitReport:
    """Independent Chinchilla fits, one per expert count."""

    coefficients: dict[int, ChinchillaCoefficients]
    rmse_train: float
    rmse_val: float
    per_group: dict[int, tuple[float, float]] = field(default_factory=dict)

    @property
    def score(self) -> float:
        return self.rmse_train + self.rmse_val


class _Data:
    """Contiguous arrays for the kernels."""

    def __init__(self, records: Sequence[RunRecord], weights=None):
        self.log_n = np.ascontiguousarray([math.log(r.n_act) for r in records], dtype=float)
        self.log_d = np.ascontiguousarray([math.log(r.tokens) for r in records], dtype=float)
        self.experts = np.ascontiguousarray([float(r.experts) for r in records])
        self.log_loss = np.ascontiguousarray([math.log(_loss_of(r)) for r in records], dtype=float)
        w = np.ones(len(records)) if weights is None else np.asarray(weights, dtype=float)
        self.weights = np.ascontiguousarray(w)

    def __len__(self):
        return len(self.log_n)

    def predict(self, theta) -> np.ndarray:
        out = np.empty(len(self))
        _backend.predict(np.ascontiguousarray(theta, dtype=float), self.log_n, self.log_d, self.experts, out)
        return out

    def residuals(self, theta) -> np.ndarray:
        return self.predict(theta) - self.log_loss


def _decay_mask(config: FitConfig, free=None) -> np.ndarray:
    mask = np.ones(N_THETA) if free is None else np.asarray(free, dtype=float).copy()
    if not config.decay_log_c:
        mask[LOG_C] = 0.0
    return mask


def _objective_grad(theta, data: _Data, delta: float, decay: float, decay_mask):
    theta = np.ascontiguousarray(theta, dtype=float)
    grad = np.empty(N_THETA)
    value = _backend.objective_grad(
        theta, data.log_n, data.log_d, data.experts, data.log_loss, data.weights, delta, grad
    )
    dt = theta * decay_mask
    return value + decay * float(dt @ dt), grad + 2.0 * decay * dt


def objective(theta, records, weights, config: FitConfig | None = None) -> float:
    """Weighted Huber loss on log-loss residuals plus L2 decay (``log c`` excluded by default)."""
    return objective_and_gradient(theta, records, weights, config)[0]


def objective_and_gradient(theta, records, weights, config: FitConfig | None = None):
    config = config or FitConfig()
    if len(weights) != len(records):
        raise ValueError("weights and records differ in length")
    data = _Data(records, weights)
    return _objective_grad(theta, data, config.huber_delta, config.weight_decay, _decay_mask(config))


def rmse(theta, records) -> float:
    """Root mean squared error of predicted vs observed log loss."""
    if not records:
        return 0.0
    res = _Data(records).residuals(theta)
    return float(np.sqrt(np.mean(res * res)))


def _rmse_raw(theta, data: _Data) -> float:
    if not len(data):
        return 0.0
    diff = np.exp(data.predict(theta)) - np.exp(data.log_loss)
    return float(np.sqrt(np.mean(diff * diff)))


def init_grid() -> list[np.ndarray]:
    """All 3^9 starting points in a fixed order."""
    seeds = []
    for alpha, beta, a, b, c, delta, gamma, omega, zeta in itertools.product(
        GRID_ALPHA, GRID_BETA, GRID_A, GRID_B, GRID_C,
        GRID_INTERACTION, GRID_INTERACTION, GRID_INTERACTION, GRID_INTERACTION,
    ):
        seeds.append(np.array([
            math.log(a), -alpha, delta, gamma, math.log(b), -beta, omega, zeta,
            math.log(c), math.log(SEED_E_START), math.log(SEED_E_MAX - SEED_E_START),
        ]))
    return seeds


def chinchilla_grid() -> list[np.ndarray]:
    """Grid points with every expert interaction at zero (3^5 seeds)."""
    return [s for s in init_grid() if not np.any(s[[2, 3, 6, 7]])]


def subsample(seeds: Sequence, k: int | None, seed: int) -> list[tuple[int, np.ndarray]]:
    """Deterministic sample of ``k`` seeds; returns ``(grid index, seed)`` in grid order."""
    if k is None or k >= len(seeds):
        return list(enumerate(seeds))
    if k < 1:
        raise ValueError("grid sample must be positive")
    idx = np.sort(np.random.default_rng(seed).choice(len(seeds), size=k, replace=False))
    return [(int(i), seeds[i]) for i in idx]


def split_holdout(records: Sequence[RunRecord], size: int = HOLDOUT_SIZE):
    """Hold out the ``size`` lowest-loss runs; ties break on ``(n_act, tokens, experts)``."""
    if len(records) <= size:
        raise TooFewRecords(f"need more than {size} records to hold out {size}, got {len(records)}")
    order = sorted(range(len(records)), key=lambda i: (_loss_of(records[i]),) + records[i].sort_key)
    val_idx = set(order[:size])
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [records[i] for i in order[:size]]
    return train, val


def _canonical(records):
    return sorted(
        range(len(records)),
        key=lambda i: records[i].sort_key + (_loss_of(records[i]), records[i].weight_override or 0.0),
    )


def _weights_for(records, config: FitConfig):
    policy = WEIGHTING[config.weighting] if isinstance(config.weighting, str) else config.weighting
    w = list(policy(records))
    return [r.weight_override if r.weight_override is not None else wi for r, wi in zip(records, w)]


@dataclass
class _Candidate:
    index: int
    theta: np.ndarray
    rmse_train: float
    rmse_val: float
    iterations: int
    converged: bool

    @property
    def score(self):
        return self.rmse_train + self.rmse_val


def _centering(data: _Data) -> np.ndarray:
    """Linear map from centered coordinates to theta.

    In centered coordinates the N and D terms use ``ln N - mean ln N`` and
    ``ln D - mean ln D``, which decouples the exponents from the log
    multipliers; the objective itself is unchanged.
    """
    cn, cd = float(np.mean(data.log_n)), float(np.mean(data.log_d))
    m = np.eye(N_THETA)
    m[0, 1] = -cn
    m[2, 3] = -cn
    m[4, 5] = -cd
    m[6, 7] = -cd
    return m


def _run_seed(args):
    index, seed, train, val, config, free = args
    mask = _decay_mask(config, free)
    to_theta = _centering(train)

    def fun_grad(x):
        with np.errstate(all="ignore"):
            f, g = _objective_grad(to_theta @ x, train, config.huber_delta, config.weight_decay, mask)
            return f, to_theta.T @ g

    res = lbfgs(
        fun_grad,
        np.linalg.solve(to_theta, seed),
        history=config.history_size,
        initial_step=config.step_size,
        max_iterations=config.max_iterations,
        rtol=config.tolerance,
        free=free,
    )
    theta = to_theta @ res.x
    if not math.isfinite(res.fun) or not np.all(np.isfinite(theta)):
        return None
    rt = float(np.sqrt(np.mean(train.residuals(theta) ** 2)))
    rv = float(np.sqrt(np.mean(val.residuals(theta) ** 2))) if len(val) else 0.0
    if not (math.isfinite(rt) and math.isfinite(rv)):
        return None
    return _Candidate(index, theta, rt, rv, res.iterations, res.converged)


def _search(seeds, train: _Data, val: _Data, config: FitConfig, free=None) -> _Candidate:
    jobs = [(i, s, train, val, config, free) for i, s in seeds]
    if config.n_jobs > 1:
        with ProcessPoolExecutor(config.n_jobs) as pool:
            results = list(pool.map(_run_seed, jobs, chunksize=max(1, len(jobs) // (4 * config.n_jobs))))
    else:
        results = [_run_seed(j) for j in jobs]
    best = None
    for cand in results:
        if cand is None:
            continue
        if best is None or (cand.score, cand.index) < (best.score, best.index):
            best = cand
    if best is None:
        raise NonFinite("optimizer diverged from every initialization")
    return best


def _check_fit_input(records):
    for r in records:
        _loss_of(r)
    if len(records) < MIN_RECORDS:
        raise Underdetermined(f"need at least {MIN_RECORDS} records, got {len(records)}")
    if len({r.experts for r in records}) < 2:
        raise Underdetermined("need at least two distinct expert counts for the joint law")


def fit(records: Sequence[RunRecord], config: FitConfig | None = None) -> FitReport:
    """Fit the joint law; see the module docstring for the procedure."""
    config = config or FitConfig()
    records = list(records)
    _check_fit_input(records)
    order = _canonical(records)
    ordered = [records[i] for i in order]
    train_r, val_r = split_holdout(ordered, config.holdout)
    train = _Data(train_r, _weights_for(train_r, config))
    val = _Data(val_r)

    grid = config.init_grid if config.init_grid is not None else init_grid()
    seeds = subsample([np.asarray(s, dtype=float) for s in grid], config.grid_sample, config.seed)
    best = _search(seeds, train, val, config)

    residuals = _Data(records).residuals(best.theta)
    return FitReport(
        coefficients=coefficients_from_theta(best.theta),
        rmse_train=best.rmse_train,
        rmse_val=best.rmse_val,
        score=best.score,
        per_record_residuals=[float(v) for v in residuals],
        converged=best.converged,
        iterations=best.iterations,
        rmse_train_raw=_rmse_raw(best.theta, train),
        rmse_val_raw=_rmse_raw(best.theta, val),
        seed_index=best.index,
        n_seeds=len(seeds),
    )


def fit_separate_chinchilla(records: Sequence[RunRecord], config: FitConfig | None = None) -> SeparateFitReport:
    """Fit an independent Chinchilla law for each expert count.

    Uses the same split, weights and optimizer settings as :func:`fit`, and
    the part of the initialization grid with zero expert interactions.
    Weight decay is scaled by each group's share of the training records so
    the penalty per record matches the joint fit.
    """
    config = config or FitConfig()
    records = list(records)
    for r in records:
        _loss_of(r)
    ordered = [records[i] for i in _canonical(records)]
    if len(ordered) > config.holdout:
        train_r, val_r = split_holdout(ordered, config.holdout)
    else:
        train_r, val_r = ordered, []
    weights = _weights_for(train_r, config)

    groups = sorted({r.experts for r in ordered})
    seeds = subsample(chinchilla_grid(), config.grid_sample, config.seed)
    coeffs, per_group = {}, {}
    sq_train, sq_val = [], []
    for e in groups:
        g_train = [(r, w) for r, w in zip(train_r, weights) if r.experts == e]
        g_val = [r for r in val_r if r.experts == e]
        if len(g_train) < MIN_GROUP_RECORDS:
            raise Underdetermined(
                f"expert group E={e} has {len(g_train)} training records, need {MIN_GROUP_RECORDS}"
            )
        train = _Data([r for r, _ in g_train], [w for _, w in g_train])
        val = _Data(g_val)
        # Same decay per training record as the joint fit over all groups.
        share = len(g_train) / len(train_r)
        group_config = replace(config, weight_decay=config.weight_decay * share)
        best = _search(seeds, train, val, group_config, free=_CHINCHILLA_FREE)
        t = best.theta
        coeffs[e] = ChinchillaCoefficients(
            m=math.exp(t[0]), mu=float(t[1]), n=math.exp(t[4]), nu=float(t[5]), c=math.exp(t[8])
        )
        per_group[e] = (best.rmse_train, best.rmse_val)
        sq_train.extend(train.residuals(t) ** 2)
        if len(val):
            sq_val.extend(val.residuals(t) ** 2)
    return SeparateFitReport(
        coefficients=coeffs,
        rmse_train=float(np.sqrt(np.mean(sq_train))),
        rmse_val=float(np.sqrt(np.mean(sq_val))) if sq_val else 0.0,
        per_group=per_group,
    )


def fit_lr_rule(points) -> LrRule:
    """Least squares of ``ln(lr)`` on ``(1, ln N, ln E)``.

    ``points`` holds ``(n_act_nonemb, experts, best_lr)`` triples. With a
    single expert count the expert slope is fixed at zero.
    """
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 3:
        raise Underdetermined("need at least three (n_act_nonemb, experts, lr) points")
    if np.any(pts <= 0):
        raise ValueError("all values must be positive")
    log_n, log_e, y = np.log(pts[:, 0]), np.log(pts[:, 1]), np.log(pts[:, 2])
    if len(np.unique(pts[:, 0])) < 2:
        raise Underdetermined("need at least two distinct parameter counts")
    single_e = len(np.unique(pts[:, 1])) < 2
    cols = [np.ones_like(y), log_n] + ([] if single_e else [log_e])
    design = np.column_stack(cols)
    sol, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1]:
        raise Underdetermined("parameter counts and expert counts are collinear")
    return LrRule(float(sol[0]), float(sol[1]), 0.0 if single_e else float(sol[2]))
