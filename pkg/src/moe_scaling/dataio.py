"""Run records: parsing, serialization, the bundled experiment grid and synthetic losses.

CSV files carry a header drawn from ``n_total, n_heads, n_blocks, d_model,
n_act, experts, tokens, loss, weight``. Counts may use decimal suffixes
(``321M``, ``16.0B``). A ``tokens`` cell may list several values
(``"16.0B, 8.0B"``); the row then expands into one record per value.
When a shape is given, ``n_act`` and ``n_total`` are recomputed exactly and
any displayed value must agree with them up to its printed precision.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from . import accounting
from .accounting import ModelShape
from .errors import ParseError, ValidationError
from .law import ScalingCoefficients, log_loss

COLUMNS = ("n_total", "n_heads", "n_blocks", "d_model", "n_act", "experts", "tokens", "loss", "weight")
_SUFFIX = {"": 1, "K": 10**3, "M": 10**6, "B": 10**9, "T": 10**12}
_NUMBER = re.compile(r"([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)\s*([KMBT]?)")
_LIST_SEP = re.compile(r"[,;\s]+")


@dataclass(frozen=True)
class RunRecord:
    n_act: int
    n_total: int
    experts: int
    tokens: float
    shape: ModelShape | None = None
    observed_loss: float | None = None
    weight_override: float | None = None

    def __post_init__(self):
        if self.n_act < 1 or self.n_total < self.n_act:
            raise ValidationError("need 1 <= n_act <= n_total", "n_act")
        if self.experts < 1:
            raise ValidationError("experts must be >= 1", "experts")
        if not self.tokens > 0:
            raise ValidationError("tokens must be positive", "tokens")
        if self.observed_loss is not None and not self.observed_loss > 0:
            raise ValidationError("loss must be positive", "loss")
        if self.weight_override is not None and not self.weight_override >= 0:
            raise ValidationError("weight must be non-negative", "weight")
        if self.shape is not None:
            if self.shape.experts != self.experts:
                raise ValidationError("shape experts disagree with experts", "experts")
            if self.n_act != accounting.active_params(self.shape):
                raise ValidationError("n_act inconsistent with shape", "n_act")
            if self.n_total != accounting.total_params(self.shape):
                raise ValidationError("n_total inconsistent with shape", "n_total")

    @classmethod
    def from_shape(cls, shape: ModelShape, tokens: float, **kwargs) -> "RunRecord":
        return cls(
            n_act=accounting.active_params(shape),
            n_total=accounting.total_params(shape),
            experts=shape.experts,
            tokens=tokens,
            shape=shape,
            **kwargs,
        )

    @property
    def sort_key(self):
        return (self.n_act, self.tokens, self.experts)


def parse_number(text: str) -> tuple[float, float]:
    """Parse ``'321M'`` style numbers; returns ``(value, half unit of last printed digit)``."""
    m = _NUMBER.fullmatch(text.strip())
    if not m:
        raise ValueError(f"not a number: {text!r}")
    mantissa, suffix = m.groups()
    scale = _SUFFIX[suffix]
    if "e" in mantissa.lower():
        return float(mantissa) * scale, 0.0
    decimals = len(mantissa.split(".")[1]) if "." in mantissa else 0
    if decimals == 0 and scale == 1:
        return float(int(mantissa)), 0.5
    return float(mantissa) * scale, 0.5 * 10.0**-decimals * scale


def _count(text, field, line):
    try:
        value, _ = parse_number(str(text))
    except ValueError as exc:
        raise ParseError(str(exc), line, field) from None
    if value != int(value):
        raise ParseError(f"{field} must be an integer", line, field)
    return int(value)


def _listed(cell, field, line):
    if isinstance(cell, (list, tuple)):
        items = list(cell)
    elif isinstance(cell, (int, float)):
        items = [cell]
    else:
        items = [t for t in _LIST_SEP.split(str(cell).strip()) if t]
    out = []
    for item in items:
        try:
            out.append(parse_number(str(item))[0] if isinstance(item, str) else float(item))
        except ValueError as exc:
            raise ParseError(str(exc), line, field) from None
    return out


def _check_display(cell, exact, field):
    if cell is None:
        return
    if isinstance(cell, (int, float)):
        ok = cell == exact
    else:
        value, half_unit = parse_number(cell)
        ok = abs(value - exact) <= half_unit * (1 + 1e-9)
    if not ok:
        raise ValidationError(f"{field}={cell} inconsistent with shape (expected {exact})", field)


def _row_records(row: dict, line: int) -> list[RunRecord]:
    def get(name):
        v = row.get(name)
        if v is None or (isinstance(v, str) and not v.strip()):
            return None
        return v

    if get("experts") is None:
        raise ParseError("missing experts", line, "experts")
    if get("tokens") is None:
        raise ParseError("missing tokens", line, "tokens")
    experts = _count(get("experts"), "experts", line)
    tokens = _listed(get("tokens"), "tokens", line)
    losses = _listed(get("loss"), "loss", line) if get("loss") is not None else [None] * len(tokens)
    if len(losses) != len(tokens):
        raise ParseError("loss list length differs from tokens list", line, "loss")
    weight = None
    if get("weight") is not None:
        weight = _listed(get("weight"), "weight", line)[0]

    try:
        if get("d_model") is not None:
            if get("n_blocks") is None:
                raise ParseError("d_model given without n_blocks", line, "n_blocks")
            d_model = _count(get("d_model"), "d_model", line)
            n_blocks = _count(get("n_blocks"), "n_blocks", line)
            n_heads = (
                _count(get("n_heads"), "n_heads", line)
                if get("n_heads") is not None
                else max(1, d_model // accounting.HEAD_DIM)
            )
            shape = ModelShape(d_model, n_blocks, n_heads, experts)
            n_act = accounting.active_params(shape)
            n_total = accounting.total_params(shape)
            _check_display(get("n_act"), n_act, "n_act")
            _check_display(get("n_total"), n_total, "n_total")
        else:
            shape = None
            if get("n_act") is None:
                raise ParseError("need d_model/n_blocks or n_act", line, "n_act")
            n_act = _count(get("n_act"), "n_act", line)
            if get("n_total") is not None:
                n_total = _count(get("n_total"), "n_total", line)
            elif experts == 1:
                n_total = n_act
            else:
                raise ParseError("n_total required for experts > 1 without a shape", line, "n_total")
        return [
            RunRecord(n_act, n_total, experts, d, shape, loss, weight)
            for d, loss in zip(tokens, losses)
        ]
    except ValidationError as exc:
        raise ValidationError(f"line {line}: {exc}", exc.field) from None
    except ValueError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ValidationError(f"line {line}: {exc}") from None


def parse_runs(text: str, format: str = "csv") -> list[RunRecord]:
    if format == "csv":
        reader = csv.reader(io.StringIO(text))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("missing header", 1) from None
        if not any(header):
            raise ParseError("missing header", 1)
        unknown = [h for h in header if h not in COLUMNS]
        if unknown:
            raise ParseError(f"unknown column {unknown[0]!r}", 1, unknown[0])
        records = []
        for row in reader:
            if not row or not any(cell.strip() for cell in row):
                continue
            line = reader.line_num
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
            records.extend(_row_records(dict(zip(header, row)), line))
        return records
    if format == "json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, exc.lineno) from None
        if not isinstance(data, list):
            raise ParseError("expected a JSON array of run objects", 1)
        records = []
        for i, obj in enumerate(data, start=1):
            if not isinstance(obj, dict):
                raise ParseError("expected an object", i)
            unknown = [k for k in obj if k not in COLUMNS]
            if unknown:
                raise ParseError(f"unknown field {unknown[0]!r}", i, unknown[0])
            records.extend(_row_records(obj, i))
        return records
    raise ValueError(f"unknown format {format!r}")


def read_runs(path) -> list[RunRecord]:
    """Read a run file; JSON is recognized by a ``.json`` suffix or a leading ``[``."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    fmt = "json" if str(path).lower().endswith(".json") or text.lstrip().startswith("[") else "csv"
    return parse_runs(text, fmt)


def _record_row(r: RunRecord) -> dict:
    s = r.shape
    return {
        "n_total": r.n_total,
        "n_heads": s.n_heads if s else None,
        "n_blocks": s.n_blocks if s else None,
        "d_model": s.d_model if s else None,
        "n_act": r.n_act,
        "experts": r.experts,
        "tokens": r.tokens,
        "loss": r.observed_loss,
        "weight": r.weight_override,
    }


def serialize_runs(records, format: str = "csv") -> str:
    """One record per row with exact values; ``parse_runs`` inverts it."""
    rows = [_record_row(r) for r in records]
    if format == "json":
        return json.dumps([{k: v for k, v in row.items() if v is not None} for row in rows], indent=1)
    if format != "csv":
        raise ValueError(f"unknown format {format!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in COLUMNS])
    return buf.getvalue()


@lru_cache(maxsize=1)
def _bundled() -> tuple[RunRecord, ...]:
    text = resources.files("moe_scaling").joinpath("data/experiments.csv").read_text()
    return tuple(parse_runs(text, "csv"))


def bundled_experiment_grid() -> list[RunRecord]:
    """Every (configuration, token count) pair of the published experiment listing, loss-free."""
    return list(_bundled())


def synthesize(grid, coeffs: ScalingCoefficients, noise_sigma: float = 0.0, seed: int = 0) -> list[RunRecord]:
    """Attach losses drawn from the law with log-normal noise of scale ``noise_sigma``."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    grid = list(grid)
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, noise_sigma, size=len(grid)) if noise_sigma > 0 else np.zeros(len(grid))
    out = []
    for r, e in zip(grid, eps):
        value = math.exp(log_loss(r.n_act, r.tokens, r.experts, coeffs) + e)
        out.append(replace(r, observed_loss=value))
    return out
