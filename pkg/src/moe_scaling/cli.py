"""Command-line interface: ``moe-scaling <command> [options]``.

Results go to stdout as JSON (default) or CSV. Exit status is 0 on success,
1 on domain errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import re
import sys

import numpy as np

from . import dataio, fitting, law, planner
from .errors import ScalingError

SCHEMA_VERSION = 1

_MEMORY = re.compile(r"\s*([0-9.eE+-]+)\s*([KMGT]i?B|B)?\s*", re.IGNORECASE)
_MEMORY_UNITS = {
    "": 1, "b": 1,
    "kb": 10**3, "mb": 10**6, "gb": 10**9, "tb": 10**12,
    "kib": 2**10, "mib": 2**20, "gib": 2**30, "tib": 2**40,
}


def parse_memory(text: str) -> float:
    """Bytes from ``'80GB'`` (decimal), ``'80GiB'`` (binary) or a plain number."""
    m = _MEMORY.fullmatch(text)
    if not m:
        raise argparse.ArgumentTypeError(f"invalid memory size: {text!r}")
    try:
        value = float(m.group(1))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid memory size: {text!r}") from None
    return value * _MEMORY_UNITS[(m.group(2) or "").lower()]


def _count(text: str) -> float:
    try:
        return dataio.parse_number(text)[0]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid number: {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer list: {text!r}") from None


# Output


def _flatten(row: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in row.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def _csv_cell(v):
    if isinstance(v, np.generic):
        v = v.item()
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def emit(command: str, rows: list[dict], fmt: str, out, single: bool = True) -> None:
    if fmt == "csv":
        flat = [_flatten(r) for r in rows]
        header = list(flat[0]) if flat else []
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        for r in flat:
            writer.writerow([_csv_cell(r.get(h)) for h in header])
        return
    doc = {"schema_version": SCHEMA_VERSION, "command": command}
    if single and len(rows) == 1:
        doc["result"] = _json_value(rows[0])
    else:
        doc["results"] = [_json_value(r) for r in rows]
    out.write(json.dumps(doc, indent=2) + "\n")


# Commands


def cmd_eval(args, coeffs):
    value = law.loss(args.n_act, args.tokens, args.experts, coeffs)
    return [{
        "n_act": args.n_act, "tokens": args.tokens, "experts": args.experts,
        "e_hat": law.e_hat(args.experts, coeffs), "loss": value,
    }]


def cmd_reduce(args, coeffs):
    return [{"experts": e, **law.reduce_to_chinchilla(coeffs, e).to_dict()} for e in args.experts]


def cmd_lr(args, coeffs):
    if args.fit:
        with open(args.fit, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        try:
            points = [(_count(r["n_act_nonemb"]), float(r["experts"]), float(r["lr"])) for r in rows]
        except (KeyError, argparse.ArgumentTypeError, ValueError) as exc:
            raise ScalingError(f"{args.fit}: need columns n_act_nonemb, experts, lr ({exc})") from None
        return [fitting.fit_lr_rule(points).to_dict()]
    if args.n_act_nonemb is None:
        raise argparse.ArgumentTypeError("lr needs --n-act-nonemb or --fit")
    rule = law.LrRule(args.intercept, args.n_slope, args.e_slope)
    return [{
        "n_act_nonemb": args.n_act_nonemb, "experts": args.experts,
        "lr": law.peak_learning_rate(args.n_act_nonemb, args.experts, rule),
    }]


def cmd_fit(args, coeffs):
    records = dataio.read_runs(args.runs)
    config = fitting.FitConfig(
        huber_delta=args.huber_delta,
        weight_decay=args.weight_decay,
        max_iterations=args.max_iterations,
        grid_sample=args.grid_sample,
        seed=args.seed,
        holdout=args.holdout,
        weighting=args.weighting,
        n_jobs=args.n_jobs,
    )
    if args.separate:
        rep = fitting.fit_separate_chinchilla(records, config)
        return [
            {"experts": e, **c.to_dict(),
             "rmse_train": rep.per_group[e][0], "rmse_val": rep.per_group[e][1]}
            for e, c in rep.coefficients.items()
        ] + [{"experts": "all", "rmse_train": rep.rmse_train, "rmse_val": rep.rmse_val}]
    rep = fitting.fit(records, config)
    if args.output:
        rep.coefficients.save(args.output)
    return [rep.to_dict()]


def _budget(args, memory=None, inference=0.0, choices=planner.DEFAULT_EXPERTS):
    return planner.BudgetSpec(
        train_flops=args.flops,
        inference_tokens=inference,
        memory_cap=memory,
        kv_tokens=getattr(args, "kv_tokens", 0.0),
        bytes_per_element=getattr(args, "bytes_per_element", 2),
        expert_choices=tuple(choices),
    )


def cmd_plan_compute(args, coeffs):
    return [planner.memory_optimal(_budget(args), args.experts, coeffs).to_dict()]


def cmd_plan_memory(args, coeffs):
    return [planner.memory_optimal(_budget(args, args.memory), args.experts, coeffs).to_dict()]


def cmd_plan_inference(args, coeffs):
    budget = _budget(args, args.memory, args.inference_tokens)
    return [planner.inference_optimal(budget, args.experts, coeffs).to_dict()]


def cmd_optimal_experts(args, coeffs):
    budget = _budget(args, args.memory, args.inference_tokens, args.choices)
    e, plan = planner.optimal_experts(budget, coeffs)
    label = f">={e}" if e == max(budget.expert_choices) else str(e)
    return [{"optimal_experts": e, "label": label, **plan.to_dict()}]


def cmd_isoflop(args, coeffs):
    grid = np.geomspace(args.tokens_min, args.tokens_max, args.points)
    pts = planner.isoflop_curve(args.flops, args.experts, grid, coeffs, args.kv_tokens, args.bytes_per_element)
    return [
        {"tokens": p.tokens, "n_act": p.n_act, "n_total": p.n_total, "loss": p.loss, "memory_bytes": p.memory_bytes}
        for p in pts
    ]


def cmd_savings(args, coeffs):
    rows = []
    for f in args.flops:
        for e in args.experts:
            rows.append({"flops": f, "experts": e, "savings": planner.flops_savings(f, e, coeffs)})
    return rows


def cmd_rule_of_thumb(args, coeffs):
    res = planner.rule_of_thumb_compare(
        args.n_total, args.experts, coeffs, args.dense_tokens, args.compute_matched
    )
    return [{"n_total": args.n_total, "experts": args.experts, **res.to_dict()}]


def cmd_synth(args, coeffs):
    grid = dataio.read_runs(args.grid) if args.grid else dataio.bundled_experiment_grid()
    return dataio.synthesize(grid, coeffs, args.sigma, args.seed)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--coefficients", help=f"coefficient JSON file (default: ${law.COEFFICIENTS_ENV} or bundled)")
    common.add_argument("--format", choices=("json", "csv"), default="json")

    parser = argparse.ArgumentParser(prog="moe-scaling", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=func)
        return p

    def budget_args(p, memory=False, inference=False):
        p.add_argument("--flops", type=float, required=True)
        if memory:
            p.add_argument("--memory", type=parse_memory, required=memory == "required",
                           help="cap on weights + KV cache, e.g. 80GB or 80GiB")
            p.add_argument("--kv-tokens", type=_count, default=0.0)
            p.add_argument("--bytes-per-element", type=int, default=2, choices=(1, 2, 4, 8))
        if inference:
            p.add_argument("--inference-tokens", type=_count, default=0.0)

    p = add("eval", cmd_eval, "predict loss")
    p.add_argument("--n-act", type=_count, required=True)
    p.add_argument("--tokens", type=_count, required=True)
    p.add_argument("--experts", type=float, default=1.0)

    p = add("reduce", cmd_reduce, "per-E Chinchilla coefficients")
    p.add_argument("--experts", type=_int_list, default=list(planner.DEFAULT_EXPERTS))

    p = add("lr", cmd_lr, "peak learning rate, or fit the rule with --fit")
    p.add_argument("--n-act-nonemb", type=_count)
    p.add_argument("--experts", type=float, default=1.0)
    p.add_argument("--intercept", type=float, default=law.DEFAULT_LR_RULE.intercept)
    p.add_argument("--n-slope", type=float, default=law.DEFAULT_LR_RULE.n_slope)
    p.add_argument("--e-slope", type=float, default=law.DEFAULT_LR_RULE.e_slope)
    p.add_argument("--fit", metavar="CSV", help="fit from columns n_act_nonemb, experts, lr")

    p = add("fit", cmd_fit, "fit coefficients to run records")
    p.add_argument("--runs", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-sample", type=int)
    p.add_argument("--max-iterations", type=int, default=2000)
    p.add_argument("--holdout", type=int, default=fitting.HOLDOUT_SIZE)
    p.add_argument("--huber-delta", type=float, default=0.01)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--weighting", choices=sorted(fitting.WEIGHTING), default="inverse_loss")
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--separate", action="store_true", help="per-E Chinchilla fits instead")
    p.add_argument("--output", help="also write fitted coefficients JSON here")

    p = add("plan-compute", cmd_plan_compute, "compute-optimal N and D")
    budget_args(p)
    p.add_argument("--experts", type=int, required=True)

    p = add("plan-memory", cmd_plan_memory, "memory-capped compute-optimal plan")
    budget_args(p, memory="required")
    p.add_argument("--experts", type=int, required=True)

    p = add("plan-inference", cmd_plan_inference, "plan with inference FLOPs in the budget")
    budget_args(p, memory=True, inference=True)
    p.add_argument("--experts", type=int, required=True)

    p = add("optimal-experts", cmd_optimal_experts, "best expert count for a budget")
    budget_args(p, memory=True, inference=True)
    p.add_argument("--choices", type=_int_list, default=list(planner.DEFAULT_EXPERTS))

    p = add("isoflop", cmd_isoflop, "loss along a fixed-FLOP curve")
    budget_args(p)
    p.add_argument("--experts", type=int, default=1)
    p.add_argument("--tokens-min", type=_count, default=1e9)
    p.add_argument("--tokens-max", type=_count, default=1e12)
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--kv-tokens", type=_count, default=0.0)
    p.add_argument("--bytes-per-element", type=int, default=2, choices=(1, 2, 4, 8))

    p = add("savings", cmd_savings, "FLOP savings of compute-optimal MoE vs dense")
    p.add_argument("--flops", type=lambda s: [float(x) for x in s.split(",")], required=True)
    p.add_argument("--experts", type=_int_list, default=[2, 4, 8, 16, 32])

    p = add("rule-of-thumb", cmd_rule_of_thumb, "equal-memory dense vs MoE comparison")
    p.add_argument("--n-total", type=_count, required=True)
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--dense-tokens", type=_count)
    p.add_argument("--compute-matched", action="store_true")

    p = add("synth", cmd_synth, "synthetic run records from the law")
    p.add_argument("--grid", help="run file with configurations (default: bundled experiment grid)")
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        coeffs = law.resolve_coefficients(args.coefficients)
        result = args.func(args, coeffs)
    except argparse.ArgumentTypeError as exc:
        parser.error(str(exc))
    except (ScalingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    if args.command == "synth":
        stdout.write(dataio.serialize_runs(result, args.format))
        if args.format == "json":
            stdout.write("\n")
    else:
        emit(args.command, result, args.format, stdout, single=args.command not in ("reduce", "isoflop", "savings"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
