"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py --sizes 270 10000 --repeat 200
"""

import argparse
import timeit

import numpy as np

from moe_scaling import _kernels_py, fitting, law

try:
    from moe_scaling import _kernels as _compiled
except ImportError:
    _compiled = None


def make_problem(size, seed=0):
    rng = np.random.default_rng(seed)
    log_n = rng.uniform(np.log(5e7), np.log(3e9), size)
    log_d = rng.uniform(np.log(5e8), np.log(1e11), size)
    experts = rng.choice([1.0, 2.0, 4.0, 8.0, 16.0, 32.0], size)
    theta = fitting.theta_from_coefficients(law.default_coefficients())
    log_loss = np.empty(size)
    _kernels_py.predict(theta, log_n, log_d, experts, log_loss)
    log_loss += rng.normal(0, 0.01, size)
    weights = rng.uniform(0.5, 1.0, size)
    return theta + rng.normal(0, 0.02, theta.size), log_n, log_d, experts, log_loss, weights


def bench(module, problem, repeat):
    theta, log_n, log_d, experts, log_loss, weights = problem
    out, grad = np.empty(log_n.size), np.empty(theta.size)
    pred = min(timeit.repeat(lambda: module.predict(theta, log_n, log_d, experts, out), number=repeat, repeat=3))
    obj = min(timeit.repeat(
        lambda: module.objective_grad(theta, log_n, log_d, experts, log_loss, weights, 0.01, grad),
        number=repeat, repeat=3,
    ))
    return pred / repeat, obj / repeat


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[270, 10_000])
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()

    if _compiled is None:
        print("compiled kernels not built; only the numpy fallback is available")
    print(f"{'records':>8} {'kernel':>14} {'numpy us':>10} {'cython us':>10} {'speedup':>8}")
    for size in args.sizes:
        problem = make_problem(size)
        py = bench(_kernels_py, problem, args.repeat)
        cy = bench(_compiled, problem, args.repeat) if _compiled else (float("nan"),) * 2
        for name, a, b in zip(("predict", "objective_grad"), py, cy):
            print(f"{size:>8} {name:>14} {a * 1e6:>10.1f} {b * 1e6:>10.1f} {a / b:>7.1f}x")


if __name__ == "__main__":
    main()
