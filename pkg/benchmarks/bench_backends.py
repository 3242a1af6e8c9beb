"""Benchmark the compiled kernel backend against the pure-Python fallback.

Two views:
  * micro  - per-kernel ns/op at the shapes the trainer actually uses
             (d_model=32, hidden=64, batch=16, autoencoder 32x8)
  * macro  - wall time of a small end-to-end training sequence per backend,
             with a bytewise check that both produce the same result

Usage: python benchmarks/bench_backends.py [--number N] [--repeat R] [--desk]
"""

import argparse
import json
import sys
import time
import timeit
from array import array

from moeforge import backend as be
from moeforge.numerics import Rng
from moeforge.task_suite import SuiteConfig, generate_suite
from moeforge.trainer import TrainConfig, run_sequence

D, H, B, Q = 32, 64, 16, 8       # trainer shapes: model, hidden, batch, bottleneck


def rand(rng, n, scale=1.0):
    return array("d", [rng.gauss() * scale for _ in range(n)])


def kernel_workloads(rng):
    """name -> zero-arg callable per kernel, bound to preallocated buffers."""
    K = be.kernels   # late-bound below via closures on the module attribute
    x_d, y_d, z_d, out_d = (rand(rng, D) for _ in range(4))
    gamma, beta, stats = rand(rng, D), rand(rng, D), rand(rng, 2)
    w_dh, gw_dh = rand(rng, D * H), rand(rng, D * H)
    b_h, out_h, g_h = rand(rng, H), rand(rng, H), rand(rng, H)
    p, g = rand(rng, D * H), rand(rng, D * H, 0.01)
    m = rand(rng, D * H, 0.01)
    v = array("d", [abs(val) for val in rand(rng, D * H, 0.01)])
    a_bd, b_dq, out_bq = rand(rng, B * D), rand(rng, D * Q), rand(rng, B * Q)
    a_db, b_dq2 = rand(rng, D * B), rand(rng, D * Q)
    b_qd = rand(rng, Q * D)
    err_b = rand(rng, B)

    return {
        "fill": lambda: be.kernels.fill(out_d, 0.25, D),
        "copy": lambda: be.kernels.copy(x_d, out_d, D),
        "add3": lambda: be.kernels.add3(x_d, y_d, z_d, out_d, D),
        "add_scaled": lambda: be.kernels.add_scaled(out_d, x_d, 0.37, D),
        "scaled_copy": lambda: be.kernels.scaled_copy(x_d, -1.7, out_d, D),
        "dot": lambda: be.kernels.dot(x_d, y_d, D),
        "vecmat": lambda: be.kernels.vecmat(x_d, w_dh, D, H, out_h),
        "matvec": lambda: be.kernels.matvec(w_dh, out_h, D, H, out_d),
        "linear_forward": lambda: be.kernels.linear_forward(
            x_d, w_dh, b_h, D, H, out_h),
        "linear_backward": lambda: be.kernels.linear_backward(
            x_d, w_dh, D, H, g_h, gw_dh, b_h, y_d),
        "layer_norm_forward": lambda: be.kernels.layer_norm_forward(
            x_d, gamma, beta, 1e-5, D, out_d, stats),
        "layer_norm_backward": lambda: be.kernels.layer_norm_backward(
            x_d, gamma, stats, y_d, z_d, out_d, out_d, D),
        "gelu_forward": lambda: be.kernels.gelu_forward(out_h, H, g_h),
        "gelu_backward": lambda: be.kernels.gelu_backward(out_h, g_h, H, b_h),
        "softmax": lambda: be.kernels.softmax(x_d, D, out_d),
        "adamw_update": lambda: be.kernels.adamw_update(
            p, g, m, v, D * H, 3, 1e-3, 0.9, 0.999, 1e-8, 0.01),
        "matmul": lambda: be.kernels.matmul(a_bd, b_dq, B, D, Q, out_bq),
        "matmul_at": lambda: be.kernels.matmul_at(a_db, b_dq2, D, B, Q, out_bq),
        "matmul_bt": lambda: be.kernels.matmul_bt(a_bd, b_qd, B, D, Q, out_bq),
        "l2_normalize": lambda: be.kernels.l2_normalize(x_d, D, out_d),
        "rowwise_sq_error": lambda: be.kernels.rowwise_sq_error(
            a_bd, a_bd, B, D, err_b),
    }


def bench_micro(number, repeat):
    print(f"micro: best of {repeat} x {number} calls, trainer shapes "
          f"(d={D}, hidden={H}, batch={B}, bottleneck={Q})\n")
    print(f"{'kernel':<22}{'compiled ns/op':>16}{'pure ns/op':>14}{'speedup':>10}")
    workloads = kernel_workloads(Rng(11))
    for name, fn in workloads.items():
        per_backend = {}
        for backend in ("c", "python"):
            with be.temporary(backend):
                best = min(timeit.repeat(fn, number=number, repeat=repeat))
            per_backend[backend] = best / number * 1e9
        ratio = per_backend["python"] / per_backend["c"]
        print(f"{name:<22}{per_backend['c']:>16.0f}{per_backend['python']:>14.0f}"
              f"{ratio:>9.1f}x")


def bench_macro(desk):
    if desk:
        suite_cfg = SuiteConfig(seed=0, separation=1.3)
        train_cfg = TrainConfig(seed=0)
        label = "desk run (T=5, d_in=32, 400 iters/task)"
    else:
        suite_cfg = SuiteConfig(tasks=2, d_in=8, class_pool=6,
                                classes_per_task=3, separation=1.0,
                                train_per_class=20, test_per_class=10, seed=3)
        train_cfg = TrainConfig(d_model=12, hidden=12, blocks=1, expert_rank=2,
                                n_experts=4, topk=2, iterations=30, batch=8,
                                merge_cycle=10, ae_bottleneck=3, ae_epochs=3,
                                seed=1)
        label = "tiny run (T=2, d_in=8, 30 iters/task)"
    print(f"\nmacro: {label}")
    results = {}
    for backend in ("c", "python"):
        with be.temporary(backend):
            suite = generate_suite(suite_cfg)
            t0 = time.perf_counter()
            res = run_sequence(suite, train_cfg)
            elapsed = time.perf_counter() - t0
        results[backend] = json.dumps(res.to_json_dict(), sort_keys=True)
        print(f"  {backend:<7} {elapsed:8.3f} s")
    same = results["c"] == results["python"]
    print(f"  results byte-identical: {same}")
    if not same:
        raise SystemExit("backend mismatch: compiled and pure runs disagree")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--number", type=int, default=2000,
                        help="calls per timing sample (default 2000)")
    parser.add_argument("--repeat", type=int, default=5,
                        help="timing samples per kernel (default 5)")
    parser.add_argument("--desk", action="store_true",
                        help="macro-benchmark the full desk run instead of the tiny one")
    args = parser.parse_args(argv)
    if "c" not in be.available_backends():
        print("compiled backend unavailable; nothing to compare", file=sys.stderr)
        return 1
    bench_micro(args.number, args.repeat)
    bench_macro(args.desk)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
