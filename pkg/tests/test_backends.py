"""Compiled and pure-Python kernels must agree bit for bit.

Every kernel pins its floating-point evaluation order, so the two
backends are required to produce byte-identical outputs, not merely
close ones. The end-to-end check runs a tiny training sequence under
each backend and compares artifacts bytewise.
"""

import shutil
from array import array

import pytest

from moeforge import backend as be
from moeforge.numerics import Rng

needs_c = pytest.mark.skipif(
    "c" not in be.available_backends(),
    reason="compiled backend unavailable",
)


def rand(rng, n, scale=1.0):
    return array("d", [rng.gauss() * scale for _ in range(n)])


def run_kernel(kernels, name, rng):
    """Execute one kernel on seeded inputs; returns the output buffers."""
    n, k, m = 5, 4, 3
    if name == "fill":
        out = rand(rng, n)
        kernels.fill(out, 0.25, n)
        return [out]
    if name == "copy":
        src, dst = rand(rng, n), rand(rng, n)
        kernels.copy(src, dst, n)
        return [dst]
    if name == "add3":
        x, a, b, out = rand(rng, n), rand(rng, n), rand(rng, n), rand(rng, n)
        kernels.add3(x, a, b, out, n)
        return [out]
    if name == "add_scaled":
        y, x = rand(rng, n), rand(rng, n)
        kernels.add_scaled(y, x, 0.37, n)
        return [y]
    if name == "scaled_copy":
        x, out = rand(rng, n), rand(rng, n)
        kernels.scaled_copy(x, -1.7, out, n)
        return [out]
    if name == "dot":
        x, y = rand(rng, n), rand(rng, n)
        return [array("d", [kernels.dot(x, y, n)])]
    if name == "vecmat":
        x, w, out = rand(rng, n), rand(rng, n * m), rand(rng, m)
        kernels.vecmat(x, w, n, m, out)
        return [out]
    if name == "matvec":
        w, x, out = rand(rng, n * m), rand(rng, m), rand(rng, n)
        kernels.matvec(w, x, n, m, out)
        return [out]
    if name == "linear_forward":
        x, w, b, out = rand(rng, n), rand(rng, n * m), rand(rng, m), rand(rng, m)
        kernels.linear_forward(x, w, b, n, m, out)
        return [out]
    if name == "linear_backward":
        x, w = rand(rng, n), rand(rng, n * m)
        gout = rand(rng, m)
        dw, db, dx = rand(rng, n * m), rand(rng, m), rand(rng, n)
        kernels.linear_backward(x, w, n, m, gout, dw, db, dx)
        return [dw, db, dx]
    if name == "layer_norm_forward":
        x, gamma, beta = rand(rng, n), rand(rng, n), rand(rng, n)
        out, stats = rand(rng, n), rand(rng, 2)
        kernels.layer_norm_forward(x, gamma, beta, 1e-5, n, out, stats)
        return [out, stats]
    if name == "layer_norm_backward":
        x, gamma, beta = rand(rng, n), rand(rng, n), rand(rng, n)
        out, stats = rand(rng, n), rand(rng, 2)
        kernels.layer_norm_forward(x, gamma, beta, 1e-5, n, out, stats)
        gout = rand(rng, n)
        dgamma, dbeta, dx = rand(rng, n), rand(rng, n), rand(rng, n)
        kernels.layer_norm_backward(x, gamma, stats, gout, dgamma, dbeta, dx, n)
        return [dgamma, dbeta, dx]
    if name == "gelu_forward":
        x, out = rand(rng, n, 2.0), rand(rng, n)
        kernels.gelu_forward(x, n, out)
        return [out]
    if name == "gelu_backward":
        x, gout, out = rand(rng, n, 2.0), rand(rng, n), rand(rng, n)
        kernels.gelu_backward(x, gout, n, out)
        return [out]
    if name == "softmax":
        x, out = rand(rng, n, 3.0), rand(rng, n)
        kernels.softmax(x, n, out)
        return [out]
    if name == "adamw_update":
        p, g = rand(rng, n), rand(rng, n)
        mm, vv = rand(rng, n, 0.01), array("d", [abs(v) for v in rand(rng, n, 0.01)])
        kernels.adamw_update(p, g, mm, vv, n, 3, 1e-3, 0.9, 0.999, 1e-8, 0.01)
        return [p, mm, vv]
    if name == "matmul":
        a, b, out = rand(rng, n * k), rand(rng, k * m), rand(rng, n * m)
        kernels.matmul(a, b, n, k, m, out)
        return [out]
    if name == "matmul_at":
        a, b, out = rand(rng, k * n), rand(rng, k * m), rand(rng, n * m)
        kernels.matmul_at(a, b, k, n, m, out)
        return [out]
    if name == "matmul_bt":
        a, b, out = rand(rng, n * k), rand(rng, m * k), rand(rng, n * m)
        kernels.matmul_bt(a, b, n, k, m, out)
        return [out]
    if name == "l2_normalize":
        x, out = rand(rng, n), rand(rng, n)
        norm = kernels.l2_normalize(x, n, out)
        return [out, array("d", [norm])]
    if name == "rowwise_sq_error":
        a, b, out = rand(rng, n * m), rand(rng, n * m), rand(rng, n)
        kernels.rowwise_sq_error(a, b, n, m, out)
        return [out]
    raise AssertionError(f"unhandled kernel {name}")


KERNELS = [
    "fill", "copy", "add3", "add_scaled", "scaled_copy", "dot", "vecmat",
    "matvec", "linear_forward", "linear_backward", "layer_norm_forward",
    "layer_norm_backward", "gelu_forward", "gelu_backward", "softmax",
    "adamw_update", "matmul", "matmul_at", "matmul_bt", "l2_normalize",
    "rowwise_sq_error",
]


def test_kernel_list_is_complete():
    from moeforge import _kernels_py
    public = {name for name in dir(_kernels_py)
              if not name.startswith("_") and callable(getattr(_kernels_py, name))}
    public.discard("erf")   # math imports
    public.discard("exp")
    public.discard("log")
    public.discard("sqrt")
    assert set(KERNELS) <= public


@needs_c
@pytest.mark.parametrize("name", KERNELS)
def test_kernel_bit_equality(name):
    from moeforge import _kernels_c, _kernels_py
    for trial in range(25):
        out_c = run_kernel(_kernels_c, name, Rng(1000 + trial))
        out_py = run_kernel(_kernels_py, name, Rng(1000 + trial))
        for bc, bp in zip(out_c, out_py):
            assert bc.tobytes() == bp.tobytes(), f"{name} trial {trial}"


def test_backend_selection_and_temporary():
    start = be.active_backend()
    with be.temporary("python"):
        assert be.active_backend() == "python"
        assert be.kernels.__name__.endswith("_kernels_py")
    assert be.active_backend() == start


@needs_c
def test_end_to_end_runs_byte_identical_across_backends(tmp_path):
    from moeforge.task_suite import SuiteConfig, generate_suite
    from moeforge.trainer import TrainConfig, run_sequence

    scfg = SuiteConfig(tasks=2, d_in=8, class_pool=6, classes_per_task=3,
                       separation=1.0, train_per_class=15, test_per_class=8,
                       seed=5)
    tcfg = TrainConfig(d_model=12, hidden=12, blocks=1, expert_rank=2,
                       n_experts=4, topk=2, iterations=15, batch=6,
                       merge_cycle=8, ae_bottleneck=3, ae_epochs=2, seed=2)
    outs = {}
    for backend in ("c", "python"):
        with be.temporary(backend):
            suite = generate_suite(scfg)
            out = tmp_path / backend
            run_sequence(suite, tcfg, out_dir=out)
            outs[backend] = out
    for rel in ("run_result.json", "checkpoints/task2/tensors.bin",
                "checkpoints/task2/manifest.json", "reports/metrics.csv"):
        assert (outs["c"] / rel).read_bytes() == \
               (outs["python"] / rel).read_bytes(), rel
