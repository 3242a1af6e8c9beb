"""MoE block: experts, top-k gating, usage counting, forward/backward.

The backward pass is checked against finite differences (central, h=1e-5)
and the forward pass against an independent numpy/scipy composition.
"""

import math
from array import array

import numpy as np
import pytest
from scipy.special import erf as sp_erf

from moeforge.errors import (
    ArgumentError,
    DimensionError,
    NumericError,
    RouterLookupError,
    StateError,
)
from moeforge.moe_core import (
    BlockGrads,
    Expert,
    MoEBlock,
    SelectionCounter,
    block_backward,
    block_forward,
    expert_forward,
    record_usage,
    topk_gate,
)
from moeforge.numerics import Matrix, Rng, finite_diff_grad, zeros


def build_block(seed=0, d=4, hidden=6, n_experts=3, rank=2, live_ups=True,
                logit_gaps=True):
    rng = Rng(seed)
    blk = MoEBlock.create(d, hidden, n_experts, rank, rng)
    blk.add_router(1, rng)
    if live_ups:
        for ex in blk.experts:
            rng.fill_gauss(ex.up.data, 0.3)
    if logit_gaps:
        # well-separated gate logits so tiny fd perturbations cannot flip
        # the discrete selection
        r = blk.routers[1]
        for i in range(len(r.w.data)):
            r.w.data[i] *= 0.05
        for j in range(n_experts):
            r.b[j] = 1.0 - 0.8 * j
    return blk, rng


# --- experts ------------------------------------------------------------

def test_fresh_expert_outputs_zero():
    blk, _ = build_block(live_ups=False)
    out = expert_forward(blk.experts[0], [1.0, -2.0, 0.5, 3.0])
    assert list(out) == [0.0] * 4


def test_expert_forward_hand_case():
    ex = Expert(down=Matrix.from_rows([[1.0], [2.0]]), up=Matrix.from_rows([[3.0, 4.0]]))
    out = expert_forward(ex, [1.0, 1.0])
    assert list(out) == [9.0, 12.0]  # z = 1*1 + 1*2 = 3; out = 3*[3,4]


def test_expert_zero_input_zero_output():
    blk, _ = build_block()
    assert list(expert_forward(blk.experts[1], [0.0] * 4)) == [0.0] * 4


def test_expert_dim_mismatch():
    blk, _ = build_block()
    with pytest.raises(DimensionError):
        expert_forward(blk.experts[0], [1.0, 2.0])


# --- gating -------------------------------------------------------------

def test_topk_gate_two_of_three():
    g = topk_gate([2.0, 1.0, 0.0], 2)
    e = math.exp(1.0)
    assert g.selected == [0, 1]
    assert abs(g.weights[0] - e / (e + 1)) < 1e-12
    assert abs(g.weights[1] - 1 / (e + 1)) < 1e-12
    assert g.weights[2] == 0.0


def test_topk_gate_dense_matches_full_softmax():
    logits = [0.3, -1.2, 2.0, 0.0]
    g = topk_gate(logits, 4)
    mx = max(logits)
    exps = [math.exp(v - mx) for v in logits]
    s = sum(exps)
    for w, e in zip(g.weights, exps):
        assert abs(w - e / s) < 1e-12
    assert sorted(g.selected) == [0, 1, 2, 3]


def test_topk_gate_tie_prefers_lower_index():
    g = topk_gate([1.0, 1.0, 0.0], 1)
    assert g.selected == [0]
    assert list(g.weights) == [1.0, 0.0, 0.0]


def test_topk_gate_argument_errors():
    with pytest.raises(ArgumentError):
        topk_gate([1.0, 2.0], 0)
    with pytest.raises(ArgumentError):
        topk_gate([1.0, 2.0], 3)
    with pytest.raises(NumericError):
        topk_gate([1.0, float("nan")], 1)


def test_topk_gate_random_properties():
    rng = np.random.default_rng(10)
    for _ in range(500):
        n = int(rng.integers(2, 16))
        k = int(rng.integers(1, n + 1))
        logits = rng.uniform(-6, 6, n)
        g = topk_gate(logits.tolist(), k)
        pos = [w for w in g.weights if w > 0.0]
        assert len(pos) == len(g.selected) == k
        assert abs(math.fsum(g.weights) - 1.0) < 1e-9
        # top-1 of weights equals top-1 of logits
        assert max(range(n), key=lambda i: g.weights[i]) == int(np.argmax(logits))
        # selection invariant under constant logit shifts
        g2 = topk_gate((logits + 11.25).tolist(), k)
        assert g2.selected == g.selected
        assert np.allclose(list(g2.weights), list(g.weights), atol=1e-9)
        # numpy oracle for the kept softmax
        sel = np.argsort(-logits, kind="stable")[:k]
        kept = logits[sel]
        ref = np.exp(kept - kept.max())
        ref /= ref.sum()
        np.testing.assert_allclose([g.weights[i] for i in sel], ref, atol=1e-12)


def test_record_usage():
    c = SelectionCounter(4)
    record_usage(c, [0, 2])
    record_usage(c, [2, 3])
    assert c.counts == [1, 0, 2, 1] and c.total() == 4
    c.reset()
    assert c.counts == [0, 0, 0, 0]
    with pytest.raises(ArgumentError):
        record_usage(c, [4])


# --- block construction ---------------------------------------------------

def test_block_create_deterministic_and_fresh():
    b1, _ = build_block(seed=3, live_ups=False, logit_gaps=False)
    b2, _ = build_block(seed=3, live_ups=False, logit_gaps=False)
    assert b1.w1.tobytes() == b2.w1.tobytes()
    assert b1.experts[2].down.tobytes() == b2.experts[2].down.tobytes()
    assert b1.routers[1].w.tobytes() == b2.routers[1].w.tobytes()
    for ex in b1.experts:
        assert not any(ex.up.data) and not ex.frozen
    assert b1.counter.counts == [0, 0, 0]
    assert list(b1.ln_gamma) == [1.0] * 4 and not any(b1.ln_beta)


def test_duplicate_router_rejected():
    blk, rng = build_block()
    with pytest.raises(StateError):
        blk.add_router(1, rng)


def test_missing_router_lookup():
    blk, _ = build_block()
    with pytest.raises(RouterLookupError) as ei:
        block_forward(blk, [0.0] * 4, task_id=7, k=1)
    assert "7" in str(ei.value)


# --- block forward ---------------------------------------------------------

def test_block_forward_is_identity_when_paths_are_dead():
    blk, _ = build_block(live_ups=False)
    for v in (blk.w2.data, blk.b2):
        for i in range(len(v)):
            v[i] = 0.0
    x = array("d", [0.7, -1.3, 2.2, 0.4])
    y, gate = block_forward(blk, x, task_id=1, k=2)
    assert list(y) == list(x)
    assert gate is not None and len(gate.selected) == 2


def test_block_forward_adapter_free_path():
    blk, _ = build_block()
    x = array("d", [0.5, 1.0, -0.25, 2.0])
    y_free, gate = block_forward(blk, x, task_id=None)
    assert gate is None
    # equals the routed output minus the expert mixture when ups are dead
    blk2, _ = build_block(live_ups=False)
    blk2.w1, blk2.b1, blk2.w2, blk2.b2 = blk.w1, blk.b1, blk.w2, blk.b2
    blk2.ln_gamma, blk2.ln_beta = blk.ln_gamma, blk.ln_beta
    y_routed, _ = block_forward(blk2, x, task_id=1, k=2)
    assert list(y_free) == list(y_routed)


def np_block_forward(blk, x, k, task_id=1):
    """Independent numpy composition of the block."""
    x = np.asarray(x, dtype=float)
    g = np.array(blk.ln_gamma)
    b = np.array(blk.ln_beta)
    u = (x - x.mean()) / np.sqrt(x.var() + blk.ln_eps) * g + b
    w1 = np.array(blk.w1.tolist())
    w2 = np.array(blk.w2.tolist())
    h1 = u @ w1 + np.array(blk.b1)
    a1 = 0.5 * h1 * (1.0 + sp_erf(h1 / np.sqrt(2.0)))
    xpp = a1 @ w2 + np.array(blk.b2)
    r = blk.routers[task_id]
    logits = x @ np.array(r.w.tolist()) + np.array(r.b)
    sel = np.argsort(-logits, kind="stable")[:k]
    kept = np.exp(logits[sel] - logits[sel].max())
    kept /= kept.sum()
    xppp = np.zeros_like(x)
    for w, j in zip(kept, sel):
        ex = blk.experts[int(j)]
        xppp += w * ((x @ np.array(ex.down.tolist())) @ np.array(ex.up.tolist()))
    return x + xpp + xppp, sorted(int(s) for s in sel)


def test_block_forward_matches_numpy_composition():
    for seed in range(5):
        blk, rng = build_block(seed=seed, d=6, hidden=9, n_experts=4, rank=3)
        x = zeros(6)
        rng.fill_gauss(x, 1.0)
        y, gate = block_forward(blk, x, task_id=1, k=2)
        ref, sel = np_block_forward(blk, x, k=2)
        np.testing.assert_allclose(np.array(y), ref, rtol=1e-12, atol=1e-12)
        assert sorted(gate.selected) == sel


def test_block_forward_single_expert_weight_is_one():
    blk, rng = build_block(d=4, hidden=5, n_experts=1, rank=2, logit_gaps=False)
    x = zeros(4)
    rng.fill_gauss(x)
    y, gate = block_forward(blk, x, task_id=1, k=1)
    assert gate.weights[0] == 1.0 and gate.selected == [0]
    e0 = expert_forward(blk.experts[0], x)
    blk2, _ = build_block(d=4, hidden=5, n_experts=1, rank=2, live_ups=False,
                          logit_gaps=False)
    for name in ("w1", "b1", "w2", "b2", "ln_gamma", "ln_beta"):
        setattr(blk2, name, getattr(blk, name))
    y2, _ = block_forward(blk2, x, task_id=1, k=1)
    np.testing.assert_allclose(
        np.array(y), np.array(y2) + np.array(e0), rtol=1e-12, atol=1e-12
    )


def test_block_forward_equal_logits_split_half():
    blk, rng = build_block(d=4, hidden=5, n_experts=2, rank=2, logit_gaps=False)
    r = blk.routers[1]
    for buf in (r.w.data, r.b):
        for i in range(len(buf)):
            buf[i] = 0.0
    x = zeros(4)
    rng.fill_gauss(x)
    _, gate = block_forward(blk, x, task_id=1, k=2)
    assert list(gate.weights) == [0.5, 0.5]


def test_block_forward_usage_accounting():
    blk, rng = build_block(n_experts=5)
    k = 2
    for _ in range(10):
        x = zeros(4)
        rng.fill_gauss(x)
        block_forward(blk, x, task_id=1, k=k, train_mode=True)
    assert blk.counter.total() == 10 * k
    before = list(blk.counter.counts)
    x = zeros(4)
    rng.fill_gauss(x)
    block_forward(blk, x, task_id=1, k=k, train_mode=False)
    assert blk.counter.counts == before  # eval never counts


def test_block_forward_dim_mismatch():
    blk, _ = build_block()
    with pytest.raises(DimensionError):
        block_forward(blk, [1.0] * 5, task_id=1, k=1)


# --- block backward ----------------------------------------------------

def scalar_objective(blk, x, probe, k=2):
    y, _ = block_forward(blk, x, task_id=1, k=k)
    return sum(p * v for p, v in zip(probe, y))


def analytic_grads(blk, x, probe, k=2, backbone_trainable=True):
    from moeforge.moe_core import BlockCache

    cache = BlockCache(blk, k)
    block_forward(blk, x, task_id=1, k=k, cache=cache)
    grads = BlockGrads.for_block(blk)
    dx = zeros(blk.d)
    block_backward(blk, cache, 1, array("d", probe), grads, dx,
                   backbone_trainable=backbone_trainable)
    return grads, dx


def max_rel_err(analytic, fd):
    worst = 0.0
    for a, f in zip(analytic, fd):
        worst = max(worst, abs(a - f) / max(abs(f), 1e-6))
    return worst


def fd_wrt_param(blk, x, probe, param_matrix, k=2):
    def f(m):
        saved = array("d", param_matrix.data)
        param_matrix.data[:] = m.data
        try:
            return scalar_objective(blk, x, probe, k)
        finally:
            param_matrix.data[:] = saved

    return finite_diff_grad(f, param_matrix.copy(), h=1e-5)


def fd_wrt_buffer(blk, x, probe, buf, k=2):
    holder = Matrix(1, len(buf), array("d", buf))

    def f(m):
        saved = array("d", buf)
        buf[:] = m.data
        try:
            return scalar_objective(blk, x, probe, k)
        finally:
            buf[:] = saved

    return finite_diff_grad(f, holder, h=1e-5)


def test_block_backward_full_gradcheck():
    blk, rng = build_block(seed=11, d=4, hidden=6, n_experts=3, rank=2)
    x = zeros(4)
    rng.fill_gauss(x)
    probe = [0.7, -1.1, 0.4, 0.9]
    grads, dx = analytic_grads(blk, x, probe)
    sel = set(block_forward(blk, x, task_id=1, k=2)[1].selected)

    checks = [
        (grads.w1, fd_wrt_param(blk, x, probe, blk.w1).data),
        (grads.w2, fd_wrt_param(blk, x, probe, blk.w2).data),
        (grads.b1, fd_wrt_buffer(blk, x, probe, blk.b1).data),
        (grads.b2, fd_wrt_buffer(blk, x, probe, blk.b2).data),
        (grads.ln_gamma, fd_wrt_buffer(blk, x, probe, blk.ln_gamma).data),
        (grads.ln_beta, fd_wrt_buffer(blk, x, probe, blk.ln_beta).data),
        (grads.router_w, fd_wrt_param(blk, x, probe, blk.routers[1].w).data),
        (grads.router_b, fd_wrt_buffer(blk, x, probe, blk.routers[1].b).data),
    ]
    for j in range(blk.n_experts):
        checks.append((grads.experts[j][0], fd_wrt_param(blk, x, probe, blk.experts[j].down).data))
        checks.append((grads.experts[j][1], fd_wrt_param(blk, x, probe, blk.experts[j].up).data))
    for analytic, fd in checks:
        assert max_rel_err(analytic, fd) < 1e-4

    # unselected experts have exactly zero gradient on both routes
    for j in range(blk.n_experts):
        if j not in sel:
            assert not any(grads.experts[j][0]) and not any(grads.experts[j][1])

    # input gradient
    def f_input(m):
        return scalar_objective(blk, m.data, probe)

    fd_x = finite_diff_grad(f_input, Matrix(1, 4, array("d", x)), h=1e-5)
    assert max_rel_err(dx, fd_x.data) < 1e-4


def test_block_backward_zero_upstream_gives_zero():
    blk, rng = build_block(seed=2)
    x = zeros(4)
    rng.fill_gauss(x)
    grads, dx = analytic_grads(blk, x, [0.0] * 4)
    assert not any(dx)
    for buf in (grads.w1, grads.b1, grads.w2, grads.b2, grads.ln_gamma,
                grads.ln_beta, grads.router_w, grads.router_b):
        assert not any(buf)
    for down, up in grads.experts:
        assert not any(down) and not any(up)


def test_block_backward_frozen_expert_gets_no_param_grad():
    blk, rng = build_block(seed=4)
    x = zeros(4)
    rng.fill_gauss(x)
    probe = [1.0, 0.5, -0.5, 0.25]
    sel = block_forward(blk, x, task_id=1, k=2)[1].selected
    target = sel[0]

    grads_live, dx_live = analytic_grads(blk, x, probe)
    assert any(grads_live.experts[target][1])

    blk.experts[target].frozen = True
    grads_frozen, dx_frozen = analytic_grads(blk, x, probe)
    assert not any(grads_frozen.experts[target][0])
    assert not any(grads_frozen.experts[target][1])
    # input gradient still includes the frozen expert's contribution
    assert dx_frozen.tobytes() == dx_live.tobytes()


def test_block_backward_backbone_flag_skips_backbone_grads():
    blk, rng = build_block(seed=6)
    x = zeros(4)
    rng.fill_gauss(x)
    probe = [0.3, -0.2, 0.8, 0.1]
    g_on, dx_on = analytic_grads(blk, x, probe, backbone_trainable=True)
    g_off, dx_off = analytic_grads(blk, x, probe, backbone_trainable=False)
    for buf in (g_off.w1, g_off.b1, g_off.w2, g_off.b2, g_off.ln_gamma, g_off.ln_beta):
        assert not any(buf)
    assert g_off.router_w == g_on.router_w
    assert dx_off.tobytes() == dx_on.tobytes()
    for j in range(blk.n_experts):
        assert g_off.experts[j][0] == g_on.experts[j][0]


def test_block_backward_requires_routed_cache():
    from moeforge.moe_core import BlockCache

    blk, rng = build_block()
    cache = BlockCache(blk, 1)
    x = zeros(4)
    rng.fill_gauss(x)
    block_forward(blk, x, task_id=None, cache=cache)
    with pytest.raises(StateError):
        block_backward(blk, cache, 1, zeros(4), BlockGrads.for_block(blk), zeros(4))
