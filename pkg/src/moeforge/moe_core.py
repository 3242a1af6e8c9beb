"""Residual mixture-of-experts block with per-task routers.

Forward (per sample, train time):

    u      = LayerNorm(x)
    x''    = W2 @ gelu(W1 @ u + b1) + b2          (dense MLP path)
    logits = R_t(x)                               (router consumes block INPUT)
    W, S   = topk softmax gate over logits        (softmax over the k kept)
    x'''   = sum_{j in S} W_j * expert_j(x)       (experts consume block INPUT)
    y      = x + x'' + x'''

Experts are rank-r adapters: expert(x) = (x @ down) @ up, down initialized
N(0, 1/d), up zero, so a fresh expert contributes nothing. The selection
counter increments once per sample for each selected expert; gradients
flow through gate values but not through the discrete selection; frozen
experts never receive parameter gradients (input gradient still passes
through them).

Backward accumulation into dx is pinned: residual, then expert path, then
router path, then MLP path. This order is part of the reproducibility
contract (it is common Python code, identical under both kernel backends).
"""

from __future__ import annotations

import math
from array import array
from dataclasses import dataclass, field

from . import backend as be
from .errors import (
    ArgumentError,
    DimensionError,
    NumericError,
    RouterLookupError,
    StateError,
)
from .numerics import Matrix, Rng, zeros


@dataclass
class Expert:
    """Low-rank residual adapter. frozen=True makes it permanently immutable."""

    down: Matrix  # d x r
    up: Matrix    # r x d
    frozen: bool = False

    @property
    def d(self) -> int:
        return self.down.rows

    @property
    def rank(self) -> int:
        return self.down.cols


@dataclass
class Router:
    """Task-specific linear gate producing one logit per expert."""

    task_id: int
    w: Matrix  # d x n_experts
    b: array


@dataclass
class GateResult:
    weights: array        # dense, length n_experts; zero off the selected set
    selected: list[int]   # descending logit order, ties toward lower index


class SelectionCounter:
    """Per-expert usage counts for one block (reset at each task boundary)."""

    __slots__ = ("counts",)

    def __init__(self, n_experts: int):
        self.counts = [0] * n_experts

    def reset(self) -> None:
        for i in range(len(self.counts)):
            self.counts[i] = 0

    def total(self) -> int:
        return sum(self.counts)


def expert_forward(expert: Expert, x) -> array:
    """(x @ down) @ up for a single sample vector."""
    x = x if isinstance(x, array) else array("d", x)
    if len(x) != expert.d:
        raise DimensionError(f"expert expects {expert.d} features, got {len(x)}")
    K = be.kernels
    z = zeros(expert.rank)
    out = zeros(expert.d)
    K.vecmat(x, expert.down.data, expert.d, expert.rank, z)
    K.vecmat(z, expert.up.data, expert.rank, expert.d, out)
    return out


def topk_gate(logits, k: int) -> GateResult:
    """Select the k largest logits (ties toward the lower index) and
    softmax over exactly those k values; non-selected weights are 0."""
    logits = logits if isinstance(logits, array) else array("d", logits)
    n = len(logits)
    if not 1 <= k <= n:
        raise ArgumentError(f"topk_gate: k={k} outside [1, {n}]")
    for v in logits:
        if not math.isfinite(v):
            raise NumericError("topk_gate: non-finite logit")
    selected = sorted(range(n), key=lambda i: (-logits[i], i))[:k]
    kept = array("d", [logits[i] for i in selected])
    sm = zeros(k)
    be.kernels.softmax(kept, k, sm)
    weights = zeros(n)
    for pos, idx in enumerate(selected):
        weights[idx] = sm[pos]
    return GateResult(weights=weights, selected=selected)


def record_usage(counter: SelectionCounter, selected) -> None:
    """+1 per selected expert (i.e. per sample when called once per sample)."""
    n = len(counter.counts)
    for idx in selected:
        if not 0 <= idx < n:
            raise ArgumentError(f"expert index {idx} outside [0, {n})")
        counter.counts[idx] += 1


class MoEBlock:
    """One residual block: shared LN+MLP backbone, expert pool, per-task routers."""

    def __init__(self, d, hidden, experts, ln_gamma, ln_beta, ln_eps,
                 w1, b1, w2, b2):
        self.d = d
        self.hidden = hidden
        self.experts: list[Expert] = experts
        self.ln_gamma = ln_gamma
        self.ln_beta = ln_beta
        self.ln_eps = ln_eps
        self.w1 = w1
        self.b1 = b1
        self.w2 = w2
        self.b2 = b2
        self.routers: dict[int, Router] = {}
        self.counter = SelectionCounter(len(experts))

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @classmethod
    def create(cls, d: int, hidden: int, n_experts: int, rank: int, rng: Rng,
               ln_eps: float = 1e-5) -> "MoEBlock":
        """Draw order is pinned: w1, w2, then expert down-projections in
        ascending expert index (up starts zero, biases zero, LN affine 1/0)."""
        if min(d, hidden, n_experts, rank) < 1:
            raise ArgumentError(
                f"block dims must be >= 1: d={d} hidden={hidden} "
                f"experts={n_experts} rank={rank}"
            )
        w1 = Matrix(d, hidden)
        rng.fill_gauss(w1.data, 1.0 / math.sqrt(d))
        w2 = Matrix(hidden, d)
        rng.fill_gauss(w2.data, 1.0 / math.sqrt(hidden))
        experts = []
        for _ in range(n_experts):
            down = Matrix(d, rank)
            rng.fill_gauss(down.data, 1.0 / math.sqrt(d))
            experts.append(Expert(down=down, up=Matrix(rank, d)))
        return cls(
            d=d, hidden=hidden, experts=experts,
            ln_gamma=array("d", [1.0] * d), ln_beta=zeros(d), ln_eps=ln_eps,
            w1=w1, b1=zeros(hidden), w2=w2, b2=zeros(d),
        )

    def add_router(self, task_id: int, rng: Rng) -> Router:
        if task_id in self.routers:
            raise StateError(f"router for task {task_id} already exists")
        w = Matrix(self.d, self.n_experts)
        rng.fill_gauss(w.data, 1.0 / math.sqrt(self.d))
        router = Router(task_id=task_id, w=w, b=zeros(self.n_experts))
        self.routers[task_id] = router
        return router

    def router_for(self, task_id: int) -> Router:
        try:
            return self.routers[task_id]
        except KeyError:
            raise RouterLookupError(
                f"no router for task {task_id}; known tasks: {sorted(self.routers)}"
            ) from None


class BlockCache:
    """Reusable per-(sample, block) buffers holding forward intermediates."""

    __slots__ = (
        "x", "u", "stats", "h1", "a1", "xpp", "logits", "gate", "z", "e",
        "xppp", "y", "da1", "dh1", "du", "dz", "de", "dlogits",
    )

    def __init__(self, block: MoEBlock, k: int):
        d, h, r, n = block.d, block.hidden, block.experts[0].rank, block.n_experts
        self.x = zeros(d)
        self.u = zeros(d)
        self.stats = zeros(2)
        self.h1 = zeros(h)
        self.a1 = zeros(h)
        self.xpp = zeros(d)
        self.logits = zeros(n)
        self.gate: GateResult | None = None
        self.z = [zeros(r) for _ in range(k)]
        self.e = [zeros(d) for _ in range(k)]
        self.xppp = zeros(d)
        self.y = zeros(d)
        # backward work space
        self.da1 = zeros(h)
        self.dh1 = zeros(h)
        self.du = zeros(d)
        self.dz = zeros(r)
        self.de = zeros(d)
        self.dlogits = zeros(n)


@dataclass
class BlockGrads:
    """Gradient buffers mirroring one block's trainable parameters."""

    ln_gamma: array
    ln_beta: array
    w1: array
    b1: array
    w2: array
    b2: array
    router_w: array
    router_b: array
    experts: list[tuple[array, array]] = field(default_factory=list)  # (down, up)

    @classmethod
    def for_block(cls, block: MoEBlock) -> "BlockGrads":
        d, h, n = block.d, block.hidden, block.n_experts
        r = block.experts[0].rank
        return cls(
            ln_gamma=zeros(d), ln_beta=zeros(d),
            w1=zeros(d * h), b1=zeros(h), w2=zeros(h * d), b2=zeros(d),
            router_w=zeros(d * n), router_b=zeros(n),
            experts=[(zeros(d * r), zeros(r * d)) for _ in range(n)],
        )

    def zero(self) -> None:
        K = be.kernels
        for buf in (self.ln_gamma, self.ln_beta, self.w1, self.b1, self.w2,
                    self.b2, self.router_w, self.router_b):
            K.fill(buf, 0.0, len(buf))
        for down, up in self.experts:
            K.fill(down, 0.0, len(down))
            K.fill(up, 0.0, len(up))


def block_forward(block: MoEBlock, x, task_id, k: int = 1, *,
                  train_mode: bool = False, cache: BlockCache | None = None):
    """Run one block on a single sample. Returns (y, gate).

    task_id=None runs the adapter-free path (no router, no experts); this
    is the out-of-distribution fallback. The returned buffers are owned by
    the cache; copy them if they must outlive the next forward call.
    """
    K = be.kernels
    d = block.d
    x = x if isinstance(x, array) else array("d", x)
    if len(x) != d:
        raise DimensionError(f"block expects {d} features, got {len(x)}")
    if cache is None:
        cache = BlockCache(block, k if task_id is not None else 1)
    c = cache
    K.copy(x, c.x, d)
    K.layer_norm_forward(c.x, block.ln_gamma, block.ln_beta, block.ln_eps,
                         d, c.u, c.stats)
    K.linear_forward(c.u, block.w1.data, block.b1, d, block.hidden, c.h1)
    K.gelu_forward(c.h1, block.hidden, c.a1)
    K.linear_forward(c.a1, block.w2.data, block.b2, block.hidden, d, c.xpp)

    if task_id is None:
        c.gate = None
        K.fill(c.xppp, 0.0, d)
        K.add3(c.x, c.xpp, c.xppp, c.y, d)
        return c.y, None

    router = block.router_for(task_id)
    K.linear_forward(c.x, router.w.data, router.b, d, block.n_experts, c.logits)
    gate = topk_gate(c.logits, k)
    c.gate = gate
    if train_mode:
        record_usage(block.counter, gate.selected)
    K.fill(c.xppp, 0.0, d)
    for pos, j in enumerate(gate.selected):
        ex = block.experts[j]
        K.vecmat(c.x, ex.down.data, d, ex.rank, c.z[pos])
        K.vecmat(c.z[pos], ex.up.data, ex.rank, d, c.e[pos])
        K.add_scaled(c.xppp, c.e[pos], gate.weights[j], d)
    K.add3(c.x, c.xpp, c.xppp, c.y, d)
    return c.y, gate


def block_backward(block: MoEBlock, cache: BlockCache, task_id, gout,
                   grads: BlockGrads, dx, *, backbone_trainable: bool = True) -> None:
    """Accumulate parameter gradients and the input gradient for one sample.

    The caller zeroes dx. Frozen experts contribute input gradient but get
    no parameter gradient. Gradient flows through gate weights, not the
    discrete selection. backbone_trainable=False skips LN/MLP parameter
    gradients (used once the shared backbone is frozen) while still
    propagating the input gradient.
    """
    K = be.kernels
    c = cache
    d, h, n = block.d, block.hidden, block.n_experts
    gate = c.gate
    if gate is None:
        raise StateError("block_backward needs a forward cache from a routed pass")

    # residual path
    K.add_scaled(dx, gout, 1.0, d)

    # expert path: x''' = sum_j W_j * e_j, e_j = up_j(z_j), z_j = down_j(x)
    dgate = {}
    for pos, j in enumerate(gate.selected):
        ex = block.experts[j]
        dgate[j] = K.dot(gout, c.e[pos], d)
        K.scaled_copy(gout, gate.weights[j], c.de, d)  # dL/de_j
        K.fill(c.dz, 0.0, ex.rank)
        if ex.frozen:
            K.linear_backward(c.z[pos], ex.up.data, ex.rank, d, c.de,
                              None, None, c.dz)
            K.linear_backward(c.x, ex.down.data, d, ex.rank, c.dz,
                              None, None, dx)
        else:
            gdown, gup = grads.experts[j]
            K.linear_backward(c.z[pos], ex.up.data, ex.rank, d, c.de,
                              gup, None, c.dz)
            K.linear_backward(c.x, ex.down.data, d, ex.rank, c.dz,
                              gdown, None, dx)

    # gate softmax: dlogit_s = W_s * (dgate_s - sum_s' W_s' dgate_s')
    router = block.router_for(task_id)
    ssum = 0.0
    for j in gate.selected:
        ssum += gate.weights[j] * dgate[j]
    K.fill(c.dlogits, 0.0, n)
    for j in gate.selected:
        c.dlogits[j] = gate.weights[j] * (dgate[j] - ssum)
    K.linear_backward(c.x, router.w.data, d, n, c.dlogits,
                      grads.router_w, grads.router_b, dx)

    # MLP path, then layer norm back to the input
    K.fill(c.da1, 0.0, h)
    K.linear_backward(c.a1, block.w2.data, h, d, gout,
                      grads.w2 if backbone_trainable else None,
                      grads.b2 if backbone_trainable else None, c.da1)
    K.gelu_backward(c.h1, c.da1, h, c.dh1)
    K.fill(c.du, 0.0, d)
    K.linear_backward(c.u, block.w1.data, d, h, c.dh1,
                      grads.w1 if backbone_trainable else None,
                      grads.b1 if backbone_trainable else None, c.du)
    K.layer_norm_backward(c.x, block.ln_gamma, c.stats, c.du,
                          grads.ln_gamma if backbone_trainable else None,
                          grads.ln_beta if backbone_trainable else None, dx, d)
