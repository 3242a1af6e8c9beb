"""Task-incremental training of the MoE encoder.

Model: input projection (d_in -> d_model), a stack of residual MoE
blocks, then L2 normalization. Classification is similarity-based: the
feature is compared against a fixed table of unit-norm class embeddings
(one per global class, never trained) and the per-task cross-entropy is
taken over the task's classes only, with temperature tau and label
smoothing.

Per task t: new routers are created (one per block), selection counters
reset, and `iterations` minibatches are trained with AdamW. The merge
hook runs after every iteration (firing on its cycle); after the task,
each block freezes its top-k selected experts, and a task autoencoder is
trained for later task-id inference. The shared backbone (projection, LN,
MLP) only trains during the first `backbone_warmup_tasks` tasks; after
that only experts and the current router learn. Frozen experts and past
routers are excluded from the optimizer entirely, so no decay or moment
dust can mutate them: they stay byte-identical forever.

Reproducibility: separate rng streams (model-init=2, batching=3,
autoencoders=4; the suite uses 1) derived from one seed via xoshiro
jumps. Checkpoints capture parameters, optimizer state, counters, frozen
flags, autoencoders, rng stream states and the run history, so a resumed
run reproduces the uninterrupted run's remaining outputs byte for byte.
"""

from __future__ import annotations

import logging
import math
from array import array
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import backend as be
from . import evaluator, serialize
from .errors import (
    ArgumentError,
    CheckpointChecksumError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DataError,
    NumericError,
)
from .merge_policy import MergeConfig, MergeEvent, freeze_topk, maybe_merge, reset_counts
from .moe_core import BlockCache, BlockGrads, Expert, MoEBlock, Router, block_backward, block_forward
from .numerics import Matrix, OptimizerState, Rng, adamw_step, zeros
from .task_inference import TaskAutoencoder, infer_task, train_autoencoder
from .task_suite import SuiteConfig, TaskSequence, TaskSpec, sample_batch

logger = logging.getLogger("moeforge")

CHECKPOINT_FORMAT_VERSION = 1
RUN_RESULT_FORMAT_VERSION = 1

# rng stream ids (stream 1 belongs to suite generation)
STREAM_MODEL_INIT = 2
STREAM_BATCHING = 3
STREAM_AUTOENCODERS = 4


@dataclass
class TrainConfig:
    # architecture
    d_model: int = 32
    hidden: int = 64
    blocks: int = 2
    expert_rank: int = 4
    n_experts: int = 8
    topk: int = 2
    tau: float = 0.07
    ln_eps: float = 1e-5
    # optimization
    iterations: int = 400
    batch: int = 16
    lr: float = 2e-3
    label_smoothing: float = 0.1
    backbone_warmup_tasks: int = 1
    # merge policy
    merge_cycle: int = 25
    merge_enabled: bool = True
    # task-id autoencoders
    ae_bottleneck: int = 8
    ae_epochs: int = 40
    ae_lr: float = 1e-2
    ae_batch: int = 32
    seed: int = 0

    @classmethod
    def paper_scale(cls) -> "TrainConfig":
        """Full-scale settings: 55 experts, merge every 100 iterations,
        batches of 64, 1000 iterations per task."""
        return cls(n_experts=55, merge_cycle=100, batch=64, iterations=1000)

    def merge_config(self) -> MergeConfig:
        # k_freeze always mirrors the routing top-k
        return MergeConfig(cycle=self.merge_cycle, k_freeze=self.topk,
                           enabled=self.merge_enabled)

    def validate(self) -> "TrainConfig":
        if min(self.d_model, self.hidden, self.blocks, self.expert_rank,
               self.n_experts) < 1:
            raise ConfigError("architecture dimensions must be >= 1")
        if not 1 <= self.topk <= self.n_experts:
            raise ConfigError(
                f"topk must lie in [1, n_experts], got {self.topk} vs "
                f"{self.n_experts} experts"
            )
        if self.iterations < 0 or self.batch < 1:
            raise ConfigError("iterations must be >= 0 and batch >= 1")
        if self.lr <= 0 or self.tau <= 0:
            raise ConfigError("lr and tau must be > 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(
                f"label_smoothing must lie in [0, 1), got {self.label_smoothing}"
            )
        if self.backbone_warmup_tasks < 0:
            raise ConfigError("backbone_warmup_tasks must be >= 0")
        self.merge_config().validate()
        if self.ae_bottleneck < 1 or self.ae_epochs < 0 or self.ae_batch < 1:
            raise ConfigError("autoencoder settings out of range")
        return self


@dataclass
class RngStreams:
    model_init: Rng
    batching: Rng
    autoencoders: Rng

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        return cls(
            model_init=Rng(seed, stream=STREAM_MODEL_INIT),
            batching=Rng(seed, stream=STREAM_BATCHING),
            autoencoders=Rng(seed, stream=STREAM_AUTOENCODERS),
        )

    def states(self) -> dict:
        return {
            "model_init": list(self.model_init.get_state()),
            "batching": list(self.batching.get_state()),
            "autoencoders": list(self.autoencoders.get_state()),
        }

    def restore(self, states: dict) -> None:
        self.model_init.set_state(states["model_init"])
        self.batching.set_state(states["batching"])
        self.autoencoders.set_state(states["autoencoders"])


class Model:
    """MoE encoder plus the fixed class-embedding table."""

    def __init__(self, d_in: int, d_model: int, topk: int, tau: float,
                 class_embeddings: Matrix, proj_w: Matrix, proj_b: array,
                 blocks: list[MoEBlock]):
        self.d_in = d_in
        self.d_model = d_model
        self.topk = topk
        self.tau = tau
        self.class_embeddings = class_embeddings
        self.proj_w = proj_w
        self.proj_b = proj_b
        self.blocks = blocks
        self.trained_tasks: list[int] = []

    @classmethod
    def create(cls, d_in: int, n_classes: int, cfg: TrainConfig, rng: Rng) -> "Model":
        """Draw order pinned: class embeddings (row by row, normalized),
        projection, then blocks in ascending order."""
        cfg.validate()
        if n_classes < 1:
            raise ConfigError(f"n_classes must be >= 1, got {n_classes}")
        K = be.kernels
        emb = Matrix(n_classes, cfg.d_model)
        row = zeros(cfg.d_model)
        for c in range(n_classes):
            while True:
                rng.fill_gauss(row)
                if K.l2_normalize(row, cfg.d_model, row) > 0.0:
                    break
            emb.set_row(c, row)
        proj_w = Matrix(d_in, cfg.d_model)
        rng.fill_gauss(proj_w.data, 1.0 / math.sqrt(d_in))
        blocks = [
            MoEBlock.create(cfg.d_model, cfg.hidden, cfg.n_experts,
                            cfg.expert_rank, rng, ln_eps=cfg.ln_eps)
            for _ in range(cfg.blocks)
        ]
        return cls(d_in=d_in, d_model=cfg.d_model, topk=cfg.topk, tau=cfg.tau,
                   class_embeddings=emb, proj_w=proj_w,
                   proj_b=zeros(cfg.d_model), blocks=blocks)

    def has_router(self, task_id) -> bool:
        return bool(self.blocks) and task_id in self.blocks[0].routers


class EncodeCache:
    """Reusable forward/backward buffers for one sample slot."""

    __slots__ = ("x_in", "h0", "blocks", "f", "norm", "dy", "ga", "gb")

    def __init__(self, model: Model, k: int):
        self.x_in = zeros(model.d_in)
        self.h0 = zeros(model.d_model)
        self.blocks = [BlockCache(blk, k) for blk in model.blocks]
        self.f = zeros(model.d_model)
        self.norm = 0.0
        self.dy = zeros(model.d_model)
        self.ga = zeros(model.d_model)
        self.gb = zeros(model.d_model)


class GradSet:
    """Gradient buffers for the whole model (current task's router slot)."""

    def __init__(self, model: Model):
        self.proj_w = zeros(model.d_in * model.d_model)
        self.proj_b = zeros(model.d_model)
        self.blocks = [BlockGrads.for_block(blk) for blk in model.blocks]

    def zero(self) -> None:
        K = be.kernels
        K.fill(self.proj_w, 0.0, len(self.proj_w))
        K.fill(self.proj_b, 0.0, len(self.proj_b))
        for bg in self.blocks:
            bg.zero()


class AdamW:
    """Per-buffer AdamW with lazily created states. Frozen/untracked
    parameters simply never get a state, so nothing can mutate them."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self._states: dict[int, OptimizerState] = {}

    def state_for(self, buf, create: bool = True) -> Optional[OptimizerState]:
        key = id(buf)
        st = self._states.get(key)
        if st is None and create:
            st = OptimizerState.for_size(len(buf), lr=self.lr, beta1=self.beta1,
                                         beta2=self.beta2, eps=self.eps,
                                         weight_decay=self.weight_decay)
            self._states[key] = st
        return st

    def step(self, buf, grad) -> None:
        adamw_step(buf, grad, self.state_for(buf))

    def reset(self, buf) -> None:
        st = self._states.get(id(buf))
        if st is not None:
            st.reset_moments()

    def adopt(self, buf, state: OptimizerState) -> None:
        self._states[id(buf)] = state


# --- forward / backward --------------------------------------------------


def encode(model: Model, x, task_id, *, train_mode: bool = False,
           cache: Optional[EncodeCache] = None) -> array:
    """Project, run all blocks (task_id=None = adapter-free), normalize.
    Returns the cache-owned unit feature vector."""
    K = be.kernels
    x = x if isinstance(x, array) else array("d", x)
    if len(x) != model.d_in:
        raise ArgumentError(f"encode expects {model.d_in} features, got {len(x)}")
    if cache is None:
        cache = EncodeCache(model, model.topk)
    c = cache
    K.copy(x, c.x_in, model.d_in)
    K.linear_forward(c.x_in, model.proj_w.data, model.proj_b,
                     model.d_in, model.d_model, c.h0)
    cur = c.h0
    for l, blk in enumerate(model.blocks):
        cur, _ = block_forward(blk, cur, task_id, model.topk,
                               train_mode=train_mode, cache=c.blocks[l])
    norm = K.l2_normalize(cur, model.d_model, c.f)
    if norm == 0.0:
        raise NumericError("encode produced a zero feature vector")
    c.norm = norm
    return c.f


def encode_backward(model: Model, cache: EncodeCache, task_id, dfeat,
                    grads: GradSet, *, backbone_trainable: bool = True) -> None:
    """Backprop one sample given dL/dfeature; accumulates into grads."""
    K = be.kernels
    c = cache
    d = model.d_model
    s = K.dot(c.f, dfeat, d)
    for i in range(d):
        c.dy[i] = (dfeat[i] - c.f[i] * s) / c.norm
    g_out = c.dy
    for l in range(len(model.blocks) - 1, -1, -1):
        g_in = c.ga if g_out is not c.ga else c.gb
        K.fill(g_in, 0.0, d)
        block_backward(model.blocks[l], c.blocks[l], task_id, g_out,
                       grads.blocks[l], g_in, backbone_trainable=backbone_trainable)
        g_out = g_in
    if backbone_trainable:
        K.linear_backward(c.x_in, model.proj_w.data, model.d_in, d, g_out,
                          grads.proj_w, grads.proj_b, None)


def similarity_loss(features: Sequence, labels: Sequence[int],
                    class_ids: Sequence[int], model: Model,
                    smoothing: float) -> tuple[float, list[array]]:
    """Smoothed cross-entropy over the task's classes with cosine/tau
    logits. Returns (mean loss, per-sample feature gradients)."""
    if not features or len(features) != len(labels):
        raise ArgumentError("features and labels must be non-empty and aligned")
    if not 0.0 <= smoothing < 1.0:
        raise ArgumentError(f"smoothing must lie in [0, 1), got {smoothing}")
    m = len(class_ids)
    if m < 1:
        raise ArgumentError("class_ids is empty")
    index_of = {c: i for i, c in enumerate(class_ids)}
    K = be.kernels
    d = model.d_model
    embs = [model.class_embeddings.row(c) for c in class_ids]
    inv_tau = 1.0 / model.tau
    b_count = len(features)
    q_true = 1.0 if m == 1 else 1.0 - smoothing
    q_other = 0.0 if m == 1 else smoothing / (m - 1)

    logits = zeros(m)
    probs = zeros(m)
    loss_sum = 0.0
    dfeats = []
    for b in range(b_count):
        f = features[b]
        label = labels[b]
        if label not in index_of:
            raise DataError(f"label {label} is not in the task's classes {list(class_ids)}")
        true_idx = index_of[label]
        for ci in range(m):
            logits[ci] = K.dot(f, embs[ci], d) * inv_tau
        K.softmax(logits, m, probs)
        loss_b = 0.0
        for ci in range(m):
            q = q_true if ci == true_idx else q_other
            if q != 0.0:
                loss_b -= q * math.log(probs[ci])
        loss_sum += loss_b
        df = zeros(d)
        for ci in range(m):
            q = q_true if ci == true_idx else q_other
            K.add_scaled(df, embs[ci], ((probs[ci] - q) / b_count) * inv_tau, d)
        dfeats.append(df)
    loss = loss_sum / b_count
    if not math.isfinite(loss):
        raise NumericError(f"similarity loss is not finite ({loss!r})")
    return loss, dfeats


def apply_gradients(model: Model, grads: GradSet, optimizer: AdamW, task_id,
                    *, backbone_trainable: bool) -> None:
    """One optimizer step over the trainable set: backbone during warmup,
    non-frozen experts, and the current task's routers. Class embeddings,
    frozen experts and past routers are never stepped."""
    if backbone_trainable:
        optimizer.step(model.proj_w.data, grads.proj_w)
        optimizer.step(model.proj_b, grads.proj_b)
    for blk, bg in zip(model.blocks, grads.blocks):
        if backbone_trainable:
            optimizer.step(blk.ln_gamma, bg.ln_gamma)
            optimizer.step(blk.ln_beta, bg.ln_beta)
            optimizer.step(blk.w1.data, bg.w1)
            optimizer.step(blk.b1, bg.b1)
            optimizer.step(blk.w2.data, bg.w2)
            optimizer.step(blk.b2, bg.b2)
        for j, ex in enumerate(blk.experts):
            if not ex.frozen:
                optimizer.step(ex.down.data, bg.experts[j][0])
                optimizer.step(ex.up.data, bg.experts[j][1])
        router = blk.routers[task_id]
        optimizer.step(router.w.data, bg.router_w)
        optimizer.step(router.b, bg.router_b)


# --- classification --------------------------------------------------------


def classify_sample(model: Model, x, task: TaskSpec, *, routing: str = "oracle",
                    autoencoders: Optional[Sequence[TaskAutoencoder]] = None) -> int:
    """Predict a global class id for one sample of `task`.

    oracle: route with the evaluated task's own router (adapter-free if it
    was never trained). inferred: autoencoder task-id inference; OOD and
    unknown ids fall back to the adapter-free path."""
    if routing == "oracle":
        tid = task.task_id if model.has_router(task.task_id) else None
    elif routing == "inferred":
        decision = infer_task(x, autoencoders)
        tid = decision.chosen if (decision.chosen is not None
                                  and model.has_router(decision.chosen)) else None
    else:
        raise ArgumentError(f"routing must be 'oracle' or 'inferred', got {routing!r}")
    f = encode(model, x, tid, train_mode=False)
    K = be.kernels
    d = model.d_model
    best_c = task.class_ids[0]
    best_v = -math.inf
    for c in task.class_ids:
        v = K.dot(f, model.class_embeddings.row(c), d)
        if v > best_v:
            best_v = v
            best_c = c
    return best_c


# --- task training -----------------------------------------------------


@dataclass
class TaskLog:
    task_id: int
    losses: list[float]
    merge_events: list[MergeEvent]
    newly_frozen: list[list[int]]      # per block
    counter_sums: list[int]            # per block, at task end
    counters: list[list[int]]          # per block full counts at task end
    autoencoder: TaskAutoencoder

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None


def train_task(model: Model, task: TaskSpec, cfg: TrainConfig,
               streams: RngStreams, optimizer: Optional[AdamW] = None,
               merge_cfg: Optional[MergeConfig] = None,
               merge_hook: Optional[Callable] = maybe_merge,
               event_sink: Optional[Callable[[str], None]] = None) -> TaskLog:
    """Train one task end to end: routers, counter reset, the minibatch
    loop with the merge hook, top-k freezing, and the task autoencoder."""
    cfg.validate()
    if optimizer is None:
        optimizer = AdamW(lr=cfg.lr)
    if merge_cfg is None:
        merge_cfg = cfg.merge_config()
    t = task.task_id
    emit = event_sink or (lambda line: None)

    for blk in model.blocks:
        blk.add_router(t, streams.model_init)
    for blk in model.blocks:
        reset_counts(blk)
    model.trained_tasks.append(t)
    backbone_trainable = len(model.trained_tasks) <= cfg.backbone_warmup_tasks
    emit(f"task\t{t}\tstart\tbackbone_trainable={backbone_trainable}")

    grads = GradSet(model)
    caches = [EncodeCache(model, cfg.topk) for _ in range(cfg.batch)]
    losses: list[float] = []
    merge_events: list[MergeEvent] = []

    for i in range(1, cfg.iterations + 1):
        batch = sample_batch(task, cfg.batch, streams.batching)
        grads.zero()
        feats = []
        for b, sample in enumerate(batch):
            feats.append(encode(model, sample.features, t, train_mode=True,
                                cache=caches[b]))
        loss, dfeats = similarity_loss(feats, [s.label for s in batch],
                                       task.class_ids, model, cfg.label_smoothing)
        for b in range(cfg.batch):
            encode_backward(model, caches[b], t, dfeats[b], grads,
                            backbone_trainable=backbone_trainable)
        apply_gradients(model, grads, optimizer, t,
                        backbone_trainable=backbone_trainable)
        if merge_hook is not None:
            events = merge_hook(i, merge_cfg, model.blocks, optimizer=optimizer,
                                task_id=t)
            for ev in events:
                emit(f"merge\ttask={ev.task_id}\titeration={ev.iteration}"
                     f"\tblock={ev.block_index}\tsources={ev.source_a},"
                     f"{ev.source_b}\ttarget={ev.target}")
            merge_events.extend(events)
        losses.append(loss)
        if i % 100 == 0 or i == cfg.iterations:
            logger.info("task %d iteration %d/%d loss %.4f",
                        t, i, cfg.iterations, loss)

    newly_frozen = []
    for bi, blk in enumerate(model.blocks):
        newly = freeze_topk(blk, merge_cfg.k_freeze)
        newly_frozen.append(newly)
        emit(f"freeze\ttask={t}\tblock={bi}\tnew={newly}")

    ae = train_autoencoder(task.train_x, t, cfg.ae_bottleneck,
                           streams.autoencoders, epochs=cfg.ae_epochs,
                           lr=cfg.ae_lr, batch_size=cfg.ae_batch)
    emit(f"autoencoder\ttask={t}\tthreshold={ae.threshold!r}")
    final = repr(losses[-1]) if losses else "none"
    emit(f"task\t{t}\tend\tfinal_loss={final}")
    return TaskLog(
        task_id=t, losses=losses, merge_events=merge_events,
        newly_frozen=newly_frozen,
        counter_sums=[blk.counter.total() for blk in model.blocks],
        counters=[list(blk.counter.counts) for blk in model.blocks],
        autoencoder=ae,
    )


# --- run state ---------------------------------------------------------


@dataclass
class RunResult:
    task_names: list[str]
    completed_tasks: int = 0
    matrix: list[list[float]] = field(default_factory=list)
    matrix_oracle: list[list[float]] = field(default_factory=list)
    merge_events: list[dict] = field(default_factory=list)
    freeze_history: list[list[list[int]]] = field(default_factory=list)
    counter_history: list[list[list[int]]] = field(default_factory=list)
    losses: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    suite_config: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "format_version": RUN_RESULT_FORMAT_VERSION,
            "task_names": self.task_names,
            "completed_tasks": self.completed_tasks,
            "matrix": self.matrix,
            "matrix_oracle": self.matrix_oracle,
            "merge_events": self.merge_events,
            "freeze_history": self.freeze_history,
            "counter_history": self.counter_history,
            "losses": self.losses,
            "config": self.config,
            "suite_config": self.suite_config,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RunResult":
        if d.get("format_version") != RUN_RESULT_FORMAT_VERSION:
            raise DataError(
                f"unsupported run result version {d.get('format_version')!r}"
            )
        return cls(
            task_names=list(d["task_names"]),
            completed_tasks=int(d["completed_tasks"]),
            matrix=[list(r) for r in d["matrix"]],
            matrix_oracle=[list(r) for r in d["matrix_oracle"]],
            merge_events=[dict(e) for e in d["merge_events"]],
            freeze_history=[[list(b) for b in t] for t in d["freeze_history"]],
            counter_history=[[list(b) for b in t] for t in d["counter_history"]],
            losses={k: list(v) for k, v in d["losses"].items()},
            config=dict(d["config"]),
            suite_config=dict(d["suite_config"]),
        )


class ContinualLearner:
    """Owns the model, optimizer, rng streams, autoencoders and artifacts
    of one sequential run."""

    def __init__(self, suite: TaskSequence, cfg: TrainConfig,
                 out_dir=None, merge_hook: Optional[Callable] = maybe_merge):
        cfg.validate()
        self.suite = suite
        self.cfg = cfg
        self.merge_cfg = cfg.merge_config()
        self.merge_hook = merge_hook
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.streams = RngStreams.from_seed(cfg.seed)
        self.model = Model.create(suite.config.d_in, suite.config.class_pool,
                                  cfg, self.streams.model_init)
        self.optimizer = AdamW(lr=cfg.lr)
        self.autoencoders: list[TaskAutoencoder] = []
        self.log_lines: list[str] = []
        self.result = RunResult(
            task_names=[t.name for t in suite.tasks],
            config=asdict(cfg),
            suite_config=asdict(suite.config),
        )

    # --- bookkeeping ---------------------------------------------------
    def emit(self, line: str) -> None:
        self.log_lines.append(line)

    def flush_artifacts(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        serialize.dump_json(self.result.to_json_dict(),
                            self.out_dir / "run_result.json")
        (self.out_dir / "run.log").write_text(
            "\n".join(self.log_lines) + ("\n" if self.log_lines else ""),
            encoding="utf-8",
        )
        evaluator.export_report(self.result.to_json_dict(),
                                self.out_dir / "reports")

    def checkpoint_dir(self, task_id) -> Optional[Path]:
        if self.out_dir is None:
            return None
        return self.out_dir / "checkpoints" / f"task{task_id}"

    # --- evaluation -----------------------------------------------------
    def evaluate_rows(self) -> tuple[list[float], list[float]]:
        inferred = []
        oracle = []
        for task in self.suite.tasks:
            oracle.append(evaluator.accuracy(self.model, task, routing="oracle"))
            inferred.append(evaluator.accuracy(self.model, task,
                                               routing="inferred",
                                               autoencoders=self.autoencoders))
        return inferred, oracle

    # --- driving --------------------------------------------------------
    def run_one_task(self, task: TaskSpec) -> TaskLog:
        log = train_task(self.model, task, self.cfg, self.streams,
                         optimizer=self.optimizer, merge_cfg=self.merge_cfg,
                         merge_hook=self.merge_hook, event_sink=self.emit)
        self.autoencoders.append(log.autoencoder)
        self.result.merge_events.extend(asdict(ev) for ev in log.merge_events)
        self.result.freeze_history.append(log.newly_frozen)
        self.result.counter_history.append(log.counters)
        self.result.losses[task.name] = log.losses

        inferred, oracle = self.evaluate_rows()
        self.result.matrix.append(inferred)
        self.result.matrix_oracle.append(oracle)
        self.result.completed_tasks += 1
        self.emit(f"eval\ttask={task.task_id}\tinferred={inferred!r}")
        self.emit(f"eval\ttask={task.task_id}\toracle={oracle!r}")

        ckpt = self.checkpoint_dir(task.task_id)
        if ckpt is not None:
            save_checkpoint(self, ckpt)
            self.emit(f"checkpoint\ttask={task.task_id}\tpath=checkpoints/task{task.task_id}")
        return log

    def run(self) -> RunResult:
        start = self.result.completed_tasks
        if start == 0:
            self.emit(f"run\tstart\ttasks={len(self.suite.tasks)}"
                      f"\tseed={self.cfg.seed}\tmerge_enabled={self.merge_cfg.enabled}")
        else:
            self.emit(f"run\tresume\tfrom_task={start}")
        try:
            for task in self.suite.tasks[start:]:
                self.run_one_task(task)
                self.flush_artifacts()
        except Exception:
            self.flush_artifacts()
            raise
        self.emit(f"run\tend\tcompleted={self.result.completed_tasks}")
        self.flush_artifacts()
        return self.result

    @classmethod
    def from_checkpoint(cls, suite: TaskSequence, path, out_dir=None,
                        merge_hook: Optional[Callable] = maybe_merge) -> "ContinualLearner":
        state = load_checkpoint(path)
        learner = cls.__new__(cls)
        learner.suite = suite
        learner.cfg = state.cfg
        learner.merge_cfg = state.cfg.merge_config()
        learner.merge_hook = merge_hook
        learner.out_dir = Path(out_dir) if out_dir is not None else None
        learner.streams = state.streams
        learner.model = state.model
        learner.optimizer = state.optimizer
        learner.autoencoders = state.autoencoders
        learner.log_lines = []
        learner.result = RunResult.from_json_dict(state.run_state)
        return learner


def run_sequence(suite: TaskSequence, cfg: TrainConfig, out_dir=None,
                 merge_hook: Optional[Callable] = maybe_merge,
                 resume_from=None) -> RunResult:
    """Train the full task sequence (or the remainder, when resuming) and
    return the accuracy matrices plus history. Partial results are flushed
    to out_dir after every task and on failure."""
    if resume_from is not None:
        learner = ContinualLearner.from_checkpoint(suite, resume_from,
                                                   out_dir=out_dir,
                                                   merge_hook=merge_hook)
    else:
        learner = ContinualLearner(suite, cfg, out_dir=out_dir,
                                   merge_hook=merge_hook)
    return learner.run()


# --- checkpointing -----------------------------------------------------


def _parameter_entries(model: Model, autoencoders) -> list[tuple[str, int, int, array]]:
    """Deterministic (name, rows, cols, buffer) listing of all tensors."""
    entries: list[tuple[str, int, int, array]] = []

    def add(name, obj):
        if isinstance(obj, Matrix):
            entries.append((name, obj.rows, obj.cols, obj.data))
        else:
            entries.append((name, 1, len(obj), obj))

    add("class_embeddings", model.class_embeddings)
    add("proj.w", model.proj_w)
    add("proj.b", model.proj_b)
    for l, blk in enumerate(model.blocks):
        add(f"block{l}.ln_gamma", blk.ln_gamma)
        add(f"block{l}.ln_beta", blk.ln_beta)
        add(f"block{l}.w1", blk.w1)
        add(f"block{l}.b1", blk.b1)
        add(f"block{l}.w2", blk.w2)
        add(f"block{l}.b2", blk.b2)
        for e, ex in enumerate(blk.experts):
            add(f"block{l}.expert{e}.down", ex.down)
            add(f"block{l}.expert{e}.up", ex.up)
        for t in sorted(blk.routers):
            add(f"block{l}.router{t}.w", blk.routers[t].w)
            add(f"block{l}.router{t}.b", blk.routers[t].b)
    for ae in sorted(autoencoders, key=lambda a: a.task_id):
        add(f"ae.task{ae.task_id}.enc", ae.enc)
        add(f"ae.task{ae.task_id}.dec", ae.dec)
    return entries


def save_checkpoint(learner: ContinualLearner, path) -> None:
    """Directory checkpoint: manifest.json (shapes, offsets, CRC32s, rng
    states, run history) + tensors.bin (concatenated little-endian f64)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    model = learner.model
    entries = _parameter_entries(model, learner.autoencoders)

    # optimizer moments ride along as ordinary tensors
    opt_steps = {}
    opt_entries = []
    for name, _r, _c, buf in entries:
        st = learner.optimizer.state_for(buf, create=False)
        if st is not None:
            opt_entries.append((f"opt.{name}.m", 1, len(st.m), st.m))
            opt_entries.append((f"opt.{name}.v", 1, len(st.v), st.v))
            opt_steps[name] = st.step
    entries = entries + opt_entries

    blob_parts = []
    tensor_index = []
    offset = 0
    for name, rows, cols, buf in entries:
        payload = serialize.tensor_payload(buf)
        tensor_index.append({
            "name": name, "rows": rows, "cols": cols,
            "offset": offset, "crc32": serialize.crc32(payload),
        })
        blob_parts.append(payload)
        offset += len(payload)

    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "completed_tasks": learner.result.completed_tasks,
        "trained_tasks": list(model.trained_tasks),
        "d_in": model.d_in,
        "config": asdict(learner.cfg),
        "suite_config": asdict(learner.suite.config),
        "frozen": [[ex.frozen for ex in blk.experts] for blk in model.blocks],
        "counters": [list(blk.counter.counts) for blk in model.blocks],
        "ae_thresholds": {str(ae.task_id): ae.threshold
                          for ae in learner.autoencoders},
        "rng_streams": learner.streams.states(),
        "optimizer": {
            "lr": learner.optimizer.lr,
            "beta1": learner.optimizer.beta1,
            "beta2": learner.optimizer.beta2,
            "eps": learner.optimizer.eps,
            "weight_decay": learner.optimizer.weight_decay,
            "steps": opt_steps,
        },
        "run_state": learner.result.to_json_dict(),
        "tensors": tensor_index,
        "blob": "tensors.bin",
    }
    (root / "tensors.bin").write_bytes(b"".join(blob_parts))
    serialize.dump_json(manifest, root / "manifest.json")


@dataclass
class CheckpointState:
    model: Model
    optimizer: AdamW
    autoencoders: list[TaskAutoencoder]
    streams: RngStreams
    cfg: TrainConfig
    suite_config: SuiteConfig
    completed_tasks: int
    run_state: dict
    tensors: dict


def _read_blob_tensors(manifest, blob: bytes) -> dict[str, tuple[int, int, array]]:
    tensors = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        rows, cols = int(entry["rows"]), int(entry["cols"])
        offset = int(entry["offset"])
        size = rows * cols * 8
        payload = blob[offset : offset + size]
        if len(payload) != size:
            raise CheckpointTruncatedError(
                f"tensor {name} needs {size} bytes at offset {offset}, "
                f"blob has {len(blob)}"
            )
        if serialize.crc32(payload) != int(entry["crc32"]):
            raise CheckpointChecksumError(f"checksum mismatch for tensor {name}")
        tensors[name] = (rows, cols, serialize.payload_to_array(payload))
    return tensors


def load_checkpoint(path) -> CheckpointState:
    """Reconstruct the full learner state. Raises CheckpointVersionError /
    CheckpointTruncatedError / CheckpointChecksumError as appropriate."""
    root = Path(path)
    manifest = serialize.load_json(root / "manifest.json")
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {version!r} unsupported, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    blob_path = root / manifest.get("blob", "tensors.bin")
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise CheckpointTruncatedError(f"missing tensor blob {blob_path}") from None
    tensors = _read_blob_tensors(manifest, blob)

    def matrix(name) -> Matrix:
        rows, cols, data = tensors[name]
        return Matrix(rows, cols, data)

    def vector(name) -> array:
        _r, _c, data = tensors[name]
        return data

    cfg = TrainConfig(**manifest["config"])
    suite_cfg = SuiteConfig(**manifest["suite_config"])
    d_in = int(manifest["d_in"])

    blocks = []
    frozen = manifest["frozen"]
    counters = manifest["counters"]
    trained_tasks = [int(t) for t in manifest["trained_tasks"]]
    for l in range(cfg.blocks):
        experts = []
        for e in range(cfg.n_experts):
            experts.append(Expert(
                down=matrix(f"block{l}.expert{e}.down"),
                up=matrix(f"block{l}.expert{e}.up"),
                frozen=bool(frozen[l][e]),
            ))
        blk = MoEBlock(
            d=cfg.d_model, hidden=cfg.hidden, experts=experts,
            ln_gamma=vector(f"block{l}.ln_gamma"),
            ln_beta=vector(f"block{l}.ln_beta"),
            ln_eps=cfg.ln_eps,
            w1=matrix(f"block{l}.w1"), b1=vector(f"block{l}.b1"),
            w2=matrix(f"block{l}.w2"), b2=vector(f"block{l}.b2"),
        )
        blk.counter.counts = [int(c) for c in counters[l]]
        for t in trained_tasks:
            blk.routers[t] = Router(task_id=t, w=matrix(f"block{l}.router{t}.w"),
                                    b=vector(f"block{l}.router{t}.b"))
        blocks.append(blk)

    model = Model(d_in=d_in, d_model=cfg.d_model, topk=cfg.topk, tau=cfg.tau,
                  class_embeddings=matrix("class_embeddings"),
                  proj_w=matrix("proj.w"), proj_b=vector("proj.b"),
                  blocks=blocks)
    model.trained_tasks = list(trained_tasks)

    aes = []
    thresholds = manifest["ae_thresholds"]
    for t in trained_tasks:
        aes.append(TaskAutoencoder(
            task_id=t, enc=matrix(f"ae.task{t}.enc"), dec=matrix(f"ae.task{t}.dec"),
            threshold=thresholds[str(t)], trained=True,
        ))

    opt_cfg = manifest["optimizer"]
    optimizer = AdamW(lr=opt_cfg["lr"], beta1=opt_cfg["beta1"],
                      beta2=opt_cfg["beta2"], eps=opt_cfg["eps"],
                      weight_decay=opt_cfg["weight_decay"])
    name_to_buf = {name: buf for name, _r, _c, buf
                   in _parameter_entries(model, aes)}
    for pname, step in opt_cfg["steps"].items():
        st = OptimizerState(
            m=tensors[f"opt.{pname}.m"][2], v=tensors[f"opt.{pname}.v"][2],
            step=int(step), lr=optimizer.lr, beta1=optimizer.beta1,
            beta2=optimizer.beta2, eps=optimizer.eps,
            weight_decay=optimizer.weight_decay,
        )
        optimizer.adopt(name_to_buf[pname], st)

    streams = RngStreams.from_seed(cfg.seed)
    streams.restore(manifest["rng_streams"])

    return CheckpointState(
        model=model, optimizer=optimizer, autoencoders=aes, streams=streams,
        cfg=cfg, suite_config=suite_cfg,
        completed_tasks=int(manifest["completed_tasks"]),
        run_state=manifest["run_state"], tensors=tensors,
    )


def read_tensor_bytes(path, name: str) -> bytes:
    """Raw payload bytes of one named tensor in a checkpoint (for
    byte-identity audits across checkpoints)."""
    root = Path(path)
    manifest = serialize.load_json(root / "manifest.json")
    for entry in manifest["tensors"]:
        if entry["name"] == name:
            blob = (root / manifest.get("blob", "tensors.bin")).read_bytes()
            size = int(entry["rows"]) * int(entry["cols"]) * 8
            off = int(entry["offset"])
            if off + size > len(blob):
                raise CheckpointTruncatedError(f"tensor {name} exceeds blob size")
            return blob[off : off + size]
    raise DataError(f"tensor {name} not present in checkpoint {path}")
