"""Usage-driven expert merging and freezing.

Every `cycle` training iterations (1-based, fires when i % cycle == 0),
each block independently:

1. picks the two most-selected experts t1, t2 (over ALL experts, frozen
   included; ties break toward the lower index),
2. picks the least-selected expert b1 among the non-frozen experts with
   t1 and t2 excluded (ties toward the lower index),
3. overwrites b1's parameters with the elementwise average of t1 and t2,
   and resets b1's optimizer state (stale moments describe a parameter
   point that no longer exists).

If no valid target exists (everything else frozen, or fewer than three
experts) the block is skipped for that cycle. Selection counts are never
modified by a merge.

After a task finishes, the k most-selected experts of each block are
frozen. Freezing is cumulative and permanent: a frozen expert is never
trained, never merged over, and stays byte-identical forever.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .errors import ArgumentError, ConfigError, PolicyError
from .moe_core import MoEBlock


@dataclass
class MergeConfig:
    cycle: int = 25
    k_freeze: int = 2
    enabled: bool = True

    def validate(self) -> "MergeConfig":
        if self.cycle < 1:
            raise ConfigError(f"merge cycle must be >= 1, got {self.cycle}")
        if self.k_freeze < 1:
            raise ConfigError(f"k_freeze must be >= 1, got {self.k_freeze}")
        return self


@dataclass
class MergeEvent:
    task_id: Optional[int]
    iteration: int
    block_index: int
    source_a: int
    source_b: int
    target: int


def reset_counts(block: MoEBlock) -> None:
    """Task-boundary counter reset (exactly once per block per task)."""
    block.counter.reset()


def select_merge_triplet(counts: Sequence[int], frozen: Sequence[bool]):
    """Returns (t1, t2, b1) or None when no valid target exists."""
    n = len(counts)
    if len(frozen) != n:
        raise ArgumentError(f"counts ({n}) and frozen ({len(frozen)}) disagree")
    if n < 3:
        return None
    order = sorted(range(n), key=lambda i: (-counts[i], i))
    t1, t2 = order[0], order[1]
    candidates = [i for i in range(n) if not frozen[i] and i != t1 and i != t2]
    if not candidates:
        return None
    b1 = min(candidates, key=lambda i: (counts[i], i))
    return t1, t2, b1


def merge_step(block: MoEBlock, t1: int, t2: int, b1: int, optimizer=None) -> None:
    """Overwrite expert b1 with the parameter average of t1 and t2."""
    n = block.n_experts
    for idx in (t1, t2, b1):
        if not 0 <= idx < n:
            raise ArgumentError(f"expert index {idx} outside [0, {n})")
    if len({t1, t2, b1}) != 3:
        raise ArgumentError(f"merge indices must be distinct, got ({t1}, {t2}, {b1})")
    target = block.experts[b1]
    if target.frozen:
        raise PolicyError(f"expert {b1} is frozen and cannot be a merge target")
    ea, eb = block.experts[t1], block.experts[t2]
    for src_a, src_b, dst in ((ea.down.data, eb.down.data, target.down.data),
                              (ea.up.data, eb.up.data, target.up.data)):
        for i in range(len(dst)):
            dst[i] = (src_a[i] + src_b[i]) / 2.0
    if optimizer is not None:
        optimizer.reset(target.down.data)
        optimizer.reset(target.up.data)


def maybe_merge(iteration: int, cfg: MergeConfig, blocks: Sequence[MoEBlock],
                optimizer=None, task_id: Optional[int] = None) -> list[MergeEvent]:
    """Run the merge policy at a training iteration (1-based). Returns the
    events applied; empty when disabled, off-cycle, or no block had a
    valid triplet."""
    cfg.validate()
    if iteration < 1:
        raise ArgumentError(f"iteration is 1-based, got {iteration}")
    if not cfg.enabled or iteration % cfg.cycle != 0:
        return []
    events = []
    for bi, block in enumerate(blocks):
        trip = select_merge_triplet(block.counter.counts,
                                    [e.frozen for e in block.experts])
        if trip is None:
            continue
        t1, t2, b1 = trip
        merge_step(block, t1, t2, b1, optimizer=optimizer)
        events.append(MergeEvent(task_id=task_id, iteration=iteration,
                                 block_index=bi, source_a=t1, source_b=t2,
                                 target=b1))
    return events


def freeze_topk(block: MoEBlock, k: int) -> list[int]:
    """Freeze the k most-selected experts (ties toward the lower index).
    Already-frozen experts stay frozen; returns the newly frozen indices."""
    n = block.n_experts
    if not 1 <= k <= n:
        raise ArgumentError(f"freeze_topk: k={k} outside [1, {n}]")
    order = sorted(range(n), key=lambda i: (-block.counter.counts[i], i))[:k]
    newly = [i for i in order if not block.experts[i].frozen]
    for i in newly:
        block.experts[i].frozen = True
    return newly
