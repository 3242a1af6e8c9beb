"""Per-task autoencoders for task-id inference.

One pure-linear autoencoder (no biases) is trained per task on the raw
input features: enc (d_in x a) down to a bottleneck, dec (a x d_in) back.
At eval time a sample is assigned to the task whose autoencoder
reconstructs it with the lowest per-coordinate mean squared error (ties
toward the lower task id). If even the best loss exceeds the decision
threshold, the sample is declared out-of-distribution; the stored
threshold is the 95th percentile of the autoencoder's training
reconstruction losses (nearest-rank), computed once after training.

A loss exactly equal to the threshold counts as in-distribution.
"""

from __future__ import annotations

import math
from array import array
from dataclasses import dataclass
from typing import Optional, Sequence

from . import backend as be
from .errors import ArgumentError, ConfigError, DataError, StateError
from .numerics import Matrix, OptimizerState, Rng, adamw_step, zeros

DEFAULT_EPOCHS = 40
DEFAULT_LR = 1e-2
DEFAULT_BATCH = 32
THRESHOLD_PERCENTILE = 0.95


@dataclass
class TaskAutoencoder:
    task_id: int
    enc: Matrix                      # d_in x bottleneck
    dec: Matrix                      # bottleneck x d_in
    threshold: Optional[float] = None
    trained: bool = False

    @property
    def d_in(self) -> int:
        return self.enc.rows

    @property
    def bottleneck(self) -> int:
        return self.enc.cols


@dataclass
class TaskIdDecision:
    chosen: Optional[int]            # None marks out-of-distribution
    losses: list[tuple[int, float]]  # (task_id, loss) in evaluation order
    threshold: float

    @property
    def is_ood(self) -> bool:
        return self.chosen is None


def init_autoencoder(d_in: int, bottleneck: int, task_id: int, rng: Rng) -> TaskAutoencoder:
    if bottleneck < 1 or bottleneck >= d_in:
        raise ConfigError(
            f"bottleneck must lie in [1, d_in), got {bottleneck} for d_in={d_in}"
        )
    enc = Matrix(d_in, bottleneck)
    rng.fill_gauss(enc.data, 1.0 / math.sqrt(d_in))
    dec = Matrix(bottleneck, d_in)
    rng.fill_gauss(dec.data, 1.0 / math.sqrt(bottleneck))
    return TaskAutoencoder(task_id=task_id, enc=enc, dec=dec)


def batch_losses(ae: TaskAutoencoder, x: Matrix) -> array:
    """Per-sample reconstruction losses (mean squared error per coordinate)."""
    if x.cols != ae.d_in:
        raise ArgumentError(f"expected {ae.d_in} features, got {x.cols}")
    K = be.kernels
    n, d, a = x.rows, ae.d_in, ae.bottleneck
    z = zeros(n * a)
    r = zeros(n * d)
    K.matmul(x.data, ae.enc.data, n, d, a, z)
    K.matmul(z, ae.dec.data, n, a, d, r)
    out = zeros(n)
    K.rowwise_sq_error(r, x.data, n, d, out)
    for i in range(n):
        out[i] /= d
    return out


def reconstruction_loss(ae: TaskAutoencoder, x) -> float:
    """Single-sample mean squared reconstruction error per coordinate."""
    x = x if isinstance(x, array) else array("d", x)
    if len(x) != ae.d_in:
        raise ArgumentError(f"expected {ae.d_in} features, got {len(x)}")
    K = be.kernels
    z = zeros(ae.bottleneck)
    r = zeros(ae.d_in)
    K.vecmat(x, ae.enc.data, ae.d_in, ae.bottleneck, z)
    K.vecmat(z, ae.dec.data, ae.bottleneck, ae.d_in, r)
    acc = 0.0
    for i in range(ae.d_in):
        diff = r[i] - x[i]
        acc += diff * diff
    return acc / ae.d_in


def train_autoencoder(data: Matrix, task_id: int, bottleneck: int, rng: Rng,
                      epochs: int = DEFAULT_EPOCHS, lr: float = DEFAULT_LR,
                      batch_size: int = DEFAULT_BATCH) -> TaskAutoencoder:
    """Train on the task's raw inputs with AdamW (weight_decay=0).

    epochs=0 leaves parameters at their random init (the threshold is
    still computed, from the init's losses). Gradients use the batched
    objective mean_i mean_j (recon_ij - x_ij)^2.
    """
    if data.rows < 1:
        raise DataError("autoencoder training needs at least one sample")
    if epochs < 0:
        raise ArgumentError(f"epochs must be >= 0, got {epochs}")
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    ae = init_autoencoder(data.cols, bottleneck, task_id, rng)
    K = be.kernels
    n, d, a = data.rows, data.cols, bottleneck
    opt_enc = OptimizerState.for_size(d * a, lr=lr, weight_decay=0.0)
    opt_dec = OptimizerState.for_size(a * d, lr=lr, weight_decay=0.0)

    indices = list(range(n))
    for _epoch in range(epochs):
        rng.shuffle(indices)
        for start in range(0, n, batch_size):
            chunk = indices[start : start + batch_size]
            b = len(chunk)
            xb = zeros(b * d)
            for pos, row in enumerate(chunk):
                xb[pos * d : (pos + 1) * d] = data.data[row * d : (row + 1) * d]
            z = zeros(b * a)
            r = zeros(b * d)
            K.matmul(xb, ae.enc.data, b, d, a, z)
            K.matmul(z, ae.dec.data, b, a, d, r)
            g = zeros(b * d)
            scale = 2.0 / (b * d)
            for i in range(b * d):
                g[i] = (r[i] - xb[i]) * scale
            d_dec = zeros(a * d)
            K.matmul_at(z, g, b, a, d, d_dec)
            dz = zeros(b * a)
            K.matmul_bt(g, ae.dec.data, b, d, a, dz)
            d_enc = zeros(d * a)
            K.matmul_at(xb, dz, b, d, a, d_enc)
            adamw_step(ae.enc.data, d_enc, opt_enc)
            adamw_step(ae.dec.data, d_dec, opt_dec)

    losses = sorted(batch_losses(ae, data))
    rank = max(1, math.ceil(THRESHOLD_PERCENTILE * n))
    ae.threshold = losses[rank - 1]
    ae.trained = True
    return ae


def infer_task(x, autoencoders: Sequence[TaskAutoencoder],
               theta: Optional[float] = None) -> TaskIdDecision:
    """Pick the task whose autoencoder reconstructs x best; OOD when the
    best loss exceeds the threshold (explicit theta wins over the stored
    per-task threshold of the winning autoencoder)."""
    if not autoencoders:
        raise ArgumentError("infer_task needs at least one autoencoder")
    losses = []
    best = None
    for ae in autoencoders:
        if not ae.trained:
            raise StateError(f"autoencoder for task {ae.task_id} is untrained")
        loss = reconstruction_loss(ae, x)
        losses.append((ae.task_id, loss))
        if best is None or (loss, ae.task_id) < best[:2]:
            best = (loss, ae.task_id, ae)
    best_loss, best_id, best_ae = best
    if theta is not None:
        limit = theta
    else:
        if best_ae.threshold is None:
            raise StateError(f"autoencoder for task {best_id} has no threshold")
        limit = best_ae.threshold
    chosen = best_id if best_loss <= limit else None
    return TaskIdDecision(chosen=chosen, losses=losses, threshold=limit)
