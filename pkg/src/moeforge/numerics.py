"""Deterministic dense numerics: matrices, seeded randomness, AdamW, finite differences.

Everything is float64. Matrix products accumulate row-major, left to
right, so results are byte-reproducible across runs and across the
compiled/pure kernel backends. Every public op checks its output for
non-finite values and raises NumericError instead of propagating NaNs.
"""

from __future__ import annotations

import math
from array import array
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from . import backend as be
from .errors import ArgumentError, DimensionError, NumericError


def vec(values: Iterable[float]) -> array:
    return array("d", values)


def zeros(n: int) -> array:
    return array("d", bytes(8 * n))


def _require_finite(buf, what: str) -> None:
    for v in buf:
        if not math.isfinite(v):
            raise NumericError(f"{what} produced a non-finite value ({v!r})")


class Matrix:
    """Dense row-major float64 matrix backed by a flat array('d')."""

    __slots__ = ("rows", "cols", "data")

    def __init__(self, rows: int, cols: int, data=None):
        if rows < 1 or cols < 1:
            raise DimensionError(f"matrix dimensions must be >= 1, got {rows}x{cols}")
        self.rows = rows
        self.cols = cols
        if data is None:
            self.data = zeros(rows * cols)
        else:
            self.data = data if isinstance(data, array) and data.typecode == "d" else array("d", data)
            if len(self.data) != rows * cols:
                raise DimensionError(
                    f"data length {len(self.data)} does not match shape {rows}x{cols}"
                )

    # --- construction -------------------------------------------------
    @classmethod
    def identity(cls, n: int) -> "Matrix":
        m = cls(n, n)
        for i in range(n):
            m.data[i * n + i] = 1.0
        return m

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "Matrix":
        if not rows:
            raise DimensionError("from_rows needs at least one row")
        ncols = len(rows[0])
        flat = array("d")
        for r in rows:
            if len(r) != ncols:
                raise DimensionError("ragged rows")
            flat.extend(r)
        return cls(len(rows), ncols, flat)

    # --- access -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def __getitem__(self, ij: tuple[int, int]) -> float:
        i, j = ij
        return self.data[i * self.cols + j]

    def __setitem__(self, ij: tuple[int, int], value: float) -> None:
        i, j = ij
        self.data[i * self.cols + j] = value

    def row(self, i: int) -> array:
        return self.data[i * self.cols : (i + 1) * self.cols]

    def set_row(self, i: int, values) -> None:
        self.data[i * self.cols : (i + 1) * self.cols] = array("d", values)

    def copy(self) -> "Matrix":
        return Matrix(self.rows, self.cols, array("d", self.data))

    def tolist(self) -> list[list[float]]:
        return [list(self.row(i)) for i in range(self.rows)]

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Matrix)
            and self.shape == other.shape
            and self.data == other.data
        )

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"

    def check_finite(self, what: str = "matrix") -> "Matrix":
        _require_finite(self.data, what)
        return self


# --- module ops -------------------------------------------------------

def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Row-major product with pinned left-to-right accumulation."""
    if a.cols != b.rows:
        raise DimensionError(
            f"matmul: shapes ({a.rows}, {a.cols}) x ({b.rows}, {b.cols}) incompatible"
        )
    out = Matrix(a.rows, b.cols)
    be.kernels.matmul(a.data, b.data, a.rows, a.cols, b.cols, out.data)
    _require_finite(out.data, "matmul")
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> array:
    """Population-statistics layer norm over a single vector."""
    x = array("d", x)
    gamma = array("d", gamma)
    beta = array("d", beta)
    n = len(x)
    if n == 0:
        raise ArgumentError("layer_norm: empty input")
    if len(gamma) != n or len(beta) != n:
        raise DimensionError(
            f"layer_norm: x has {n} entries, gamma {len(gamma)}, beta {len(beta)}"
        )
    if eps < 0.0:
        raise ArgumentError(f"layer_norm: eps must be >= 0, got {eps}")
    out = zeros(n)
    stats = zeros(2)
    be.kernels.layer_norm_forward(x, gamma, beta, eps, n, out, stats)
    _require_finite(out, "layer_norm")
    return out


def softmax(logits) -> array:
    """Numerically stable softmax (max-subtracted)."""
    x = array("d", logits)
    n = len(x)
    if n == 0:
        raise ArgumentError("softmax: empty input")
    _require_finite(x, "softmax input")
    out = zeros(n)
    be.kernels.softmax(x, n, out)
    return out


@dataclass
class OptimizerState:
    """Per-parameter AdamW state (first/second moments + shared step count)."""

    m: array
    v: array
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_size(cls, n: int, **hyper) -> "OptimizerState":
        return cls(m=zeros(n), v=zeros(n), **hyper)

    def reset_moments(self) -> None:
        be.kernels.fill(self.m, 0.0, len(self.m))
        be.kernels.fill(self.v, 0.0, len(self.v))
        self.step = 0


def _as_buffer(x):
    if isinstance(x, Matrix):
        return x.data
    return x


def adamw_step(params, grads, state: OptimizerState):
    """Mutates params in place: decay first (p *= 1-lr*wd), then the
    bias-corrected moment update. Returns (params, state)."""
    p = _as_buffer(params)
    g = _as_buffer(grads)
    n = len(p)
    if len(g) != n or len(state.m) != n or len(state.v) != n:
        raise DimensionError(
            f"adamw_step: param size {n}, grad {len(g)}, moments {len(state.m)}"
        )
    state.step += 1
    be.kernels.adamw_update(
        p, g, state.m, state.v, n, state.step,
        state.lr, state.beta1, state.beta2, state.eps, state.weight_decay,
    )
    _require_finite(p, "adamw_step")
    return params, state


def finite_diff_grad(f: Callable[[Matrix], float], at: Matrix, h: float = 1e-5) -> Matrix:
    """Central-difference gradient of a scalar function of a matrix."""
    if h <= 0.0:
        raise ArgumentError(f"finite_diff_grad: h must be > 0, got {h}")
    grad = Matrix(at.rows, at.cols)
    work = at.copy()
    for idx in range(at.rows * at.cols):
        orig = work.data[idx]
        work.data[idx] = orig + h
        fp = f(work)
        work.data[idx] = orig - h
        fm = f(work)
        work.data[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("finite_diff_grad: objective returned a non-finite value")
        grad.data[idx] = (fp - fm) / (2.0 * h)
    return grad


# --- seeded randomness ------------------------------------------------

_M64 = (1 << 64) - 1

# canonical xoshiro256** jump polynomial (advances 2^128 steps)
_JUMP = (0x180EC6D33CFD0ABA, 0xD5A61266F0C9392C, 0xA9582618E03FC9AA, 0x39ABDC4529B1661C)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _M64


class Rng:
    """xoshiro256** with splitmix64 seeding and jump-separated streams.

    Streams: Rng(seed, stream=s) applies the canonical jump() s times, so
    distinct stream ids yield provably non-overlapping subsequences of
    the same underlying sequence. State is exactly four u64 words.
    """

    __slots__ = ("s0", "s1", "s2", "s3")

    def __init__(self, seed: int, stream: int = 0):
        if stream < 0:
            raise ArgumentError(f"stream id must be >= 0, got {stream}")
        x = seed & _M64
        words = []
        for _ in range(4):
            x = (x + 0x9E3779B97F4A7C15) & _M64
            z = x
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
            words.append(z ^ (z >> 31))
        if not any(words):  # all-zero state is the one forbidden xoshiro state
            words[0] = 0x9E3779B97F4A7C15
        self.s0, self.s1, self.s2, self.s3 = words
        for _ in range(stream):
            self._jump()

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        result = (_rotl((s1 * 5) & _M64, 7) * 9) & _M64
        t = (s1 << 17) & _M64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3
        return result

    def _jump(self) -> None:
        a = b = c = d = 0
        for poly in _JUMP:
            for bit in range(64):
                if poly & (1 << bit):
                    a ^= self.s0
                    b ^= self.s1
                    c ^= self.s2
                    d ^= self.s3
                self.next_u64()
        self.s0, self.s1, self.s2, self.s3 = a, b, c, d

    # --- derived draws, all funneled through next_u64 ------------------
    def random(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def uniform(self, a: float, b: float) -> float:
        return a + (b - a) * self.random()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) via rejection sampling (no modulo bias)."""
        if n <= 0:
            raise ArgumentError(f"randint: n must be >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def gauss(self) -> float:
        """Standard normal via non-caching Box-Muller (2 u64 draws per call)."""
        u1 = ((self.next_u64() >> 11) + 1) * 2.0 ** -53  # in (0, 1]; log never sees 0
        u2 = (self.next_u64() >> 11) * 2.0 ** -53
        r = math.sqrt(-2.0 * math.log(u1))
        return r * math.cos(math.tau * u2)

    def fill_gauss(self, buf, scale: float = 1.0) -> None:
        for i in range(len(buf)):
            buf[i] = self.gauss() * scale

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct integers from [0, n), in draw order."""
        if k > n:
            raise ArgumentError(f"sample_indices: k={k} > n={n}")
        pool = list(range(n))
        picked = []
        for _ in range(k):
            idx = self.randint(len(pool))
            picked.append(pool.pop(idx))
        return picked

    # --- state --------------------------------------------------------
    def get_state(self) -> tuple[int, int, int, int]:
        return (self.s0, self.s1, self.s2, self.s3)

    def set_state(self, state) -> None:
        s0, s1, s2, s3 = (int(w) & _M64 for w in state)
        if not (s0 or s1 or s2 or s3):
            raise ArgumentError("all-zero rng state is invalid")
        self.s0, self.s1, self.s2, self.s3 = s0, s1, s2, s3

    def clone(self) -> "Rng":
        other = Rng.__new__(Rng)
        other.s0, other.s1, other.s2, other.s3 = self.get_state()
        return other
