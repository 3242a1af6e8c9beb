"""Synthetic multi-domain task sequence.

Each of T tasks is a classification problem over M classes drawn from a
shared pool of unit-norm prototype vectors. Tasks overlap through a
common core: round_half_up(overlap * M) classes appear in EVERY task,
and the remaining classes of each task are unique to it, which makes the
pairwise class overlap exact. Every task applies its own random
orthogonal transform and shift, so shared classes look different across
tasks ("domains") while remaining the same underlying category.

A sample of class c in task t is  Q_t @ (p_c + sigma * n) + s_t  with n
standard normal. With the default separation (min pairwise prototype
distance 1.2) and sigma=0.1, classes stay linearly separable: a
nearest-prototype oracle classifies held-out samples perfectly, which the
tests pin down before any model-quality thresholds are asserted.

All generation is driven by a single Rng stream, so a config (including
its seed) regenerates the identical suite byte for byte.
"""

from __future__ import annotations

import math
from array import array
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import backend as be
from .errors import ArgumentError, ConfigError, DataError
from .numerics import Matrix, Rng, zeros
from .serialize import dump_json, load_json, read_matrix, read_tensor, write_matrix, write_tensor

SUITE_FORMAT_VERSION = 1
SUITE_RNG_STREAM = 1  # stream id reserved for suite generation

_MAX_DRAW_ATTEMPTS = 10000


@dataclass
class SuiteConfig:
    tasks: int = 5
    d_in: int = 32
    class_pool: int = 20
    classes_per_task: int = 5
    separation: float = 1.2
    overlap: float = 0.5
    noise_sigma: float = 0.1
    shift_scale: float = 1.0
    train_per_class: int = 200
    test_per_class: int = 100
    identity_transform: bool = False
    seed: int = 0

    def shared_core_size(self) -> int:
        # round half up of overlap * classes_per_task
        return int(math.floor(self.overlap * self.classes_per_task + 0.5))

    def validate(self) -> "SuiteConfig":
        if self.tasks < 1:
            raise ConfigError(f"tasks must be >= 1, got {self.tasks}")
        if self.d_in < 2:
            raise ConfigError(f"d_in must be >= 2, got {self.d_in}")
        if self.classes_per_task < 1:
            raise ConfigError(
                f"classes_per_task must be >= 1, got {self.classes_per_task}"
            )
        if self.class_pool < self.classes_per_task:
            raise ConfigError(
                f"class_pool {self.class_pool} smaller than "
                f"classes_per_task {self.classes_per_task}"
            )
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap must lie in [0, 1], got {self.overlap}")
        if self.noise_sigma < 0.0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.separation < 0.0:
            raise ConfigError(f"separation must be >= 0, got {self.separation}")
        if self.shift_scale < 0.0:
            raise ConfigError(f"shift_scale must be >= 0, got {self.shift_scale}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("per-class sample counts must be >= 1")
        core = self.shared_core_size()
        unique = self.classes_per_task - core
        needed = core + self.tasks * unique
        if self.class_pool < needed:
            raise ConfigError(
                f"overlap {self.overlap} needs {needed} pool classes "
                f"({core} shared + {self.tasks} x {unique} unique) "
                f"but class_pool is {self.class_pool}"
            )
        return self


@dataclass
class TaskSpec:
    task_id: int            # 1-based position in the sequence
    class_ids: list[int]    # sorted global pool ids
    transform: Matrix       # d_in x d_in, orthogonal rows
    shift: array
    noise_sigma: float
    train_x: Matrix
    train_y: list[int]
    test_x: Matrix
    test_y: list[int]

    @property
    def name(self) -> str:
        return f"task{self.task_id}"


@dataclass
class LabeledSample:
    features: array
    label: int


@dataclass
class TaskSequence:
    config: SuiteConfig
    prototypes: Matrix      # class_pool x d_in, unit rows
    tasks: list[TaskSpec] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tasks)


def _draw_unit_vector(rng: Rng, n: int) -> array:
    v = zeros(n)
    out = zeros(n)
    while True:
        rng.fill_gauss(v)
        if be.kernels.l2_normalize(v, n, out) > 0.0:
            return array("d", out)


def _distance(a, b, n) -> float:
    acc = 0.0
    for i in range(n):
        d = a[i] - b[i]
        acc += d * d
    return math.sqrt(acc)


def _draw_prototypes(cfg: SuiteConfig, rng: Rng) -> Matrix:
    protos = Matrix(cfg.class_pool, cfg.d_in)
    accepted = []
    for c in range(cfg.class_pool):
        for attempt in range(_MAX_DRAW_ATTEMPTS):
            cand = _draw_unit_vector(rng, cfg.d_in)
            if all(_distance(cand, p, cfg.d_in) >= cfg.separation for p in accepted):
                break
        else:
            raise ConfigError(
                f"could not place prototype {c} with separation "
                f"{cfg.separation} after {_MAX_DRAW_ATTEMPTS} attempts"
            )
        accepted.append(cand)
        protos.set_row(c, cand)
    return protos


def random_orthogonal(n: int, rng: Rng) -> Matrix:
    """Random rotation: gaussian matrix, rows orthonormalized by modified
    Gram-Schmidt with a re-orthogonalization pass (keeps |Q Q^T - I| at
    rounding level)."""
    K = be.kernels
    q = Matrix(n, n)
    row = zeros(n)
    for i in range(n):
        for attempt in range(_MAX_DRAW_ATTEMPTS):
            rng.fill_gauss(row)
            for _pass in range(2):
                for j in range(i):
                    prev = q.data[j * n : (j + 1) * n]
                    coef = K.dot(row, prev, n)
                    K.add_scaled(row, prev, -coef, n)
            norm = K.l2_normalize(row, n, row)
            if norm > 1e-10:
                break
        else:
            raise ConfigError("failed to draw a non-degenerate rotation row")
        q.set_row(i, row)
    return q


def _apply_domain(transform: Matrix, shift, point, out) -> None:
    # out = Q @ point + shift
    n = transform.rows
    be.kernels.matvec(transform.data, point, n, n, out)
    be.kernels.add_scaled(out, shift, 1.0, n)


def _assign_class_sets(cfg: SuiteConfig, rng: Rng) -> list[list[int]]:
    core_size = cfg.shared_core_size()
    core = sorted(rng.sample_indices(cfg.class_pool, core_size))
    remaining = [c for c in range(cfg.class_pool) if c not in core]
    unique = cfg.classes_per_task - core_size
    sets = []
    for _t in range(cfg.tasks):
        picks = [remaining.pop(rng.randint(len(remaining))) for _ in range(unique)]
        sets.append(sorted(core + picks))
    return sets


def generate_suite(cfg: SuiteConfig) -> TaskSequence:
    """Deterministically generate the full task sequence from cfg.seed."""
    cfg.validate()
    rng = Rng(cfg.seed, stream=SUITE_RNG_STREAM)
    prototypes = _draw_prototypes(cfg, rng)
    class_sets = _assign_class_sets(cfg, rng)

    d = cfg.d_in
    tasks = []
    noise = zeros(d)
    point = zeros(d)
    for t in range(1, cfg.tasks + 1):
        if cfg.identity_transform:
            transform = Matrix.identity(d)
            shift = zeros(d)
        else:
            transform = random_orthogonal(d, rng)
            shift = zeros(d)
            rng.fill_gauss(shift, cfg.shift_scale)
        class_ids = class_sets[t - 1]

        def make_split(per_class: int):
            x = Matrix(per_class * len(class_ids), d)
            y = []
            out = zeros(d)
            row = 0
            for c in class_ids:
                proto = prototypes.row(c)
                for _ in range(per_class):
                    rng.fill_gauss(noise, cfg.noise_sigma)
                    for i in range(d):
                        point[i] = proto[i] + noise[i]
                    _apply_domain(transform, shift, point, out)
                    x.set_row(row, out)
                    y.append(c)
                    row += 1
            return x, y

        train_x, train_y = make_split(cfg.train_per_class)
        test_x, test_y = make_split(cfg.test_per_class)
        tasks.append(TaskSpec(
            task_id=t, class_ids=class_ids, transform=transform, shift=shift,
            noise_sigma=cfg.noise_sigma, train_x=train_x, train_y=train_y,
            test_x=test_x, test_y=test_y,
        ))
    return TaskSequence(config=cfg, prototypes=prototypes, tasks=tasks)


def sample_batch(task: TaskSpec, batch_size: int, rng: Rng) -> list[LabeledSample]:
    """Uniform-with-replacement minibatch from the task's train split."""
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    n = task.train_x.rows
    out = []
    for _ in range(batch_size):
        i = rng.randint(n)
        out.append(LabeledSample(features=task.train_x.row(i), label=task.train_y[i]))
    return out


# --- persistence --------------------------------------------------------

def export_suite(seq: TaskSequence, path) -> None:
    """Write the suite to a directory; re-exporting is byte-identical."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_matrix(root / "prototypes.bin", seq.prototypes)
    manifest_tasks = []
    for task in seq.tasks:
        stem = f"task{task.task_id}"
        write_matrix(root / f"{stem}_transform.bin", task.transform)
        write_tensor(root / f"{stem}_shift.bin", 1, len(task.shift), task.shift)
        write_matrix(root / f"{stem}_train_x.bin", task.train_x)
        write_tensor(root / f"{stem}_train_y.bin", 1, len(task.train_y),
                     array("d", [float(v) for v in task.train_y]))
        write_matrix(root / f"{stem}_test_x.bin", task.test_x)
        write_tensor(root / f"{stem}_test_y.bin", 1, len(task.test_y),
                     array("d", [float(v) for v in task.test_y]))
        manifest_tasks.append({
            "task_id": task.task_id,
            "class_ids": task.class_ids,
            "noise_sigma": task.noise_sigma,
            "files": {
                "transform": f"{stem}_transform.bin",
                "shift": f"{stem}_shift.bin",
                "train_x": f"{stem}_train_x.bin",
                "train_y": f"{stem}_train_y.bin",
                "test_x": f"{stem}_test_x.bin",
                "test_y": f"{stem}_test_y.bin",
            },
        })
    dump_json({
        "format_version": SUITE_FORMAT_VERSION,
        "config": asdict(seq.config),
        "prototypes": "prototypes.bin",
        "tasks": manifest_tasks,
    }, root / "manifest.json")


def import_suite(path) -> TaskSequence:
    root = Path(path)
    manifest = load_json(root / "manifest.json")
    version = manifest.get("format_version")
    if version != SUITE_FORMAT_VERSION:
        raise DataError(
            f"unsupported suite format {version!r}, expected {SUITE_FORMAT_VERSION}"
        )
    cfg = SuiteConfig(**manifest["config"])
    prototypes = read_matrix(root / manifest["prototypes"])
    tasks = []
    for entry in manifest["tasks"]:
        files = entry["files"]
        _, _, shift = read_tensor(root / files["shift"])
        _, _, train_y = read_tensor(root / files["train_y"])
        _, _, test_y = read_tensor(root / files["test_y"])
        tasks.append(TaskSpec(
            task_id=int(entry["task_id"]),
            class_ids=[int(c) for c in entry["class_ids"]],
            transform=read_matrix(root / files["transform"]),
            shift=shift,
            noise_sigma=float(entry["noise_sigma"]),
            train_x=read_matrix(root / files["train_x"]),
            train_y=[int(v) for v in train_y],
            test_x=read_matrix(root / files["test_x"]),
            test_y=[int(v) for v in test_y],
        ))
    return TaskSequence(config=cfg, prototypes=prototypes, tasks=tasks)
