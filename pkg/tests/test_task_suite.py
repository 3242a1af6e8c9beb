"""Task suite generation: determinism, geometry, overlap accounting, I/O.

Oracles: numpy for orthogonality/distances and a test-local
nearest-prototype classifier that must reach 100% on generated data.
"""

import numpy as np
import pytest

from moeforge.errors import ArgumentError, ConfigError, DataError
from moeforge.numerics import Rng
from moeforge.task_suite import (
    SuiteConfig,
    export_suite,
    generate_suite,
    import_suite,
    random_orthogonal,
    sample_batch,
)


def small_cfg(**kw):
    base = dict(tasks=3, d_in=8, class_pool=12, classes_per_task=3,
                separation=0.8, overlap=0.5, noise_sigma=0.05,
                train_per_class=6, test_per_class=4, seed=11)
    base.update(kw)
    return SuiteConfig(**base)


def suite_bytes(seq):
    chunks = [seq.prototypes.tobytes()]
    for t in seq.tasks:
        chunks += [t.transform.tobytes(), t.shift.tobytes(),
                   t.train_x.tobytes(), t.test_x.tobytes()]
        chunks += [bytes(str(t.train_y + t.test_y + t.class_ids), "utf-8")]
    return b"".join(chunks)


# --- determinism ---------------------------------------------------------

def test_generation_is_byte_deterministic():
    a = generate_suite(small_cfg())
    b = generate_suite(small_cfg())
    assert suite_bytes(a) == suite_bytes(b)


def test_different_seed_changes_data():
    a = generate_suite(small_cfg())
    b = generate_suite(small_cfg(seed=12))
    assert suite_bytes(a) != suite_bytes(b)


# --- geometry --------------------------------------------------------------

def test_transforms_are_orthogonal():
    seq = generate_suite(small_cfg())
    for t in seq.tasks:
        q = np.array(t.transform.tolist())
        err = np.abs(q.T @ q - np.eye(q.shape[0])).max()
        assert err < 1e-9


def test_random_orthogonal_standalone():
    for n in (2, 5, 16):
        q = np.array(random_orthogonal(n, Rng(3)).tolist())
        assert np.abs(q @ q.T - np.eye(n)).max() < 1e-9
        assert abs(abs(np.linalg.det(q)) - 1.0) < 1e-9


def test_prototypes_unit_norm_and_separated():
    cfg = small_cfg(separation=1.0)
    seq = generate_suite(cfg)
    p = np.array(seq.prototypes.tolist())
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-12)
    for i in range(len(p)):
        for j in range(i + 1, len(p)):
            assert np.linalg.norm(p[i] - p[j]) >= cfg.separation - 1e-12


# --- class overlap ------------------------------------------------------

def test_overlap_half_gives_exact_common_core():
    # desk defaults: M=5, overlap=0.5 -> core of round_half_up(2.5) = 3
    cfg = SuiteConfig(train_per_class=4, test_per_class=2)
    assert cfg.shared_core_size() == 3
    seq = generate_suite(cfg)
    sets = [set(t.class_ids) for t in seq.tasks]
    core = set.intersection(*sets)
    assert len(core) == 3
    for i in range(len(sets)):
        assert len(sets[i]) == 5
        for j in range(i + 1, len(sets)):
            assert sets[i] & sets[j] == core
    # non-core classes belong to exactly one task
    uniques = [c for s in sets for c in s - core]
    assert len(uniques) == len(set(uniques)) == 10


def test_overlap_zero_disjoint():
    cfg = small_cfg(overlap=0.0, class_pool=12, tasks=3, classes_per_task=3)
    seq = generate_suite(cfg)
    sets = [set(t.class_ids) for t in seq.tasks]
    for i in range(3):
        for j in range(i + 1, 3):
            assert not sets[i] & sets[j]


def test_overlap_one_identical_sets():
    cfg = small_cfg(overlap=1.0)
    seq = generate_suite(cfg)
    sets = [tuple(t.class_ids) for t in seq.tasks]
    assert len(set(sets)) == 1


def test_overlap_zero_infeasible_at_desk_defaults():
    # 5 tasks x 5 classes disjoint would need 25 > 20 pool classes
    with pytest.raises(ConfigError) as ei:
        generate_suite(SuiteConfig(overlap=0.0))
    assert "pool" in str(ei.value)


def test_config_validation_errors():
    for bad in (dict(tasks=0), dict(class_pool=3, classes_per_task=4),
                dict(overlap=1.5), dict(noise_sigma=-0.1),
                dict(train_per_class=0), dict(d_in=1)):
        with pytest.raises(ConfigError):
            SuiteConfig(**{**dict(tasks=2, d_in=8, class_pool=10,
                                  classes_per_task=3), **bad}).validate()


def test_separation_infeasible_raises():
    with pytest.raises(ConfigError):
        generate_suite(small_cfg(separation=2.5, class_pool=3,
                                 classes_per_task=2, tasks=1, overlap=1.0))


# --- sample structure -----------------------------------------------------

def test_split_sizes_and_labels():
    cfg = small_cfg()
    seq = generate_suite(cfg)
    for t in seq.tasks:
        assert t.train_x.rows == cfg.train_per_class * cfg.classes_per_task
        assert t.test_x.rows == cfg.test_per_class * cfg.classes_per_task
        assert set(t.train_y) == set(t.class_ids) == set(t.test_y)
        for c in t.class_ids:
            assert t.train_y.count(c) == cfg.train_per_class
            assert t.test_y.count(c) == cfg.test_per_class


def test_sigma_zero_identity_transform_reproduces_prototypes():
    cfg = small_cfg(noise_sigma=0.0, identity_transform=True, overlap=1.0)
    seq = generate_suite(cfg)
    for t in seq.tasks:
        for i in range(t.train_x.rows):
            proto = seq.prototypes.row(t.train_y[i])
            assert list(t.train_x.row(i)) == list(proto)


def test_train_test_splits_are_disjoint():
    seq = generate_suite(small_cfg())
    for t in seq.tasks:
        train_rows = {t.train_x.row(i).tobytes() for i in range(t.train_x.rows)}
        test_rows = {t.test_x.row(i).tobytes() for i in range(t.test_x.rows)}
        assert not train_rows & test_rows


def nearest_prototype_accuracy(seq, task):
    """Test-local oracle: classify by nearest transformed prototype."""
    q = np.array(task.transform.tolist())
    s = np.array(task.shift)
    protos = {c: q @ np.array(seq.prototypes.row(c)) + s for c in task.class_ids}
    hits = 0
    for i in range(task.test_x.rows):
        x = np.array(task.test_x.row(i))
        pred = min(protos, key=lambda c: np.linalg.norm(x - protos[c]))
        hits += pred == task.test_y[i]
    return 100.0 * hits / task.test_x.rows


def test_nearest_prototype_oracle_is_perfect_at_desk_noise():
    # separation 1.2 vs noise sigma 0.1: classes stay linearly separable
    cfg = SuiteConfig(train_per_class=4, test_per_class=30)
    seq = generate_suite(cfg)
    for t in seq.tasks:
        assert nearest_prototype_accuracy(seq, t) == 100.0


def test_single_task_degenerate():
    cfg = small_cfg(tasks=1, overlap=0.0)
    seq = generate_suite(cfg)
    assert len(seq) == 1 and seq.tasks[0].task_id == 1


# --- batching ----------------------------------------------------------

def test_sample_batch_contents_and_determinism():
    seq = generate_suite(small_cfg())
    task = seq.tasks[0]
    rng = Rng(5, stream=3)
    batch = sample_batch(task, 16, rng)
    assert len(batch) == 16
    for s in batch:
        assert len(s.features) == task.train_x.cols
        assert s.label in task.class_ids
    again = sample_batch(task, 16, Rng(5, stream=3))
    assert [s.label for s in again] == [s.label for s in batch]
    assert all(a.features == b.features for a, b in zip(again, batch))


def test_sample_batch_b1_and_validation():
    seq = generate_suite(small_cfg())
    assert len(sample_batch(seq.tasks[0], 1, Rng(0))) == 1
    with pytest.raises(ArgumentError):
        sample_batch(seq.tasks[0], 0, Rng(0))


def test_sample_batch_covers_classes():
    seq = generate_suite(small_cfg())
    rng = Rng(7)
    labels = {s.label for s in sample_batch(seq.tasks[1], 200, rng)}
    assert labels == set(seq.tasks[1].class_ids)


def test_sample_batch_features_are_copies():
    seq = generate_suite(small_cfg())
    task = seq.tasks[0]
    batch = sample_batch(task, 4, Rng(1))
    batch[0].features[0] += 100.0
    fresh = sample_batch(task, 4, Rng(1))
    assert fresh[0].features[0] != batch[0].features[0]


# --- persistence ----------------------------------------------------------

def test_export_import_roundtrip(tmp_path):
    seq = generate_suite(small_cfg())
    export_suite(seq, tmp_path / "suite")
    loaded = import_suite(tmp_path / "suite")
    assert suite_bytes(loaded) == suite_bytes(seq)
    assert loaded.config == seq.config


def test_reexport_is_byte_identical(tmp_path):
    seq = generate_suite(small_cfg())
    export_suite(seq, tmp_path / "a")
    loaded = import_suite(tmp_path / "a")
    export_suite(loaded, tmp_path / "b")
    a_files = sorted(p.name for p in (tmp_path / "a").iterdir())
    b_files = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert a_files == b_files
    for name in a_files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_import_missing_and_bad_version(tmp_path):
    with pytest.raises(DataError):
        import_suite(tmp_path / "nope")
    seq = generate_suite(small_cfg(tasks=1))
    export_suite(seq, tmp_path / "s")
    manifest = (tmp_path / "s" / "manifest.json").read_text()
    (tmp_path / "s" / "manifest.json").write_text(
        manifest.replace('"format_version": 1', '"format_version": 99')
    )
    with pytest.raises(DataError):
        import_suite(tmp_path / "s")
