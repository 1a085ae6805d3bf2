import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from setnet.dataio import (MAGIC, DatasetBundle, SplitSpec, SyntheticSpec,
                           gen_synthetic, load_bundle, make_folds, save_bundle)
from setnet.errors import FormatError
from setnet.model import SemanticTable
from setnet.ood import partition_classes

from oracles import ridge_prototype_acc


def bundles_equal(a: DatasetBundle, b: DatasetBundle) -> bool:
    return (np.array_equal(a.features, b.features)
            and np.array_equal(a.labels, b.labels)
            and np.array_equal(a.table.class_ids, b.table.class_ids)
            and np.array_equal(a.table.vectors, b.table.vectors)
            and np.array_equal(a.split.seen_ids, b.split.seen_ids)
            and np.array_equal(a.split.unseen_ids, b.split.unseen_ids)
            and np.array_equal(a.split.train_flags, b.split.train_flags))


# ---------------------------------------------------------------------------
# round trips

def test_round_trip_bitwise(tiny_bundle, tmp_path):
    path = tmp_path / "b.sdnb"
    save_bundle(tiny_bundle, path)
    assert bundles_equal(tiny_bundle, load_bundle(path))


def test_round_trip_stable_bytes(tiny_bundle, tmp_path):
    p1, p2 = tmp_path / "a.sdnb", tmp_path / "b.sdnb"
    save_bundle(tiny_bundle, p1)
    save_bundle(load_bundle(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_round_trip_random_bundles(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    d, s = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    n, h, w, c = int(rng.integers(1, 8)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    vecs = rng.normal(size=(d, s))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    vecs = vecs.astype(np.float32).astype(np.float64)
    table = SemanticTable(class_ids=np.arange(d), vectors=vecs)
    n_seen = int(rng.integers(1, d + 1))
    seen = np.arange(n_seen)
    labels = rng.integers(0, n_seen, size=n)  # train-safe labels
    flags = rng.integers(0, 2, size=n).astype(bool)
    bundle = DatasetBundle(
        features=rng.normal(size=(n, h, w, c)).astype(np.float32).astype(np.float64),
        labels=labels,
        table=table,
        split=SplitSpec(seen_ids=seen, unseen_ids=np.arange(n_seen, d), train_flags=flags),
    )
    path = tmp_path_factory.mktemp("rt") / "b.sdnb"
    save_bundle(bundle, path)
    assert bundles_equal(bundle, load_bundle(path))


# ---------------------------------------------------------------------------
# format errors

def test_bad_magic_offset_zero(tiny_bundle, tmp_path):
    path = tmp_path / "b.sdnb"
    save_bundle(tiny_bundle, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(raw)
    with pytest.raises(FormatError) as exc:
        load_bundle(path)
    assert exc.value.offset == 0


def test_bad_version(tiny_bundle, tmp_path):
    path = tmp_path / "b.sdnb"
    save_bundle(tiny_bundle, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(raw)
    with pytest.raises(FormatError) as exc:
        load_bundle(path)
    assert exc.value.offset == 4


def test_truncated_file(tiny_bundle, tmp_path):
    path = tmp_path / "b.sdnb"
    save_bundle(tiny_bundle, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError) as exc:
        load_bundle(path)
    assert exc.value.offset is not None


def test_trailing_bytes(tiny_bundle, tmp_path):
    path = tmp_path / "b.sdnb"
    save_bundle(tiny_bundle, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_bundle(path)


def test_label_referencing_missing_class(tiny_bundle, tmp_path):
    path = tmp_path / "b.sdnb"
    save_bundle(tiny_bundle, path)
    raw = bytearray(path.read_bytes())
    d, s = len(tiny_bundle.table), tiny_bundle.table.semantic_dim
    seen_count = tiny_bundle.split.seen_ids.shape[0]
    labels_off = 36 + 4 * d + 4 * d * s + 4 * seen_count
    raw[labels_off:labels_off + 4] = (999).to_bytes(4, "little")
    path.write_bytes(raw)
    with pytest.raises(FormatError) as exc:
        load_bundle(path)
    assert "class" in str(exc.value)


def test_magic_constant():
    assert MAGIC == b"SDNB"


# ---------------------------------------------------------------------------
# synthetic generator

def test_gen_deterministic_per_seed():
    spec = SyntheticSpec(seen_classes=4, unseen_classes=2, samples_per_class=5,
                         channels=8, semantic_dim=8, attrs_per_class=2, seed=11)
    assert bundles_equal(gen_synthetic(spec), gen_synthetic(spec))
    other = gen_synthetic(SyntheticSpec(seen_classes=4, unseen_classes=2,
                                        samples_per_class=5, channels=8,
                                        semantic_dim=8, attrs_per_class=2, seed=12))
    assert not bundles_equal(gen_synthetic(spec), other)


def test_gen_noiseless_single_attribute():
    spec = SyntheticSpec(seen_classes=3, unseen_classes=2, samples_per_class=4,
                         height=3, width=3, channels=6, semantic_dim=5,
                         attrs_per_class=1, noise=0.0, jitter=0, seed=2)
    bundle = gen_synthetic(spec)
    for cls in range(5):
        rows = np.nonzero(bundle.labels == cls)[0]
        first = bundle.features[rows[0]]
        nonzero_cells = np.nonzero(np.abs(first).sum(axis=2))
        assert len(nonzero_cells[0]) == 1
        cell = first[nonzero_cells[0][0], nonzero_cells[1][0]]
        assert np.linalg.norm(cell) == pytest.approx(1.0, abs=1e-6)
        for r in rows[1:]:
            np.testing.assert_array_equal(bundle.features[r], first)


def test_gen_satisfies_invariants(default_bundle):
    b = default_bundle
    assert b.features.shape == (450, 4, 4, 32)
    norms = np.linalg.norm(b.table.vectors, axis=1)
    assert np.abs(norms - 1).max() <= 1e-9
    train_classes = set(b.labels[b.split.train_flags].tolist())
    assert train_classes <= set(b.split.seen_ids.tolist())
    unseen_rows = np.isin(b.labels, b.split.unseen_ids)
    assert not b.split.train_flags[unseen_rows].any()
    # 80/20 per seen class
    for cls in b.split.seen_ids:
        rows = b.labels == cls
        assert int(b.split.train_flags[rows].sum()) == 24


def test_gen_prototype_oracle_beats_chance(default_bundle):
    acc, _ = ridge_prototype_acc(default_bundle)
    assert acc > 0.20


def test_gen_rejects_impossible_subsets():
    with pytest.raises(ValueError):
        gen_synthetic(SyntheticSpec(seen_classes=10, unseen_classes=0,
                                    semantic_dim=4, attrs_per_class=4))


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(attrs_per_class=20, semantic_dim=16)
    with pytest.raises(ValueError):
        SyntheticSpec(noise=-0.1)
    with pytest.raises(ValueError):
        SyntheticSpec(jitter=-1)
    with pytest.raises(ValueError):
        SyntheticSpec(seen_classes=0)


# ---------------------------------------------------------------------------
# folds over the split

def test_make_folds_delegates(tiny_bundle):
    got = make_folds(tiny_bundle.split, 2, seed=5)
    want = partition_classes(tiny_bundle.split.seen_ids.tolist(), 2, 5)
    assert got.folds == want.folds


def test_make_folds_never_contain_unseen(default_bundle):
    part = make_folds(default_bundle.split, 5, seed=3)
    unseen = set(default_bundle.split.unseen_ids.tolist())
    assert not any(set(f) & unseen for f in part.folds)
    assert [len(f) for f in part.folds] == [2, 2, 2, 2, 2]


# ---------------------------------------------------------------------------
# bundle validation

def test_bundle_rejects_nonrepresentable_floats(tiny_bundle):
    with pytest.raises(ValueError):
        DatasetBundle(features=tiny_bundle.features + 1e-12,
                      labels=tiny_bundle.labels, table=tiny_bundle.table,
                      split=tiny_bundle.split)


def test_bundle_rejects_unseen_train_sample(tiny_bundle):
    flags = tiny_bundle.split.train_flags.copy()
    unseen_rows = np.nonzero(np.isin(tiny_bundle.labels, tiny_bundle.split.unseen_ids))[0]
    flags[unseen_rows[0]] = True
    with pytest.raises(ValueError):
        DatasetBundle(features=tiny_bundle.features, labels=tiny_bundle.labels,
                      table=tiny_bundle.table,
                      split=SplitSpec(seen_ids=tiny_bundle.split.seen_ids,
                                      unseen_ids=tiny_bundle.split.unseen_ids,
                                      train_flags=flags))


def test_split_rejects_overlap():
    with pytest.raises(ValueError):
        SplitSpec(seen_ids=np.array([0, 1]), unseen_ids=np.array([1, 2]),
                  train_flags=np.zeros(3, dtype=bool))
