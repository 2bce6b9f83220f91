import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from camu_lab import data as data_mod
from camu_lab.data import Dataset, DataFormatError, SplitSpec
from camu_lab.eval import accuracy
from camu_lab.unlearn import TrainConfig, train


def _labels_only(labels, num_classes):
    labels = np.asarray(labels)
    return Dataset(np.zeros((labels.size, 1)), labels, num_classes)


# ---- IDX ----------------------------------------------------------------

def _idx_pair(tmp_path, images: bytes, labels: bytes):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(images)
    lp.write_bytes(labels)
    return ip, lp


def test_idx_two_image_fixture(tmp_path):
    pixels = bytes([0, 255, 51, 102, 10, 20, 30, 40])
    ip, lp = _idx_pair(
        tmp_path,
        struct.pack(">4I", 0x803, 2, 2, 2) + pixels,
        struct.pack(">2I", 0x801, 2) + bytes([7, 1]),
    )
    ds = data_mod.load_idx(ip, lp)
    assert len(ds) == 2 and ds.dim == 4 and ds.num_classes == 10
    np.testing.assert_array_equal(ds.features, np.array(list(pixels), dtype=float).reshape(2, 4) / 255.0)
    np.testing.assert_array_equal(ds.features[0], [0.0, 1.0, 0.2, 0.4])
    np.testing.assert_array_equal(ds.labels, [7, 1])


def test_idx_empty_payload(tmp_path):
    ip, lp = _idx_pair(tmp_path, struct.pack(">4I", 0x803, 0, 28, 28), struct.pack(">2I", 0x801, 0))
    ds = data_mod.load_idx(ip, lp)
    assert len(ds) == 0 and ds.dim == 784


def test_idx_bad_magic(tmp_path):
    ip, lp = _idx_pair(tmp_path, struct.pack(">4I", 0x802, 0, 1, 1), struct.pack(">2I", 0x801, 0))
    with pytest.raises(DataFormatError, match="magic"):
        data_mod.load_idx(ip, lp)


def test_idx_truncated(tmp_path):
    ip, lp = _idx_pair(
        tmp_path, struct.pack(">4I", 0x803, 2, 2, 2) + bytes(5), struct.pack(">2I", 0x801, 2) + bytes(2)
    )
    with pytest.raises(DataFormatError, match="pixel bytes"):
        data_mod.load_idx(ip, lp)
    ip.write_bytes(b"\x00\x00")
    with pytest.raises(DataFormatError, match="truncated"):
        data_mod.load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, lp = _idx_pair(
        tmp_path, struct.pack(">4I", 0x803, 2, 1, 1) + bytes(2), struct.pack(">2I", 0x801, 3) + bytes(3)
    )
    with pytest.raises(DataFormatError, match="2 images but 3 labels"):
        data_mod.load_idx(ip, lp)


def test_idx_round_trip_and_class_split_matches_histogram(tmp_path):
    gen = np.random.default_rng(5)
    images = gen.integers(0, 256, size=(300, 28, 28), dtype=np.uint8)
    labels = gen.integers(0, 10, size=300)
    ip, lp = tmp_path / "i", tmp_path / "l"
    data_mod.write_idx(images, labels, ip, lp)
    ds = data_mod.load_idx(ip, lp)
    assert ds.features.shape == (300, 784)
    assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0
    raw_counts = Counter(lp.read_bytes()[8:])
    forget, remain = data_mod.split(ds, SplitSpec("class_removal", class_ids=(0,)))
    assert len(forget) == raw_counts[0]
    assert len(remain) == 300 - raw_counts[0]


# ---- synthetic / csv ----------------------------------------------------

def test_blobs_shape_and_balance():
    ds = data_mod.synth_blobs(2, 50, 2, 0.3, seed=1)
    assert ds.features.shape == (100, 2)
    np.testing.assert_array_equal(ds.class_counts(), [50, 50])
    assert ds.features.min() >= 0.0 and ds.features.max() <= 1.0


def test_blobs_same_seed_bitwise():
    a = data_mod.synth_blobs(3, 20, 4, 0.5, seed=9)
    b = data_mod.synth_blobs(3, 20, 4, 0.5, seed=9)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    c = data_mod.synth_blobs(3, 20, 4, 0.5, seed=10)
    assert not np.array_equal(a.features, c.features)


def test_zero_spread_blobs_are_learnable():
    ds = data_mod.synth_blobs(2, 50, 2, 0.0, seed=0)
    model = train(ds, TrainConfig(epochs=50, learning_rate=0.1, batch_size=10, architecture=(2, 8, 4, 2)))
    assert accuracy(model, ds) == 100.0


def test_csv_round_trip(tmp_path, blobs3):
    path = tmp_path / "d.csv"
    data_mod.save_csv(blobs3, path)
    back = data_mod.load_csv(path, 3)
    assert np.array_equal(back.features, blobs3.features)
    assert np.array_equal(back.labels, blobs3.labels)
    assert path.read_text().splitlines()[0].split(",")[-1] == "label"


# ---- split --------------------------------------------------------------

def test_random_fraction_sizes():
    f, r = data_mod.split(_labels_only(np.arange(60000) % 10, 10), SplitSpec("random_fraction", fraction=0.1))
    assert (len(f), len(r)) == (6000, 54000)


def test_class_removal_size_hundred_classes():
    ds = _labels_only(np.repeat(np.arange(100), 500), 100)
    f, r = data_mod.split(ds, SplitSpec("class_removal", class_ids=(0,)))
    assert len(f) == 500 and len(r) == 49500
    assert np.all(f.labels == 0)


def test_split_absent_class():
    with pytest.raises(ValueError, match="do not occur"):
        data_mod.split(_labels_only([0, 1, 1], 3), SplitSpec("class_removal", class_ids=(2,)))


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(mode="random_fraction"),
        dict(mode="random_fraction", fraction=1.0),
        dict(mode="random_fraction", fraction=0.2, class_ids=(1,)),
        dict(mode="class_removal", class_ids=()),
        dict(mode="class_removal", class_ids=(1,), fraction=0.2),
        dict(mode="other", fraction=0.1),
    ],
)
def test_split_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SplitSpec(**kwargs)


@settings(max_examples=80, deadline=None)
@given(
    n=st.integers(2, 300),
    k=st.integers(2, 6),
    seed=st.integers(0, 2**31),
    fraction=st.floats(0.01, 0.99),
    data=st.data(),
)
def test_split_partition_property(n, k, seed, fraction, data):
    labels = np.random.default_rng(seed).integers(0, k, n)
    ds = _labels_only(labels, k)
    if data.draw(st.booleans()):
        spec = SplitSpec("random_fraction", fraction=fraction, seed=seed)
    else:
        present = sorted(set(labels.tolist()))
        ids = data.draw(st.lists(st.sampled_from(present), min_size=1, max_size=len(present)))
        spec = SplitSpec("class_removal", class_ids=tuple(ids), seed=seed)
    f, r = data_mod.split(ds, spec)
    assert set(f.index.tolist()).isdisjoint(r.index.tolist())
    assert sorted(f.index.tolist() + r.index.tolist()) == list(range(n))
    if spec.mode == "random_fraction":
        assert len(f) == round(fraction * n)
    f2, _ = data_mod.split(ds, spec)
    assert np.array_equal(f.index, f2.index)


# ---- prepare_joint ------------------------------------------------------

def _fr(n_forget, n_remain, k, dim, seed=0):
    gen = np.random.default_rng(seed)
    forget = Dataset(gen.random((n_forget, dim)), gen.integers(0, k, n_forget), k)
    remain = Dataset(gen.random((n_remain, dim)), gen.integers(0, k, n_remain), k)
    return forget, remain


def test_joint_size_equals_forget():
    S = data_mod.prepare_joint(*_fr(3, 10, 4, 5), seed=0)
    assert len(S) == 3 and len(S.tuples) == 3


def test_joint_structure_and_provenance():
    forget, remain = _fr(40, 25, 5, 6)
    S = data_mod.prepare_joint(forget, remain, seed=3)
    np.testing.assert_array_equal(S.x_f, forget.features)
    np.testing.assert_array_equal(S.y_f, forget.labels)
    np.testing.assert_array_equal(S.x_r, remain.features[S.remain_rows])
    np.testing.assert_array_equal(S.y_r, remain.labels[S.remain_rows])
    assert np.all(S.y_cf != S.y_f)
    diff = S.x_cf - S.x_r
    assert diff.min() >= 0.0 and diff.max() <= 1.0
    np.testing.assert_array_equal(S.x_cf, S.x_r + S.epsilon)
    t = S[7]
    assert t.y_f == S.y_f[7] and np.array_equal(t.x_f_star, S.x_cf[7])


def test_joint_counterfactual_not_clamped():
    forget, remain = _fr(200, 5, 3, 4)
    remain.features[:] = 1.0
    S = data_mod.prepare_joint(forget, remain, seed=0)
    assert S.x_cf.max() > 1.0


def test_joint_reproducible():
    forget, remain = _fr(30, 20, 4, 3)
    a = data_mod.prepare_joint(forget, remain, seed=8)
    b = data_mod.prepare_joint(forget, remain, seed=8)
    for name in ("x_r", "x_cf", "y_cf", "epsilon", "remain_rows"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_joint_statistics_over_ten_thousand_tuples():
    k = 10
    forget, remain = _fr(10_000, 500, k, 8, seed=2)
    S = data_mod.prepare_joint(forget, remain, seed=0)
    assert len(S) == 10_000
    assert np.all(S.y_cf != S.y_f)
    diff = S.x_cf - S.x_r
    assert diff.min() >= 0.0 and diff.max() <= 1.0
    assert 0.49 <= S.epsilon.mean() <= 0.51
    # Position of y* among the K-1 allowed classes, pooled over all y_f.
    relative = S.y_cf - (S.y_cf > S.y_f)
    assert stats.chisquare(np.bincount(relative, minlength=k - 1)).pvalue > 0.01
    for c in range(k):
        picked = S.y_cf[S.y_f == c]
        allowed = [j for j in range(k) if j != c]
        counts = np.array([(picked == j).sum() for j in allowed])
        assert counts.sum() == picked.size
        assert stats.chisquare(counts).pvalue > 0.01
    # s_r* draws uniform over R
    assert stats.chisquare(np.bincount(S.remain_rows, minlength=500)).pvalue > 0.01


def test_joint_oversampling_round_robin():
    forget, remain = _fr(3, 10, 4, 2)
    S = data_mod.prepare_joint(forget, remain, seed=1, oversample_to=8)
    assert len(S) == 8
    np.testing.assert_array_equal(S.forget_rows, [0, 1, 2, 0, 1, 2, 0, 1])
    assert not np.array_equal(S.epsilon[0], S.epsilon[3])


def test_joint_errors():
    forget, remain = _fr(3, 10, 4, 2)
    with pytest.raises(ValueError, match="empty"):
        data_mod.prepare_joint(forget, remain.subset([]), seed=0)
    one = Dataset(np.zeros((2, 2)), [0, 0], 1)
    with pytest.raises(ValueError, match="two classes"):
        data_mod.prepare_joint(one, one, seed=0)


# ---- batches ------------------------------------------------------------

def test_batches_sizes_and_cover():
    out = data_mod.batches(10, 4, seed=0)
    assert [len(b) for b in out] == [4, 4, 2]
    flat = np.concatenate(out)
    assert sorted(flat.tolist()) == list(range(10))


def test_batches_seeded():
    a = data_mod.batches(50, 7, 3)
    b = data_mod.batches(50, 7, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = data_mod.batches(50, 7, 4)
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_batches_accepts_collection():
    assert [len(b) for b in data_mod.batches(list("abcde"), 2, 0)] == [2, 2, 1]
    with pytest.raises(ValueError):
        data_mod.batches(5, 0, 0)


def test_holdout_disjoint(blobs3):
    tr, ts = data_mod.holdout(blobs3, 0.25, seed=0)
    assert len(ts) == 30 and len(tr) == 90
    assert set(tr.index.tolist()).isdisjoint(ts.index.tolist())
