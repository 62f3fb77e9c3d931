import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pba.data import (
    RAW_MAGIC,
    TEMPLATE_NAMES,
    BadHeaderError,
    BadMagicError,
    DatasetSplits,
    LabelRangeError,
    RawFormatError,
    Split,
    SyntheticSpec,
    TrailingDataError,
    TruncatedFileError,
    decode_raw_split,
    encode_raw_split,
    generate_synthetic,
    load_raw,
    reduce_split,
    render_shape,
    write_raw,
)

SMALL = dict(train_size=120, val_size=60, test_size=60)


def splits_equal(a, b):
    return all(
        np.array_equal(getattr(a, n).images, getattr(b, n).images)
        and np.array_equal(getattr(a, n).labels, getattr(b, n).labels)
        and np.array_equal(getattr(a, n).ids, getattr(b, n).ids)
        for n in ("train", "val", "test")
    )


def test_same_seed_bit_identical():
    a = generate_synthetic(SyntheticSpec(seed=4, **SMALL))
    b = generate_synthetic(SyntheticSpec(seed=4, **SMALL))
    assert splits_equal(a, b)
    assert a.mean == b.mean and a.std == b.std
    c = generate_synthetic(SyntheticSpec(seed=5, **SMALL))
    assert not np.array_equal(a.train.images, c.train.images)


def test_splits_disjoint_balanced_and_labelled():
    d = generate_synthetic(SyntheticSpec(seed=0, **SMALL))
    ids = [set(getattr(d, n).ids.tolist()) for n in ("train", "val", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert np.all(np.bincount(d.train.labels) == 20)
    assert d.image_shape == (16, 16, 1)
    assert d.train.images.dtype == np.uint8


def test_zero_nuisance_matches_train_distribution():
    spec = SyntheticSpec(seed=1, rotation_range=0, translation_range=0, brightness_jitter=0,
                         train_size=3000, val_size=10, test_size=3000)
    d = generate_synthetic(spec)
    for cls in range(spec.class_count):
        a = d.train.images[d.train.labels == cls].astype(float)
        b = d.test.images[d.test.labels == cls].astype(float)
        # per-pixel class means agree to within a few standard errors
        se = np.sqrt(a.var(axis=0) / len(a) + b.var(axis=0) / len(b)) + 1e-9
        assert np.max(np.abs(a.mean(axis=0) - b.mean(axis=0)) / se) < 5.5


def test_nuisance_shifts_test_distribution():
    spec = SyntheticSpec(seed=1, train_size=3000, val_size=10, test_size=3000)
    d = generate_synthetic(spec)
    a = d.train.images[d.train.labels == 0].astype(float).mean(axis=0)
    b = d.test.images[d.test.labels == 0].astype(float).mean(axis=0)
    assert np.max(np.abs(a - b)) > 20


def test_render_zero_nuisance_is_the_plain_render():
    for label in range(len(TEMPLATE_NAMES)):
        a = render_shape(label, 16, np.random.default_rng(label))
        b = render_shape(label, 16, np.random.default_rng(label), angle=0.0, shift=(0, 0), gain=1.0)
        assert np.array_equal(a, b)
        assert a.max() > 150 and a.min() < 50  # shape and background both present


def test_render_translation_moves_pixels():
    a = render_shape(0, 16, np.random.default_rng(0))
    b = render_shape(0, 16, np.random.default_rng(0), shift=(0, 2))
    assert np.array_equal(a[2:-2], b[4:])


def test_too_many_classes():
    with pytest.raises(ValueError, match="templates"):
        generate_synthetic(SyntheticSpec(seed=0, class_count=len(TEMPLATE_NAMES) + 1))


def test_three_channel_generation():
    d = generate_synthetic(SyntheticSpec(seed=0, channels=3, **SMALL))
    assert d.image_shape == (16, 16, 3)
    assert len(d.mean) == 3


def test_reduce_is_stratified_and_keeps_eval_splits():
    d = generate_synthetic(SyntheticSpec(seed=0, train_size=600, val_size=30, test_size=30))
    r = reduce_split(d, 100, seed=3)
    counts = np.bincount(r.train.labels, minlength=6)
    assert counts.sum() == 100
    assert counts.max() - counts.min() <= 1
    assert set(r.train.ids.tolist()) <= set(d.train.ids.tolist())
    assert r.val is d.val and r.test is d.test
    assert splits_equal(r, reduce_split(d, 100, seed=3))
    assert not np.array_equal(r.train.ids, reduce_split(d, 100, seed=4).train.ids)


def test_reduce_is_uniform_within_class():
    d = generate_synthetic(SyntheticSpec(seed=0, train_size=60, val_size=6, test_size=6))
    hits = np.zeros(60)
    for seed in range(3000):
        hits[reduce_split(d, 30, seed).train.ids] += 1
    assert np.allclose(hits / 3000, 0.5, atol=0.05)


def test_reduce_unbalanced_largest_remainder():
    labels = np.array([0] * 7 + [1] * 2 + [2] * 1)
    split = Split(np.zeros((10, 2, 2, 1), np.uint8), labels, np.arange(10))
    empty = Split(np.zeros((0, 2, 2, 1), np.uint8), np.zeros(0, int), np.zeros(0, int))
    d = DatasetSplits(split, empty, empty, 3)
    r = reduce_split(d, 5, 0)
    # exact quotas 3.5, 1.0, 0.5 -> 3 + 1 + 0, one leftover goes to the first largest remainder
    assert np.bincount(r.train.labels, minlength=3).tolist() == [4, 1, 0]


@pytest.mark.parametrize("n", [5, 601])
def test_reduce_errors(n):
    d = generate_synthetic(SyntheticSpec(seed=0, train_size=600, val_size=6, test_size=6))
    with pytest.raises(ValueError):
        reduce_split(d, n, 0)


def test_reduce_to_full_size_is_identity():
    d = generate_synthetic(SyntheticSpec(seed=0, **SMALL))
    assert reduce_split(d, 120, 0) is d


def test_dataset_invariants():
    s = Split(np.zeros((2, 2, 2, 1), np.uint8), np.array([0, 3]), np.array([0, 1]))
    with pytest.raises(ValueError, match="labels"):
        DatasetSplits(s, s.subset([]), s.subset([]), 3)
    ok = Split(np.zeros((2, 2, 2, 1), np.uint8), np.array([0, 1]), np.array([0, 1]))
    with pytest.raises(ValueError, match="shares"):
        DatasetSplits(ok, ok, ok.subset([]), 3)


# --- raw format ------------------------------------------------------------


def test_raw_layout_by_hand():
    split = Split(np.arange(8, dtype=np.uint8).reshape(2, 2, 2, 1), np.array([1, 0]), np.array([0, 1]))
    buf = encode_raw_split(split)
    assert buf[:4] == b"DABP"
    assert struct.unpack("<5I", buf[:20]) == (RAW_MAGIC, 2, 2, 2, 1)
    assert buf[20:] == bytes([1, 0, 1, 2, 3, 0, 4, 5, 6, 7])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 6), st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 3]), st.integers(0, 2**31))
def test_raw_round_trip(n, h, w, c, seed):
    rng = np.random.default_rng(seed)
    split = Split(rng.integers(0, 256, (n, h, w, c), dtype=np.uint8),
                  rng.integers(0, 10, n), np.arange(n))
    back = decode_raw_split(encode_raw_split(split), 10)
    assert np.array_equal(back.images, split.images)
    assert np.array_equal(back.labels, split.labels)


def _sample_buf():
    rng = np.random.default_rng(0)
    split = Split(rng.integers(0, 256, (3, 4, 4, 1), dtype=np.uint8), np.array([0, 1, 2]), np.arange(3))
    return encode_raw_split(split)


def test_raw_distinct_errors_with_offsets():
    buf = _sample_buf()
    with pytest.raises(BadMagicError) as e:
        decode_raw_split(b"XXXX" + buf[4:])
    assert e.value.offset == 0
    with pytest.raises(TruncatedFileError) as e:
        decode_raw_split(buf[:-3])
    assert e.value.offset == len(buf) - 3
    with pytest.raises(TruncatedFileError):
        decode_raw_split(buf[:10])
    with pytest.raises(TrailingDataError) as e:
        decode_raw_split(buf + b"\0\0")
    assert e.value.offset == len(buf)
    with pytest.raises(LabelRangeError) as e:
        decode_raw_split(buf, class_count=2)
    assert e.value.offset == 20 + 2 * 17
    bad_c = buf[:16] + struct.pack("<I", 2) + buf[20:]
    with pytest.raises(BadHeaderError) as e:
        decode_raw_split(bad_c)
    assert e.value.offset == 16
    zero_h = buf[:8] + struct.pack("<I", 0) + buf[12:]
    with pytest.raises(BadHeaderError):
        decode_raw_split(zero_h)


def test_raw_header_mutation_fuzz():
    """Every single-byte change to the header either decodes to the same
    records or raises a RawFormatError, never anything else."""
    buf = _sample_buf()
    good = decode_raw_split(buf)
    rng = np.random.default_rng(1)
    for pos in range(20):
        for value in set(rng.integers(0, 256, 16).tolist()) | {0, 255}:
            mutated = bytearray(buf)
            mutated[pos] = value
            try:
                out = decode_raw_split(bytes(mutated), class_count=3)
            except RawFormatError:
                continue
            # only a header that still describes the same layout decodes
            assert np.array_equal(out.images.ravel(), good.images.ravel())
            assert np.array_equal(out.labels, good.labels)


def test_write_and_load_raw(tmp_path):
    d = generate_synthetic(SyntheticSpec(seed=2, **SMALL))
    manifest = write_raw(d, tmp_path / "ds", "syn")
    loaded = load_raw(manifest)
    assert splits_equal(d, loaded)
    assert loaded.mean == d.mean and loaded.class_count == d.class_count
    meta = json.loads(manifest.read_text())
    assert meta["train"] == "syn_train.bin"
    assert not list((tmp_path / "ds").glob("*.tmp*"))


def test_load_raw_errors(tmp_path):
    d = generate_synthetic(SyntheticSpec(seed=2, **SMALL))
    manifest = write_raw(d, tmp_path, "syn")
    obj = json.loads(manifest.read_text())
    del obj["meta"]["class_count"]
    manifest.write_text(json.dumps(obj))
    with pytest.raises(ValueError, match="class_count"):
        load_raw(manifest)
    obj["meta"]["class_count"] = 3
    manifest.write_text(json.dumps(obj))
    with pytest.raises(LabelRangeError, match="syn_train.bin"):
        load_raw(manifest)


@pytest.mark.slow
def test_calibration_gap_measured(oracle_calibration, note):
    gap = oracle_calibration["gap"]
    note(f"calibration: plain median {oracle_calibration['plain_median']:.4f}, "
         f"oracle median {oracle_calibration['oracle_median']:.4f}, gap {gap:.4f}")
    assert gap >= 0.05
