import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icrlnet.data import (DatasetContainer, FormatError, SplitSpec, SyntheticSpec,
                          gen_blobs, gen_outlier_blobs, load_container, load_flags,
                          load_split, random_flip_crop, save_container, save_flags,
                          save_split, split_classes)
from icrlnet.tensor import ContractViolation


def _container(rng, classes=3, per=4, shape=(2, 3, 3)):
    blocks = [rng.random((per,) + shape).astype(np.float32) for _ in range(classes)]
    return DatasetContainer([f"c{i}" for i in range(classes)], blocks, provenance="test")


# -- FSDS round trips -----------------------------------------------------------


def test_round_trip_bit_identical(tmp_path):
    cont = _container(np.random.default_rng(0))
    path = tmp_path / "d.fsds"
    save_container(cont, path)
    loaded = load_container(path)
    assert loaded.class_names == cont.class_names
    for a, b in zip(loaded.instances, cont.instances):
        npt.assert_array_equal(a, b)


def test_two_saves_identical_bytes(tmp_path):
    cont = _container(np.random.default_rng(1))
    p1, p2 = tmp_path / "a.fsds", tmp_path / "b.fsds"
    save_container(cont, p1)
    save_container(cont, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checksum_matches_stored(tmp_path):
    import struct
    import zlib
    cont = _container(np.random.default_rng(2))
    path = tmp_path / "d.fsds"
    save_container(cont, path)
    blob = path.read_bytes()
    stored = struct.unpack("<I", blob[-4:])[0]
    assert stored == zlib.crc32(blob[:-4]) & 0xFFFFFFFF


def test_truncated_file_names_offset(tmp_path):
    cont = _container(np.random.default_rng(3))
    path = tmp_path / "d.fsds"
    save_container(cont, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError, match="offset"):
        load_container(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "d.fsds"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(FormatError, match="magic"):
        load_container(path)


def test_corrupted_payload_fails_checksum(tmp_path):
    cont = _container(np.random.default_rng(4))
    path = tmp_path / "d.fsds"
    save_container(cont, path)
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_container(path)


def test_empty_class_list_rejected():
    with pytest.raises(ContractViolation):
        DatasetContainer([], [], provenance="x")


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=5),
       st.integers(min_value=0, max_value=10_000))
def test_round_trip_property(classes, per, seed):
    import tempfile
    from pathlib import Path
    rng = np.random.default_rng(seed)
    cont = _container(rng, classes=classes, per=per,
                      shape=(int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "d.fsds"
        save_container(cont, path)
        loaded = load_container(path)
    for a, b in zip(loaded.instances, cont.instances):
        npt.assert_array_equal(a, b)


# -- splits -----------------------------------------------------------------------


def test_ratio_split_counts_match_convention():
    cont = _container(np.random.default_rng(5), classes=100, per=1, shape=(1, 2, 2))
    split = split_classes(cont, ratios=(0.64, 0.16, 0.20), seed=3)
    assert (len(split.train), len(split.val), len(split.test)) == (64, 16, 20)
    assert not (set(split.train) & set(split.val) & set(split.test))


def test_split_deterministic_under_seed():
    cont = _container(np.random.default_rng(6), classes=10)
    a = split_classes(cont, ratios=(0.5, 0.2, 0.3), seed=9)
    b = split_classes(cont, ratios=(0.5, 0.2, 0.3), seed=9)
    assert a == b


def test_explicit_lists_with_overlap_rejected():
    cont = _container(np.random.default_rng(7), classes=5)
    with pytest.raises(ContractViolation):
        split_classes(cont, lists=([0, 1], [1, 2], [3]))


def test_split_file_round_trip(tmp_path):
    split = SplitSpec((4, 1, 8), (2, 0), (3,))
    path = tmp_path / "split.txt"
    save_split(split, path)
    assert load_split(path) == split


# -- synthetic generators ------------------------------------------------------------


def test_blobs_nearest_centroid_oracle():
    """At the default separation/noise ratio a plain nearest-centroid
    classifier on held-out draws is essentially perfect."""
    spec = SyntheticSpec(classes=6, per_class=40, channels=3, size=8,
                         separation=10.0, noise=0.1, seed=0)
    cont = gen_blobs(spec)
    flat = [block.reshape(block.shape[0], -1) for block in cont.instances]
    centroids = np.stack([b[:20].mean(axis=0) for b in flat])
    correct = total = 0
    for ci, block in enumerate(flat):
        for x in block[20:]:
            pred = np.linalg.norm(centroids - x, axis=1).argmin()
            correct += int(pred == ci)
            total += 1
    assert correct / total > 0.99


def test_blobs_zero_noise_collapses_classes():
    spec = SyntheticSpec(classes=3, per_class=5, channels=1, size=4,
                         separation=5.0, noise=0.0, seed=1)
    cont = gen_blobs(spec)
    for block in cont.instances:
        for inst in block[1:]:
            npt.assert_array_equal(inst, block[0])


def test_blobs_deterministic():
    spec = SyntheticSpec(classes=3, per_class=5, channels=2, size=4, seed=7)
    a, b = gen_blobs(spec), gen_blobs(spec)
    for x, y in zip(a.instances, b.instances):
        npt.assert_array_equal(x, y)


def test_blobs_values_in_unit_interval():
    spec = SyntheticSpec(classes=4, per_class=10, channels=3, size=6, seed=2)
    cont = gen_blobs(spec)
    for block in cont.instances:
        assert block.min() >= 0.0 and block.max() <= 1.0


def test_gen_blobs_rejects_outlier_fraction():
    spec = SyntheticSpec(outlier_fraction=0.2)
    with pytest.raises(ContractViolation):
        gen_blobs(spec)


def test_outlier_fraction_expectation():
    # 20% of 35 instances flagged -> exactly 7 per class; a random K=5
    # support draw then contains 1 outlier in expectation
    spec = SyntheticSpec(classes=4, per_class=35, channels=1, size=4,
                         outlier_fraction=0.2, seed=3)
    _, flags = gen_outlier_blobs(spec)
    for f in flags:
        assert f.sum() == 7
    assert 5 * 7 / 35 == pytest.approx(1.0)


def test_outlier_zero_fraction_identical_to_gen_blobs():
    base = SyntheticSpec(classes=3, per_class=6, channels=2, size=4, seed=4)
    cont, flags = gen_outlier_blobs(base)
    plain = gen_blobs(base)
    for a, b in zip(cont.instances, plain.instances):
        npt.assert_array_equal(a, b)
    assert not any(f.any() for f in flags)


def test_outlier_flags_consistent_with_draw_rule():
    """Re-derive the generation stream and audit that flagged instances are
    exactly the replaced ones (bitwise) and unflagged ones match the clean
    construction."""
    spec = SyntheticSpec(classes=4, per_class=10, channels=2, size=4,
                         separation=8.0, noise=0.1, outlier_fraction=0.3,
                         outlier_rule="other-class", seed=9)
    cont, flags = gen_outlier_blobs(spec)
    clean_spec = SyntheticSpec(classes=4, per_class=10, channels=2, size=4,
                               separation=8.0, noise=0.1, outlier_fraction=0.0,
                               outlier_rule="other-class", seed=9)
    clean = gen_blobs(clean_spec)
    for ci in range(4):
        for i in range(10):
            same = np.array_equal(cont.instances[ci][i], clean.instances[ci][i])
            if flags[ci][i]:
                assert not same
            else:
                assert same


def test_uniform_rule_outliers_are_unclipped_uniform():
    spec = SyntheticSpec(classes=3, per_class=10, channels=2, size=4,
                         outlier_fraction=0.3, outlier_rule="uniform", seed=5)
    cont, flags = gen_outlier_blobs(spec)
    for ci in range(3):
        for i in np.nonzero(flags[ci])[0]:
            inst = cont.instances[ci][i]
            assert inst.min() >= 0.0 and inst.max() <= 1.0


def test_flags_sidecar_round_trip(tmp_path):
    spec = SyntheticSpec(classes=3, per_class=10, outlier_fraction=0.2, seed=6)
    _, flags = gen_outlier_blobs(spec)
    path = tmp_path / "f.flags.json"
    save_flags(flags, "other-class", path)
    loaded, rule = load_flags(path)
    assert rule == "other-class"
    for a, b in zip(loaded, flags):
        npt.assert_array_equal(a, b)


# -- augmentation ---------------------------------------------------------------------


def test_flip_crop_shapes_and_determinism():
    rng = np.random.default_rng(8)
    images = rng.random((6, 3, 8, 8)).astype(np.float32)
    out1 = random_flip_crop(images, np.random.default_rng(123), pad=2)
    out2 = random_flip_crop(images, np.random.default_rng(123), pad=2)
    assert out1.shape == images.shape
    npt.assert_array_equal(out1, out2)


def test_flip_crop_zero_pad_is_flip_only():
    rng = np.random.default_rng(9)
    images = rng.random((200, 1, 4, 4)).astype(np.float32)
    out = random_flip_crop(images, np.random.default_rng(7), pad=0)
    flipped = np.array([np.array_equal(out[i], images[i, :, :, ::-1]) for i in range(200)])
    unchanged = np.array([np.array_equal(out[i], images[i]) for i in range(200)])
    assert np.all(flipped | unchanged)
    assert 0.3 < flipped.mean() < 0.7
