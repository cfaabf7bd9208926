import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from s2m2.data import (BRIGHTNESS, ImageDataset, RotationConfig, SplitSpec, augment_exemplar,
                       generate_synthetic, load_dataset, load_splits, make_splits, perturb, pixelate,
                       rotate45, rotate90, save_dataset, save_splits)
from s2m2.errors import ConfigurationError, DimensionError, FormatError, ValidationError

unit = st.floats(0, 1, allow_nan=False, width=32)
square = st.integers(2, 9).flatmap(lambda n: arrays(np.float32, (1, n, n), elements=unit))


def test_default_dataset_shape(toy_dataset):
    assert toy_dataset.images.shape == (16 * 60, 1, 32, 32)
    assert toy_dataset.class_count == 16
    np.testing.assert_array_equal(np.bincount(toy_dataset.labels), np.full(16, 60))
    toy_dataset.validate()


def test_generation_is_deterministic(toy_dataset):
    assert generate_synthetic(seed=0).images.tobytes() == toy_dataset.images.tobytes()
    assert not generate_synthetic(seed=1).equals(toy_dataset)


def test_sample_seed_keeps_classes_but_redraws_images(toy_dataset):
    fresh = generate_synthetic(seed=0, sample_seed=99)
    assert fresh.images.shape == toy_dataset.images.shape
    assert not np.array_equal(fresh.images, toy_dataset.images)


def test_images_are_not_rotation_invariant(toy_dataset):
    x = toy_dataset.images.astype(np.float64)
    dist = np.sqrt(((x - rotate90(x, 1)) ** 2).sum(axis=(1, 2, 3)))
    assert np.mean(dist > 1e-3) >= 0.99


@pytest.mark.parametrize("kwargs", [dict(size=8), dict(classes=4), dict(per_class=5)])
def test_generation_rejects_small_configs(kwargs):
    with pytest.raises(ConfigurationError):
        generate_synthetic(**kwargs)


def test_save_load_round_trip(tmp_path, toy_dataset):
    path = tmp_path / "d.fsl"
    save_dataset(toy_dataset, path)
    loaded = load_dataset(path)
    assert loaded.equals(toy_dataset)
    save_dataset(loaded, tmp_path / "e.fsl")
    assert path.read_bytes() == (tmp_path / "e.fsl").read_bytes()


def _small():
    rng = np.random.default_rng(0)
    return ImageDataset(rng.random((6, 1, 4, 4)), np.array([0, 0, 1, 1, 2, 2]), 3)


def test_bad_magic(tmp_path):
    path = tmp_path / "d.fsl"
    save_dataset(_small(), path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="offset 0"):
        load_dataset(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "d.fsl"
    save_dataset(_small(), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError, match="truncated"):
        load_dataset(path)


def test_empty_image_list(tmp_path):
    import struct
    path = tmp_path / "d.fsl"
    path.write_bytes(struct.pack("<4sIIIIII", b"FSL1", 1, 3, 0, 1, 4, 4))
    with pytest.raises(FormatError, match="empty"):
        load_dataset(path)


def test_pixel_out_of_range_names_offset(tmp_path):
    path = tmp_path / "d.fsl"
    save_dataset(_small(), path)
    blob = bytearray(path.read_bytes())
    # record 1, pixel 2: header 28 bytes, record = 4 + 16*4 bytes
    off = 28 + 1 * 68 + 4 + 4 * 2
    blob[off:off + 4] = np.float32(1.5).tobytes()
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match=f"offset {off}"):
        load_dataset(path)


def test_class_with_one_image(tmp_path):
    d = _small()
    d.labels[1] = 1
    with pytest.raises(ValidationError):
        save_dataset(d, tmp_path / "x.fsl")


def test_split_sizes_and_partition():
    s = make_splits(16, (10, 3, 3), seed=0)
    assert (len(s.base), len(s.val), len(s.novel)) == (10, 3, 3)
    assert s.all_classes() == tuple(range(16))
    merged = make_splits(16, (10, 3, 3), seed=0, merge_val=True)
    assert len(merged.base) == 13 and merged.val == ()


@settings(max_examples=50)
@given(st.integers(8, 60), st.tuples(*[st.integers(1, 9)] * 3), st.integers(0, 1000))
def test_split_is_always_partition(n, ratios, seed):
    try:
        s = make_splits(n, ratios, seed)
    except ConfigurationError:
        return
    parts = [set(s.base), set(s.val), set(s.novel)]
    assert sum(map(len, parts)) == n and set().union(*parts) == set(range(n))


def test_explicit_splits():
    s = make_splits(4, base=[0, 1], val=[2], novel=[3])
    assert s == SplitSpec((0, 1), (2,), (3,))
    with pytest.raises(ValidationError):
        make_splits(4, base=[0, 1], val=[1], novel=[2, 3])
    with pytest.raises(ValidationError):
        make_splits(4, base=[0], val=[1], novel=[2])


def test_split_file_round_trip(tmp_path):
    s = make_splits(16, seed=3)
    save_splits(s, tmp_path / "s.txt")
    assert load_splits(tmp_path / "s.txt") == s
    (tmp_path / "bad.txt").write_text("base: 1,2\nfoo: 3\n")
    with pytest.raises(FormatError):
        load_splits(tmp_path / "bad.txt")


@given(square, st.integers(0, 7), st.integers(0, 7))
def test_rotate90_group_laws(x, a, b):
    assert np.array_equal(rotate90(rotate90(rotate90(rotate90(x, 1), 1), 1), 1), x)
    assert np.array_equal(rotate90(rotate90(x, a), b), rotate90(x, (a + b) % 4))
    assert np.array_equal(rotate90(x, 2), x[..., ::-1, ::-1])


def test_rotate90_sense_and_constant():
    x = np.zeros((1, 3, 3))
    x[0, 0, 1] = 1.0
    # (i, j) -> (j, H - 1 - i): (0, 1) lands on (1, 2)
    assert rotate90(x, 1)[0, 1, 2] == 1.0
    c = np.full((1, 5, 5), 0.4)
    for k in range(4):
        assert np.array_equal(rotate90(c, k), c)


def test_rotate_errors():
    with pytest.raises(DimensionError):
        rotate90(np.zeros((1, 3, 4)), 1)
    with pytest.raises(ValidationError):
        rotate45(np.zeros((1, 4, 4)), 30)


@given(square)
def test_rotate45_delegates_and_preserves_range(x):
    assert np.array_equal(rotate45(x, 90), rotate90(x, 1))
    y = rotate45(x, 45)
    assert y.min() >= 0 and y.max() <= 1


def test_rotate45_disk_is_invariant():
    n = 31
    c = (n - 1) / 2
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    disk = (((i - c) ** 2 + (j - c) ** 2) <= 10 ** 2).astype(np.float64)[None]
    for angle in (45, 135, 225, 315):
        out = rotate45(disk, angle)
        inner = ((i - c) ** 2 + (j - c) ** 2) <= 8.5 ** 2
        outer = ((i - c) ** 2 + (j - c) ** 2) >= 11.5 ** 2
        assert np.all(out[0][inner] == 1) and np.all(out[0][outer] == 0)


def test_rotation_config_labels():
    cfg = RotationConfig((270, 0, 90, 180))
    assert cfg.angles == (0, 90, 180, 270)
    assert [cfg.label_of(a) for a in cfg.angles] == [0, 1, 2, 3]
    with pytest.raises(ValidationError):
        RotationConfig((90, 180))


def test_rotation_labels_round_trip_through_dataset(tmp_path, toy_dataset):
    cfg = RotationConfig()
    x = toy_dataset.images[:10]
    rotated, labels = cfg.expand(x)
    d = ImageDataset(rotated, labels, len(cfg))
    save_dataset(d, tmp_path / "rot.fsl")
    back = load_dataset(tmp_path / "rot.fsl")
    for img, lab, orig in zip(back.images, back.labels, np.tile(x, (4, 1, 1, 1))):
        undo = rotate90(img, -int(lab))
        assert np.array_equal(undo, orig)
        assert cfg.angles[lab] == 90 * int(lab)


def test_augment_properties(toy_dataset):
    x = toy_dataset.images[0]
    out = augment_exemplar(x, np.random.default_rng(5))
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
    assert np.array_equal(out, augment_exemplar(x, np.random.default_rng(5)))
    rng = np.random.default_rng(0)
    distinct = 0
    for _ in range(1000):
        views = [augment_exemplar(x, rng).tobytes() for _ in range(4)]
        distinct += len(set(views)) == 4
    assert distinct / 1000 > 0.99


def test_perturb_examples():
    zero = np.zeros((1, 8, 8), dtype=np.float32)
    for s in range(1, 6):
        np.testing.assert_allclose(perturb(zero, "brightness", s), BRIGHTNESS[s - 1], rtol=1e-6)
    const = np.full((1, 8, 8), 0.37, dtype=np.float32)
    for s in range(1, 6):
        assert np.array_equal(perturb(const, "contrast", s), const)
    x = np.random.default_rng(0).random((1, 8, 8)).astype(np.float32)
    assert np.array_equal(pixelate(x, 1), x)
    assert np.array_equal(perturb(x, "pixelate", 0), x)
    with pytest.raises(ValidationError):
        perturb(x, "blur", 1)


@given(square, st.sampled_from(["brightness", "contrast", "pixelate"]), st.integers(0, 5))
def test_perturb_stays_in_unit_range(x, kind, s):
    y = perturb(x, kind, s)
    assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1


def test_pixelate_block_means():
    x = np.arange(16, dtype=np.float64).reshape(1, 4, 4) / 16
    y = pixelate(x, 2)
    np.testing.assert_allclose(y[0, :2, :2], x[0, :2, :2].mean())
    np.testing.assert_allclose(y[0, 2:, 2:], x[0, 2:, 2:].mean())
