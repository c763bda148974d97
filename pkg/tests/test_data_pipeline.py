import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stegcnn.data_pipeline import (
    DataError,
    IDXParseError,
    ImageSample,
    StegDataset,
    denormalize,
    load_idx,
    load_image_dir,
    normalize,
    pad_center,
    prepare_payload,
    resize_bilinear,
    sample_pairs,
    save_image,
    split_dataset,
    to_grayscale,
    write_idx,
)


def _idx_bytes(images: np.ndarray) -> bytes:
    # written by hand here, independent of write_idx
    return struct.pack(">I", 0x803) + struct.pack(">3I", *images.shape) + images.astype(np.uint8).tobytes()


def test_idx_fixture_roundtrip(tmp_path):
    imgs = np.arange(18, dtype=np.uint8).reshape(2, 3, 3)
    (tmp_path / "img").write_bytes(_idx_bytes(imgs))
    labels = struct.pack(">II", 0x801, 2) + bytes([7, 3])
    (tmp_path / "lab").write_bytes(labels)
    samples = load_idx(tmp_path / "img", tmp_path / "lab")
    assert len(samples) == 2
    np.testing.assert_array_equal(samples[1].pixels[:, :, 0], imgs[1])
    assert samples[0].pixels.shape == (3, 3, 1)
    assert [s.label for s in samples] == [7, 3]


def test_write_idx_matches_hand_built(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, (3, 4, 5), dtype=np.uint8)
    write_idx(tmp_path / "a", imgs)
    assert (tmp_path / "a").read_bytes() == _idx_bytes(imgs)


def test_idx_bad_magic_offset_zero(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x00\x00\x00\x00" + b"\x00" * 12)
    with pytest.raises(IDXParseError) as info:
        load_idx(tmp_path / "bad")
    assert info.value.offset == 0
    assert "offset 0" in str(info.value)


def test_idx_canonical_mnist_header(tmp_path):
    header = struct.pack(">4I", 0x803, 60000, 28, 28)
    (tmp_path / "train-images-idx3-ubyte").write_bytes(header + bytes(60000 * 28 * 28))
    samples = load_idx(tmp_path / "train-images-idx3-ubyte")
    assert len(samples) == 60000
    assert samples[0].pixels.shape == (28, 28, 1)


def test_idx_rejects_every_truncation(tmp_path):
    data = _idx_bytes(np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3))
    path = tmp_path / "t"
    for n in range(len(data)):
        path.write_bytes(data[:n])
        with pytest.raises(IDXParseError):
            load_idx(path)


def test_idx_label_count_mismatch(tmp_path):
    (tmp_path / "img").write_bytes(_idx_bytes(np.zeros((2, 3, 3), np.uint8)))
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 3) + bytes(3))
    with pytest.raises(DataError):
        load_idx(tmp_path / "img", tmp_path / "lab")


def test_load_image_dir_sorted_and_resized(tmp_path):
    for name, val in [("c.png", 30), ("a.png", 10), ("b.ppm", 20)]:
        save_image(np.full((12, 12, 3), val, np.uint8), tmp_path / name)
    (tmp_path / "junk.png").write_bytes(b"not an image")
    samples = load_image_dir(tmp_path)
    assert [s.id for s in samples] == ["a.png", "b.ppm", "c.png"]
    assert all(s.pixels.shape == (12, 12, 3) for s in samples)
    small = load_image_dir(tmp_path, resize_to=(6, 6))
    assert small[2].pixels.shape == (6, 6, 3)
    assert np.all(small[2].pixels == 30)


def test_load_image_dir_errors(tmp_path):
    with pytest.raises(DataError):
        load_image_dir(tmp_path / "missing")
    with pytest.raises(DataError):
        load_image_dir(tmp_path)


def test_resize_constant_and_shape():
    img = np.full((60, 60, 3), 77, np.uint8)
    out = resize_bilinear(img, 30, 30)
    assert out.shape == (30, 30, 3) and np.all(out == 77)


def test_resize_checkerboard_to_one_pixel():
    board = np.array([[0, 255], [255, 0]], np.uint8)[:, :, None]
    # centre sample is the mean 127.5, which rounds to 128
    assert resize_bilinear(board, 1, 1)[0, 0, 0] in (127, 128)


def test_resize_corner_aligned():
    ramp = np.arange(0, 50, 10, dtype=np.uint8)[None, :, None]  # 0,10,...,40
    out = resize_bilinear(ramp, 1, 9)
    np.testing.assert_array_equal(out[0, :, 0], [0, 5, 10, 15, 20, 25, 30, 35, 40])


@pytest.mark.parametrize("rgb,mode,want", [
    ((255, 255, 255), "luma", 255),
    ((255, 0, 0), "luma", 76),
    ((10, 20, 30), 1, 20),
])
def test_to_grayscale(rgb, mode, want):
    s = ImageSample(np.array(rgb, np.uint8).reshape(1, 1, 3), "x")
    out = to_grayscale(s, mode)
    assert out.pixels.shape == (1, 1, 1) and out.pixels[0, 0, 0] == want


def test_to_grayscale_errors():
    s = ImageSample(np.zeros((2, 2, 3), np.uint8), "x")
    with pytest.raises(DataError):
        to_grayscale(s, 3)
    with pytest.raises(DataError):
        to_grayscale(ImageSample(np.zeros((2, 2, 1), np.uint8), "g"))


def test_normalize_endpoints_and_clamp():
    s = ImageSample(np.array([[0, 255]], np.uint8)[:, :, None], "e")
    t = normalize(s)
    assert t.shape == (1, 1, 1, 2)
    assert t[0, 0, 0, 0] == -0.5 and t[0, 0, 0, 1] == 0.5
    assert denormalize(np.full((1, 1, 1, 1), 3.0)).pixels[0, 0, 0] == 255
    assert denormalize(np.full((1, 1, 1, 1), -3.0)).pixels[0, 0, 0] == 0


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_normalize_roundtrip_all_values(dtype):
    px = np.arange(256, dtype=np.uint8).reshape(16, 16, 1)
    s = ImageSample(np.repeat(px, 3, axis=2), "all")
    np.testing.assert_array_equal(denormalize(normalize(s, dtype)).pixels, s.pixels)


def test_pad_center_and_prepare_payload():
    p = ImageSample(np.full((28, 28, 1), 9, np.uint8), "mnist")
    out = prepare_payload(p, 32, 32)
    assert out.pixels.shape == (32, 32, 1)
    assert out.pixels[2:30, 2:30].min() == 9 and out.pixels.sum() == 9 * 28 * 28
    with pytest.raises(DataError):
        pad_center(np.zeros((5, 5, 1), np.uint8), 4, 4)


def test_sample_pairs_distinct_and_reproducible():
    pairs = sample_pairs(["a", "b", "c", "d"], 2, np.random.default_rng(0))
    flat = [i for pair in pairs for i in pair]
    assert sorted(flat) == ["a", "b", "c", "d"]
    assert pairs == sample_pairs(["a", "b", "c", "d"], 2, np.random.default_rng(0))
    with pytest.raises(DataError):
        sample_pairs(range(3), 2, np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 40), seed=st.integers(0, 10_000))
def test_sample_pairs_never_self_paired(n, seed):
    bs = n // 2
    for cover, payload in sample_pairs(range(n), bs, np.random.default_rng(seed)):
        assert cover != payload


def test_sample_pairs_cover_frequencies_uniform():
    # 10^4 single-pair draws over 100 ids: each cover count ~ Binomial(10^4, 1/100)
    rng = np.random.default_rng(2024)
    counts = np.zeros(100)
    for _ in range(10_000):
        (cover, _), = sample_pairs(range(100), 1, rng)
        counts[cover] += 1
    mean, sigma = 100.0, np.sqrt(10_000 * 0.01 * 0.99)
    assert np.all(np.abs(counts - mean) < 3 * sigma)


def test_split_6000_2000_sizes():
    split = split_dataset(range(8000), (0.75, 0.0, 0.25), seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (6000, 0, 2000)


def test_split_all_train_and_deterministic():
    assert split_dataset(range(10), (1, 0, 0)).train.__len__() == 10
    assert split_dataset(range(50), seed=4) == split_dataset(range(50), seed=4)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 300), a=st.floats(0, 1), seed=st.integers(0, 99))
def test_split_partitions_exactly(n, a, seed):
    b = (1 - a) / 3
    split = split_dataset(range(n), (a, b, 1 - a - b), seed)
    parts = [set(split.train), set(split.val), set(split.test)]
    assert sum(len(p) for p in parts) == n
    assert set().union(*parts) == set(range(n))


def test_split_errors():
    with pytest.raises(DataError):
        split_dataset([], (1, 0, 0))
    with pytest.raises(DataError):
        split_dataset(range(5), (0.5, 0.2, 0.2))


def test_steg_dataset_from_samples():
    samples = [ImageSample(np.full((8, 8, 3), i, np.uint8), f"s{i}") for i in range(4)]
    ds = StegDataset.from_samples(samples)
    assert ds.covers.shape == (4, 3, 8, 8) and ds.payloads.shape == (4, 1, 8, 8)
    host, guest = ds.batch([(0, 3)])
    assert host.shape == (1, 3, 8, 8) and guest[0, 0, 0, 0] == pytest.approx(3 / 255 - 0.5)
    with pytest.raises(DataError):
        StegDataset.from_samples(samples + [ImageSample(np.zeros((9, 9, 3), np.uint8), "odd")])
