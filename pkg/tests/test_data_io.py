import struct

import numpy as np
import pytest

from winoq.data_io import (
    Dataset,
    FormatError,
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    gen_synthetic,
    load_cifar10_bin,
    load_mnist_idx,
)


def write_idx_pair(path_img, path_lbl, images: np.ndarray, labels: np.ndarray):
    """Test-only IDX writer; the loader round-trips against it."""
    n, rows, cols = images.shape
    with open(path_img, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.astype(np.uint8).tobytes())
    with open(path_lbl, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(labels.astype(np.uint8).tobytes())


class TestIdx:
    def test_fixture_roundtrip(self, tmp_path, rng):
        images = rng.integers(0, 256, (4, 28, 28), dtype=np.uint8)
        labels = np.array([0, 3, 9, 1], dtype=np.uint8)
        pi, pl = tmp_path / "img", tmp_path / "lbl"
        write_idx_pair(pi, pl, images, labels)
        ds = load_mnist_idx(pi, pl)
        assert len(ds) == 4 and ds.images.shape == (4, 1, 28, 28)
        assert np.array_equal(ds.labels, labels)
        # affine map is bit-exact against the written pixels
        assert np.array_equal(ds.images, images[:, None].astype(np.float64) / 127.5 - 1.0)

    def test_pixel_extremes(self, tmp_path):
        images = np.zeros((1, 2, 2), dtype=np.uint8)
        images[0, 0, 0] = 255
        write_idx_pair(tmp_path / "i", tmp_path / "l", images, np.zeros(1, dtype=np.uint8))
        ds = load_mnist_idx(tmp_path / "i", tmp_path / "l")
        assert ds.images[0, 0, 0, 0] == 1.0
        assert ds.images[0, 0, 1, 1] == -1.0

    def test_bad_magic_names_values(self, tmp_path):
        with open(tmp_path / "bad", "wb") as fh:
            fh.write(struct.pack(">IIII", 0xDEADBEEF, 1, 2, 2))
            fh.write(bytes(4))
        write_idx_pair(tmp_path / "i", tmp_path / "l",
                       np.zeros((1, 2, 2), dtype=np.uint8), np.zeros(1, dtype=np.uint8))
        with pytest.raises(FormatError, match="0x00000803"):
            load_mnist_idx(tmp_path / "bad", tmp_path / "l")

    def test_truncated(self, tmp_path):
        with open(tmp_path / "trunc", "wb") as fh:
            fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, 10, 28, 28))
            fh.write(bytes(100))
        write_idx_pair(tmp_path / "i", tmp_path / "l",
                       np.zeros((1, 2, 2), dtype=np.uint8), np.zeros(1, dtype=np.uint8))
        with pytest.raises(FormatError, match="truncated"):
            load_mnist_idx(tmp_path / "trunc", tmp_path / "l")

    def test_count_mismatch(self, tmp_path):
        write_idx_pair(tmp_path / "i", tmp_path / "l",
                       np.zeros((2, 2, 2), dtype=np.uint8), np.zeros(2, dtype=np.uint8))
        with open(tmp_path / "l1", "wb") as fh:
            fh.write(struct.pack(">II", IDX_LABELS_MAGIC, 1))
            fh.write(bytes(1))
        with pytest.raises(FormatError, match="images but"):
            load_mnist_idx(tmp_path / "i", tmp_path / "l1")


class TestCifar:
    def test_two_record_fixture(self, tmp_path, rng):
        pixels = rng.integers(0, 256, (2, 3072), dtype=np.uint8)
        raw = b"".join(bytes([lbl]) + pixels[i].tobytes() for i, lbl in enumerate((3, 9)))
        p = tmp_path / "batch.bin"
        p.write_bytes(raw)
        ds = load_cifar10_bin(p)
        assert len(ds) == 2 and ds.images.shape == (2, 3, 32, 32)
        assert ds.labels.tolist() == [3, 9]
        assert np.array_equal(
            ds.images[0], pixels[0].reshape(3, 32, 32).astype(np.float64) / 127.5 - 1.0
        )

    def test_empty_file_warns(self, tmp_path):
        p = tmp_path / "empty.bin"
        p.write_bytes(b"")
        with pytest.warns(UserWarning):
            ds = load_cifar10_bin(p)
        assert len(ds) == 0

    def test_bad_length(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(bytes(3072))  # one byte short of a record
        with pytest.raises(FormatError, match="multiple"):
            load_cifar10_bin(p)


class TestSynthetic:
    def test_deterministic_bitwise(self):
        a = gen_synthetic(4, 16, 16, seed=7)
        b = gen_synthetic(4, 16, 16, seed=7)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_range_and_labels(self, synth_small):
        assert synth_small.images.min() >= -1.0
        assert synth_small.images.max() <= 1.0
        assert set(np.unique(synth_small.labels)) == {0, 1, 2, 3}

    def test_empty(self):
        ds = gen_synthetic(4, 0, 16, seed=0)
        assert len(ds) == 0

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            gen_synthetic(1, 4, 16, seed=0)

    def test_split_deterministic(self, synth_small):
        t1, v1 = synth_small.split(0.1, seed=3)
        t2, v2 = synth_small.split(0.1, seed=3)
        assert np.array_equal(t1.images, t2.images)
        assert np.array_equal(v1.labels, v2.labels)
        assert len(v1) == round(0.1 * len(synth_small))

    def test_label_validation(self):
        with pytest.raises(FormatError):
            Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 5]), num_classes=4)
