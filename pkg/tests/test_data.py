import gzip
import os
import tempfile
import unittest

import numpy as np

from granorm.data import (
    default_labels_path,
    load_idx_dataset,
    make_two_gaussians,
    read_idx,
    write_idx,
    write_idx_dataset,
)
from granorm.errors import IdxFormatError, MissingArtifactError

from support import DATA_DIR


class IdxReaderTests(unittest.TestCase):
    def test_tiny_dataset(self):
        dataset = load_idx_dataset(DATA_DIR / "tiny-images-idx3-ubyte", DATA_DIR / "tiny-labels-idx1-ubyte")
        self.assertEqual(len(dataset), 3)
        self.assertEqual(dataset.image_shape, (2, 2, 1))
        np.testing.assert_allclose(dataset.images[0, :, :, 0], [[0.0, 1.0], [128 / 255, 0.0]])
        np.testing.assert_allclose(dataset.images[2], np.ones((2, 2, 1)))
        np.testing.assert_array_equal(dataset.labels, [0, 1, 2])
        np.testing.assert_array_equal(dataset.ids, [0, 1, 2])
        self.assertEqual(dataset[1].true_label, 1)

    def test_labels_path_derived_from_images_path(self):
        derived = default_labels_path(str(DATA_DIR / "tiny-images-idx3-ubyte"))
        self.assertEqual(os.path.basename(derived), "tiny-labels-idx1-ubyte")
        dataset = load_idx_dataset(DATA_DIR / "tiny-images-idx3-ubyte")
        self.assertEqual(len(dataset), 3)

    def test_truncated_file_reports_counts(self):
        with self.assertRaises(IdxFormatError) as ctx:
            read_idx(DATA_DIR / "truncated-images-idx3-ubyte")
        self.assertIn("header declares 5 records, found 4", str(ctx.exception))

    def test_empty_file(self):
        with self.assertRaises(IdxFormatError) as ctx:
            read_idx(DATA_DIR / "empty-images-idx3-ubyte")
        self.assertIn("empty", str(ctx.exception))

    def test_bad_magic(self):
        with self.assertRaises(IdxFormatError) as ctx:
            read_idx(DATA_DIR / "badmagic-images-idx3-ubyte")
        self.assertIn("magic", str(ctx.exception))

    def test_label_count_mismatch(self):
        with self.assertRaises(IdxFormatError) as ctx:
            load_idx_dataset(DATA_DIR / "tiny-images-idx3-ubyte", DATA_DIR / "short-labels-idx1-ubyte")
        self.assertIn("2 labels for 3 images", str(ctx.exception))

    def test_missing_file(self):
        with self.assertRaises(MissingArtifactError):
            read_idx(DATA_DIR / "does-not-exist-idx3-ubyte")


class IdxWriterTests(unittest.TestCase):
    def test_written_dataset_loads_back(self):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(4, 3, 3, 3), dtype=np.uint8)
        labels = np.array([3, 1, 4, 1], dtype=np.uint8)
        with tempfile.TemporaryDirectory() as tmp:
            images_path, labels_path = write_idx_dataset(images, labels, os.path.join(tmp, "x-images-idx4-ubyte"))
            self.assertTrue(labels_path.endswith("x-labels-idx4-ubyte"))
            dataset = load_idx_dataset(images_path, labels_path)
        np.testing.assert_allclose(dataset.images, images / 255.0)
        np.testing.assert_array_equal(dataset.labels, labels)

    def test_gzip_and_float_payload(self):
        array = np.linspace(0.0, 1.0, 8).reshape(2, 2, 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "float-images-idx3-ubyte.gz")
            write_idx(path, array)
            with gzip.open(path, "rb") as fh:
                self.assertEqual(fh.read(4), bytes([0, 0, 0x0E, 3]))
            np.testing.assert_array_equal(read_idx(path), array)

    def test_trailing_bytes_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "labels-idx1-ubyte")
            write_idx(path, np.arange(3, dtype=np.uint8))
            with open(path, "ab") as fh:
                fh.write(b"\x00")
            with self.assertRaises(IdxFormatError) as ctx:
                read_idx(path)
        self.assertIn("trailing", str(ctx.exception))


class SyntheticTests(unittest.TestCase):
    def test_shapes_ids_and_range(self):
        train, test = make_two_gaussians(100, 50, seed=1, boundary_fraction=0.2)
        self.assertEqual(train.images.shape, (100, 1, 2, 1))
        self.assertEqual(test.images.shape, (50, 1, 2, 1))
        self.assertTrue(((test.images >= 0) & (test.images <= 1)).all())
        np.testing.assert_array_equal(test.ids, np.arange(50))

    def test_boundary_points_sit_across_the_boundary(self):
        _, test = make_two_gaussians(10, 100, seed=2, boundary_fraction=0.1)
        tail = test.subset(np.arange(90, 100))
        x = tail.images[:, 0, 0, 0]
        # Class 0 points land right of 0.5, class 1 points left of it.
        self.assertTrue((x[tail.labels == 0] > 0.5).all())
        self.assertTrue((x[tail.labels == 1] < 0.5).all())

    def test_seeded(self):
        a, _ = make_two_gaussians(20, 5, seed=3)
        b, _ = make_two_gaussians(20, 5, seed=3)
        np.testing.assert_array_equal(a.images, b.images)


if __name__ == "__main__":
    unittest.main()
