import unittest

import numpy as np

from granorm.attacks import AttackConfig
from granorm.data import ImageDataset
from granorm.errors import CalibrationError, EmptySetupError
from granorm.nn import predict
from granorm.setups import (
    PERTURBED_ID_OFFSET,
    DetectionSetup,
    balance_and_split,
    build_adversarial_setup,
    build_noisy_setup,
    build_wrong_setup,
    calibrate_noise,
)

from support import linear_model, toy_data, trained_toy_model


def band_model():
    """1-pixel, 3-class linear model predicting class 1 for 1/3 < x < 2/3."""

    return linear_model([[-10.0, 0.0, 10.0]], bias=[10.0 / 3.0, 0.0, -20.0 / 3.0])


def middle_band_pretest(count=200):
    x = np.random.default_rng(0).uniform(0.4, 0.6, size=count).reshape(-1, 1, 1, 1)
    return ImageDataset(x, np.ones(count, dtype=np.int64), np.arange(count, dtype=np.int64), "band")


class BalanceTests(unittest.TestCase):
    def test_counts_and_split(self):
        labels = np.array([1] * 10 + [0] * 30)
        indices, partition = balance_and_split(labels, seed=1)
        chosen = labels[indices]
        self.assertEqual(int(np.sum(chosen == 1)), 10)
        self.assertEqual(int(np.sum(chosen == 0)), 10)
        for label in (0, 1):
            self.assertEqual(int(np.sum((chosen == label) & (partition == "test"))), 2)
        self.assertTrue((np.diff(indices) > 0).all())

    def test_seeded(self):
        labels = np.array([1] * 5 + [0] * 50)
        first = balance_and_split(labels, seed=3)[0]
        np.testing.assert_array_equal(first, balance_and_split(labels, seed=3)[0])
        self.assertFalse(np.array_equal(first, balance_and_split(labels, seed=4)[0]))

    def test_small_classes_stay_within_one_of_twenty_percent(self):
        for m in range(1, 12):
            labels = np.array([1] * m + [0] * (m + 3))
            _, partition = balance_and_split(labels, seed=0)
            self.assertLessEqual(abs(np.sum(partition == "test") - 0.2 * 2 * m), 1.0)

    def test_empty_class(self):
        with self.assertRaises(EmptySetupError):
            balance_and_split(np.zeros(10, dtype=np.int64), seed=0)

    def test_duplicate_sample_ids_rejected(self):
        with self.assertRaises(ValueError):
            DetectionSetup(
                cause="wrong",
                images=np.zeros((2, 1, 1, 1)),
                labels=[0, 1],
                sample_ids=[5, 5],
                source_ids=[5, 5],
                partition=["train", "train"],
            )


class CalibrationTests(unittest.TestCase):
    def test_linear_rate(self):
        sigma, rate, iterations = calibrate_noise(lambda s: min(1.0, s / 1.0))
        self.assertAlmostEqual(sigma, 0.5)
        self.assertAlmostEqual(rate, 0.5)
        self.assertEqual(iterations, 2)

    def test_unreachable_rate(self):
        with self.assertRaises(CalibrationError):
            calibrate_noise(lambda s: 0.1)

    def test_missed_tolerance_is_an_error(self):
        with self.assertRaises(CalibrationError) as ctx:
            calibrate_noise(lambda s: 0.45 if s < 0.7 else 0.6)
        message = str(ctx.exception)
        self.assertIn("30 iterations", message)
        self.assertIn("rate 0.450", message)


class WrongSetupTests(unittest.TestCase):
    def test_labels_follow_model_errors(self):
        model = trained_toy_model()
        _, test_set = toy_data()
        setup = build_wrong_setup(model, test_set, seed=2)
        _, predicted = predict(model, test_set.images)
        errors = dict(zip(test_set.ids.tolist(), (predicted != test_set.labels).tolist()))
        for sample_id, label in zip(setup.sample_ids, setup.labels):
            self.assertEqual(bool(label), errors[int(sample_id)])
        np.testing.assert_array_equal(setup.sample_ids, setup.source_ids)
        self.assertEqual(setup.model_checksum, model.checksum())

    def test_perfect_model_has_no_wrong_setup(self):
        pretest = middle_band_pretest(20)
        with self.assertRaises(EmptySetupError):
            build_wrong_setup(band_model(), pretest, seed=0)


class AdversarialSetupTests(unittest.TestCase):
    def test_fgsm_setup(self):
        model = trained_toy_model()
        _, test_set = toy_data()
        config = AttackConfig(kind="fgsm", epsilon=0.3)
        setup, result = build_adversarial_setup(model, test_set.head(200), config, seed=5)
        self.assertEqual(setup.cause, "fgsm")
        perturbed = setup.labels == 1
        np.testing.assert_array_equal(setup.sample_ids[perturbed], setup.source_ids[perturbed] + PERTURBED_ID_OFFSET)
        np.testing.assert_array_equal(setup.sample_ids[~perturbed], setup.source_ids[~perturbed])
        self.assertEqual(len(np.intersect1d(setup.sample_ids[setup.mask("train")], setup.sample_ids[setup.mask("test")])), 0)
        self.assertEqual(setup.params["attacked"], len(result.success))
        _, labels = predict(model, setup.images[perturbed])
        originals = dict(zip(test_set.ids.tolist(), test_set.labels.tolist()))
        for label, source in zip(labels, setup.source_ids[perturbed]):
            self.assertNotEqual(label, originals[int(source)])

    def test_manifest_round_trip(self):
        model = trained_toy_model()
        _, test_set = toy_data()
        setup = build_wrong_setup(model, test_set, seed=1)
        restored = DetectionSetup.from_manifest(setup.to_manifest(), setup.images)
        np.testing.assert_array_equal(restored.sample_ids, setup.sample_ids)
        np.testing.assert_array_equal(restored.partition, setup.partition)
        self.assertEqual(restored.counts(), setup.counts())


class NoisySetupTests(unittest.TestCase):
    def test_half_of_noisy_images_misclassified(self):
        model = band_model()
        setup = build_noisy_setup(model, middle_band_pretest(), seed=3)
        self.assertLessEqual(abs(setup.params["rate"] - 0.5), 0.02)
        self.assertGreater(setup.params["sigma"], 0.0)
        self.assertLess(setup.params["sigma"], 2.0)
        self.assertTrue(((setup.images >= 0.0) & (setup.images <= 1.0)).all())
        np.testing.assert_array_equal(setup.sample_ids, setup.source_ids + PERTURBED_ID_OFFSET)
        _, labels = predict(model, setup.images)
        np.testing.assert_array_equal(setup.labels, (labels != 1).astype(np.int64))

    def test_noise_is_reproducible(self):
        model = band_model()
        first = build_noisy_setup(model, middle_band_pretest(), seed=3)
        second = build_noisy_setup(model, middle_band_pretest(), seed=3)
        self.assertEqual(first.params["sigma"], second.params["sigma"])
        np.testing.assert_array_equal(first.images, second.images)

    def test_binary_model_cannot_reach_half(self):
        # Symmetric noise on a two-class model never flips more than half.
        model = linear_model([[-1.0, 1.0]], bias=[0.0, 2.0])
        x = np.linspace(0.8, 0.9, 200).reshape(-1, 1, 1, 1)
        pretest = ImageDataset(x, np.ones(200, dtype=np.int64), np.arange(200, dtype=np.int64))
        with self.assertRaises(CalibrationError):
            build_noisy_setup(model, pretest, seed=0, clip=False)


if __name__ == "__main__":
    unittest.main()
