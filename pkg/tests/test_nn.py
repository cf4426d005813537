import os
import tempfile
import unittest

import numpy as np

from granorm.autodiff import Tensor
from granorm.errors import ArtifactFormatError, ConfigError, MissingArtifactError, ShapeError
from granorm.nn import Model, TrainConfig, accuracy, cross_entropy_loss, load_checkpoint, predict, save_checkpoint, train

from support import linear_model, toy_data, trained_toy_model


class ModelTests(unittest.TestCase):
    def test_feature_length_counts_parameter_tensors(self):
        self.assertEqual(Model.from_architecture("toy_mlp", seed=0).feature_length, 4)
        self.assertEqual(Model.from_architecture("mnist_cnn", seed=0).feature_length, 8)
        self.assertEqual(Model.from_architecture("svhn_cnn", seed=0).feature_length, 12)

    def test_parameter_names_in_layer_order(self):
        model = Model.from_architecture("toy_mlp", seed=0)
        self.assertEqual(
            model.parameter_names(),
            ["dense_0.weight", "dense_0.bias", "dense_1.weight", "dense_1.bias"],
        )

    def test_same_seed_same_weights(self):
        a = Model.from_architecture("toy_mlp", seed=3)
        b = Model.from_architecture("toy_mlp", seed=3)
        self.assertEqual(a.checksum(), b.checksum())
        self.assertNotEqual(a.checksum(), Model.from_architecture("toy_mlp", seed=4).checksum())

    def test_zero_final_layer_gives_uniform_probabilities(self):
        model = Model.from_architecture("toy_mlp", seed=0)
        state = model.state()
        state["dense_1.weight"][:] = 0.0
        state["dense_1.bias"][:] = 0.0
        model.load_state(state)
        probs, label = predict(model, np.full((1, 2, 1), 0.3))
        np.testing.assert_allclose(probs, [0.5, 0.5])
        self.assertEqual(label, 0)

    def test_probabilities_sum_to_one(self):
        model = Model.from_architecture("mnist_cnn", seed=1)
        images = np.random.default_rng(0).uniform(size=(3, 28, 28, 1))
        probs, labels = predict(model, images)
        self.assertEqual(probs.shape, (3, 10))
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(3), atol=1e-12)
        self.assertTrue((probs > 0).all())
        self.assertEqual(labels.shape, (3,))

    def test_wrong_input_shape(self):
        model = Model.from_architecture("toy_mlp", seed=0)
        with self.assertRaises(ShapeError):
            predict(model, np.zeros((2, 2, 1)))

    def test_unknown_architecture(self):
        with self.assertRaises(ConfigError):
            Model.from_architecture("resnet", seed=0)

    def test_argmax_invariant_to_positive_logit_scaling(self):
        model = trained_toy_model()
        _, test_set = toy_data()
        _, before = predict(model, test_set.images)
        scaled = Model.from_architecture("toy_mlp", seed=0)
        state = model.state()
        state["dense_1.weight"] *= 3.0
        state["dense_1.bias"] *= 3.0
        scaled.load_state(state)
        _, after = predict(scaled, test_set.images)
        np.testing.assert_array_equal(before, after)

    def test_cross_entropy_of_uniform_prediction(self):
        model = linear_model(np.zeros((2, 2)))
        output = model.forward(Tensor(np.full((2, 1, 2, 1), 0.4)))
        self.assertAlmostEqual(cross_entropy_loss(model, output, [0, 1]).item(), np.log(2.0), places=12)
        with self.assertRaises(ShapeError):
            cross_entropy_loss(model, output, [0, 2])

    def test_activations_per_parametric_layer(self):
        model = Model.from_architecture("toy_mlp", seed=0)
        activations = model.activations(np.full((5, 1, 2, 1), 0.5))
        self.assertEqual([a.shape for a in activations], [(5, 16), (5, 2)])
        self.assertTrue((activations[0] >= 0).all())


class TrainingTests(unittest.TestCase):
    def test_toy_training_separates_the_classes(self):
        train_set, _ = toy_data()
        _, clean_test = toy_data(boundary_fraction=0.0)
        model = trained_toy_model()
        self.assertGreaterEqual(accuracy(model, train_set.images, train_set.labels), 0.99)
        self.assertGreaterEqual(accuracy(model, clean_test.images, clean_test.labels), 0.99)

    def test_zero_epochs_leave_parameters_unchanged(self):
        train_set, _ = toy_data()
        model = Model.from_architecture("toy_mlp", seed=5)
        before = model.checksum()
        result = train(model, train_set.images, train_set.labels, TrainConfig(epochs=0))
        self.assertEqual(model.checksum(), before)
        self.assertEqual(result.losses, [])

    def test_training_is_deterministic(self):
        train_set, _ = toy_data()
        checksums = []
        for _ in range(2):
            model = Model.from_architecture("toy_mlp", seed=2)
            train(model, train_set.images[:200], train_set.labels[:200], TrainConfig(epochs=1, seed=9))
            checksums.append(model.checksum())
        self.assertEqual(checksums[0], checksums[1])

    def test_empty_dataset_rejected(self):
        model = Model.from_architecture("toy_mlp", seed=0)
        with self.assertRaises(ShapeError):
            train(model, np.zeros((0, 1, 2, 1)), np.zeros(0), TrainConfig())


class CheckpointTests(unittest.TestCase):
    def test_round_trip_is_bit_identical(self):
        model = trained_toy_model()
        _, test_set = toy_data()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model", "model.ckpt")
            save_checkpoint(model, path)
            restored = load_checkpoint(path)
        self.assertEqual(restored.checksum(), model.checksum())
        np.testing.assert_array_equal(predict(restored, test_set.images)[0], predict(model, test_set.images)[0])

    def test_missing_checkpoint(self):
        with self.assertRaises(MissingArtifactError) as ctx:
            load_checkpoint("/nonexistent/model.ckpt")
        self.assertIn("train", str(ctx.exception))

    def test_bad_magic(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.ckpt")
            with open(path, "wb") as fh:
                fh.write(b"NOPE" + bytes(16))
            with self.assertRaises(ArtifactFormatError):
                load_checkpoint(path)

    def test_truncated_checkpoint(self):
        model = Model.from_architecture("toy_mlp", seed=0)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.ckpt")
            save_checkpoint(model, path)
            with open(path, "rb") as fh:
                payload = fh.read()
            with open(path, "wb") as fh:
                fh.write(payload[:-8])
            with self.assertRaises(ArtifactFormatError):
                load_checkpoint(path)


if __name__ == "__main__":
    unittest.main()
