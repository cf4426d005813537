"""Desk-scale MNIST runs.

Skipped unless ``GRANORM_ACCEPTANCE=1`` and the MNIST IDX files live under
``GRANORM_DATA_ROOT``.  A full run takes tens of minutes on a desktop CPU.
"""

import os
import shutil
import tempfile
import unittest

import numpy as np

from granorm import pipeline
from granorm.attacks import AttackConfig, run_attack
from granorm.config import ENV_DATA_ROOT, load_run_config
from granorm.evaluation import auc_roc
from granorm.gran import total_norm
from granorm.setups import correctly_classified
from granorm.util import load_json

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def mnist_available():
    root = os.environ.get(ENV_DATA_ROOT)
    return bool(root) and all(os.path.exists(os.path.join(root, name)) for name in MNIST_FILES)


@unittest.skipUnless(os.environ.get("GRANORM_ACCEPTANCE") == "1", "set GRANORM_ACCEPTANCE=1 to run")
@unittest.skipUnless(mnist_available(), "MNIST IDX files not found under GRANORM_DATA_ROOT")
class MnistAcceptanceTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.mkdtemp()
        cls.config = load_run_config(None, {"dataset": "mnist", "seed": 1, "output_dir": os.path.join(cls.tmp, "s04")})
        cls.report = pipeline.run_pipeline(cls.config)
        ws = pipeline.workspace(cls.config)
        cls.manifest = load_json(ws.model_manifest)
        cls.noisy = load_json(ws.setup("noisy"))
        cls.wrong = load_json(ws.features("gran", "wrong"))

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp)

    def auc(self, cause, report=None):
        return (report or self.report).cell(cause, "gran").auc

    def test_classifier_accuracy(self):
        self.assertGreaterEqual(self.manifest["test_accuracy"], 0.95)

    def test_misclassified_samples_have_larger_gradients(self):
        norms = total_norm(np.asarray(self.wrong["values"], dtype=np.float64))
        labels = np.asarray(self.wrong["labels"])
        self.assertGreater(norms[labels == 1].mean(), norms[labels == 0].mean())
        self.assertGreaterEqual(auc_roc(norms, labels), 0.75)

    def test_gran_auc_bands(self):
        self.assertGreaterEqual(self.auc("fgsm"), 95.0)
        self.assertGreaterEqual(self.auc("bim_a"), 90.0)
        self.assertGreaterEqual(self.auc("bim_b"), 90.0)
        self.assertGreaterEqual(self.auc("wrong"), 85.0)
        self.assertGreaterEqual(self.auc("noisy"), 85.0)

    def test_noise_calibration(self):
        rate = self.noisy["params"]["rate"]
        self.assertGreaterEqual(rate, 0.48)
        self.assertLessEqual(rate, 0.52)

    def test_learned_parameters(self):
        cell = self.report.cell("fgsm", "gran")
        self.assertEqual(cell.learned_parameters, self.manifest["feature_length"] + 1)

    def test_smoothing_is_not_essential(self):
        unsmoothed_config = dict(self.config, output_dir=os.path.join(self.tmp, "s0"))
        unsmoothed_config["gran"] = {"sigma": 0.0}
        shutil.copytree(self.config["output_dir"], unsmoothed_config["output_dir"])
        pipeline.extract_stage(unsmoothed_config, ["gran"])
        pipeline.fit_stage(unsmoothed_config, ["gran"])
        unsmoothed = pipeline.evaluate_stage(unsmoothed_config, ["gran"])
        drops = [self.auc(cause, unsmoothed) - self.auc(cause) for cause in ("fgsm", "bim_a", "bim_b", "jsma", "cw")]
        self.assertLessEqual(min(drops), 2.0)

    def test_fgsm_succeeds_and_cw_distorts_less(self):
        ws = pipeline.workspace(self.config)
        model = pipeline.load_model(ws)
        originals, predicted = correctly_classified(model, pipeline.pretest_set(self.config))
        x, y = originals.images[:100], predicted[:100]
        fgsm = run_attack(model, x, y, AttackConfig(kind="fgsm", epsilon=0.3))
        cw = run_attack(model, x, y, pipeline.attack_config(self.config, "cw"))
        self.assertGreater(fgsm.success_rate, 0.5)

        def mean_l2(result):
            diff = (result.x_adv - x).reshape(len(x), -1)[result.success]
            return float(np.linalg.norm(diff, axis=1).mean())

        self.assertTrue(cw.success.any())
        self.assertLess(mean_l2(cw), mean_l2(fgsm))

    def test_rerun_report_is_bit_identical(self):
        path = os.path.join(self.config["output_dir"], "report.csv")
        with open(path, encoding="utf-8") as fh:
            first = fh.read()
        rerun = dict(self.config, output_dir=os.path.join(self.tmp, "rerun"))
        pipeline.run_pipeline(rerun)
        with open(os.path.join(rerun["output_dir"], "report.csv"), encoding="utf-8") as fh:
            self.assertEqual(fh.read(), first)


if __name__ == "__main__":
    unittest.main()
