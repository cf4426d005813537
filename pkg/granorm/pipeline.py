"""Pipeline stages: train, attack, build-setups, extract, fit-detector, evaluate, report.

Each stage reads the artifacts of earlier stages from the run's
:class:`~granorm.artifacts.Workspace` and writes its own.
"""

from __future__ import annotations

import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import gran, lid
from .artifacts import Workspace
from .attacks import AttackConfig, AttackResult, run_attack
from .data import ImageDataset, load_idx_dataset, make_two_gaussians
from .detector import DetectorHead, FeatureSet, fit_feature_set
from .errors import MissingArtifactError, StaleArtifactError
from .evaluation import (
    EvalCell,
    EvalReport,
    evaluate_cell,
    median_timings,
    render_roc_csv,
    render_runtime_csv,
    roc_points,
)
from .nn import Model, TrainConfig, TrainResult, load_checkpoint, save_checkpoint, train
from .schema import ATTACK_KINDS, CAUSES, DETECTORS
from .setups import (
    DetectionSetup,
    build_adversarial_setup,
    build_noisy_setup,
    build_wrong_setup,
    correctly_classified,
)
from .util import derive_seed, load_json, safe_json_dump

logger = logging.getLogger(__name__)


def workspace(config: Dict[str, Any]) -> Workspace:
    ad.set_default_dtype(config["dtype"])
    return Workspace(config["output_dir"], config)


def seed_for(config: Dict[str, Any], stage: str) -> int:
    return derive_seed(config["seed"], stage)


def selected_causes(config: Dict[str, Any], only: Optional[Sequence[str]] = None) -> List[str]:
    causes = [c for c in CAUSES if c in config["setups"]["causes"]]
    if only:
        causes = [c for c in causes if c in only]
    return causes


def selected_detectors(only: Optional[Sequence[str]] = None) -> List[str]:
    return [d for d in DETECTORS if not only or d in only]


# -------------------------------------------------------------------- data


def load_datasets(config: Dict[str, Any]) -> Tuple[ImageDataset, ImageDataset]:
    """Pre-train and pre-test datasets for the configured dataset."""

    if config["dataset"] == "synthetic":
        opts = config["synthetic"]
        return make_two_gaussians(
            opts["train_size"],
            opts["test_size"],
            seed_for(config, "data"),
            boundary_fraction=opts["boundary_fraction"],
        )
    paths = config["paths"]
    for key in ("train_images", "test_images"):
        if not os.path.exists(paths[key]):
            raise MissingArtifactError(paths[key], "set paths in the config or GRANORM_DATA_ROOT")
    train_set = load_idx_dataset(paths["train_images"], paths.get("train_labels"), name=f"{config['dataset']}-train")
    test_set = load_idx_dataset(paths["test_images"], paths.get("test_labels"), name=f"{config['dataset']}-test")
    return train_set, test_set


def pretest_set(config: Dict[str, Any]) -> ImageDataset:
    _, test_set = load_datasets(config)
    return test_set.head(config["setups"].get("pretest_limit"))


# ------------------------------------------------------------------- train


def train_stage(config: Dict[str, Any]) -> TrainResult:
    ws = workspace(config)
    train_set, test_set = load_datasets(config)
    train_set = train_set.head(config["training"].get("train_limit"))
    model = Model.from_architecture(config["architecture"], seed=seed_for(config, "model/init"))
    opts = config["training"]
    train_config = TrainConfig(
        epochs=opts["epochs"],
        learning_rate=opts["learning_rate"],
        momentum=opts["momentum"],
        batch_size=opts["batch_size"],
        seed=seed_for(config, "model/train"),
    )
    logger.info("training %s on %d images (n=%d parameter tensors)", model.architecture["name"], len(train_set), model.feature_length)
    result = train(model, train_set.images, train_set.labels, train_config, test_images=test_set.images, test_labels=test_set.labels)
    save_checkpoint(model, ws.checkpoint)
    safe_json_dump(model.architecture, ws.architecture)
    ws.write(
        "model",
        ws.model_manifest,
        {
            "architecture": model.architecture,
            "model_checksum": model.checksum(),
            "parameter_names": model.parameter_names(),
            "feature_length": model.feature_length,
            "train_accuracy": float(result.train_accuracy),
            "test_accuracy": float(result.test_accuracy),
        },
    )
    return result


def load_model(ws: Workspace) -> Model:
    """Load the checkpoint, refusing one that no longer matches its manifest."""

    manifest = ws.read("model", ws.model_manifest)
    model = load_checkpoint(ws.checkpoint)
    checksum = model.checksum()
    if checksum != manifest["model_checksum"]:
        raise StaleArtifactError(ws.checkpoint, "model_checksum", manifest["model_checksum"], checksum)
    return model


# ------------------------------------------------------------------ attack


def attack_config(config: Dict[str, Any], kind: str) -> AttackConfig:
    return AttackConfig.from_dict(kind, config["attacks"][kind], seed=seed_for(config, f"attack/{kind}"))


def attack_limit(config: Dict[str, Any], kind: str) -> Optional[int]:
    return config["setups"].get("attack_limits", {}).get(kind)


def attack_stage(config: Dict[str, Any], kinds: Optional[Sequence[str]] = None) -> Dict[str, AttackResult]:
    ws = workspace(config)
    model = load_model(ws)
    checksum = model.checksum()
    pretest = pretest_set(config)
    originals, predicted = correctly_classified(model, pretest)
    results: Dict[str, AttackResult] = {}
    for kind in [k for k in selected_causes(config, kinds) if k in ATTACK_KINDS]:
        subset = originals.head(attack_limit(config, kind))
        result = run_attack(model, subset.images, predicted[: len(subset)], attack_config(config, kind))
        ws.save_array(ws.attack(kind, "npy"), result.x_adv)
        ws.write(
            "attack",
            ws.attack(kind),
            {
                "kind": kind,
                "params": result.params,
                "source_ids": subset.ids.tolist(),
                "success": result.success.tolist(),
                "success_rate": result.success_rate,
                "model_checksum": checksum,
            },
        )
        results[kind] = result
    if model.checksum() != checksum:
        raise StaleArtifactError(ws.checkpoint, "model_checksum", checksum, model.checksum())
    return results


def load_attack(ws: Workspace, kind: str, checksum: str) -> AttackResult:
    doc = ws.read("attack", ws.attack(kind), model_checksum=checksum)
    x_adv = ws.load_array(ws.attack(kind, "npy"))
    return AttackResult(kind, x_adv, np.asarray(doc["success"], dtype=bool), doc["params"])


# ------------------------------------------------------------------ setups


def build_setups_stage(config: Dict[str, Any], causes: Optional[Sequence[str]] = None) -> Dict[str, DetectionSetup]:
    ws = workspace(config)
    model = load_model(ws)
    checksum = model.checksum()
    pretest = pretest_set(config)
    built: Dict[str, DetectionSetup] = {}
    for cause in selected_causes(config, causes):
        seed = seed_for(config, f"setup/{cause}")
        if cause in ATTACK_KINDS:
            result = load_attack(ws, cause, checksum)
            setup, _ = build_adversarial_setup(
                model, pretest, attack_config(config, cause), seed, limit=attack_limit(config, cause), result=result
            )
        elif cause == "noisy":
            setup = build_noisy_setup(model, pretest, seed, clip=config["setups"].get("noise_clip", True))
        else:
            setup = build_wrong_setup(model, pretest, seed)
        save_setup(ws, setup)
        built[cause] = setup
    return built


def save_setup(ws: Workspace, setup: DetectionSetup) -> None:
    ws.save_array(ws.setup(setup.cause, "npy"), setup.images)
    ws.write("setup", ws.setup(setup.cause), setup.to_manifest())


def load_setup(ws: Workspace, cause: str, checksum: str) -> DetectionSetup:
    doc = ws.read("setup", ws.setup(cause), model_checksum=checksum)
    return DetectionSetup.from_manifest(doc, ws.load_array(ws.setup(cause, "npy")))


# ----------------------------------------------------------------- extract


def lid_reference(config: Dict[str, Any], ws: Workspace, model: Model) -> lid.LidReference:
    """Reuse a current reference set or draw a new one from the pre-train set."""

    checksum = model.checksum()
    if os.path.exists(ws.lid_reference()):
        try:
            doc = ws.read("lid_reference", ws.lid_reference(), model_checksum=checksum)
            return lid.LidReference.from_doc(doc, ws.load_array(ws.lid_reference("npy")), model)
        except StaleArtifactError as exc:
            logger.info("rebuilding LID reference: %s", exc)
    train_set, _ = load_datasets(config)
    opts = config["lid"]
    reference = lid.build_lid_reference(
        model,
        train_set,
        opts["k"],
        seed_for(config, "lid/reference"),
        count=opts["reference_count"],
        cache_activations=opts["cache_activations"],
    )
    ws.save_array(ws.lid_reference("npy"), reference.images)
    ws.write("lid_reference", ws.lid_reference(), reference.to_doc())
    return reference


def extract_stage(
    config: Dict[str, Any],
    detectors: Optional[Sequence[str]] = None,
    causes: Optional[Sequence[str]] = None,
) -> Dict[Tuple[str, str], FeatureSet]:
    ws = workspace(config)
    model = load_model(ws)
    checksum = model.checksum()
    timings: Dict[str, Dict[str, float]] = _load_timings(ws)
    samples = config["evaluation"]["timing_samples"]
    extracted: Dict[Tuple[str, str], FeatureSet] = {}
    reference = lid_reference(config, ws, model) if "lid" in selected_detectors(detectors) else None
    for cause in selected_causes(config, causes):
        setup = load_setup(ws, cause, checksum)
        for detector in selected_detectors(detectors):
            if detector == "gran":
                features, spent = gran.extract_setup(model, setup, config["gran"]["sigma"])
            else:
                features, spent = lid.extract_setup(model, setup, reference)
            ws.write("features", ws.features(detector, cause), features.to_doc())
            timings.setdefault(detector, {})[cause] = median_timings({cause: spent}, samples)[cause]
            extracted[(detector, cause)] = features
    safe_json_dump(timings, ws.timings)
    ws.write_text(ws.path("runtime.csv"), render_runtime_csv(timings))
    return extracted


def _load_timings(ws: Workspace) -> Dict[str, Dict[str, float]]:
    if not os.path.exists(ws.timings):
        return {}
    return load_json(ws.timings)


def load_features(ws: Workspace, detector: str, cause: str, checksum: str) -> FeatureSet:
    return FeatureSet.from_doc(ws.read("features", ws.features(detector, cause), model_checksum=checksum))


# --------------------------------------------------------------------- fit


def fit_stage(
    config: Dict[str, Any],
    detectors: Optional[Sequence[str]] = None,
    causes: Optional[Sequence[str]] = None,
) -> Dict[Tuple[str, str], DetectorHead]:
    ws = workspace(config)
    model = load_model(ws)
    checksum = model.checksum()
    opts = config["detector"]
    heads: Dict[Tuple[str, str], DetectorHead] = {}
    for cause in selected_causes(config, causes):
        for detector in selected_detectors(detectors):
            features = load_features(ws, detector, cause, checksum)
            head = fit_feature_set(
                features,
                l2=opts["l2"],
                max_iterations=opts["max_iterations"],
                tolerance=opts["tolerance"],
                seed=seed_for(config, f"detector/{detector}/{cause}"),
            )
            ws.write("detector", ws.detector(detector, cause), head.to_doc())
            heads[(detector, cause)] = head
    return heads


def load_head(ws: Workspace, detector: str, cause: str, checksum: str) -> DetectorHead:
    path = ws.detector(detector, cause)
    head = DetectorHead.from_doc(ws.read("detector", path, model_checksum=checksum))
    head.check_model(checksum, path)
    return head


# ---------------------------------------------------------------- evaluate


def evaluate_stage(
    config: Dict[str, Any],
    detectors: Optional[Sequence[str]] = None,
    causes: Optional[Sequence[str]] = None,
) -> EvalReport:
    """Score each cell's test partition and write ``evaluation.json`` and the reports."""

    ws = workspace(config)
    model = load_model(ws)
    checksum = model.checksum()
    cells: List[EvalCell] = []
    for cause in selected_causes(config, causes):
        for detector in selected_detectors(detectors):
            features = load_features(ws, detector, cause, checksum)
            head = load_head(ws, detector, cause, checksum)
            stored = 0
            if detector == "lid":
                stored = ws.read("lid_reference", ws.lid_reference(), model_checksum=checksum)["stored_values"]
            cell, scores = evaluate_cell(config["dataset"], features, head, stored)
            cells.append(cell)
            if config["evaluation"].get("roc_points"):
                test = features.select("test")
                ws.write_text(ws.roc(detector, cause), render_roc_csv(roc_points(scores, test.labels)))
    report = EvalReport(config["dataset"], ws.fingerprint("evaluation"), cells)
    ws.write("evaluation", ws.evaluation, report.to_doc())
    write_reports(ws, report)
    return report


def write_reports(ws: Workspace, report: EvalReport) -> None:
    ws.write_text(ws.path("report.csv"), report.to_csv())
    ws.write_text(ws.path("report.txt"), report.to_table())


def report_stage(config: Dict[str, Any]) -> EvalReport:
    """Re-render the reports from ``evaluation.json`` without recomputation."""

    ws = workspace(config)
    report = EvalReport.from_doc(ws.read("evaluation", ws.evaluation))
    write_reports(ws, report)
    return report


def run_pipeline(config: Dict[str, Any], detectors: Optional[Sequence[str]] = None) -> EvalReport:
    train_stage(config)
    attack_stage(config)
    build_setups_stage(config)
    extract_stage(config, detectors)
    fit_stage(config, detectors)
    return evaluate_stage(config, detectors)
