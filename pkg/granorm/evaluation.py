"""AUC-ROC, resource accounting and report rendering."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .detector import DetectorHead, FeatureSet
from .errors import DetectorError
from .schema import CAUSES, DETECTORS

logger = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "dataset",
    "cause",
    "detector",
    "auc",
    "train_samples",
    "test_samples",
    "learned_parameters",
    "stored_values",
    "total_parameters",
)

CAUSE_TITLES = {
    "fgsm": "FGSM",
    "bim_a": "BIM-a",
    "bim_b": "BIM-b",
    "jsma": "JSMA",
    "cw": "CW",
    "wrong": "Wrong",
    "noisy": "Noisy",
}


def _check_binary(scores: Sequence[float], labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise DetectorError(f"{len(scores)} scores for {len(labels)} labels")
    if not np.isin(labels, (0, 1)).all():
        raise DetectorError("labels must be 0 or 1")
    if labels.sum() == 0 or labels.sum() == len(labels):
        raise DetectorError("AUC needs both positive and negative samples")
    return scores, labels.astype(bool)


def auc_roc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: ``P(score_pos > score_neg) + P(tie) / 2``.

    Midranks handle ties; the rank sum is an exact integer or half-integer,
    so the statistic matches pair counting exactly.
    """

    scores, positive = _check_binary(scores, labels)
    ranks = rankdata(scores, method="average")
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> List[Tuple[float, float, float]]:
    """``(threshold, fpr, tpr)`` at every distinct score, highest threshold first."""

    scores, positive = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    tps = np.cumsum(positive[order])
    fps = np.cumsum(~positive[order])
    last = np.r_[np.flatnonzero(np.diff(sorted_scores)), len(sorted_scores) - 1]
    points = [(float("inf"), 0.0, 0.0)]
    for index in last:
        points.append(
            (float(sorted_scores[index]), float(fps[index] / fps[-1]), float(tps[index] / tps[-1]))
        )
    return points


@dataclass(frozen=True)
class ParameterCount:
    learned: int
    stored: int

    @property
    def total(self) -> int:
        return self.learned + self.stored


def count_parameters(head: DetectorHead, stored: int = 0) -> ParameterCount:
    """Learned head parameters (``n + 1``) and auxiliary stored values.

    GraN stores nothing besides its head; LID passes the size of its
    reference set (``100 x input size`` for raw images).
    """

    return ParameterCount(learned=head.parameter_count, stored=int(stored))


@dataclass
class EvalCell:
    dataset: str
    cause: str
    detector: str
    auc: float
    train_samples: int
    test_samples: int
    learned_parameters: int
    stored_values: int

    @property
    def total_parameters(self) -> int:
        return self.learned_parameters + self.stored_values

    def row(self) -> Dict[str, Any]:
        data = asdict(self)
        data["auc"] = f"{self.auc:.2f}"
        data["total_parameters"] = self.total_parameters
        return data


@dataclass
class EvalReport:
    """Table of AUC percentages per (cause, detector) plus resource accounting."""

    dataset: str
    fingerprint: str
    cells: List[EvalCell] = field(default_factory=list)

    def cell(self, cause: str, detector: str) -> Optional[EvalCell]:
        for cell in self.cells:
            if cell.cause == cause and cell.detector == detector:
                return cell
        return None

    def to_doc(self) -> Dict[str, Any]:
        return {"dataset": self.dataset, "cells": [asdict(c) for c in self.cells]}

    @classmethod
    def from_doc(cls, doc: Dict[str, Any]) -> "EvalReport":
        return cls(
            dataset=doc["dataset"],
            fingerprint=doc["fingerprint"],
            cells=[EvalCell(**cell) for cell in doc["cells"]],
        )

    def to_csv(self) -> str:
        buffer = io.StringIO()
        buffer.write(f"# fingerprint: {self.fingerprint}\n")
        writer = csv.DictWriter(buffer, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for cell in _ordered(self.cells):
            writer.writerow(cell.row())
        return buffer.getvalue()

    def to_table(self) -> str:
        detectors = [d for d in DETECTORS if any(c.detector == d for c in self.cells)]
        causes = [c for c in CAUSES if any(cell.cause == c for cell in self.cells)]
        header = ["Cause"] + [d.upper() if d == "lid" else "GraN" for d in detectors]
        rows = [header]
        for cause in causes:
            row = [CAUSE_TITLES[cause]]
            for detector in detectors:
                cell = self.cell(cause, detector)
                row.append("-" if cell is None else f"{cell.auc:.2f}")
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = [f"AUC-ROC [%] on {self.dataset}", ""]
        for index, row in enumerate(rows):
            lines.append("  ".join(value.rjust(width) if i else value.ljust(width) for i, (value, width) in enumerate(zip(row, widths))))
            if index == 0:
                lines.append("  ".join("-" * width for width in widths))
        lines.append("")
        lines.append("Parameters (learned + stored = total)")
        for detector in detectors:
            cell = next(c for c in _ordered(self.cells) if c.detector == detector)
            name = "LID" if detector == "lid" else "GraN"
            lines.append(f"  {name}: {cell.learned_parameters} + {cell.stored_values} = {cell.total_parameters}")
        lines.append("")
        lines.append(f"fingerprint: {self.fingerprint}")
        return "\n".join(lines) + "\n"


def _ordered(cells: Iterable[EvalCell]) -> List[EvalCell]:
    return sorted(cells, key=lambda c: (CAUSES.index(c.cause), DETECTORS.index(c.detector)))


def evaluate_cell(dataset: str, features: FeatureSet, head: DetectorHead, stored: int = 0) -> Tuple[EvalCell, np.ndarray]:
    """Score the test partition; returns the cell and the test scores."""

    test = features.select("test")
    scores = np.atleast_1d(head.score(test.values))
    auc = 100.0 * auc_roc(scores, test.labels)
    counts = count_parameters(head, stored)
    cell = EvalCell(
        dataset=dataset,
        cause=features.cause,
        detector=features.detector,
        auc=round(auc, 2),
        train_samples=int(np.sum(features.partition == "train")),
        test_samples=len(test.labels),
        learned_parameters=counts.learned,
        stored_values=counts.stored,
    )
    logger.info("%s/%s: AUC %.2f%% on %d test samples", features.detector, features.cause, cell.auc, cell.test_samples)
    return cell, scores


def median_timings(timings: Dict[str, List[float]], samples: int) -> Dict[str, float]:
    """Median per-sample seconds over the first *samples* timings, skipping one warm-up call."""

    out: Dict[str, float] = {}
    for key, values in timings.items():
        window = values[1:samples + 1] if len(values) > 1 else values
        out[key] = float(np.median(window)) if window else float("nan")
    return out


def render_runtime_csv(medians: Dict[str, Dict[str, float]]) -> str:
    """``cause,detector,median_seconds`` rows; kept apart from the deterministic report."""

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["cause", "detector", "median_seconds"])
    for cause in CAUSES:
        for detector in DETECTORS:
            value = medians.get(detector, {}).get(cause)
            if value is not None:
                writer.writerow([cause, detector, f"{value:.6g}"])
    return buffer.getvalue()


def render_roc_csv(points: Sequence[Tuple[float, float, float]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["threshold", "fpr", "tpr"])
    for threshold, fpr, tpr in points:
        writer.writerow([f"{threshold:.10g}", f"{fpr:.10g}", f"{tpr:.10g}"])
    return buffer.getvalue()
