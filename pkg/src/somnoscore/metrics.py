"""Confusion matrices and the agreement metrics derived from them.

Orientation: ``counts[predicted][true]`` (rows = network output, columns =
ground truth), classes in the order Awake, N1, N2, N3, REM.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import BadArg, Degenerate, FormatError, NoData
from .sigdata import NUM_CLASSES, STAGE_NAMES

ORIENTATION = "rows=predicted,cols=truth"


class ConfusionMatrix:
    def __init__(self, counts=None, n_classes: int = NUM_CLASSES):
        if counts is None:
            counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        counts = np.array(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise BadArg(f"confusion matrix must be square, got {counts.shape}")
        if np.any(counts < 0):
            raise BadArg("confusion counts must be non-negative")
        self.counts = counts

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, predicted: int, true: int) -> "ConfusionMatrix":
        n = self.n_classes
        if not (0 <= predicted < n and 0 <= true < n):
            raise BadArg(f"class indices must be in 0..{n - 1}: ({predicted}, {true})")
        self.counts[predicted, true] += 1
        return self

    def update(self, predicted: Iterable[int], true: Iterable[int]) -> "ConfusionMatrix":
        p = np.asarray(list(predicted) if not isinstance(predicted, np.ndarray) else predicted)
        t = np.asarray(list(true) if not isinstance(true, np.ndarray) else true)
        if p.shape != t.shape:
            raise BadArg("predicted and true sequences differ in length")
        n = self.n_classes
        if p.size and (p.min() < 0 or p.max() >= n or t.min() < 0 or t.max() >= n):
            raise BadArg(f"class indices must be in 0..{n - 1}")
        np.add.at(self.counts, (p.astype(np.int64), t.astype(np.int64)), 1)
        return self

    @classmethod
    def from_pairs(cls, predicted, true, n_classes: int = NUM_CLASSES) -> "ConfusionMatrix":
        return cls(n_classes=n_classes).update(predicted, true)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    __add__ = merge

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.counts.tolist()})"


def _require_data(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total <= 0:
        raise NoData("confusion matrix is empty")
    return cm.counts.astype(np.float64)


def accuracy(cm: ConfusionMatrix) -> float:
    c = _require_data(cm)
    return float(np.trace(c) / c.sum())


def kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa, ``(p0 - pe) / (1 - pe)``."""
    c = _require_data(cm)
    n = c.sum()
    p0 = np.trace(c) / n
    pe = float(np.dot(c.sum(axis=1), c.sum(axis=0)) / (n * n))
    if pe >= 1.0:
        raise Degenerate("chance agreement is 1; kappa undefined", float(p0))
    return float((p0 - pe) / (1.0 - pe))


@dataclass
class PerClass:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    degenerate_precision: np.ndarray  # no predictions of the class
    degenerate_recall: np.ndarray  # class absent from ground truth


def per_class(cm: ConfusionMatrix) -> PerClass:
    c = _require_data(cm)
    diag = np.diag(c)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    ppv = np.divide(diag, rows, out=np.zeros_like(diag), where=rows > 0)
    tpr = np.divide(diag, cols, out=np.zeros_like(diag), where=cols > 0)
    s = ppv + tpr
    f1 = np.divide(2 * ppv * tpr, s, out=np.zeros_like(diag), where=s > 0)
    return PerClass(ppv, tpr, f1, rows == 0, cols == 0)


def precision_recall(cm: ConfusionMatrix) -> tuple[np.ndarray, np.ndarray]:
    pc = per_class(cm)
    return pc.precision, pc.recall


def f1_macro(cm: ConfusionMatrix) -> float:
    return float(np.mean(per_class(cm).f1))


@dataclass
class MetricsReport:
    accuracy: float
    kappa: float | None
    f1_macro: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    total: int
    degenerate_classes: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def report(cm: ConfusionMatrix) -> MetricsReport:
    pc = per_class(cm)
    try:
        k = kappa(cm)
    except Degenerate:
        k = None
    names = STAGE_NAMES if cm.n_classes == NUM_CLASSES else [str(i) for i in range(cm.n_classes)]
    degenerate = [names[i] for i in range(cm.n_classes)
                  if pc.degenerate_precision[i] or pc.degenerate_recall[i]]
    return MetricsReport(
        accuracy=accuracy(cm),
        kappa=k,
        f1_macro=float(np.mean(pc.f1)),
        precision=pc.precision.tolist(),
        recall=pc.recall.tolist(),
        f1=pc.f1.tolist(),
        total=cm.total,
        degenerate_classes=degenerate,
    )


# ---------------------------------------------------------------------------
# files


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def metrics_json(cm: ConfusionMatrix, extra: dict | None = None) -> str:
    doc = {
        "orientation": ORIENTATION,
        "classes": STAGE_NAMES[: cm.n_classes],
        "confusion": cm.counts.tolist(),
        "metrics": report(cm).to_dict(),
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_metrics(cm: ConfusionMatrix, directory, extra: dict | None = None) -> None:
    """Write ``metrics.json`` and ``confusion.csv`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _atomic_text(d / "metrics.json", metrics_json(cm, extra))
    _atomic_text(d / "confusion.csv", confusion_csv(cm))


def confusion_csv(cm: ConfusionMatrix) -> str:
    names = STAGE_NAMES[: cm.n_classes]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["predicted\\truth", *names])
    for name, row in zip(names, cm.counts.tolist()):
        w.writerow([name, *row])
    return buf.getvalue()


def read_metrics(path) -> tuple[ConfusionMatrix, dict]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read metrics: {exc}", str(path)) from exc
    if doc.get("orientation") != ORIENTATION:
        raise FormatError(f"unexpected orientation {doc.get('orientation')!r}", str(path),
                          "orientation")
    try:
        return ConfusionMatrix(doc["confusion"]), doc
    except (KeyError, BadArg) as exc:
        raise FormatError(f"bad confusion matrix: {exc}", str(path), "confusion") from exc
