"""Classification metrics: confusion matrix, per-class precision/recall/F1,
one-vs-rest ROC curves and the report files written after evaluation.

Class order is fixed as ``left, right, both``.  Labels may be given as class
names or as integer indices into that order.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import CLASSES, pgm
from .errors import ContractError, ParseError

K = len(CLASSES)


def encode_labels(labels):
    """Class names or indices -> int64 indices."""
    arr = np.asarray(labels)
    if arr.dtype.kind in "USO":
        lookup = {c: i for i, c in enumerate(CLASSES)}
        try:
            return np.array([lookup[str(v)] for v in arr.ravel()], dtype=np.int64).reshape(arr.shape)
        except KeyError as exc:
            raise ContractError(f"unknown class label {exc.args[0]!r}") from None
    if arr.size and arr.dtype.kind not in "iu":
        raise ContractError("labels must be class names or integer indices")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= K):
        raise ContractError(f"label indices must lie in [0, {K})")
    return arr


def confusion(preds, labels):
    """counts[i, j] = number of samples with true class i predicted as j."""
    preds, labels = encode_labels(preds), encode_labels(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ContractError(f"preds and labels must be 1-D of equal length, got {preds.shape} and {labels.shape}")
    if preds.size == 0:
        raise ContractError("need at least one sample")
    return np.bincount(labels * K + preds, minlength=K * K).reshape(K, K)


def normalize_rows(counts):
    counts = np.asarray(counts, dtype=np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


def prf1(counts):
    """Per-class precision, recall, F1 plus accuracy and macro-F1.

    Empty denominators give 0 and add a message to ``warnings``.
    """
    counts = np.asarray(counts)
    if counts.shape != (K, K) or np.any(counts < 0):
        raise ContractError("confusion must be a non-negative 3x3 count matrix")
    diag = np.diag(counts).astype(np.float64)
    col = counts.sum(axis=0).astype(np.float64)
    row = counts.sum(axis=1).astype(np.float64)
    warnings = []
    for i, c in enumerate(CLASSES):
        if col[i] == 0:
            warnings.append(f"precision of {c} is undefined (no predictions); reported as 0")
        if row[i] == 0:
            warnings.append(f"recall of {c} is undefined (no samples); reported as 0")
    precision = np.divide(diag, col, out=np.zeros(K), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros(K), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(K), where=denom > 0)
    total = counts.sum()
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "accuracy": float(diag.sum() / total) if total else 0.0,
        "macro_f1": float(f1.mean()),
        "warnings": warnings,
    }


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc_curve(scores, positive):
    """ROC of one score column against a boolean positive mask.

    Thresholds are ``inf`` followed by the distinct scores in decreasing order;
    a sample is called positive when its score is >= the threshold, so tied
    scores move together in one step.  Returns ``None`` when the mask has no
    positives or no negatives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positive[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0, tp[last]] / n_pos
    fpr = np.r_[0, fp[last]] / n_neg
    thresholds = np.r_[np.inf, s[last]]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2)
    return RocCurve(thresholds, fpr, tpr, auc)


def roc_ovr(scores, labels):
    """One-vs-rest ROC per class; absent (``None``) where a class has no positives or negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = encode_labels(labels)
    if scores.ndim != 2 or scores.shape != (labels.size, K):
        raise ContractError(f"scores must have shape ({labels.size}, {K}), got {scores.shape}")
    if labels.size < 2:
        raise ContractError("ROC needs at least two samples")
    return {c: roc_curve(scores[:, i], labels == i) for i, c in enumerate(CLASSES)}


def mann_whitney_auc(scores, positive):
    """Fraction of (positive, negative) pairs ranked correctly, ties counting 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    pos, neg = scores[positive], scores[~positive]
    if pos.size == 0 or neg.size == 0:
        return None
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class MetricsReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    confusion: np.ndarray
    confusion_normalized: np.ndarray
    roc: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def n(self):
        return int(self.confusion.sum())

    @property
    def auc(self):
        return {c: (None if r is None else r.auc) for c, r in self.roc.items()}


def evaluate_predictions(labels, preds, scores=None):
    """Assemble a ``MetricsReport``; ``scores`` ([n, 3]) enables ROC curves."""
    counts = confusion(preds, labels)
    m = prf1(counts)
    roc = {}
    if scores is not None:
        roc = roc_ovr(scores, labels) if counts.sum() >= 2 else {c: None for c in CLASSES}
    return MetricsReport(m["accuracy"], m["precision"], m["recall"], m["f1"], m["macro_f1"], counts,
                         normalize_rows(counts), roc, m["warnings"])


def _title(c):
    return c.capitalize()


def _write(path, lines):
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report file: {exc.strerror}", str(path)) from exc


def write_report(report, directory):
    """Write the CSV files and a confusion heat tile into ``directory``."""
    if report.n == 0:
        raise ContractError("refusing to write a report for zero test samples")
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    lines = ["class,precision,recall,f1"]
    for i, c in enumerate(CLASSES):
        lines.append(f"{_title(c)},{report.precision[i]:.4f},{report.recall[i]:.4f},{report.f1[i]:.4f}")
    lines.append(f"Macro,{report.precision.mean():.4f},{report.recall.mean():.4f},{report.macro_f1:.4f}")
    lines.append(f"Accuracy,{report.accuracy:.4f},,")
    _write(directory / "metrics.csv", lines)

    header = "true," + ",".join(CLASSES)
    _write(directory / "confusion.csv",
           [header] + [f"{c}," + ",".join(str(int(v)) for v in report.confusion[i]) for i, c in enumerate(CLASSES)])
    _write(directory / "confusion_normalized.csv",
           [header] + [f"{c}," + ",".join(f"{v:.6f}" for v in report.confusion_normalized[i])
                       for i, c in enumerate(CLASSES)])
    auc_lines = ["class,auc"]
    for c in CLASSES:
        curve = report.roc.get(c)
        rows = ["threshold,fpr,tpr"]
        if curve is not None:
            rows += [f"{t:.6f},{f:.6f},{p:.6f}" for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr)]
        _write(directory / f"roc_{c}.csv", rows)
        auc_lines.append(f"{c}," + ("NA" if curve is None else f"{curve.auc:.6f}"))
    _write(directory / "auc.csv", auc_lines)

    # darker = larger fraction; each cell drawn as a 32x32 block
    heat = np.floor((1.0 - report.confusion_normalized) * 255 + 0.5).astype(np.uint8)
    pgm.write_pixels(directory / "confusion_normalized.pgm", np.kron(heat, np.ones((32, 32), dtype=np.uint8)))
    return directory


def _read_csv(path):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read report file: {exc.strerror}", str(path)) from exc
    if not lines:
        raise ParseError(f"{path}: empty file")
    return [line.split(",") for line in lines[1:]]


def read_report(directory):
    """Parse the files written by ``write_report`` back into plain values."""
    directory = Path(directory)
    rows = {r[0]: r[1:] for r in _read_csv(directory / "metrics.csv")}
    out = {
        "precision": np.array([float(rows[_title(c)][0]) for c in CLASSES]),
        "recall": np.array([float(rows[_title(c)][1]) for c in CLASSES]),
        "f1": np.array([float(rows[_title(c)][2]) for c in CLASSES]),
        "macro_f1": float(rows["Macro"][2]),
        "accuracy": float(rows["Accuracy"][0]),
        "confusion": np.array([[int(v) for v in r[1:]] for r in _read_csv(directory / "confusion.csv")]),
        "confusion_normalized": np.array([[float(v) for v in r[1:]]
                                          for r in _read_csv(directory / "confusion_normalized.csv")]),
        "auc": {r[0]: (None if r[1] == "NA" else float(r[1])) for r in _read_csv(directory / "auc.csv")},
    }
    out["roc"] = {c: np.array([[float(v) for v in r] for r in _read_csv(directory / f"roc_{c}.csv")]).reshape(-1, 3)
                  for c in CLASSES}
    return out
