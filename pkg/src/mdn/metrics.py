"""Group-level evaluation: per-group accuracy, unbiased / worst-group /
bias-conflict accuracy and an equalized-odds difference.

EOD here is the one-vs-rest mean over target classes of
``0.5 * (TPR gap + FPR gap)`` between bias classes, in percentage points.
For more than two bias classes the gap is max minus min across them.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DataFormatError


@dataclass
class PredictionLog:
    y_true: np.ndarray
    b: np.ndarray
    y_pred: np.ndarray

    def __post_init__(self):
        self.y_true = np.asarray(self.y_true, dtype=np.int64)
        self.b = np.asarray(self.b, dtype=np.int64)
        self.y_pred = np.asarray(self.y_pred, dtype=np.int64)
        if not (self.y_true.shape == self.b.shape == self.y_pred.shape) or self.y_true.ndim != 1:
            raise DataError("prediction log columns must be equal-length vectors")

    def __len__(self):
        return self.y_true.size

    def check(self, C, B):
        if len(self) == 0:
            raise DataError("empty prediction log")
        for name, v, hi in (("y_true", self.y_true, C), ("y_pred", self.y_pred, C), ("b", self.b, B)):
            if v.min() < 0 or v.max() >= hi:
                raise DataError(f"{name} outside [0, {hi})")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("y_true,b,y_pred\n")
        for row in zip(self.y_true.tolist(), self.b.tolist(), self.y_pred.tolist()):
            buf.write("%d,%d,%d\n" % row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PredictionLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [h.strip() for h in rows[0]] != ["y_true", "b", "y_pred"]:
            raise DataFormatError("prediction log must start with header y_true,b,y_pred")
        try:
            data = np.array([[int(v) for v in r] for r in rows[1:] if r], dtype=np.int64)
        except ValueError as exc:
            raise DataFormatError(f"bad prediction log row: {exc}") from exc
        data = data.reshape(-1, 3)
        return cls(data[:, 0], data[:, 1], data[:, 2])

    def save(self, path):
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path) -> "PredictionLog":
        return cls.from_csv(Path(path).read_text())


def per_group_accuracy(log: PredictionLog, C: int, B: int):
    """C x B accuracy matrix (NaN where unsupported) and the support counts."""
    log.check(C, B)
    support = np.zeros((C, B), dtype=np.int64)
    correct = np.zeros((C, B), dtype=np.int64)
    np.add.at(support, (log.y_true, log.b), 1)
    np.add.at(correct, (log.y_true, log.b), (log.y_true == log.y_pred).astype(np.int64))
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(support > 0, correct / np.maximum(support, 1), np.nan)
    return acc, support


@dataclass
class MetricsReport:
    per_group_acc: np.ndarray
    support: np.ndarray
    unbiased_acc: float
    worst_group_acc: float
    bias_conflict_acc: float | None
    eod: float
    epoch: int = -1
    split: str = "test"
    eod_flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(a):
            return [[None if np.isnan(v) else float(v) for v in row] for row in a]
        return {
            "split": self.split,
            "epoch": self.epoch,
            "unbiased_acc": self.unbiased_acc,
            "worst_group_acc": self.worst_group_acc,
            "bias_conflict_acc": self.bias_conflict_acc,
            "eod": self.eod,
            "per_group_acc": clean(self.per_group_acc),
            "support": self.support.tolist(),
        }

    @property
    def spread(self) -> float:
        acc = self.per_group_acc[self.support > 0]
        return float(acc.max() - acc.min())


def aggregate(per_group: np.ndarray, support: np.ndarray, aligned: np.ndarray) -> dict:
    """Unbiased (mean), worst (min) and bias-conflict (mean of non-aligned cells) accuracy.

    Only supported cells enter. ``bias_conflict_acc`` is None when no
    supported cell is conflicting.
    """
    ok = support > 0
    vals = per_group[ok]
    conf = per_group[ok & ~np.asarray(aligned, dtype=bool)]
    return {
        "unbiased_acc": float(vals.mean()),
        "worst_group_acc": float(vals.min()),
        "bias_conflict_acc": float(conf.mean()) if conf.size else None,
    }


def eod_details(log: PredictionLog, C: int, B: int):
    """EOD plus a list of excluded (class, bias, rate) terms."""
    log.check(C, B)
    flags = []
    gaps = []
    for c in range(C):
        pos_true = log.y_true == c
        pos_pred = log.y_pred == c
        terms = []
        for rate, mask in (("tpr", pos_true), ("fpr", ~pos_true)):
            rates = []
            for b in range(B):
                sel = mask & (log.b == b)
                if not sel.any():
                    flags.append((c, b, rate))
                    continue
                rates.append(pos_pred[sel].mean())
            if len(rates) == B:
                terms.append(max(rates) - min(rates))
        if len(terms) == 2:
            gaps.append(0.5 * (terms[0] + terms[1]))
        elif terms:
            gaps.append(terms[0])
    value = 100.0 * float(np.mean(gaps)) if gaps else float("nan")
    return value, flags


def eod(log: PredictionLog, C: int, B: int) -> float:
    return eod_details(log, C, B)[0]


def evaluate_log(log: PredictionLog, C: int, B: int, aligned: np.ndarray,
                 epoch: int = -1, split: str = "test") -> MetricsReport:
    acc, support = per_group_accuracy(log, C, B)
    agg = aggregate(acc, support, aligned)
    e, flags = eod_details(log, C, B)
    return MetricsReport(acc, support, eod=e, epoch=epoch, split=split, eod_flags=flags, **agg)
