"""Accuracy / F1 scoring and the per-run metrics record."""
import csv
from dataclasses import asdict, dataclass

import numpy as np

from fdlora.errors import ContractError

CSV_HEADER = ("run_id", "client_id", "round", "accuracy", "f1", "loss", "bytes_communicated")


@dataclass(frozen=True)
class Scores:
    accuracy: float
    f1: float
    f1_degenerate: bool = False


def _binary_f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0, True
    return 2 * tp / denom, False


def score_predictions(y_true, y_pred, num_classes=None):
    """Accuracy plus F1: binary (class 1 positive) for two classes, macro otherwise.

    F1 of a class that is neither present nor predicted is defined as 0 and
    reported through ``f1_degenerate``.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ContractError("cannot score an empty test set")
    if y_true.shape != y_pred.shape:
        raise ContractError(f"{y_true.size} labels vs {y_pred.size} predictions")
    if num_classes is None:
        num_classes = int(max(y_true.max(), y_pred.max())) + 1
    acc = float(np.mean(y_true == y_pred))
    if num_classes <= 2:
        tp = int(np.sum((y_pred == 1) & (y_true == 1)))
        fp = int(np.sum((y_pred == 1) & (y_true != 1)))
        fn = int(np.sum((y_pred != 1) & (y_true == 1)))
        f1, degenerate = _binary_f1(tp, fp, fn)
        return Scores(acc, f1, degenerate)
    present = np.union1d(np.unique(y_true), np.unique(y_pred))
    f1s = []
    for c in present:
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        f1s.append(_binary_f1(tp, fp, fn)[0])
    return Scores(acc, float(np.mean(f1s)))


def evaluate(model, adapters, test, num_classes=None):
    """Score ``model`` with ``adapters`` on a test dataset; returns (accuracy, f1)."""
    if len(test) == 0:
        raise ContractError("cannot evaluate on an empty test set")
    s = score_predictions(test.y, model.predict(test.x, adapters),
                          num_classes or model.num_classes)
    return s.accuracy, s.f1


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    client_id: str
    round: int
    accuracy: float
    f1: float
    loss: float
    bytes_communicated: int

    def __post_init__(self):
        for name in ("accuracy", "f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")

    def row(self):
        d = asdict(self)
        return [d[k] for k in CSV_HEADER]


def write_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.row()])


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CSV_HEADER:
        raise ContractError(f"unexpected metrics header {rows[0]}")
    out = []
    for r in rows[1:]:
        out.append(
            MetricsRecord(r[0], r[1], int(r[2]), float(r[3]), float(r[4]), float(r[5]), int(r[6]))
        )
    return out
