"""Detection metrics, overall detection correctness (ODC) and the cost calculators.

Anomaly is the positive class.  In binary mode label 0 is anomaly and label 1
is normal; in multi mode every label other than ``normal_class`` is an attack.
Metrics whose denominator is zero come back as ``None`` rather than NaN.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ANOMALY, NORMAL = 0, 1


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int
    table: np.ndarray | None = None  # K x K, rows = truth, cols = prediction

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"prediction length {pred.size} != truth length {truth.size}")
    return pred, truth


def is_anomaly(labels, mode: str, normal_class: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if mode == "binary":
        return labels == ANOMALY
    if normal_class is None:
        raise ValueError("multi mode needs the index of the normal class")
    return labels != normal_class


def confusion(pred, truth, mode: str = "binary", n_classes: int | None = None, normal_class: int | None = None) -> ConfusionMatrix:
    pred, truth = _pair(pred, truth)
    if mode == "binary":
        if np.any((pred < 0) | (pred > 1)) or np.any((truth < 0) | (truth > 1)):
            raise ValueError("binary labels must be 0 (anomaly) or 1 (normal)")
        k = 2
    elif mode == "multi":
        k = n_classes if n_classes is not None else int(max(pred.max(initial=0), truth.max(initial=0))) + 1
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if np.any((pred < 0) | (pred >= k)) or np.any((truth < 0) | (truth >= k)):
        raise ValueError(f"labels must lie in [0, {k})")
    table = np.zeros((k, k), dtype=np.int64)
    np.add.at(table, (truth, pred), 1)
    pa, ta = is_anomaly(pred, mode, normal_class), is_anomaly(truth, mode, normal_class)
    return ConfusionMatrix(
        tp=int(np.sum(pa & ta)),
        tn=int(np.sum(~pa & ~ta)),
        fp=int(np.sum(pa & ~ta)),
        fn=int(np.sum(~pa & ta)),
        table=table,
    )


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def binary_metrics(cm: ConfusionMatrix) -> dict[str, float | None]:
    tp, tn, fp, fn = cm.tp, cm.tn, cm.fp, cm.fn
    return {
        "accuracy": _ratio(tp + tn, tp + tn + fp + fn),
        "precision": _ratio(tp, tp + fp),
        "recall": _ratio(tp, tp + fn),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "far": _ratio(fp, tn + fp),
    }


AVERAGED = {"accuracy": "AA", "precision": "AP", "recall": "AR", "f1": "AFS"}


def averaged_metrics(per_client: Sequence[dict], alphas: Sequence[int]) -> dict:
    """Availability-weighted means over participating clients.

    Absent entries are skipped; ``skipped`` records how many per metric.
    """
    if len(per_client) != len(alphas):
        raise ValueError("one alpha per client is required")
    if not any(alphas):
        raise ValueError("no participating clients")
    out: dict = {"skipped": {}}
    for key, short in AVERAGED.items():
        num = den = 0.0
        skipped = 0
        for metrics, alpha in zip(per_client, alphas):
            value = metrics.get(key)
            if value is None:
                skipped += alpha != 0
                continue
            num += alpha * value
            den += alpha
        out[short] = _ratio(num, den)
        out["skipped"][short] = skipped
    return out


def multiclass_accuracy(pred, truth) -> float | None:
    pred, truth = _pair(pred, truth)
    return _ratio(int(np.sum(pred == truth)), pred.size)


def odc(pred, truth, mode: str = "binary", normal_class: int | None = None) -> int:
    """Correctly detected malicious plus correctly detected benign records."""
    pred, truth = _pair(pred, truth)
    pa, ta = is_anomaly(pred, mode, normal_class), is_anomaly(truth, mode, normal_class)
    return int(np.sum(pa & ta) + np.sum(~pa & ~ta))


def boundary_distance(malicious: np.ndarray, benign: np.ndarray, metric: str = "l2") -> float:
    """Mean pairwise distance between two embedding sets."""
    a = np.atleast_2d(np.asarray(malicious, dtype=np.float64))
    b = np.atleast_2d(np.asarray(benign, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0 or a.size == 0 or b.size == 0:
        raise ValueError("both embedding sets must be non-empty")
    diff = a[:, None, :] - b[None, :, :]
    if metric == "l2":
        d = np.sqrt((diff**2).sum(axis=-1))
    elif metric == "l1":
        d = np.abs(diff).sum(axis=-1)
    else:
        raise ValueError(f"unknown distance metric {metric!r}")
    return float(d.mean())


@dataclass(frozen=True)
class CostModelInput:
    n_malicious: int
    n_benign: int
    eps_dist: int
    n_servers: int

    def __post_init__(self) -> None:
        for name in ("n_malicious", "n_benign", "eps_dist", "n_servers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def cost_comparison(inp: CostModelInput) -> dict:
    """Operation counts for the pairwise boundary objective vs the ODC objective."""
    cost_boundary = inp.n_servers * (inp.n_malicious * inp.n_benign * inp.eps_dist + 2)
    cost_odc = inp.n_servers * (inp.n_malicious + inp.n_benign)
    return {"cost_boundary": cost_boundary, "cost_odc": cost_odc, "odc_cheaper": cost_odc < cost_boundary}


def evaluate(pred, truth, mode: str, n_classes: int, normal_class: int) -> dict:
    """Full metric bundle for one prediction vector."""
    cm = confusion(pred, truth, mode, n_classes, normal_class)
    out = binary_metrics(cm)
    out.update(tp=cm.tp, tn=cm.tn, fp=cm.fp, fn=cm.fn, odc=odc(pred, truth, mode, normal_class), n=cm.total)
    if mode == "multi":
        out["accuracy_collapsed"] = out["accuracy"]
        out["accuracy"] = multiclass_accuracy(pred, truth)
    return out
