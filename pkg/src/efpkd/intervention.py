"""Application stage: replay stored preprocessing, detect with the global model, block attacks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from .data import (
    DatasetProfile,
    FeatureSelection,
    NormalizationStats,
    RawTable,
    encode_and_normalize,
    ingest,
)
from .fl import predict
from .nn import ModelParams, load_params

BLOCKED, PASSED = "blocked", "passed"
MALICIOUS, BENIGN = "malicious", "benign"


class StageError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectionEvent:
    record_index: int
    predicted_class: int
    verdict: str
    slot: int = 0


def apply_rule(event: DetectionEvent) -> str:
    """If the verdict is malicious then block, otherwise let the record pass."""
    return BLOCKED if event.verdict == MALICIOUS else PASSED


@dataclass
class BlockLog:
    entries: list[tuple[int, int, str, str]] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        out = {BLOCKED: 0, PASSED: 0}
        for *_, action in self.entries:
            out[action] += 1
        return out

    def write_csv(self, path: str | Path, class_names: list[str] | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["record_index", "predicted_class", "verdict", "action"])
            for idx, cls, verdict, action in self.entries:
                w.writerow([idx, class_names[cls] if class_names else cls, verdict, action])


def events_from_predictions(pred: np.ndarray, mode: str, normal_index: int) -> list[DetectionEvent]:
    anomalous = M.is_anomaly(pred, mode, normal_index)
    return [
        DetectionEvent(i, int(p), MALICIOUS if a else BENIGN, slot=i)
        for i, (p, a) in enumerate(zip(pred, anomalous))
    ]


def block_log(events: list[DetectionEvent]) -> BlockLog:
    return BlockLog([(e.record_index, e.predicted_class, e.verdict, apply_rule(e)) for e in events])


@dataclass
class Preprocessing:
    """Everything the application stage needs to featurise new traffic the way training did."""

    stats: NormalizationStats
    selection: FeatureSelection

    def to_dict(self) -> dict:
        return {"stats": self.stats.to_dict(), "selection": self.selection.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessing":
        return cls(NormalizationStats.from_dict(d["stats"]), FeatureSelection.from_dict(d["selection"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Preprocessing":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class StageResult:
    log: BlockLog
    predictions: np.ndarray
    metrics: dict | None  # None when the input has no ground truth


def run_application_stage(
    global_model: ModelParams,
    preprocessing: Preprocessing,
    new_data: str | Path | RawTable,
    profile: DatasetProfile | None = None,
) -> StageResult:
    """Ingest new traffic, replay stored selection/scaling, detect, and block."""
    if isinstance(new_data, RawTable):
        table = new_data
    else:
        if profile is None:
            raise StageError("a dataset profile is needed to read new data")
        table = ingest(new_data, profile)
    stats, selection = preprocessing.stats, preprocessing.selection
    feature_cols = table.feature_columns
    if feature_cols != stats.feature_names:
        raise StageError(
            f"new data has {len(feature_cols)} feature columns, stored preprocessing expects {len(stats.feature_names)}"
        )
    if len(selection.selected_indices) != global_model.spec.n_features:
        raise StageError("stored feature selection does not match the model input width")
    has_truth = all(c in table.columns for c in table.profile.label_columns)
    if has_truth:
        ds = encode_and_normalize(table, stats.mode, stats)
        X, truth = ds.features, ds.labels
    else:
        X = _features_only(table, stats)
        truth = None
    X = X[:, list(selection.selected_indices)]
    pred = predict(global_model, X)
    blog = block_log(events_from_predictions(pred, stats.mode, stats.normal_index))
    bundle = None
    if truth is not None:
        bundle = M.evaluate(pred, truth, stats.mode, len(stats.class_names), stats.normal_index)
    return StageResult(blog, pred, bundle)


def _features_only(table: RawTable, stats: NormalizationStats) -> np.ndarray:
    # encode_and_normalize needs labels; reuse it with a placeholder label column
    from dataclasses import replace

    label_col = table.profile.label_column
    cells = np.column_stack([table.cells, np.full(table.n_rows, table.profile.normal_value)])
    faux = RawTable(table.columns + [label_col], cells, {**table.kinds, label_col: "categorical"},
                    replace(table.profile, binary_column=None))
    return encode_and_normalize(faux, stats.mode, stats).features


def load_model_bundle(model_path: str | Path, preprocessing_path: str | Path) -> tuple[ModelParams, Preprocessing]:
    params, _ = load_params(model_path)
    return params, Preprocessing.load(preprocessing_path)
