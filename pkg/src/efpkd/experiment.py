"""End-to-end runs: selection, partitioning, training sweeps, application stage and report files."""

from __future__ import annotations

import contextlib
import csv
import logging
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import (
    EncodedDataset,
    FeatureSelection,
    RawTable,
    dirichlet_partition,
    encode_and_normalize,
    ingest,
    make_synthetic,
    select_features,
    subsample,
)
from .fl import RoundConfig, TrainingResult, run_training
from .intervention import Preprocessing, StageResult, run_application_stage
from .nn import save_params

log = logging.getLogger(__name__)

NA = "NA"
METRIC_KEYS = ("accuracy", "precision", "recall", "f1", "far")
AVERAGED_KEYS = ("AA", "AP", "AR", "AFS")
COUNT_KEYS = ("tp", "tn", "fp", "fn", "odc", "n")
SUMMARY_KEYS = ("accuracy", "f1", "far", "AA", "AFS", "odc")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageFailure:
        raise
    except Exception as exc:  # any failure is reported against the stage it happened in
        raise StageFailure(name, exc) from exc


@dataclass
class PreparedData:
    train_table: RawTable
    test_table: RawTable
    train: EncodedDataset
    test: EncodedDataset
    selection: FeatureSelection

    @property
    def preprocessing(self) -> Preprocessing:
        return Preprocessing(self.train.stats, self.selection)


@dataclass
class RunRecord:
    strategy: str
    seed: int
    round_config: RoundConfig
    result: TrainingResult
    final: dict
    application: StageResult | None
    wall_clock: float

    @property
    def key(self) -> str:
        return f"{self.strategy}-seed{self.seed}"


def format_value(value) -> str:
    if value is None:
        return NA
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if not np.isfinite(value):
            return NA
        return f"{float(value):.10g}"
    return str(value)


# --------------------------------------------------------------------------
# Pipeline
# --------------------------------------------------------------------------


def load_tables(cfg: ExperimentConfig) -> tuple[RawTable, RawTable]:
    profile = cfg.profile
    if cfg.dataset == "synthetic":
        train, test = make_synthetic(cfg.synthetic_train, cfg.synthetic_test, overlap=cfg.synthetic_overlap,
                                     seed=cfg.data_seed)
    else:
        train = ingest(cfg.train_path, profile)
        if cfg.test_path:
            test = ingest(cfg.test_path, profile)
        else:
            order = np.random.default_rng(cfg.data_seed).permutation(train.n_rows)
            n_test = int(round(profile.test_fraction * train.n_rows))
            test = train.take(np.sort(order[:n_test]))
            train = train.take(np.sort(order[n_test:]))
    train = train.take(subsample(train.n_rows, cfg.effective_train_cap, cfg.data_seed))
    test = test.take(subsample(test.n_rows, cfg.effective_test_cap, cfg.data_seed + 1))
    return train, test


def prepare(cfg: ExperimentConfig) -> PreparedData:
    with stage("ingest"):
        train_table, test_table = load_tables(cfg)
    with stage("encode"):
        train = encode_and_normalize(train_table, cfg.mode)
        test = encode_and_normalize(test_table, cfg.mode, train.stats)
    with stage("feature-selection"):
        d = train.features.shape[1]
        top_k = cfg.top_k if cfg.top_k is not None else (cfg.profile.top_k or d)
        selection = select_features(train.features, min(top_k, d))
        train, test = train.select(selection.selected_indices), test.select(selection.selected_indices)
    return PreparedData(train_table, test_table, train, test, selection)


def test_partition_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 0x7E57]).generate_state(1)[0])


def run_one(cfg: ExperimentConfig, data: PreparedData, strategy: str, seed: int, partition, test_shards) -> RunRecord:
    rc = cfg.round_config(strategy, seed)
    start = time.perf_counter()
    with stage(f"training[{strategy}, seed {seed}]"):
        result = run_training(data.train, partition, rc, data.test, test_shards)
    application = None
    last = result.reports[-1]
    final = dict(last.pooled)
    if result.state.model is not None:
        with stage("application"):
            application = run_application_stage(result.state.model, data.preprocessing, data.test_table)
        final = dict(application.metrics)
    for k in AVERAGED_KEYS:
        final[k] = last.averaged.get(k)
    final["global_model"] = result.state.model is not None
    final["model_bytes"] = sum(r.ledger["model_bytes_up"] + r.ledger["model_bytes_down"] for r in result.reports)
    final["prototype_bytes"] = sum(r.ledger["prototype_bytes_up"] + r.ledger["prototype_bytes_down"]
                                   for r in result.reports)
    return RunRecord(strategy, seed, rc, result, final, application, time.perf_counter() - start)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> list[RunRecord]:
    """Run every (seed, strategy) pair; strategies under one seed share the partition."""
    cfg.validate()
    data = prepare(cfg)
    records: list[RunRecord] = []
    for seed in cfg.seeds:
        with stage("partition"):
            partition = dirichlet_partition(data.train.labels, cfg.n_clients, cfg.delta, seed)
            test_shards = dirichlet_partition(data.test.labels, cfg.n_clients, cfg.delta,
                                              test_partition_seed(seed)).client_shards
        for strategy in cfg.strategies:
            log.info("running %s with seed %d", strategy, seed)
            records.append(run_one(cfg, data, strategy, seed, partition, test_shards))
    if write:
        with stage("report"):
            emit_report(records, cfg, data)
    return records


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def metrics_rows(records: list[RunRecord]) -> list[list[str]]:
    header = ["strategy", "seed", "rounds", *METRIC_KEYS, *AVERAGED_KEYS, *COUNT_KEYS,
              "global_model", "model_bytes", "prototype_bytes"]
    rows = [header]
    for r in records:
        f = r.final
        rows.append([r.strategy, str(r.seed), str(r.round_config.rounds)]
                    + [format_value(f.get(k)) for k in header[3:]])
    return rows


def rounds_rows(records: list[RunRecord]) -> list[list[str]]:
    header = ["strategy", "seed", "round", "participants", "lr", "mean_train_loss", "objective", "accuracy",
              "AA", "AFS", "odc", "model_bytes_down", "model_bytes_up", "prototype_bytes_down",
              "prototype_bytes_up"]
    rows = [header]
    for r in records:
        for rep in r.result.reports:
            last_epoch = [v[-1] for v in rep.train_loss.values() if v]
            rows.append([
                r.strategy, str(r.seed), str(rep.round), str(sum(rep.alphas)), format_value(rep.lr),
                format_value(float(np.mean(last_epoch)) if last_epoch else None), format_value(rep.objective),
                format_value(rep.pooled.get("accuracy")), format_value(rep.averaged.get("AA")),
                format_value(rep.averaged.get("AFS")), format_value(rep.pooled.get("odc")),
                *(str(rep.ledger[k]) for k in ("model_bytes_down", "model_bytes_up", "prototype_bytes_down",
                                               "prototype_bytes_up")),
            ])
    return rows


def mean_std(values: list) -> tuple[float | None, float | None]:
    vals = [float(v) for v in values if v is not None]
    if not vals:
        return None, None
    return statistics.fmean(vals), (statistics.stdev(vals) if len(vals) > 1 else None)


def summary_rows(records: list[RunRecord]) -> list[list[str]]:
    header = ["strategy", "n_seeds"]
    for k in SUMMARY_KEYS:
        header += [f"{k}_mean", f"{k}_std"]
    rows = [header]
    for strategy in dict.fromkeys(r.strategy for r in records):
        group = [r for r in records if r.strategy == strategy]
        row = [strategy, str(len(group))]
        for k in SUMMARY_KEYS:
            m, s = mean_std([r.final.get(k) for r in group])
            row += [format_value(m), format_value(s)]
        rows.append(row)
    return rows


def client_rows(record: RunRecord) -> list[list[str]]:
    header = ["client", "alpha", "train_size", *METRIC_KEYS, "odc", "n"]
    last = record.result.reports[-1]
    rows = [header]
    for c in record.result.clients:
        m = last.client_metrics.get(c.id, {})
        rows.append([str(c.id), str(last.alphas[c.id]), str(c.size)]
                    + [format_value(m.get(k)) for k in (*METRIC_KEYS, "odc", "n")])
    return rows


def _write_csv(path: Path, rows: list[list[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _table_text(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)


def emit_report(records: list[RunRecord], cfg: ExperimentConfig, data: PreparedData | None = None) -> Path:
    """Write metrics/rounds/summary CSVs, per-run artefacts and the human-readable report."""
    if not records:
        raise ValueError("no completed runs to report")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    metrics = metrics_rows(records)
    summary = summary_rows(records)
    _write_csv(out / "metrics.csv", metrics)
    _write_csv(out / "rounds.csv", rounds_rows(records))
    _write_csv(out / "summary.csv", summary)

    for r in records:
        run_dir = out / r.key
        run_dir.mkdir(exist_ok=True)
        _write_csv(run_dir / "clients.csv", client_rows(r))
        if r.result.state.model is not None:
            save_params(r.result.state.model, run_dir / "model.bin",
                        extra={"strategy": r.strategy, "seed": r.seed, "rounds": r.round_config.rounds})
            if data is not None:
                data.preprocessing.save(run_dir / "preprocess.json")
        if r.application is not None:
            names = data.test.class_names if data is not None else None
            r.application.log.write_csv(run_dir / "blocklog.csv", names)

    lines = ["Federated intrusion detection experiment", "",
             f"dataset: {cfg.dataset}   mode: {cfg.mode}   clients: {cfg.n_clients}   delta: {cfg.delta}"]
    if data is not None:
        lines.append(f"train rows: {len(data.train)}   test rows: {len(data.test)}   "
                     f"selected features: {len(data.selection.selected_indices)}")
    lines += ["", "Final metrics (absent values shown as NA)", _table_text(metrics), "",
              "Mean and sample standard deviation over seeds", _table_text(summary), ""]
    for r in records:
        counts = r.application.log.counts if r.application is not None else None
        blocked = f"blocked {counts['blocked']}, passed {counts['passed']}" if counts else "no global model, nothing blocked"
        lines.append(f"[{r.key}] wall-clock {r.wall_clock:.1f} s; {blocked}")
    lines += ["", "Configuration", cfg.to_ini()]
    (out / "report.txt").write_text("\n".join(lines), encoding="utf-8")
    return out
