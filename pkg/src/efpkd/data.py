"""Dataset ingestion, encoding, correlation-based feature selection and partitioning."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class IngestionError(ValueError):
    pass


class PartitionError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Dataset profiles
# --------------------------------------------------------------------------

NSL_KDD_COLUMNS = [
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes", "land",
    "wrong_fragment", "urgent", "hot", "num_failed_logins", "logged_in", "num_compromised",
    "root_shell", "su_attempted", "num_root", "num_file_creations", "num_shells",
    "num_access_files", "num_outbound_cmds", "is_host_login", "is_guest_login", "count",
    "srv_count", "serror_rate", "srv_serror_rate", "rerror_rate", "srv_rerror_rate",
    "same_srv_rate", "diff_srv_rate", "srv_diff_host_rate", "dst_host_count",
    "dst_host_srv_count", "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate", "dst_host_serror_rate",
    "dst_host_srv_serror_rate", "dst_host_rerror_rate", "dst_host_srv_rerror_rate",
    "label", "difficulty",
]

_NSL_KDD_ATTACKS = {
    "DoS": "back land neptune pod smurf teardrop apache2 mailbomb processtable udpstorm worm",
    "Probe": "ipsweep nmap portsweep satan mscan saint",
    "R2L": "ftp_write guess_passwd imap multihop phf spy warezclient warezmaster named "
           "sendmail snmpgetattack snmpguess xlock xsnoop httptunnel",
    "U2R": "buffer_overflow loadmodule perl rootkit ps sqlattack xterm",
}
NSL_KDD_CATEGORIES = {"normal": "normal"}
for _cat, _names in _NSL_KDD_ATTACKS.items():
    NSL_KDD_CATEGORIES.update({name: _cat for name in _names.split()})


@dataclass(frozen=True)
class DatasetProfile:
    """How to turn one family of CSV files into features and labels.

    ``label_column`` holds the class used in multi mode; binary labels are
    derived from it by comparing against ``normal_value`` unless a separate
    ``binary_column`` is given.
    """

    name: str
    label_column: str
    normal_value: str
    binary_column: str | None = None
    column_names: tuple[str, ...] | None = None
    drop_columns: tuple[str, ...] = ()
    dedup: bool = False
    drop_infinite: bool = False
    category_map: dict[str, str] | None = None
    top_k: int | None = None
    batch_size: int = 32
    rounds: int = 10
    zeta: float = 0.5
    test_fraction: float = 0.3  # used when no separate test file exists

    @property
    def label_columns(self) -> tuple[str, ...]:
        return tuple(c for c in (self.label_column, self.binary_column) if c)


PROFILES: dict[str, DatasetProfile] = {
    "nsl-kdd": DatasetProfile(
        "nsl-kdd", label_column="label", normal_value="normal", column_names=tuple(NSL_KDD_COLUMNS),
        drop_columns=("difficulty",), category_map=NSL_KDD_CATEGORIES, top_k=22, batch_size=32,
        rounds=100, zeta=0.5,
    ),
    "unsw-nb15": DatasetProfile(
        "unsw-nb15", label_column="attack_cat", normal_value="Normal", drop_columns=("id", "label"),
        top_k=27, batch_size=512, rounds=50, zeta=0.1,
    ),
    "iotid20": DatasetProfile(
        "iotid20", label_column="Cat", binary_column="Label", normal_value="Normal",
        drop_columns=("Flow_ID", "Src_IP", "Dst_IP", "Timestamp", "Sub_Cat"), dedup=True,
        drop_infinite=True, top_k=40, batch_size=128, rounds=20, zeta=0.1,
    ),
    "synthetic": DatasetProfile(
        "synthetic", label_column="class", normal_value="normal", top_k=22, batch_size=32, rounds=10, zeta=0.5,
    ),
}


# --------------------------------------------------------------------------
# Raw tables
# --------------------------------------------------------------------------


@dataclass
class RawTable:
    columns: list[str]
    cells: np.ndarray  # [N, C] of str
    kinds: dict[str, str]
    profile: DatasetProfile

    @property
    def n_rows(self) -> int:
        return self.cells.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.cells[:, self.columns.index(name)]

    def take(self, rows) -> "RawTable":
        return replace(self, cells=self.cells[rows])

    @property
    def feature_columns(self) -> list[str]:
        return [c for c in self.columns if c not in self.profile.label_columns]


def _infer_kind(values: np.ndarray) -> str:
    try:
        values.astype(np.float64)
    except ValueError:
        return "categorical"
    return "numeric"


def make_table(columns: Sequence[str], rows, profile: DatasetProfile) -> RawTable:
    cells = np.array(rows, dtype=str).reshape(len(rows), len(columns))
    cells = np.char.strip(cells)
    columns = list(columns)
    return RawTable(columns, cells, {c: _infer_kind(cells[:, i]) for i, c in enumerate(columns)}, profile)


def _drop_nonfinite(table: RawTable) -> RawTable:
    keep = np.ones(table.n_rows, dtype=bool)
    for i, c in enumerate(table.columns):
        if table.kinds[c] == "numeric":
            keep &= np.isfinite(table.cells[:, i].astype(np.float64))
    dropped = int((~keep).sum())
    if dropped:
        log.info("dropped %d rows with non-finite values", dropped)
    return table.take(keep)


def _dedup(table: RawTable) -> RawTable:
    _, first = np.unique(table.cells, axis=0, return_index=True)
    return table.take(np.sort(first))


def ingest(path: str | Path, profile: DatasetProfile) -> RawTable:
    """Read a comma-separated file into a :class:`RawTable`.

    A header row is expected unless the profile carries ``column_names`` and
    the first line does not match them (NSL-KDD ships without a header).
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next((row for row in reader if row), None)
        if first is None:
            raise IngestionError(f"{path}: empty file")
        first = [c.strip() for c in first]
        headerless = bool(profile.column_names) and first != list(profile.column_names)
        columns = list(profile.column_names) if headerless else first
        rows: list[list[str]] = [first] if headerless else []
        rows.extend(row for row in reader if row)
    width = len(columns)
    offset = 1 if headerless else 2
    for n, row in enumerate(rows):
        if len(row) != width:
            raise IngestionError(f"{path}: row {n + offset} has {len(row)} fields, expected {width}")
    for label in profile.label_columns:
        if label not in columns:
            raise IngestionError(f"{path}: missing label column {label!r}")
    table = make_table(columns, rows, profile)
    keep = [i for i, c in enumerate(columns) if c not in profile.drop_columns]
    table = RawTable([columns[i] for i in keep], table.cells[:, keep],
                     {columns[i]: table.kinds[columns[i]] for i in keep}, profile)
    if profile.drop_infinite:
        table = _drop_nonfinite(table)
    if profile.dedup:
        table = _dedup(table)
    return table


# --------------------------------------------------------------------------
# Encoding
# --------------------------------------------------------------------------


@dataclass
class NormalizationStats:
    feature_names: list[str]
    kinds: list[str]
    vocab: dict[str, list[str]]
    mins: np.ndarray
    maxs: np.ndarray
    class_names: list[str]
    mode: str
    normal_index: int = 1

    def to_dict(self) -> dict:
        return {
            "feature_names": self.feature_names, "kinds": self.kinds, "vocab": self.vocab,
            "mins": self.mins.tolist(), "maxs": self.maxs.tolist(),
            "class_names": self.class_names, "mode": self.mode, "normal_index": self.normal_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(d["feature_names"], d["kinds"], d["vocab"], np.array(d["mins"], dtype=float),
                   np.array(d["maxs"], dtype=float), d["class_names"], d["mode"], d["normal_index"])


@dataclass
class EncodedDataset:
    features: np.ndarray  # [N, d], float64
    labels: np.ndarray  # [N], int64
    mode: str
    class_names: list[str]
    normal_index: int
    feature_names: list[str]
    stats: NormalizationStats | None = None
    unseen_categories: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def select(self, indices) -> "EncodedDataset":
        indices = list(indices)
        return replace(self, features=self.features[:, indices], feature_names=[self.feature_names[i] for i in indices])

    def subset(self, rows) -> "EncodedDataset":
        return replace(self, features=self.features[rows], labels=self.labels[rows])


def _class_labels(table: RawTable, mode: str) -> np.ndarray:
    p = table.profile
    if mode == "binary" and p.binary_column:
        raw = table.column(p.binary_column)
        return np.where(raw == p.normal_value, "normal", "anomaly")
    raw = table.column(p.label_column)
    if p.category_map is not None:
        unknown = sorted(set(raw) - set(p.category_map))
        if unknown:
            raise IngestionError(f"labels without a category mapping: {unknown[:5]}")
        raw = np.array([p.category_map[v] for v in raw], dtype=object)
    if mode == "binary":
        norm = p.category_map.get(p.normal_value, p.normal_value) if p.category_map else p.normal_value
        return np.where(raw == norm, "normal", "anomaly")
    return raw.astype(str)


def encode_and_normalize(table: RawTable, mode: str = "binary", stats: NormalizationStats | None = None) -> EncodedDataset:
    """Integer-encode categoricals, min-max scale to [0, 1] and encode labels.

    Without ``stats`` the vocabulary and ranges come from this table (training
    split); with ``stats`` they are reused and values are clamped to [0, 1].
    Known categories map to 1..V by sorted order; unseen ones map to 0.
    """
    if mode not in ("binary", "multi"):
        raise ValueError(f"unknown mode {mode!r}")
    names = table.feature_columns
    labels_txt = _class_labels(table, mode)
    fitting = stats is None
    if fitting:
        kinds = [table.kinds[c] for c in names]
        vocab = {c: sorted(set(table.column(c))) for c, k in zip(names, kinds) if k == "categorical"}
        if mode == "binary":
            class_names = ["anomaly", "normal"]
        else:
            class_names = sorted(set(labels_txt))
        normal_value = "normal" if mode == "binary" else _normal_name(table.profile)
        if normal_value not in class_names:
            raise IngestionError(f"normal class {normal_value!r} not present in training labels")
    else:
        if stats.feature_names != names:
            raise IngestionError("feature columns differ from the training split")
        kinds, vocab, class_names = stats.kinds, stats.vocab, stats.class_names
        normal_value = class_names[stats.normal_index]

    n = table.n_rows
    raw = np.zeros((n, len(names)))
    unseen = 0
    for j, (c, kind) in enumerate(zip(names, kinds)):
        col = table.column(c)
        if kind == "categorical":
            lookup = {v: i + 1 for i, v in enumerate(vocab[c])}
            codes = np.array([lookup.get(v, 0) for v in col], dtype=np.float64)
            unseen += int((codes == 0).sum())
            raw[:, j] = codes
        else:
            try:
                vals = col.astype(np.float64)
            except ValueError as exc:
                raise IngestionError(f"column {c!r} is not numeric: {exc}") from None
            raw[:, j] = vals
    bad = ~np.isfinite(raw)
    if bad.any():
        log.warning("%d non-finite numeric cells replaced by the column minimum", int(bad.sum()))
    if fitting:
        masked = np.where(bad, np.nan, raw)
        mins = np.nan_to_num(np.nanmin(masked, axis=0)) if n else np.zeros(len(names))
        maxs = np.nan_to_num(np.nanmax(masked, axis=0)) if n else np.zeros(len(names))
        stats = NormalizationStats(names, kinds, vocab, mins, maxs, class_names, mode,
                                   class_names.index(normal_value))
    raw = np.where(bad, stats.mins, raw)
    span = stats.maxs - stats.mins
    safe = np.where(span > 0, span, 1.0)
    feats = np.where(span > 0, (raw - stats.mins) / safe, 0.0)
    feats = np.clip(feats, 0.0, 1.0)
    if unseen:
        log.warning("%d categorical cells had categories unseen in training", unseen)
    index = {name: i for i, name in enumerate(class_names)}
    try:
        labels = np.array([index[v] for v in labels_txt], dtype=np.int64)
    except KeyError as exc:
        raise IngestionError(f"label {exc.args[0]!r} not seen in training split") from None
    return EncodedDataset(feats, labels, mode, list(class_names), stats.normal_index, list(names), stats, unseen)


def _normal_name(profile: DatasetProfile) -> str:
    if profile.category_map:
        return profile.category_map.get(profile.normal_value, profile.normal_value)
    return profile.normal_value


# --------------------------------------------------------------------------
# Feature selection
# --------------------------------------------------------------------------

PCC_BAND = (0.1, 1.0)


def pcc(x, y) -> float | None:
    """Pearson correlation of two vectors; ``None`` when either is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pcc needs two equal-length vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt((dx * dx).sum())
    sy = np.sqrt((dy * dy).sum())
    if sx == 0 or sy == 0:
        return None
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def pcc_matrix(features: np.ndarray) -> np.ndarray:
    """All pairwise correlations; NaN where a column is constant."""
    x = np.asarray(features, dtype=np.float64)
    dx = x - x.mean(axis=0)
    norms = np.sqrt((dx * dx).sum(axis=0))
    ok = norms > 0
    z = np.where(ok, dx / np.where(ok, norms, 1.0), 0.0)
    r = np.clip(z.T @ z, -1.0, 1.0)
    r[~ok, :] = np.nan
    r[:, ~ok] = np.nan
    return r


@dataclass(frozen=True)
class FeatureSelection:
    selected_indices: tuple[int, ...]
    counts: tuple[int, ...]
    band: tuple[float, float]
    top_k: int

    def to_dict(self) -> dict:
        return {"selected_indices": list(self.selected_indices), "counts": list(self.counts),
                "band": list(self.band), "top_k": self.top_k}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSelection":
        return cls(tuple(d["selected_indices"]), tuple(d["counts"]), tuple(d["band"]), d["top_k"])


def qualifying_counts(r: np.ndarray, band=PCC_BAND) -> np.ndarray:
    lo, hi = band
    a = np.abs(r)
    hit = (a >= lo) & (a <= hi)  # NaN compares False
    np.fill_diagonal(hit, False)
    return hit.sum(axis=1)


def select_features(features: np.ndarray, top_k: int, band=PCC_BAND) -> FeatureSelection:
    """Keep the ``top_k`` features with most in-band correlations to other features.

    Ties go to the lower column index.
    """
    d = features.shape[1]
    if not 1 <= top_k <= d:
        raise ValueError(f"top_k must be in [1, {d}], got {top_k}")
    counts = qualifying_counts(pcc_matrix(features), band)
    order = sorted(range(d), key=lambda j: (-counts[j], j))
    chosen = tuple(sorted(order[:top_k]))
    return FeatureSelection(chosen, tuple(int(c) for c in counts), tuple(band), top_k)


# --------------------------------------------------------------------------
# Partitioning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionPlan:
    client_shards: tuple[np.ndarray, ...]
    delta: float
    seed: int
    attempts: int = 1

    @property
    def n_clients(self) -> int:
        return len(self.client_shards)


def dirichlet_partition(labels, n_clients: int, delta: float, seed: int, max_retries: int = 100) -> PartitionPlan:
    """Split indices class by class with Dirichlet(delta) client proportions.

    The whole draw is repeated when any shard comes out empty.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not delta > 0:
        raise ValueError("delta must be positive")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    for attempt in range(1, max_retries + 1):
        shards: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for k in classes:
            idx = np.flatnonzero(labels == k)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n_clients, float(delta)))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
            for s, part in enumerate(np.split(idx, cuts)):
                shards[s].append(part)
        merged = tuple(np.sort(np.concatenate(parts)) for parts in shards)
        if all(m.size for m in merged):
            return PartitionPlan(merged, float(delta), seed, attempt)
    raise PartitionError(
        f"could not give all {n_clients} clients data after {max_retries} draws; "
        "use a larger delta or fewer clients"
    )


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


def make_synthetic(
    n_train: int = 10_000,
    n_test: int = 2_000,
    *,
    n_informative: int = 8,
    n_correlated: int = 16,
    n_noise: int = 10,
    n_attack_classes: int = 4,
    overlap: float = 0.3,
    normal_share: float = 0.5,
    seed: int = 0,
) -> tuple[RawTable, RawTable]:
    """Gaussian class clusters in a latent space, observed through correlated features.

    Class means sit ``3 * (1 - overlap)`` standard deviations apart along random
    directions, so ``overlap=0`` is well separated and ``overlap=1`` is pure
    noise.  The correlated block mixes the latent dimensions (high mutual PCC),
    the noise block is independent, and one categorical ``proto`` column
    depends weakly on the class.
    """
    if not 0 <= overlap <= 1:
        raise ValueError("overlap must be in [0, 1]")
    rng = np.random.default_rng(seed)
    k = n_attack_classes + 1
    dirs = rng.normal(size=(k, n_informative))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = 3.0 * (1.0 - overlap) * dirs
    mixing = rng.normal(size=(n_informative, n_correlated)) / np.sqrt(n_informative)
    priors = np.r_[normal_share, np.full(n_attack_classes, (1 - normal_share) / n_attack_classes)]
    names = ["normal"] + [f"attack_{i + 1}" for i in range(n_attack_classes)]
    protos = np.array(["tcp", "udp", "icmp"])
    columns = ([f"lat_{i}" for i in range(n_informative)] + [f"mix_{i}" for i in range(n_correlated)]
               + [f"noise_{i}" for i in range(n_noise)] + ["proto", "class"])
    profile = PROFILES["synthetic"]

    def draw(n: int) -> RawTable:
        y = rng.choice(k, size=n, p=priors)
        z = means[y] + rng.normal(size=(n, n_informative))
        mixed = z @ mixing + 0.3 * rng.normal(size=(n, n_correlated))
        noise = rng.uniform(size=(n, n_noise))
        proto = protos[(y + (rng.random(n) < 0.5)) % 3]
        num = np.hstack([z, mixed, noise])
        cells = np.column_stack([np.char.mod("%.10g", num), proto, np.array(names)[y]])
        return RawTable(columns, cells, {c: ("categorical" if c in ("proto", "class") else "numeric") for c in columns},
                        profile)

    return draw(n_train), draw(n_test)


def subsample(n: int, cap: int | None, seed: int) -> np.ndarray:
    if cap is None or n <= cap:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))


# --------------------------------------------------------------------------
# Binary cache container
# --------------------------------------------------------------------------

DATA_MAGIC = b"EFPKDDAT"


def save_encoded(ds: EncodedDataset, path: str | Path) -> None:
    """``magic | u32 version | u32 manifest len | manifest | f64 LE features | i64 LE labels``."""
    manifest = {
        "shape": list(ds.features.shape), "mode": ds.mode, "class_names": ds.class_names,
        "normal_index": ds.normal_index, "feature_names": ds.feature_names,
        "stats": ds.stats.to_dict() if ds.stats else None,
    }
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC + struct.pack("<II", 1, len(raw)) + raw)
        fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())


def load_encoded(path: str | Path) -> EncodedDataset:
    blob = Path(path).read_bytes()
    if blob[:8] != DATA_MAGIC:
        raise ValueError(f"{path}: not an encoded dataset file")
    _, n = struct.unpack("<II", blob[8:16])
    m = json.loads(blob[16 : 16 + n].decode("utf-8"))
    rows, cols = m["shape"]
    off = 16 + n
    feats = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
    labels = np.frombuffer(blob, dtype="<i8", count=rows, offset=off + 8 * rows * cols).astype(np.int64)
    stats = NormalizationStats.from_dict(m["stats"]) if m["stats"] else None
    return EncodedDataset(feats, labels, m["mode"], m["class_names"], m["normal_index"], m["feature_names"], stats)
