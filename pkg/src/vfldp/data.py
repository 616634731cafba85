"""Tabular ingestion, preprocessing, train/test split and vertical partitioning.

Every dataset is a comma-separated UTF-8 file with a header row whose columns
are exactly the feature columns followed by the label columns of its
:class:`DatasetSpec`. Small synthetic fixtures with the same schemas ship in
``vfldp/fixtures``; full datasets are read from ``$VFLDP_DATA_DIR``.
"""
import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng
from .errors import ConfigError, IngestionError

log = logging.getLogger(__name__)

BINARY = "binary"
REGRESSION = "regression"
MULTI_REGRESSION = "multi_output_regression"
TASKS = (BINARY, REGRESSION, MULTI_REGRESSION)

DATA_DIR_ENV = "VFLDP_DATA_DIR"
FIXTURE_DIR = Path(__file__).parent / "fixtures"
MISSING_TOKENS = frozenset({"", "?", "NA", "NaN", "nan"})
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    task: str
    n_records: int
    feature_columns: tuple
    label_columns: tuple
    categorical_columns: tuple = ()
    positive_label: str = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.n_records <= 0 or not self.feature_columns:
            raise ConfigError("a dataset needs records and features")
        if set(self.feature_columns) & set(self.label_columns):
            raise ConfigError("label columns overlap feature columns")
        if not set(self.categorical_columns) <= set(self.feature_columns):
            raise ConfigError("categorical columns must be feature columns")

    @property
    def n_features(self):
        return len(self.feature_columns)

    @property
    def columns(self):
        return tuple(self.feature_columns) + tuple(self.label_columns)

    @property
    def n_outputs(self):
        return len(self.label_columns)

    @property
    def loss_kind(self):
        return "bce" if self.task == BINARY else "mse"

    def with_records(self, n_records):
        return dataclasses.replace(self, n_records=n_records)


def _names(prefix, n, width=0):
    return tuple(f"{prefix}{i:0{width}d}" if width else f"{prefix}{i}" for i in range(n))


# Column layouts follow the attribute counts of the experiment datasets.
DATASETS = {
    "adult": DatasetSpec(
        "adult", BINARY, 32561,
        ("age", "workclass", "education_num", "marital_status", "occupation",
         "relationship", "sex", "hours_per_week", "capital_gain"),
        ("income",),
        ("workclass", "marital_status", "occupation", "relationship", "sex"),
        positive_label=">50K",
    ),
    "sport": DatasetSpec("sport", BINARY, 9120, _names("f", 5625, 4), ("label",), positive_label="1"),
    "energy": DatasetSpec("energy", MULTI_REGRESSION, 768, _names("X", 9)[1:], ("Y1", "Y2")),
    "boston": DatasetSpec(
        "boston", REGRESSION, 506,
        ("CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE", "DIS", "RAD", "TAX", "PTRATIO", "LSTAT"),
        ("MEDV",),
    ),
    "california": DatasetSpec(
        "california", REGRESSION, 20640,
        ("MedInc", "HouseAge", "AveRooms", "AveBedrms", "Population", "AveOccup", "Latitude", "Longitude"),
        ("MedHouseVal",),
    ),
}

FIXTURE_RECORDS = {"adult": 200, "sport": 50, "energy": 200, "boston": 200, "california": 200}


def get_spec(name, source="full"):
    try:
        spec = DATASETS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; known: {sorted(DATASETS)}") from None
    if source == "fixture":
        return spec.with_records(FIXTURE_RECORDS[name])
    if source != "full":
        raise ConfigError(f"unknown data source {source!r}")
    return spec


@dataclass
class RawTable:
    spec: DatasetSpec
    columns: dict  # name -> list of str (categorical) or float ndarray
    n_rows: int
    n_dropped: int = 0

    @property
    def categorical(self):
        return tuple(self.spec.categorical_columns)

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        cols = {}
        for name, values in self.columns.items():
            if isinstance(values, np.ndarray):
                cols[name] = values[rows]
            else:
                cols[name] = [values[i] for i in rows]
        return RawTable(self.spec, cols, len(rows), 0)


def load_csv(path, spec):
    """Read ``path`` and validate it against ``spec``.

    Rows containing a missing token in any column are dropped after the row
    count check; the number dropped is logged and stored on the table.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: file is empty") from None
        if len(header) != len(spec.columns):
            raise IngestionError(
                f"{path}: header has {len(header)} columns, {spec.name} expects {len(spec.columns)}"
            )
        if tuple(header) != spec.columns:
            bad = next(i for i, (a, b) in enumerate(zip(header, spec.columns)) if a != b)
            raise IngestionError(
                f"{path}: header column {bad + 1} is {header[bad]!r}, expected {spec.columns[bad]!r}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append([cell.strip() for cell in row])
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    if len(rows) != spec.n_records:
        raise IngestionError(f"{path}: {len(rows)} data rows, {spec.name} expects {spec.n_records}")

    keep = [r for r in rows if not any(cell in MISSING_TOKENS for cell in r)]
    dropped = len(rows) - len(keep)
    if dropped:
        log.info("%s: dropped %d rows with missing values", path.name, dropped)

    categorical = set(spec.categorical_columns)
    label_text = {c for c in spec.label_columns} if spec.task == BINARY else set()
    columns = {}
    for j, name in enumerate(header):
        values = [r[j] for r in keep]
        if name in categorical or name in label_text:
            columns[name] = values
            continue
        out = np.empty(len(values), dtype=np.float64)
        for i, cell in enumerate(values):
            try:
                out[i] = float(cell)
            except ValueError:
                lineno = 2 + rows.index(keep[i])
                raise IngestionError(
                    f"{path}:{lineno}: column {name!r} value {cell!r} is not numeric"
                ) from None
            if not math.isfinite(out[i]):
                raise IngestionError(f"{path}: column {name!r} holds a non-finite value")
        columns[name] = out
    return RawTable(spec, columns, len(keep), dropped)


def select_features(table, k):
    """Keep ``k`` evenly spaced feature columns (desk-scale runs on wide data)."""
    spec = table.spec
    if not 1 <= k <= spec.n_features:
        raise ConfigError(f"feature subsample must lie in [1, {spec.n_features}], got {k}")
    idx = np.unique(np.linspace(0, spec.n_features - 1, k).round().astype(int))
    feats = tuple(spec.feature_columns[i] for i in idx)
    new_spec = dataclasses.replace(
        spec,
        feature_columns=feats,
        categorical_columns=tuple(c for c in spec.categorical_columns if c in feats),
    )
    cols = {name: table.columns[name] for name in new_spec.columns}
    return RawTable(new_spec, cols, table.n_rows, table.n_dropped)


@dataclass
class Preprocessed:
    features: np.ndarray
    labels: np.ndarray
    groups: list  # per original attribute: (start, stop) columns in ``features``
    feature_names: list
    label_mean: np.ndarray = None
    label_std: np.ndarray = None


def _encode_binary(values, positive):
    if isinstance(values, np.ndarray):
        return (values == float(positive)).astype(np.float64)
    return np.array([1.0 if v.rstrip(".") == positive else 0.0 for v in values])


def preprocess(table, train_rows=None, standardize_targets=True):
    """Encode features and labels using statistics of ``train_rows`` only.

    Categorical attributes are one-hot encoded over the categories seen in the
    training rows (unseen test categories encode as all zeros). Numeric
    attributes are standardized with the training mean and population
    standard deviation; columns with variance below 1e-12 map to zero.
    Regression targets are standardized the same way when
    ``standardize_targets`` is set.
    """
    spec = table.spec
    n = table.n_rows
    train = np.arange(n) if train_rows is None else np.asarray(train_rows, dtype=np.int64)
    if train.size == 0:
        raise ConfigError("preprocessing needs at least one training row")
    blocks, groups, names = [], [], []
    pos = 0
    for name in spec.feature_columns:
        values = table.columns[name]
        if name in spec.categorical_columns:
            seen = sorted({values[i] for i in train})
            index = {c: k for k, c in enumerate(seen)}
            block = np.zeros((n, len(seen)))
            for i, v in enumerate(values):
                k = index.get(v)
                if k is not None:
                    block[i, k] = 1.0
            names.extend(f"{name}={c}" for c in seen)
        else:
            col = np.asarray(values, dtype=np.float64)
            mean = col[train].mean()
            var = col[train].var()
            if var < VARIANCE_FLOOR:
                block = np.zeros((n, 1))
            else:
                block = ((col - mean) / np.sqrt(var))[:, None]
            names.append(name)
        blocks.append(block)
        groups.append((pos, pos + block.shape[1]))
        pos += block.shape[1]
    features = np.hstack(blocks)

    label_mean = label_std = None
    if spec.task == BINARY:
        labels = np.column_stack(
            [_encode_binary(table.columns[c], spec.positive_label) for c in spec.label_columns]
        )
    else:
        labels = np.column_stack([np.asarray(table.columns[c], dtype=np.float64) for c in spec.label_columns])
        if standardize_targets:
            label_mean = labels[train].mean(axis=0)
            label_std = np.sqrt(np.maximum(labels[train].var(axis=0), VARIANCE_FLOOR))
            labels = (labels - label_mean) / label_std
    return Preprocessed(features, labels, groups, names, label_mean, label_std)


@dataclass(frozen=True)
class SplitIndices:
    train_rows: np.ndarray
    test_rows: np.ndarray


def split_rows(n, test_fraction=0.2, seed=0):
    """Random train/test split with ``floor(test_fraction * n)`` test rows."""
    if n < 5:
        raise ConfigError(f"need at least 5 rows to split, got {n}")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    n_test = math.floor(test_fraction * n)
    perm = rng.generator("split", seed).permutation(n)
    return SplitIndices(np.sort(perm[n_test:]), np.sort(perm[:n_test]))


@dataclass(frozen=True)
class VerticalPartition:
    """Attribute blocks per owner; ``owner_slices[i]`` lists attribute indices."""

    owner_slices: tuple
    host_labels: tuple = ()

    @property
    def sizes(self):
        return [len(s) for s in self.owner_slices]

    def expand(self, groups):
        """Map attribute indices to encoded feature columns via ``groups``."""
        out = []
        for attrs in self.owner_slices:
            cols = []
            for a in attrs:
                start, stop = groups[a]
                cols.extend(range(start, stop))
            out.append(np.array(cols, dtype=np.int64))
        return out


def partition_columns(n_features, n_owners, label_columns=()):
    """Contiguous attribute blocks; the first ``n_features % n_owners`` get one extra."""
    if n_owners < 2:
        raise ConfigError(f"vertical partitioning needs at least 2 owners, got {n_owners}")
    if n_features < n_owners:
        raise ConfigError(f"{n_features} features cannot be split among {n_owners} owners")
    base, extra = divmod(n_features, n_owners)
    slices = []
    start = 0
    for i in range(n_owners):
        size = base + (1 if i < extra else 0)
        slices.append(tuple(range(start, start + size)))
        start += size
    return VerticalPartition(tuple(slices), tuple(label_columns))


def dataset_path(name, source="fixture", data_dir=None):
    if source == "fixture":
        return FIXTURE_DIR / f"{name}.csv"
    data_dir = data_dir or os.environ.get(DATA_DIR_ENV)
    if not data_dir:
        raise ConfigError(f"full dataset {name!r} requested but ${DATA_DIR_ENV} is not set")
    return Path(data_dir) / f"{name}.csv"


def load_dataset(name, source="fixture", data_dir=None, feature_subsample=None):
    spec = get_spec(name, source)
    table = load_csv(dataset_path(name, source, data_dir), spec)
    if feature_subsample:
        table = select_features(table, feature_subsample)
    return table
