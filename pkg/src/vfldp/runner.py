"""Experiment configuration, single runs, resumable sweeps and result files.

Results layout for an output directory::

    <out>/<cell_id>.jsonl   one JSON object per line:
                            {"type": "epoch", ...MetricsRecord fields}
                            then one terminal {"type": "summary", ...}
    <out>/summary.csv       one row per finished cell, rebuilt after a sweep

Epoch record fields: cell, dataset, n_owners, mode, epsilon (null for
baselines), seed, epoch, train_loss, test_loss, test_accuracy or test_mse,
spent_epsilon, and wall_ms only when timing is requested (timing would break
byte-identical replays).

Summary record fields: cell, status ("completed" or "budget_exhausted"),
epochs_completed, epochs_planned, final_train_loss, final_test_loss,
final_metric, metric_name, spent_epsilon, sigma, noised_updates.

Seeds: the split seed is ``stable_hash(seed, dataset)``; model initialization
and batch order use ``stable_hash(seed, dataset, n_owners)`` so that every
mode and epsilon of one dataset/owner pair starts from the same weights; the
noise stream seed is ``stable_hash(seed, dataset, n_owners, mode, epsilon)``.
``stable_hash`` is the first 8 bytes (little-endian, top bit cleared) of the
SHA-256 of the ``|``-joined string forms.
"""
import configparser
import csv
import dataclasses
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as dpl
from . import dp as dpe
from . import protocol
from .errors import BudgetExhausted, ConfigError, VfldpError
from .metrics import metric_name
from .rng import stable_hash

log = logging.getLogger(__name__)

CENTRALIZED = "centralized"
VFL_NODP = "vfl_nodp"
VFL_DP = "vfl_dp"
MODES = (CENTRALIZED, VFL_NODP, VFL_DP)

DEFAULT_EPSILONS = (1.0, 1.5, 2.0, 5.0, 10.0, 50.0, 100.0)
DEFAULT_OWNERS = (3, 4, 5)
DEFAULT_DATASETS = ("adult", "sport", "energy", "boston", "california")


def _fmt_eps(eps):
    return f"{eps:g}"


@dataclass
class ExperimentConfig:
    dataset: str = "adult"
    n_owners: int = 3
    mode: str = VFL_DP
    epsilon: float = None
    delta: float = 0.001
    epochs: int = 100
    batch_size: int = 100
    lr: float = 0.0002
    seed: int = 0
    noise_point: str = dpe.WEIGHTS
    clip_mode: str = "warmup"
    clip_s: float = None
    clip_percentile: float = 80.0
    clip_window: int = 50
    per_layer_limits: tuple = None
    layer_limit_rule: str = dpe.AS_PRINTED
    c2: float = 1.0
    dp_iterations: int = None
    lam: float = 0.0
    data_source: str = "fixture"
    data_dir: str = None
    feature_subsample: int = None
    test_fraction: float = 0.2
    scheduler: str = "sequential"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dataset not in dpl.DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.n_owners) != self.n_owners or self.n_owners < 2:
            raise ConfigError(f"n_owners must be an integer >= 2, got {self.n_owners}")
        if self.mode == VFL_DP:
            if self.epsilon is None:
                raise ConfigError("mode vfl_dp requires an epsilon")
            if not self.epsilon > 0:
                raise ConfigError("epsilon must be positive")
            if self.noise_point == dpe.NONE:
                raise ConfigError("mode vfl_dp needs a noise point other than 'none'")
        if self.noise_point not in dpe.NOISE_POINTS:
            raise ConfigError(f"noise_point must be one of {dpe.NOISE_POINTS}")
        if self.data_source not in ("fixture", "full"):
            raise ConfigError("data_source must be 'fixture' or 'full'")
        self.clip_spec()
        return self

    def clip_spec(self):
        return dpe.ClipSpec(
            mode=self.clip_mode,
            s=self.clip_s,
            percentile=self.clip_percentile,
            window=self.clip_window,
            per_layer_limits=self.per_layer_limits,
            layer_limit_rule=self.layer_limit_rule,
        )

    @property
    def cell_id(self):
        base = f"{self.dataset}_n{self.n_owners}_{self.mode}"
        return base + (f"_eps{_fmt_eps(self.epsilon)}" if self.mode == VFL_DP else "")

    @property
    def init_seed(self):
        return stable_hash(self.seed, self.dataset, self.n_owners)

    @property
    def noise_seed(self):
        eps = _fmt_eps(self.epsilon) if self.mode == VFL_DP else "-"
        return stable_hash(self.seed, self.dataset, self.n_owners, self.mode, eps)

    @property
    def split_seed(self):
        return stable_hash(self.seed, self.dataset)

    def train_config(self):
        private = self.mode == VFL_DP
        return protocol.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lam=self.lam,
            seed=self.init_seed,
            noise_seed=self.noise_seed,
            noise_point=self.noise_point if private else dpe.NONE,
            clip=self.clip_spec() if private else dpe.ClipSpec.never(),
            epsilon=self.epsilon if private else None,
            delta=self.delta,
            c2=self.c2,
            dp_iterations=self.dp_iterations,
            scheduler=self.scheduler,
        )

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class MetricsRecord:
    cell: str
    dataset: str
    n_owners: int
    mode: str
    epsilon: float
    seed: int
    epoch: int
    train_loss: float
    test_loss: float
    metric_name: str
    metric: float
    spent_epsilon: float
    wall_ms: float = 0.0

    def to_json(self, timing=False):
        obj = {
            "type": "epoch",
            "cell": self.cell,
            "dataset": self.dataset,
            "n_owners": self.n_owners,
            "mode": self.mode,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            self.metric_name: self.metric,
            "spent_epsilon": self.spent_epsilon,
        }
        if timing:
            obj["wall_ms"] = self.wall_ms
        return json.dumps(obj, sort_keys=False)


@dataclass
class RunResult:
    config: ExperimentConfig
    records: list = field(default_factory=list)
    status: str = "completed"
    sigma: float = 0.0
    noised_updates: int = 0
    spent_epsilon: float = 0.0
    error: str = None

    @property
    def final(self):
        return self.records[-1] if self.records else None

    def summary(self):
        last = self.final
        return {
            "type": "summary",
            "cell": self.config.cell_id,
            "status": self.status,
            "epochs_completed": len(self.records),
            "epochs_planned": self.config.epochs,
            "final_train_loss": last.train_loss if last else None,
            "final_test_loss": last.test_loss if last else None,
            "final_metric": last.metric if last else None,
            "metric_name": metric_name(dpl.get_spec(self.config.dataset).task),
            "spent_epsilon": self.spent_epsilon,
            "sigma": self.sigma,
            "noised_updates": self.noised_updates,
        }


@dataclass
class PreparedData:
    spec: dpl.DatasetSpec
    owner_train: list
    owner_test: list
    features_train: np.ndarray
    features_test: np.ndarray
    train_labels: np.ndarray
    test_labels: np.ndarray
    owner_columns: list


def prepare(config):
    """Load, split, preprocess and vertically partition the configured dataset."""
    table = dpl.load_dataset(config.dataset, config.data_source, config.data_dir, config.feature_subsample)
    spec = table.spec
    split = dpl.split_rows(table.n_rows, config.test_fraction, config.split_seed)
    pre = dpl.preprocess(table, split.train_rows)
    partition = dpl.partition_columns(spec.n_features, config.n_owners, spec.label_columns)
    cols = partition.expand(pre.groups)
    xtr = pre.features[split.train_rows]
    xte = pre.features[split.test_rows]
    if xte.shape[0] == 0:
        raise ConfigError("empty test split")
    return PreparedData(
        spec,
        [xtr[:, c] for c in cols],
        [xte[:, c] for c in cols],
        xtr,
        xte,
        pre.labels[split.train_rows],
        pre.labels[split.test_rows],
        cols,
    )


def iter_run(config, result=None):
    """Yield MetricsRecords for ``config``; fills ``result`` as it goes.

    Raises BudgetExhausted after the last completed epoch if the accountant
    stops the run.
    """
    config.validate()
    result = result if result is not None else RunResult(config)
    prepared = prepare(config)
    spec = prepared.spec
    tcfg = config.train_config()
    name = metric_name(spec.task)
    if config.mode == CENTRALIZED:
        stream = protocol.centralized_train(
            prepared.features_train, prepared.features_test, prepared.train_labels,
            prepared.test_labels, prepared.owner_columns, spec.task, spec.loss_kind, tcfg,
        )
        session = None
    else:
        session = protocol.VflSession(
            prepared.owner_train, prepared.owner_test, prepared.train_labels,
            prepared.test_labels, spec.task, spec.loss_kind, tcfg,
        )
        result.sigma = session.sigma
        stream = session.train()
    eps = config.epsilon if config.mode == VFL_DP else None
    t0 = time.perf_counter()
    try:
        for em in stream:
            now = time.perf_counter()
            rec = MetricsRecord(
                config.cell_id, config.dataset, config.n_owners, config.mode, eps, config.seed,
                em.epoch, em.train_loss, em.test_loss, name, next(iter(em.metrics.values())),
                em.spent_epsilon, round((now - t0) * 1000.0, 3),
            )
            t0 = now
            result.records.append(rec)
            result.spent_epsilon = em.spent_epsilon
            if session is not None:
                result.noised_updates = sum(o.noised_updates for o in session.owners)
            yield rec
    except BudgetExhausted:
        result.status = "budget_exhausted"
        if session is not None:
            result.noised_updates = sum(o.noised_updates for o in session.owners)
            result.spent_epsilon = session.spent_epsilon
        raise


def run(config):
    """Run one experiment cell to completion (or budget exhaustion)."""
    result = RunResult(config)
    try:
        for _ in iter_run(config, result):
            pass
    except BudgetExhausted as exc:
        result.error = str(exc)
        log.warning("%s: %s", config.cell_id, exc)
    return result


def _atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def results_text(result, timing=False):
    lines = [r.to_json(timing) for r in result.records]
    lines.append(json.dumps(result.summary()))
    return "\n".join(lines) + "\n"


def write_results(result, out_dir, timing=False):
    path = Path(out_dir) / f"{result.config.cell_id}.jsonl"
    _atomic_write(path, results_text(result, timing))
    return path


def read_results(path):
    """Parse and validate a cell file; returns ``(epoch_records, summary)``.

    Raises ValueError when the file is truncated or inconsistent.
    """
    text = Path(path).read_text(encoding="utf-8")
    if not text.endswith("\n"):
        raise ValueError(f"{path}: truncated")
    objs = [json.loads(line) for line in text.splitlines()]
    if not objs or objs[-1].get("type") != "summary":
        raise ValueError(f"{path}: missing summary record")
    summary = objs[-1]
    epochs = objs[:-1]
    if any(o.get("type") != "epoch" for o in epochs):
        raise ValueError(f"{path}: unexpected record type")
    if len(epochs) != summary["epochs_completed"]:
        raise ValueError(f"{path}: record count does not match summary")
    if summary["status"] == "completed" and len(epochs) != summary["epochs_planned"]:
        raise ValueError(f"{path}: completed run with missing epochs")
    if [o["epoch"] for o in epochs] != list(range(1, len(epochs) + 1)):
        raise ValueError(f"{path}: epochs out of order")
    return epochs, summary


@dataclass
class GridSpec:
    datasets: tuple = DEFAULT_DATASETS
    owners: tuple = DEFAULT_OWNERS
    epsilons: tuple = DEFAULT_EPSILONS
    baselines: bool = True
    base: dict = field(default_factory=dict)

    def cells(self):
        out = []
        for ds in self.datasets:
            for n in self.owners:
                common = dict(self.base, dataset=ds, n_owners=n)
                if self.baselines:
                    out.append(ExperimentConfig(**dict(common, mode=CENTRALIZED, epsilon=None)))
                    out.append(ExperimentConfig(**dict(common, mode=VFL_NODP, epsilon=None)))
                for eps in self.epsilons:
                    out.append(ExperimentConfig(**dict(common, mode=VFL_DP, epsilon=float(eps))))
        ids = [c.cell_id for c in out]
        if len(set(ids)) != len(ids):
            raise ConfigError("grid contains duplicate cells")
        return out


@dataclass
class SweepResult:
    executed: list
    skipped: list
    summary_path: Path


def _cell_done(path):
    if not path.exists():
        return False
    try:
        read_results(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        log.warning("re-running cell with corrupt output %s: %s", path.name, exc)
        return False
    return True


def _run_cell(config, out_dir, timing):
    result = run(config)
    write_results(result, out_dir, timing)
    return config.cell_id


SUMMARY_FIELDS = (
    "cell", "dataset", "n_owners", "mode", "epsilon", "seed", "status", "epochs_completed",
    "epochs_planned", "final_train_loss", "final_test_loss", "metric_name", "final_metric",
    "spent_epsilon", "sigma", "noised_updates",
)


def write_summary(cells, out_dir):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for cfg in cells:
        path = Path(out_dir) / f"{cfg.cell_id}.jsonl"
        try:
            _, summary = read_results(path)
        except (OSError, ValueError):
            continue
        row = {k: summary.get(k) for k in SUMMARY_FIELDS}
        row.update(dataset=cfg.dataset, n_owners=cfg.n_owners, mode=cfg.mode,
                   epsilon=cfg.epsilon if cfg.mode == VFL_DP else "", seed=cfg.seed)
        writer.writerow(row)
    path = Path(out_dir) / "summary.csv"
    _atomic_write(path, buf.getvalue())
    return path


def sweep(grid, out_dir, timing=False, jobs=1, on_cell=None):
    """Run every grid cell whose result file is missing or invalid.

    ``on_cell(cell_id)`` is called after each finished cell.
    """
    cells = grid.cells()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    todo, skipped = [], []
    for cfg in cells:
        (skipped if _cell_done(out_dir / f"{cfg.cell_id}.jsonl") else todo).append(cfg)
    executed = []
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            for cell_id in pool.map(_run_cell, todo, [out_dir] * len(todo), [timing] * len(todo)):
                executed.append(cell_id)
                if on_cell:
                    on_cell(cell_id)
    else:
        for cfg in todo:
            executed.append(_run_cell(cfg, out_dir, timing))
            if on_cell:
                on_cell(cfg.cell_id)
    summary = write_summary(cells, out_dir)
    return SweepResult(executed, [c.cell_id for c in skipped], summary)


# ----------------------------------------------------------------------------
# plain-text config files: ``key = value`` per line, '#' comments, keys are the
# CLI flag names with or without leading dashes; lists are comma-separated
# ----------------------------------------------------------------------------

def read_config_file(path):
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + Path(path).read_text(encoding="utf-8"))
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return {k.lstrip("-").replace("-", "_"): v.strip() for k, v in parser["config"].items()}


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_INT_FIELDS = {"n_owners", "epochs", "batch_size", "seed", "clip_window", "dp_iterations", "feature_subsample"}
_FLOAT_FIELDS = {"epsilon", "delta", "lr", "clip_s", "clip_percentile", "c2", "lam", "test_fraction"}


def coerce_field(name, value):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown configuration key {name!r}")
    if value is None or (isinstance(value, str) and value.lower() in ("", "none", "null")):
        return None
    try:
        if name in _INT_FIELDS:
            return int(value)
        if name in _FLOAT_FIELDS:
            v = float(value)
            if math.isnan(v):
                raise ValueError
            return v
        if name == "per_layer_limits":
            if isinstance(value, str):
                return tuple(float(x) for x in value.split(",") if x.strip())
            return tuple(float(x) for x in value)
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {name}") from None
    return value


def config_from_mapping(mapping):
    kwargs = {}
    for k, v in mapping.items():
        kwargs[k] = coerce_field(k, v)
    return ExperimentConfig(**kwargs)
