"""Experiment configuration, single runs and grid benchmarks.

An :class:`ExperimentConfig` names a dataset (a synthetic spec, a directory
of ``train/val/test.csv`` files, or one CSV to split), a model family, base
optimizer settings and the grid axes. A benchmark trains every grid cell
for every seed, keeps each run's checkpoint with the best worst-group
validation accuracy, and picks one cell per mode by the same criterion.
"""
from __future__ import annotations

import csv
import functools
import io
import json
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from groupdro import __version__
from groupdro.core import group_fractions, stratified_split
from groupdro.datagen import SyntheticSpec, generate_splits, read_csv
from groupdro.errors import ConfigError, InvalidArgument, NumericalError
from groupdro.models import Arch
from groupdro.optimizer import MODES, OptimizerConfig, early_stop_select, train

OUTPUT_ROOT_ENV = "GROUPDRO_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run or a benchmark.

    ``dataset`` is either a synthetic spec (dict) or a path. A directory path
    must hold ``train.csv``, ``val.csv`` and ``test.csv``; a file path is
    split with ``split_fractions``. ``arch`` gives ``kind`` (and ``H`` for
    ``mlp1``); input size and class count come from the data.
    """

    dataset: dict | str
    arch: dict = field(default_factory=lambda: {"kind": "logistic"})
    optimizer: dict = field(default_factory=dict)
    n_val: int = 1000
    n_test: int = 2000
    balanced_eval: bool = True
    split_fractions: tuple = (0.6, 0.2, 0.2)
    modes: tuple = MODES
    lambdas: tuple = (0.0,)
    adjustments: tuple = (0.0,)
    adjust_at_lambda: float | None = None
    epochs: tuple = ()
    seeds: tuple = (0,)
    early_stopping: bool = True
    output_dir: str | None = None

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        for name in ("modes", "lambdas", "adjustments", "epochs", "seeds"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if not isinstance(self.dataset, (dict, str)):
            raise ConfigError("dataset must be a synthetic spec object or a path")
        if isinstance(self.dataset, dict):
            SyntheticSpec.from_dict({**self.dataset, "seed": self.dataset.get("seed", 0)})
        if "kind" not in self.arch:
            raise ConfigError("arch needs a 'kind'")
        if not self.modes or not self.lambdas or not self.seeds:
            raise ConfigError("grid needs at least one mode, lambda and seed")
        unknown = set(self.modes) - set(MODES)
        if unknown:
            raise ConfigError(f"unknown mode(s) {sorted(unknown)}")
        for cell in self.cells(include_adjusted=True, designated=self.lambdas[0]):
            try:
                self.optimizer_config(cell, self.seeds[0])
            except InvalidArgument as exc:
                raise ConfigError(f"grid cell {cell} is invalid: {exc}") from None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown experiment field(s): {sorted(unknown)}")
        if "dataset" not in data:
            raise ConfigError("experiment config is missing required field 'dataset'")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def base_optimizer(self) -> OptimizerConfig:
        return OptimizerConfig.from_dict(self.optimizer)

    def cells(self, include_adjusted: bool = False, designated: float | None = None) -> list:
        """Grid cells ``(mode, lambda, C, epochs)`` in a fixed order.

        Cells with ``C > 0`` exist only for ``group_dro`` at the designated
        lambda and are returned only when ``include_adjusted`` is set.
        """
        epochs = self.epochs or (self.base_optimizer().epochs,)
        out = []
        for mode in self.modes:
            for lam in self.lambdas:
                for ep in epochs:
                    out.append(Cell(mode, float(lam), 0.0, int(ep)))
        if include_adjusted and "group_dro" in self.modes:
            lam = self.adjust_at_lambda if self.adjust_at_lambda is not None else designated
            for C in self.adjustments:
                if C > 0:
                    for ep in epochs:
                        out.append(Cell("group_dro", float(lam), float(C), int(ep)))
        return out

    def optimizer_config(self, cell: "Cell", seed: int) -> OptimizerConfig:
        return replace(self.base_optimizer(), mode=cell.mode, lam=cell.lam, adjustment_c=cell.C,
                       epochs=cell.epochs, seed=int(seed))

    def output_root(self) -> Path:
        return Path(self.output_dir) if self.output_dir else default_output_root()


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


@dataclass(frozen=True)
class Cell:
    mode: str
    lam: float
    C: float
    epochs: int

    def run_id(self, seed: int) -> str:
        return f"{self.mode}_lam{self.lam:g}_C{self.C:g}_ep{self.epochs}_s{seed}"


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return __version__
    described = out.stdout.strip()
    return f"{__version__}+g{described}" if out.returncode == 0 and described else __version__


@functools.lru_cache(maxsize=8)
def _load_splits(dataset_json: str, n_val: int, n_test: int, balanced: bool, fractions: tuple, seed: int):
    dataset = json.loads(dataset_json)
    if isinstance(dataset, dict):
        spec = SyntheticSpec.from_dict({**dataset, "seed": dataset.get("seed", seed)})
        return generate_splits(spec, n_val, n_test, balanced_eval=balanced)
    path = Path(dataset)
    if path.is_dir():
        parts = [path / f"{name}.csv" for name in ("train", "val", "test")]
        missing = [str(p) for p in parts if not p.exists()]
        if missing:
            raise ConfigError(f"dataset directory lacks {missing}")
        train_set = read_csv(parts[0])
        return tuple([train_set] + [read_csv(p, m=train_set.m, K=train_set.K) for p in parts[1:]])
    if not path.exists():
        raise ConfigError(f"dataset not found: {path}")
    return stratified_split(read_csv(path), fractions, seed)


def load_splits(config: ExperimentConfig, seed: int):
    """``(train, val, test)`` for ``seed``; synthetic data without a fixed seed follows the run seed."""
    return _load_splits(json.dumps(config.dataset, sort_keys=True), config.n_val, config.n_test,
                        config.balanced_eval, config.split_fractions, int(seed))


def build_arch(config: ExperimentConfig, train_set) -> Arch:
    kind = config.arch["kind"]
    if kind == "logistic":
        return Arch.logistic(train_set.d)
    if kind == "softmax":
        return Arch.softmax(train_set.d, train_set.K)
    if kind == "mlp1":
        if "H" not in config.arch:
            raise ConfigError("mlp1 needs a hidden width 'H'")
        return Arch.mlp1(train_set.d, int(config.arch["H"]), train_set.K)
    raise ConfigError(f"unknown arch kind {kind!r}")


@dataclass
class RunResult:
    run_id: str
    cell: Cell
    seed: int
    checkpoint: int = -1
    val_worst: float = float("nan")
    test_acc: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    test_sizes: list = field(default_factory=list)
    test_avg: float = float("nan")
    test_worst: float = float("nan")
    rows: list = field(default_factory=list)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def metric_rows(run_id, cell, history, fractions) -> list:
    """Tidy per-group rows for every checkpoint and split."""
    rows = []
    for c in history.checkpoints:
        for split, stats in c.splits.items():
            avg = float(np.dot(fractions, stats.acc))
            for gid in range(stats.acc.size):
                rows.append([run_id, cell.mode, cell.lam, cell.C, c.index, split, avg, stats.worst_acc, gid,
                             float(stats.acc[gid]), float(stats.loss[gid])])
    return rows


def run_cell(config: ExperimentConfig, cell: Cell, seed: int, out_dir: Path | None = None) -> RunResult:
    """Train one grid cell for one seed and evaluate its selected checkpoint."""
    train_set, val_set, test_set = load_splits(config, seed)
    arch = build_arch(config, train_set)
    opt = config.optimizer_config(cell, seed)
    run_id = cell.run_id(seed)
    params, history = train(opt, train_set, val_set, arch, eval_sets={"test": test_set},
                            snapshot_every=1 if config.early_stopping else 0)
    index = early_stop_select(history) if config.early_stopping else len(history) - 1
    chosen = history.checkpoints[index]
    fractions = group_fractions(train_set)
    test = chosen.splits["test"]
    result = RunResult(
        run_id, cell, int(seed), checkpoint=index, val_worst=chosen.splits["val"].worst_acc,
        test_acc=test.acc.tolist(), test_loss=test.loss.tolist(), test_sizes=test_set.group_sizes.tolist(),
        test_avg=float(np.dot(fractions, test.acc)), test_worst=test.worst_acc,
        rows=metric_rows(run_id, cell, history, fractions),
    )
    if out_dir is not None:
        theta = chosen.theta if chosen.theta is not None else params.theta
        write_run_dir(out_dir / run_id, config, opt, history, type(params)(theta, arch), result)
    return result


def write_run_dir(path: Path, config: ExperimentConfig, opt: OptimizerConfig, history, params, result=None):
    """Config, seed, version, history CSV, summary JSON and the model snapshot."""
    path.mkdir(parents=True, exist_ok=True)
    resolved = config.to_dict()
    resolved["optimizer"] = opt.to_dict()
    (path / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    meta = {"seed": opt.seed, "version": version_string()}
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (path / "history.csv").write_text(history.to_csv())
    summary = history.summary()
    if result is not None:
        summary["selected_checkpoint"] = result.checkpoint
        summary["test_worst_group_acc"] = result.test_worst
        summary["test_avg_acc"] = result.test_avg
    (path / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (path / "model.json").write_text(params.to_json() + "\n")


def _safe_run(args) -> RunResult:
    config, cell, seed, out_dir = args
    try:
        return run_cell(config, cell, seed, out_dir)
    except (NumericalError, InvalidArgument, ConfigError, ArithmeticError) as exc:
        return RunResult(cell.run_id(seed), cell, int(seed), error=f"{type(exc).__name__}: {exc}")


def _map_runs(config, cells, out_dir, jobs):
    tasks = [(config, cell, seed, out_dir) for cell in cells for seed in config.seeds]
    if jobs <= 1:
        return [_safe_run(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_safe_run, tasks))


@dataclass
class TableRow:
    mode: str
    cell: Cell
    val_worst: float
    test_avg: float
    test_worst: float
    test_worst_std: float
    checkpoints: list
    seeds: int

    def as_list(self) -> list:
        return [self.mode, f"{self.cell.lam:g}", f"{self.cell.C:g}", self.cell.epochs,
                " ".join(str(c) for c in self.checkpoints), f"{self.val_worst:.4f}", f"{self.test_avg:.4f}",
                f"{self.test_worst:.4f}", f"{self.test_worst_std:.4f}", self.seeds]


TABLE_HEADER = ["mode", "lambda", "C", "epochs", "checkpoint", "val_worst_acc", "test_avg_acc",
                "test_worst_acc", "test_worst_std", "seeds"]


def select_best(scores) -> int:
    """Index of the highest score, earliest on ties."""
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


def _cell_scores(cells, results):
    by_cell = {}
    for r in results:
        by_cell.setdefault(r.cell, []).append(r)
    scores = []
    for cell in cells:
        runs = by_cell.get(cell, [])
        ok = [r for r in runs if r.ok]
        scores.append(np.mean([r.val_worst for r in ok]) if ok and len(ok) == len(runs) else -np.inf)
    return scores, by_cell


def summarize_mode(mode, cells, results) -> TableRow | None:
    cells = [c for c in cells if c.mode == mode]
    scores, by_cell = _cell_scores(cells, results)
    if not cells or max(scores) == -np.inf:
        return None
    best = cells[select_best(scores)]
    runs = sorted(by_cell[best], key=lambda r: r.seed)
    acc = np.mean([r.test_acc for r in runs], axis=0)
    worst_group = int(np.argmin(acc))
    n = runs[0].test_sizes[worst_group]
    p = acc[worst_group]
    return TableRow(mode, best, float(scores[select_best(scores)]), float(np.mean([r.test_avg for r in runs])),
                    float(np.mean([r.test_worst for r in runs])), float(np.sqrt(p * (1 - p) / n)),
                    [r.checkpoint for r in runs], len(runs))


@dataclass
class BenchmarkResult:
    table: list
    results: list

    @property
    def failures(self) -> list:
        return [r for r in self.results if not r.ok]

    def table_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_HEADER)
        for row in self.table:
            writer.writerow(row.as_list())
        return buf.getvalue()

    def table_markdown(self) -> str:
        lines = ["| " + " | ".join(TABLE_HEADER) + " |", "|" + "---|" * len(TABLE_HEADER)]
        lines += ["| " + " | ".join(str(v) for v in row.as_list()) + " |" for row in self.table]
        return "\n".join(lines) + "\n"

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["run_id", "mode", "lambda", "C", "checkpoint", "split", "avg_acc", "worst_acc",
                         "group", "acc", "loss"])
        for r in self.results:
            for row in r.rows:
                writer.writerow([v if isinstance(v, (int, str)) else repr(v) for v in row])
        return buf.getvalue()


def run_benchmark(config: ExperimentConfig, out_dir: Path | None = None, jobs: int = 1) -> BenchmarkResult:
    """Grid search per mode, then the adjustment search at the designated lambda."""
    runs_dir = None if out_dir is None else out_dir / "runs"
    plain = config.cells()
    results = _map_runs(config, plain, runs_dir, jobs)
    designated = config.adjust_at_lambda
    if designated is None and "group_dro" in config.modes:
        dro_cells = [c for c in plain if c.mode == "group_dro"]
        scores, _ = _cell_scores(dro_cells, results)
        designated = dro_cells[select_best(scores)].lam
    adjusted = [c for c in config.cells(include_adjusted=True, designated=designated) if c not in plain]
    results += _map_runs(config, adjusted, runs_dir, jobs)
    cells = plain + adjusted
    table = [row for row in (summarize_mode(m, cells, results) for m in config.modes) if row is not None]
    bench = BenchmarkResult(table, results)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(config.to_json() + "\n")
        (out_dir / "table.csv").write_text(bench.table_csv())
        (out_dir / "table.md").write_text(bench.table_markdown())
        (out_dir / "metrics.csv").write_text(bench.metrics_csv())
        failures = [{"run_id": r.run_id, "error": r.error} for r in bench.failures]
        (out_dir / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    return bench
