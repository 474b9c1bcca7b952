"""Experiment orchestration: the strategy x data-fraction matrix.

A run trains one baseline per seed, executes every requested
(strategy, fraction, seed) cell, evaluates each resulting model on BOTH test
sets, and persists everything incrementally so an interrupted matrix resumes
where it stopped. Outputs: an append-only journal, a canonically sorted
results CSV, a JSON summary of per-strategy aggregates, one checkpoint and one
freeze-audit report per cell.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import multiprocessing
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, Dataset, SplitSpec, load_image_manifest, load_pixel_csv, \
    sequential_batches, split, take_fraction
from .checkpoint import save_checkpoint
from .network import NUM_CLASSES, Network
from .strategies import KINDS, DataBundle, Hyper, dataclass_asdict, execute, make_plan
from .synthetic import default_domain_pair, gen_synthetic_domain, load_params, \
    params_from_dict

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("strategy", "fraction", "seed", "source_test_acc", "target_test_acc",
                  "delta_source", "delta_target", "epochs_run", "wall_time_s", "checkpoint")

JOURNAL_FILE = "journal.csv"
RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.json"
FAILURES_FILE = "failures.log"


class ConfigError(ValueError):
    """Raised for malformed or contradictory experiment configuration."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_TOP_KEYS = {"arch", "seeds", "strategies", "fractions", "out", "record_timing",
             "shift", "hyper", "source", "target", "workers"}
_DATASET_KEYS = {
    "synthetic": {"kind", "domain", "domain_file", "n_train", "n_val", "n_test", "seed"},
    "pixel_csv": {"kind", "path"},
    "manifest": {"kind", "path", "split"},
}

DEFAULT_SOURCE = {"kind": "synthetic", "n_train": 200, "n_val": 40, "n_test": 40, "seed": 11}
DEFAULT_TARGET = {"kind": "synthetic", "n_train": 30, "n_val": 15, "n_test": 40, "seed": 22}


@dataclass(frozen=True)
class ExperimentConfig:
    arch: str = "desk"
    seeds: tuple[int, ...] = (1, 2, 3)
    strategies: tuple[str, ...] = ("FT_FC", "FT_FC_CL", "RE", "FU")
    fractions: tuple[float, ...] = (0.5, 1.0)
    out: str = "runs/default"
    record_timing: bool = True
    shift: float = 0.6
    workers: int = 1
    hyper: Hyper = Hyper()
    source: dict = field(default_factory=lambda: dict(DEFAULT_SOURCE))
    target: dict = field(default_factory=lambda: dict(DEFAULT_TARGET))

    def __post_init__(self):
        if self.arch not in ("paper", "desk"):
            raise ConfigError(f"arch must be 'paper' or 'desk', got {self.arch!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError(f"workers must be a positive integer, got {self.workers!r}")
        bad = [s for s in self.strategies if s not in KINDS]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; valid: {', '.join(KINDS)}")
        if any(not 0.0 < f <= 1.0 for f in self.fractions) or not self.fractions:
            raise ConfigError(f"fractions must lie in (0,1], got {self.fractions}")
        _validate_dataset_spec(self.source, "source")
        _validate_dataset_spec(self.target, "target")

    def semantic_hash(self) -> str:
        """Hash of every field that affects a cell's numeric outcome."""
        payload = {
            "arch": self.arch,
            "hyper": dataclass_asdict(self.hyper),
            "shift": self.shift,
            "source": self.source,
            "target": self.target,
        }
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _validate_dataset_spec(spec: dict, role: str) -> None:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"{role}: dataset spec must be an object with a 'kind' key")
    kind = spec["kind"]
    if kind not in _DATASET_KEYS:
        raise ConfigError(f"{role}: unknown dataset kind {kind!r}; "
                          f"valid: {', '.join(sorted(_DATASET_KEYS))}")
    unknown = set(spec) - _DATASET_KEYS[kind]
    if unknown:
        raise ConfigError(f"{role}: unknown key(s) {sorted(unknown)} for kind {kind!r}")
    if kind in ("pixel_csv", "manifest") and "path" not in spec:
        raise ConfigError(f"{role}: {kind} spec requires 'path'")
    if kind == "synthetic":
        for k in ("n_train", "n_val", "n_test"):
            if not isinstance(spec.get(k, 1), int) or spec.get(k, 1) < 0:
                raise ConfigError(f"{role}: {k} must be a non-negative integer")


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}; "
                          f"known: {', '.join(sorted(_TOP_KEYS))}")
    kwargs: dict = {}
    for key in ("arch", "out", "record_timing", "shift", "workers"):
        if key in raw:
            kwargs[key] = raw[key]
    if "seeds" in raw:
        kwargs["seeds"] = tuple(raw["seeds"])
    if "strategies" in raw:
        kwargs["strategies"] = tuple(raw["strategies"])
    if "fractions" in raw:
        kwargs["fractions"] = tuple(raw["fractions"])
    if "hyper" in raw:
        known = set(Hyper.__dataclass_fields__)
        unknown = set(raw["hyper"]) - known
        if unknown:
            raise ConfigError(f"unknown hyper key(s): {sorted(unknown)}")
        try:
            kwargs["hyper"] = Hyper(**raw["hyper"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    for role in ("source", "target"):
        if role in raw:
            kwargs[role] = raw[role]
    return ExperimentConfig(**kwargs)


def config_from_file(path: str | Path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# Dataset resolution
# ---------------------------------------------------------------------------

@dataclass
class DomainData:
    train: Dataset
    val: Dataset
    test: Dataset


def resolve_dataset(spec: dict, role: str, shift: float) -> DomainData:
    """Materialize a dataset spec into train/val/test datasets."""
    kind = spec["kind"]
    if kind == "pixel_csv":
        train, val, test = load_pixel_csv(spec["path"])
        return DomainData(train, val, test)
    if kind == "manifest":
        ds = load_image_manifest(spec["path"])
        try:
            sp = SplitSpec(**spec.get("split", {"train_fraction": 0.8, "val_fraction": 0.1,
                                                "test_fraction": 0.1, "subject_disjoint": True}))
        except (TypeError, DataError) as exc:
            raise ConfigError(f"{role}: bad split spec: {exc}") from None
        train, val, test = split(ds, sp)
        return DomainData(train, val, test)
    # synthetic
    if "domain" in spec:
        params = params_from_dict(spec["domain"])
    elif "domain_file" in spec:
        params = load_params(spec["domain_file"])
    else:
        src, tgt = default_domain_pair(shift)
        params = src if role == "source" else tgt
    seed = spec.get("seed", 0)
    return DomainData(
        train=gen_synthetic_domain(params, spec.get("n_train", 100), seed, "tr"),
        val=gen_synthetic_domain(params, spec.get("n_val", 20), seed + 1, "va"),
        test=gen_synthetic_domain(params, spec.get("n_test", 20), seed + 2, "te"),
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray       # [7,7], rows = true class, cols = predicted
    n: int


def evaluate(net: Network, test: Dataset, batch_size: int = 64) -> EvalResult:
    """Eval-mode accuracy over a test set; argmax ties go to the lowest index."""
    if len(test) == 0:
        raise DataError("cannot evaluate on an empty test set")
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    correct = 0
    for x, y in sequential_batches(test, batch_size):
        pred = net.forward(x, "eval").argmax(axis=1)
        correct += int((pred == y).sum())
        np.add.at(confusion, (y, pred), 1)
    return EvalResult(accuracy=correct / len(test), confusion=confusion, n=len(test))


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    strategy: str
    fraction: float
    seed: int
    source_test_acc: float
    target_test_acc: float
    delta_source: float
    delta_target: float
    epochs_run: int
    wall_time_s: float
    checkpoint: str

    def to_row(self) -> list[str]:
        return [
            self.strategy,
            repr(float(self.fraction)),
            str(self.seed),
            f"{self.source_test_acc:.6f}",
            f"{self.target_test_acc:.6f}",
            f"{self.delta_source:.6f}",
            f"{self.delta_target:.6f}",
            str(self.epochs_run),
            f"{self.wall_time_s:.3f}",
            self.checkpoint,
        ]

    @staticmethod
    def from_row(row: list[str]) -> "ExperimentResult":
        return ExperimentResult(
            strategy=row[0], fraction=float(row[1]), seed=int(row[2]),
            source_test_acc=float(row[3]), target_test_acc=float(row[4]),
            delta_source=float(row[5]), delta_target=float(row[6]),
            epochs_run=int(row[7]), wall_time_s=float(row[8]), checkpoint=row[9],
        )

    def key(self) -> tuple[str, float, int]:
        return (self.strategy, self.fraction, self.seed)


def _sort_key(r: ExperimentResult) -> tuple:
    return (KINDS.index(r.strategy), r.fraction, r.seed)


@dataclass
class MatrixRun:
    results: list[ExperimentResult]
    executed: list[tuple[str, float, int]]        # cells computed in THIS call
    failures: list[tuple[str, float, int, str]]
    out_dir: Path


# ---------------------------------------------------------------------------
# The matrix
# ---------------------------------------------------------------------------

# per-process dataset cache so pool workers resolve each domain pair once
_DATASETS: dict[str, tuple[DomainData, DomainData]] = {}


def _get_datasets(config: ExperimentConfig) -> tuple[DomainData, DomainData]:
    key = config.semantic_hash()
    if key not in _DATASETS:
        _DATASETS[key] = (resolve_dataset(config.source, "source", config.shift),
                          resolve_dataset(config.target, "target", config.shift))
    return _DATASETS[key]


def _compute_cell(args: tuple) -> tuple:
    """Train and evaluate one (strategy, fraction, seed) cell.

    Runs either inline or inside a pool worker; writes only its own checkpoint
    and audit file, never the shared journal. Returns the raw cell outcome or
    an error marker.
    """
    config, strategy, fraction, seed = args
    key = (strategy, fraction, seed)
    try:
        out = Path(config.out)
        source, target = _get_datasets(config)
        t0 = time.perf_counter()
        target_train = target.train if strategy == "BL" \
            else take_fraction(target.train, fraction, seed)
        bundle = DataBundle(source_train=source.train, source_val=source.val,
                            target_train=target_train, target_val=target.val)
        pretrained = str(out / _checkpoint_name("BL", 1.0, seed)) \
            if strategy in ("FT_FC", "FT_FC_CL", "RE") else None
        plan = make_plan(strategy, seed=seed, pretrained=pretrained, hyper=config.hyper)
        result = execute(plan, bundle, arch=config.arch)
        ckpt_name = _checkpoint_name(strategy, fraction, seed)
        save_checkpoint(result.network, str(out / ckpt_name))
        (out / _audit_name(strategy, fraction, seed)).write_text(
            result.audit.to_text() + "\n")
        src_acc = round(evaluate(result.network, source.test).accuracy, 6)
        tgt_acc = round(evaluate(result.network, target.test).accuracy, 6)
        wall = round(time.perf_counter() - t0, 3) if config.record_timing else 0.0
        return ("ok", key, src_acc, tgt_acc, result.epochs_run, wall, ckpt_name)
    except Exception:
        return ("error", key, traceback.format_exc())


def run_matrix(config: ExperimentConfig) -> MatrixRun:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = config.semantic_hash()
    journal = _read_journal(out / JOURNAL_FILE, chash)
    executed: list[tuple[str, float, int]] = []
    failures: list[tuple[str, float, int, str]] = []

    def record(outcome: tuple) -> None:
        if outcome[0] == "error":
            _, key, tb = outcome
            log.error("cell %s failed:\n%s", key, tb)
            failures.append((*key, tb.strip().splitlines()[-1]))
            _append_failure(out, key, tb)
            return
        _, key, src_acc, tgt_acc, epochs_run, wall, ckpt_name = outcome
        strategy, fraction, seed = key
        if strategy == "BL":
            d_src, d_tgt = 0.0, 0.0
        else:
            bl = journal[("BL", 1.0, seed)]
            d_src = round(src_acc - bl.source_test_acc, 6)
            d_tgt = round(tgt_acc - bl.target_test_acc, 6)
        row = ExperimentResult(strategy, fraction, seed, src_acc, tgt_acc,
                               d_src, d_tgt, epochs_run, wall, ckpt_name)
        journal[row.key()] = row
        _append_journal(out / JOURNAL_FILE, chash, row)
        executed.append(row.key())
        log.info("cell %s: source %.4f target %.4f (%d epochs, %.1fs)",
                 key, src_acc, tgt_acc, epochs_run, wall)

    def run_phase(cells: list[tuple[str, float, int]]) -> None:
        """Cells in a phase are independent; journal writes stay in this process."""
        jobs = [(config, *cell) for cell in cells]
        if config.workers == 1 or len(jobs) <= 1:
            for job in jobs:
                record(_compute_cell(job))
            return
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(config.workers, len(jobs))) as pool:
            for outcome in pool.imap_unordered(_compute_cell, jobs):
                record(outcome)

    # baselines first: every other cell's deltas reference them
    run_phase([("BL", 1.0, seed) for seed in config.seeds
               if ("BL", 1.0, seed) not in journal])

    cells = []
    for strategy in [k for k in KINDS if k != "BL" and k in config.strategies]:
        for fraction in sorted(config.fractions):
            for seed in config.seeds:
                key = (strategy, fraction, seed)
                if key in journal:
                    log.info("cell %s already journaled, skipping", key)
                elif ("BL", 1.0, seed) not in journal:
                    failures.append((*key, "baseline unavailable"))
                else:
                    cells.append(key)
    run_phase(cells)

    results = sorted(journal.values(), key=_sort_key)
    _write_results(out / RESULTS_FILE, results)
    (out / SUMMARY_FILE).write_text(
        json.dumps(aggregate(results), indent=2, sort_keys=True) + "\n")
    return MatrixRun(results=results, executed=executed, failures=failures, out_dir=out)


def _checkpoint_name(strategy: str, fraction: float, seed: int) -> str:
    token = repr(float(fraction)).replace(".", "p")
    return f"{strategy}_f{token}_s{seed}.fgtb"


def _audit_name(strategy: str, fraction: float, seed: int) -> str:
    token = repr(float(fraction)).replace(".", "p")
    return f"audit_{strategy}_f{token}_s{seed}.txt"


def _append_failure(out: Path, key: tuple, detail: str) -> None:
    with open(out / FAILURES_FILE, "a") as fh:
        fh.write(f"{key}: {detail}\n")


def _read_journal(path: Path, chash: str) -> dict[tuple, ExperimentResult]:
    journal: dict[tuple, ExperimentResult] = {}
    if not path.exists():
        return journal
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        for row in reader:
            if not row or row[0] != chash:
                continue
            result = ExperimentResult.from_row(row[1:])
            journal[result.key()] = result
    return journal


def _append_journal(path: Path, chash: str, result: ExperimentResult) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(("config_hash",) + RESULT_COLUMNS)
        writer.writerow([chash] + result.to_row())


def _write_results(path: Path, results: list[ExperimentResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in results:
            writer.writerow(r.to_row())


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate(results: list[ExperimentResult]) -> dict:
    """Per-strategy aggregate deltas plus a Pareto-based trade-off ranking."""
    by_strategy: dict[str, list[ExperimentResult]] = {}
    for r in results:
        by_strategy.setdefault(r.strategy, []).append(r)

    table: dict[str, dict] = {}
    for name, rows in by_strategy.items():
        ds = [r.delta_source for r in rows]
        dt = [r.delta_target for r in rows]
        table[name] = {
            "n": len(rows),
            "mean_source_test_acc": _mean([r.source_test_acc for r in rows]),
            "mean_target_test_acc": _mean([r.target_test_acc for r in rows]),
            "delta_source": {"mean": _mean(ds), "min": min(ds), "max": max(ds)},
            "delta_target": {"mean": _mean(dt), "min": min(dt), "max": max(dt)},
            "scalar_score": _mean(dt) + _mean(ds),
        }

    adapt = [n for n in table if n != "BL"]
    points = {n: (table[n]["delta_target"]["mean"], table[n]["delta_source"]["mean"])
              for n in adapt}

    def dominates(a: str, b: str) -> bool:
        (ta, sa), (tb, sb) = points[a], points[b]
        return ta >= tb and sa >= sb and (ta > tb or sa > sb)

    front = [n for n in adapt if not any(dominates(m, n) for m in adapt if m != n)]
    best = [n for n in adapt if all(dominates(n, m) for m in adapt if m != n)]
    return {
        "strategies": table,
        "ranking": sorted(adapt, key=lambda n: (-points[n][0], -points[n][1])),
        "pareto_front": sorted(front, key=KINDS.index),
        "best_tradeoff": best[0] if len(best) == 1 else None,
    }


def _mean(xs: list[float]) -> float:
    return sum(xs) / len(xs) if xs else float("nan")


def read_results_csv(path: str | Path) -> list[ExperimentResult]:
    out: list[ExperimentResult] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(RESULT_COLUMNS):
            raise ConfigError(f"{path}: unexpected results header {header}")
        for row in reader:
            if row:
                out.append(ExperimentResult.from_row(row))
    return out


def write_plot_data(path: str | Path, results: list[ExperimentResult]) -> None:
    """Long-format accuracy table: one row per (strategy, fraction, seed, test set)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("strategy", "fraction", "seed", "test_set", "accuracy"))
        for r in sorted(results, key=_sort_key):
            writer.writerow((r.strategy, repr(float(r.fraction)), r.seed, "source",
                             f"{r.source_test_acc:.6f}"))
            writer.writerow((r.strategy, repr(float(r.fraction)), r.seed, "target",
                             f"{r.target_test_acc:.6f}"))
