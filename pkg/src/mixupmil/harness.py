"""Experiment protocol: stratified splits, training loop, evaluation, repeats and results CSV."""

from __future__ import annotations

import io
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from mixupmil.augment import AugmentConfig, build_epoch_bags
from mixupmil.bagstore import (
    BagDataset,
    DatasetError,
    load_dataset,
    round_half_up,
    subsample_dataset,
    subsample_patches,
)
from mixupmil.mil_models import KINDS, MilModel, init_model, loss_and_grads, predict
from mixupmil.nn_core import AdamState, adam_update
from mixupmil.rng import ALGORITHM, RngStream

log = logging.getLogger(__name__)

OUTPUT_DIR_ENV = "MIXUPMIL_OUTPUT_DIR"
CONFIG_KEYS = (
    "dataset",
    "model",
    "augment.mode",
    "augment.beta",
    "epochs",
    "lr",
    "repeats",
    "train_fraction",
    "base_seed",
    "bags_per_class",
    "patches_per_bag",
    "output",
)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class ExperimentError(RuntimeError):
    def __init__(self, repeat: int, cause: Exception):
        super().__init__(f"repeat {repeat}: {cause}")
        self.repeat = repeat
        self.cause = cause


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "."))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = ""
    model: str = "abmil"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    epochs: int = 200
    lr: float = 2e-4
    repeats: int = 32
    train_fraction: float = 0.8
    base_seed: int = 0
    bags_per_class: int | None = None
    patches_per_bag: int | None = None
    output: str = ""

    def __post_init__(self) -> None:
        if self.model not in KINDS:
            raise ConfigError(f"model must be one of {', '.join(KINDS)}, got {self.model!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.repeats < 1:
            raise ConfigError(f"repeats must be >= 1, got {self.repeats}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("bags_per_class", "patches_per_bag"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1 when set, got {value}")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ExperimentConfig":
        """Build from flat ``key -> text`` pairs (``augment.mode`` style keys)."""
        unknown = set(values) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw: dict = {}
        try:
            for f in fields(cls):
                if f.name == "augment":
                    continue
                if f.name in values:
                    kw[f.name] = _parse_value(f.name, values[f.name])
            augment = AugmentConfig(
                values.get("augment.mode", "none"),
                float(values.get("augment.beta", AugmentConfig.beta)),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cls(augment=augment, **kw)

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for key in CONFIG_KEYS:
            if key == "augment.mode":
                out[key] = self.augment.mode
            elif key == "augment.beta":
                out[key] = repr(self.augment.beta)
            else:
                value = getattr(self, key)
                out[key] = "" if value is None else (repr(value) if isinstance(value, float) else str(value))
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_mapping().items())


_INT_KEYS = {"epochs", "repeats", "base_seed", "bags_per_class", "patches_per_bag"}
_FLOAT_KEYS = {"lr", "train_fraction"}


def _parse_value(key: str, text: str):
    text = text.strip()
    if key in _INT_KEYS:
        if text == "" or text.lower() == "none":
            if key in ("bags_per_class", "patches_per_bag"):
                return None
            raise ValueError(f"{key} needs a value")
        return int(text)
    if key in _FLOAT_KEYS:
        return float(text)
    return text


def parse_config_text(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text(encoding="utf-8"))
    values.update(overrides or {})
    return ExperimentConfig.from_mapping(values)


# ---------------------------------------------------------------- protocol stages


def split_dataset(ds: BagDataset, fraction: float, rng: RngStream) -> tuple[BagDataset, BagDataset]:
    """Stratified split: ``floor(fraction * n_c + 0.5)`` bags of class c go to training."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    by_class = ds.indices_by_class(one_hot_only=False)
    train_idx: list[int] = []
    for c, idx in enumerate(by_class):
        if len(idx) < 2:
            raise DatasetError(f"class {ds.class_names[c]!r} has {len(idx)} bags; splitting needs >= 2")
        perm = rng.permutation(len(idx))
        n_train = round_half_up(fraction * len(idx))
        train_idx.extend(idx[k] for k in perm[:n_train])
    train_set = set(train_idx)
    test_idx = [i for i in range(len(ds)) if i not in train_set]
    return ds.subset(sorted(train_idx)), ds.subset(test_idx)


@dataclass
class TrainResult:
    model: MilModel
    losses: list[float]
    iterations: list[int]


def train_model(kind: str, train: BagDataset, cfg: ExperimentConfig, rng: RngStream) -> TrainResult:
    """One Adam step per bag; bags re-augmented and re-ordered every epoch."""
    if len(train) == 0:
        raise DatasetError("empty training set")
    model = init_model(kind, train.descriptor_dim, train.n_classes, rng)
    state = AdamState(lr=cfg.lr)
    losses, iterations = [], []
    for epoch in range(cfg.epochs):
        bags = build_epoch_bags(train, cfg.augment, rng)
        order = rng.permutation(len(bags))
        total = 0.0
        for k in order:
            bag = bags[k]
            loss, grads = loss_and_grads(model, bag, bag.label)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, bag {bag.id!r}")
            adam_update(model.params, grads, state)
            total += loss
        losses.append(total / len(bags))
        iterations.append(len(bags))
        log.debug("epoch %d loss %.6f", epoch, losses[-1])
    return TrainResult(model, losses, iterations)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # rows = true class, columns = predicted class
    per_class: np.ndarray  # nan where a class has no test bags


def evaluate(model: MilModel, test: BagDataset) -> EvalResult:
    if len(test) == 0:
        raise DatasetError("empty test set")
    c = test.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    for bag in test.bags:
        if not bag.is_one_hot:
            raise DatasetError(f"test bag {bag.id!r} has a soft label; evaluation needs ground-truth classes")
        pred, _ = predict(model, bag)
        confusion[bag.class_index, pred] += 1
    totals = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(totals > 0, np.diag(confusion) / np.maximum(totals, 1), np.nan)
    return EvalResult(float(np.trace(confusion) / confusion.sum()), confusion, per_class)


@dataclass
class ResultRow:
    repeat: int
    seed: int
    accuracy: float
    per_class: list[float]
    train_size: int
    test_size: int


@dataclass
class RepeatOutcome:
    row: ResultRow
    train: TrainResult


def run_repeat(ds: BagDataset, cfg: ExperimentConfig, repeat: int) -> RepeatOutcome:
    seed = cfg.base_seed + repeat
    rng = RngStream(seed)
    pool = ds
    if cfg.bags_per_class is not None:
        pool = subsample_dataset(pool, cfg.bags_per_class, rng)
    if cfg.patches_per_bag is not None:
        pool = pool.replace_bags([subsample_patches(b, cfg.patches_per_bag, rng) for b in pool.bags])
    train, test = split_dataset(pool, cfg.train_fraction, rng)
    result = train_model(cfg.model, train, cfg, rng)
    ev = evaluate(result.model, test)
    row = ResultRow(repeat, seed, ev.accuracy, [float(a) for a in ev.per_class], len(train), len(test))
    return RepeatOutcome(row, result)


def _repeat_row(args) -> ResultRow:
    ds, cfg, r = args
    try:
        return run_repeat(ds, cfg, r).row
    except Exception as exc:
        raise ExperimentError(r, exc) from exc


@dataclass
class ExperimentResult:
    rows: list[ResultRow]
    mean: float
    std: float
    n_classes: int


def run_experiment(cfg: ExperimentConfig, dataset: BagDataset | None = None, workers: int = 1) -> ExperimentResult:
    """All repeats of the protocol; seeds are ``base_seed + r``.

    With ``workers > 1`` repeats run in separate processes; rows are always
    returned in repeat order.
    """
    ds = dataset if dataset is not None else load_dataset(cfg.dataset)
    jobs = [(ds, cfg, r) for r in range(cfg.repeats)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_repeat_row, jobs))
    else:
        rows = [_repeat_row(j) for j in jobs]
    acc = np.array([r.accuracy for r in rows])
    std = float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0
    return ExperimentResult(rows, float(np.mean(acc)), std, ds.n_classes)


def format_results_csv(result: ExperimentResult, cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    buf.write("# mixupmil experiment results\n")
    buf.write(f"# rng={ALGORITHM}\n")
    for key, value in cfg.to_mapping().items():
        if key != "output":
            buf.write(f"# config {key}={value}\n")
    buf.write("# split=stratified per class, n_train = floor(train_fraction * n_c + 0.5)\n")
    buf.write("# model evaluated after the final epoch; std uses the n-1 denominator\n")
    cols = ["repeat", "seed", "accuracy"] + [f"acc_class_{c}" for c in range(result.n_classes)]
    buf.write(",".join(cols + ["train_size", "test_size"]) + "\n")
    for r in result.rows:
        vals = [str(r.repeat), str(r.seed), repr(r.accuracy)] + [repr(a) for a in r.per_class]
        buf.write(",".join(vals + [str(r.train_size), str(r.test_size)]) + "\n")
    buf.write(f"# summary mean_accuracy={result.mean!r}\n")
    buf.write(f"# summary std_accuracy={result.std!r}\n")
    buf.write(f"# summary repeats={len(result.rows)}\n")
    return buf.getvalue()


def write_results_csv(result: ExperimentResult, cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_results_csv(result, cfg), encoding="utf-8")
    return path
