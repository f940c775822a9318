"""Mini-batch training and evaluation for graph-level regression."""

from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from gmixer import checkpoint
from gmixer.graphs import DatasetSplit, MolecularGraph, pad_batch
from gmixer.model import Architecture, GmnModel
from gmixer.params import adam_step, clip_grad_norm
from gmixer.tensor import ComputeTape, NonFiniteError, Tensor, backward, sub, tensor_abs, tensor_mean

log = logging.getLogger(__name__)

ARCH_FIELDS = ("num_layers", "d", "d_e", "n_max", "token_hidden", "channel_hidden", "readout_hidden", "activation")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 50
    seed: int = 0
    precision: int = 32
    delta_mode: str = "log_mean"
    grad_clip: float = 5.0
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.5
    eval_batch_size: int = 256
    num_layers: int = 4
    d: int = 64
    d_e: int = 16
    n_max: int = 37
    token_hidden: int = 64
    channel_hidden: int = 128
    readout_hidden: int = 64
    activation: str = "gelu"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.delta_mode not in ("log_mean", "raw_mean_degree"):
            raise ValueError(f"unknown delta_mode {self.delta_mode!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every)

    def architecture(self, vocab_atoms: int, vocab_bonds: int, delta: float) -> Architecture:
        return Architecture(vocab_atoms=vocab_atoms, vocab_bonds=vocab_bonds, delta=delta,
                            delta_mode=self.delta_mode, **{k: getattr(self, k) for k in ARCH_FIELDS})

    @classmethod
    def field_types(cls) -> dict[str, type]:
        defaults = cls.__dataclass_fields__
        return {f.name: type(defaults[f.name].default) for f in fields(cls)}

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        types = cls.field_types()
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = types[key](raw)
        return cls(**kwargs)


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: str(v) for k, v in (overrides or {}).items()})
    return TrainConfig.from_mapping(values)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_mae: float
    test_mae: float | None
    wall_seconds: float


class TrainingDiverged(RuntimeError):
    pass


def l1_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if target.size == 0:
        raise ValueError("l1_loss of an empty batch")
    return tensor_mean(tensor_abs(sub(pred, target)))


def batches(graphs: Sequence[MolecularGraph], size: int, order=None):
    idx = range(len(graphs)) if order is None else order
    idx = list(idx)
    for start in range(0, len(idx), size):
        yield [graphs[i] for i in idx[start:start + size]]


def predict(model: GmnModel, graphs: Sequence[MolecularGraph], batch_size: int = 256) -> np.ndarray:
    n_max = model.arch.n_max
    for i, g in enumerate(graphs):
        if g.num_nodes > n_max:
            raise ValueError(f"graph {i} has {g.num_nodes} nodes, more than the model's n_max={n_max}")
    out = [model(pad_batch(chunk, n_max)).data for chunk in batches(graphs, batch_size)]
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: GmnModel, graphs: Sequence[MolecularGraph], batch_size: int = 256) -> float:
    """Mean absolute error of forward-only predictions."""
    if not graphs:
        raise ValueError("cannot evaluate on an empty split")
    pred = predict(model, graphs, batch_size).astype(np.float64)
    target = np.array([g.target for g in graphs])
    return math.fsum(np.abs(pred - target)) / len(graphs)


def _norm_summary(model: GmnModel) -> str:
    norms = model.registry.value_norms()
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:3]
    bad = [k for k, v in norms.items() if not math.isfinite(v)]
    total = math.sqrt(sum(v * v for v in norms.values() if math.isfinite(v)))
    return f"global param norm {total:.4g}; largest {worst}; non-finite {bad}"


def train(config: TrainConfig, dataset: DatasetSplit, delta: float,
          on_epoch: Callable[[EpochMetrics, GmnModel, bool], None] | None = None):
    """Adam training with early stopping on validation MAE.

    Returns ``(model, history)`` with the best-validation parameters loaded.
    An empty validation split falls back to monitoring the training split.
    """
    arch = config.architecture(dataset.vocab_atoms, dataset.vocab_bonds, delta)
    model = GmnModel(arch, seed=config.seed, dtype=config.dtype)
    history: list[EpochMetrics] = []
    if config.max_epochs == 0:
        return model, history
    if not dataset.train:
        raise ValueError("empty training split")
    val = dataset.validation or dataset.train
    rng = np.random.default_rng(config.seed + 1)
    best_val = math.inf
    best_state = model.registry.snapshot()
    stale = 0
    start = time.perf_counter()
    for epoch in range(config.max_epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(dataset.train))
        total, seen = 0.0, 0
        for bi, chunk in enumerate(batches(dataset.train, config.batch_size, order)):
            batch = pad_batch(chunk, config.n_max)
            try:
                with ComputeTape() as tape:
                    loss = l1_loss(model(batch), batch.targets)
                backward(tape, loss)
                clip_grad_norm(model.registry, config.grad_clip)
                adam_step(model.registry, lr, config.beta1, config.beta2, config.eps)
            except NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch}, batch {bi}: {exc}; {_norm_summary(model)}") from exc
            total += loss.item() * len(chunk)
            seen += len(chunk)
        val_mae = evaluate(model, val, config.eval_batch_size)
        improved = val_mae < best_val
        test_mae = None
        if improved:
            best_val = val_mae
            best_state = model.registry.snapshot()
            stale = 0
            if dataset.test:
                test_mae = evaluate(model, dataset.test, config.eval_batch_size)
        else:
            stale += 1
        m = EpochMetrics(epoch, total / seen, val_mae, test_mae, time.perf_counter() - start)
        history.append(m)
        log.info("epoch %d loss %.4f val %.4f%s", epoch, m.train_loss, val_mae, " *" if improved else "")
        if on_epoch is not None:
            on_epoch(m, model, improved)
        if stale >= config.patience:
            break
    model.registry.load(best_state)
    return model, history


# ---------------------------------------------------------------------------
# run artifacts

CSV_COLUMNS = ("epoch", "train_loss", "val_mae", "test_mae", "wall_seconds")


def checkpoint_meta(model: GmnModel, config: TrainConfig) -> dict:
    meta = model.arch.to_meta()
    meta["precision"] = config.precision
    return meta


def model_from_checkpoint(path) -> GmnModel:
    meta, values = checkpoint.load(path)
    try:
        arch = Architecture.from_meta(meta)
    except TypeError as exc:
        raise checkpoint.CheckpointError(f"checkpoint metadata incomplete: {exc}") from exc
    dtype = np.float32 if meta.get("precision", 64) == 32 else np.float64
    model = GmnModel(arch, dtype=dtype)
    try:
        model.registry.load(values)
    except (KeyError, ValueError) as exc:
        raise checkpoint.CheckpointError(str(exc)) from exc
    return model


def git_describe() -> str | None:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


class RunWriter:
    """Streams metrics.csv and checkpoints into ``run_dir`` during training."""

    def __init__(self, run_dir, config: TrainConfig):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self._fh = open(self.dir / "metrics.csv", "w", newline="")
        self._csv = csv.writer(self._fh, lineterminator="\n")
        self._csv.writerow(CSV_COLUMNS)

    def __call__(self, m: EpochMetrics, model: GmnModel, improved: bool) -> None:
        row = asdict(m)
        row["test_mae"] = "" if m.test_mae is None else repr(m.test_mae)
        self._csv.writerow([row["epoch"], repr(m.train_loss), repr(m.val_mae), row["test_mae"],
                            f"{m.wall_seconds:.6f}"])
        self._fh.flush()
        meta = checkpoint_meta(model, self.config)
        values = model.registry.snapshot()
        checkpoint.save(self.dir / "last.ckpt", values, meta)
        if improved:
            checkpoint.save(self.dir / "best.ckpt", values, meta)

    def finish(self, model: GmnModel, history: list[EpochMetrics], dataset: DatasetSplit) -> dict:
        self._fh.close()
        meta = checkpoint_meta(model, self.config)
        if not history:
            values = model.registry.snapshot()
            checkpoint.save(self.dir / "best.ckpt", values, meta)
            checkpoint.save(self.dir / "last.ckpt", values, meta)
        best = min(history, key=lambda m: (m.val_mae, m.epoch)) if history else None
        summary = {
            "best_epoch": best.epoch if best else None,
            "best_val_mae": best.val_mae if best else None,
            "best_test_mae": best.test_mae if best else None,
            "train_mae": evaluate(model, dataset.train, self.config.eval_batch_size) if dataset.train else None,
            "epochs_run": len(history),
            "num_parameters": model.registry.num_values(),
            "config": asdict(self.config),
            "architecture": model.arch.to_meta(),
            "git_describe": git_describe(),
            "wall_seconds": history[-1].wall_seconds if history else 0.0,
        }
        (self.dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return summary
