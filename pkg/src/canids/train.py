"""Dataset splitting, the minibatch Adam training loop and DoS->fuzzing transfer."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import model_io, nn
from .errors import DomainError, TrainingError
from .features import WindowSet
from .metrics import EvalReport, evaluate_model

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 25
    batch_size: int = 64
    split: tuple[float, float, float] = (0.80, 0.15, 0.05)
    seed: int = 0
    drop_threshold: float = 2.0  # accuracy points below the best epoch
    patience: int = 3
    checkpoint_dir: str | None = None

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        if len(self.split) != 3 or abs(sum(self.split) - 1) > 1e-9 or min(self.split) < 0:
            raise DomainError(f"split fractions {self.split} must be three and sum to 1")
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise DomainError("learning rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    checkpoint: str | None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {"records": [asdict(r) for r in self.records],
                "best_epoch": self.best_epoch, "stopped_early": self.stopped_early}


def split_dataset(windows, config: TrainConfig):
    """Seeded shuffle, then a contiguous train/val/test cut (floors; remainder to train)."""
    n = len(windows)
    if n < 20:
        raise DomainError(f"need at least 20 windows to split, got {n}")
    n_val = math.floor(n * config.split[1])
    n_test = math.floor(n * config.split[2])
    n_train = n - n_val - n_test
    order = np.random.default_rng(config.seed).permutation(n)
    parts = order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]
    if isinstance(windows, WindowSet):
        return tuple(windows.subset(np.sort(p)) for p in parts)
    return tuple([windows[i] for i in np.sort(p)] for p in parts)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, size):
        yield order[s:s + size]


def evaluate_loss_accuracy(model: nn.CnnModel, data: WindowSet,
                           batch_size: int = 512) -> tuple[float, float]:
    probs = np.concatenate([nn.model_forward(model, data.x[i:i + batch_size])
                            for i in range(0, len(data), batch_size)])
    loss, _ = nn.bce_loss(probs, data.y.astype(np.float64))
    acc = float(np.mean((probs >= 0.5) == (data.y == 1)))
    return loss, acc


def train_model(model: nn.CnnModel, train: WindowSet, val: WindowSet, config: TrainConfig,
                checkpoint_dir=None, rng_seed=None,
                val_hook: Callable[[int, WindowSet], WindowSet] | None = None,
                ) -> tuple[nn.CnnModel, TrainHistory]:
    """Train in place and return a copy of the best-validation-accuracy epoch.

    ``val_hook(epoch, val)`` may substitute the validation set per epoch
    (used to provoke early stopping in tests).
    """
    if len(train) == 0 or len(val) == 0:
        raise DomainError("train and validation splits must be non-empty")
    ckpt_root = Path(checkpoint_dir) if checkpoint_dir is not None else (
        Path(config.checkpoint_dir) if config.checkpoint_dir else None)
    rng = np.random.default_rng(config.seed if rng_seed is None else rng_seed)
    params = model.parameters()
    adam = nn.AdamState.create(params)
    x = train.x.astype(model.dtype, copy=False)
    y = train.y.astype(model.dtype)
    history = TrainHistory()
    best_acc = -1.0
    best_model = model.copy()
    last_ckpt = None
    bad_epochs = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in _batches(len(y), config.batch_size, rng):
            probs = nn.model_forward(model, x[idx], "train", rng)
            loss, _ = nn.bce_loss(probs, y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss in epoch {epoch}", last_ckpt)
            grads = nn.model_backward(model, x[idx], y[idx])
            try:
                nn.adam_step(params, grads, adam, config.learning_rate)
            except TrainingError as exc:
                raise TrainingError(str(exc), last_ckpt) from None
            losses.append(loss * len(idx))
        epoch_val = val_hook(epoch, val) if val_hook else val
        val_loss, val_acc = evaluate_loss_accuracy(model, epoch_val)
        ckpt = None
        if ckpt_root is not None:
            ckpt = ckpt_root / f"epoch_{epoch:03d}"
            model_io.save_bundle(model, ckpt)
            last_ckpt = str(ckpt)
        history.records.append(EpochRecord(epoch, float(np.sum(losses) / len(y)), val_loss,
                                           val_acc, None if ckpt is None else str(ckpt)))
        log.info("epoch %d: train loss %.5f val loss %.5f val acc %.5f", epoch,
                 history.records[-1].train_loss, val_loss, val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_model = model.copy()
            history.best_epoch = epoch
        if val_acc * 100 < best_acc * 100 - config.drop_threshold:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                history.stopped_early = True
                log.info("early stop after epoch %d (best %d)", epoch, history.best_epoch)
                break
        else:
            bad_epochs = 0
    return best_model, history


@dataclass
class TransferResult:
    model: nn.CnnModel
    phase1_model: nn.CnnModel
    dos_history: TrainHistory
    fuzz_history: TrainHistory
    dos_split: tuple[WindowSet, WindowSet, WindowSet]
    fuzz_split: tuple[WindowSet, WindowSet, WindowSet]
    reports: dict[str, EvalReport]
    phase1_reports: dict[str, EvalReport]
    param_hash: str
    report_hashes: dict[str, str]


def transfer_train(config: TrainConfig, dos_data: WindowSet, fuzz_data: WindowSet,
                   model: nn.CnnModel | None = None, phase2_epochs: int | None = None,
                   model_seed: int | None = None) -> TransferResult:
    """Train on DoS, continue the same weights on fuzzing, then test on both.

    Phase 2 keeps every layer trainable at the same learning rate; a fresh
    Adam state is used for it.
    """
    if model is None:
        model = nn.CnnModel.create(seed=config.seed if model_seed is None else model_seed)
    dos_split = split_dataset(dos_data, config)
    fuzz_split = split_dataset(fuzz_data, config)
    root = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    phase1, dos_hist = train_model(model, dos_split[0], dos_split[1], config,
                                   root / "phase1_dos" if root else None,
                                   rng_seed=[config.seed, 1])
    phase1_reports = {"dos": evaluate_model(phase1, dos_split[2], "dos"),
                      "fuzzing": evaluate_model(phase1, fuzz_split[2], "fuzzing")}
    epochs2 = config.epochs if phase2_epochs is None else phase2_epochs
    if epochs2 > 0:
        cfg2 = TrainConfig(**{**config.to_dict(), "epochs": epochs2})
        final, fuzz_hist = train_model(phase1.copy(), fuzz_split[0], fuzz_split[1], cfg2,
                                       root / "phase2_fuzzing" if root else None,
                                       rng_seed=[config.seed, 2])
    else:
        final, fuzz_hist = phase1.copy(), TrainHistory()
    # one parameter set serves both attacks; hash it around each evaluation
    h = nn.param_hash(final)
    reports = {}
    hashes = {}
    for name, split in (("dos", dos_split), ("fuzzing", fuzz_split)):
        reports[name] = evaluate_model(final, split[2], name)
        hashes[name] = nn.param_hash(final)
    return TransferResult(final, phase1, dos_hist, fuzz_hist, dos_split, fuzz_split,
                          reports, phase1_reports, h, hashes)


def write_history(result: TransferResult, path, extra: dict | None = None) -> None:
    doc = {"phase1_dos": result.dos_history.to_dict(),
           "phase2_fuzzing": result.fuzz_history.to_dict(),
           "param_hash": result.param_hash,
           "reports": {k: r.to_dict() for k, r in result.reports.items()},
           "phase1_reports": {k: r.to_dict() for k, r in result.phase1_reports.items()}}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
