"""Default desk-scale configuration and glue shared by the CLI and demos."""

from __future__ import annotations

import copy

import numpy as np

from . import features, nn, quant, trafgen
from .canbus import FrameLog
from .errors import ConfigError, DomainError
from .train import TrainConfig, split_dataset

# Two independent 12 s benign captures (~28.7k frames each, so ~57k benign
# frames in total), one carrying a DoS flood and one a fuzzing campaign.
# The flood rate (one frame every 0.3 ms) follows the public capture; burst
# placement is arbitrary.
DEFAULT_CONFIG = {
    "seed": 0,
    "benign": {"duration": 12.0, "seed": 1, "jitter_fraction": 0.05},
    "benign_fuzzing": {"duration": 12.0, "seed": 2, "jitter_fraction": 0.05},
    "dos": {"interval": 0.0003, "burst_windows": [[2, 4], [6, 8], [9.5, 11]], "flood_id": 0},
    "fuzzing": {"interval_min": 0.0004, "interval_max": 0.0012,
                "burst_windows": [[1, 4], [6, 9]], "seed": 3},
    "model": {"channels": list(nn.CHANNELS), "hidden": nn.HIDDEN, "dropout_rate": 0.25,
              "seed": 0},
    "train": {"learning_rate": 1e-4, "epochs": 25, "batch_size": 64,
              "split": [0.8, 0.15, 0.05], "seed": 0, "drop_threshold": 2.0, "patience": 3,
              "phase2_epochs": None},
    "quantize": {"calibration_windows": 1024, "fine_tune_epochs": 0, "fine_tune_lr": 1e-5},
    "bench": {"reps": 1000, "warmup": 100, "bitrate": 1e6, "dlc": 8, "stuffed": True},
}


def merge_config(base: dict, override: dict | None) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate_config(cfg: dict) -> dict:
    """Parse every section once so errors surface before any work starts."""
    try:
        trafgen.profile_from_dict(cfg["benign"])
        trafgen.profile_from_dict(cfg.get("benign_fuzzing", cfg["benign"]))
        trafgen.dos_from_dict(cfg["dos"])
        trafgen.fuzz_from_dict(cfg["fuzzing"])
    except DomainError as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    train_config(cfg)
    q = cfg["quantize"]
    if int(q["calibration_windows"]) < 1:
        raise ConfigError("calibration_windows must be >= 1")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (TypeError, DomainError) as exc:
        raise ConfigError(f"bad train section: {exc}") from None


def make_model(cfg: dict) -> nn.CnnModel:
    m = cfg["model"]
    return nn.CnnModel.create(tuple(m["channels"]), int(m["hidden"]),
                              dropout_rate=float(m["dropout_rate"]), seed=int(m["seed"]))


def build_logs(cfg: dict) -> tuple[FrameLog, FrameLog]:
    """(DoS log, fuzzing log) from the config's benign profiles and attack params."""
    benign_dos = trafgen.gen_benign(trafgen.profile_from_dict(cfg["benign"]))
    benign_fuzz = trafgen.gen_benign(
        trafgen.profile_from_dict(cfg.get("benign_fuzzing", cfg["benign"])))
    dos = trafgen.inject_dos(benign_dos, trafgen.dos_from_dict(cfg["dos"]))
    fuzz = trafgen.inject_fuzzing(benign_fuzz, trafgen.fuzz_from_dict(cfg["fuzzing"]))
    return dos, fuzz


def calibration_windows(windows: features.WindowSet, cfg: dict) -> features.WindowSet:
    """Seeded sample of the configured size from the training split."""
    tcfg = train_config(cfg)
    train, _, _ = split_dataset(windows, tcfg)
    n = min(int(cfg["quantize"]["calibration_windows"]), len(train))
    idx = np.sort(np.random.default_rng(tcfg.seed).choice(len(train), n, replace=False))
    return train.subset(idx)


def quantize_float_model(model: nn.CnnModel, calib: features.WindowSet) -> quant.QuantModel:
    folded = quant.fold_batchnorm(model)
    return quant.quantize_model(folded, quant.calibrate(folded, calib))
