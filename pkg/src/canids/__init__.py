"""Lightweight CAN intrusion detection: windowed ID-bit CNN with an int8 engine."""

from .canbus import CanFrame, FrameLog, Label, frame_bit_length, parse_log, write_log
from .features import IdWindow, WindowSet, stream_windows, window_set, window_to_tensor
from .nn import CnnModel, count_parameters, model_backward, model_forward
from .quant import QuantModel, calibrate, fold_batchnorm, qmodel_forward, quantize_model
from .metrics import ConfusionMatrix, EvalReport, confusion, evaluate_model, roc_auc
from .train import TrainConfig, split_dataset, train_model, transfer_train
from .detector import Detector
from .model_io import load_bundle, save_bundle

__version__ = "0.1.0"

__all__ = [
    "CanFrame", "FrameLog", "Label", "frame_bit_length", "parse_log", "write_log",
    "IdWindow", "WindowSet", "stream_windows", "window_set", "window_to_tensor",
    "CnnModel", "count_parameters", "model_backward", "model_forward",
    "QuantModel", "calibrate", "fold_batchnorm", "qmodel_forward", "quantize_model",
    "ConfusionMatrix", "EvalReport", "confusion", "evaluate_model", "roc_auc",
    "TrainConfig", "split_dataset", "train_model", "transfer_train",
    "Detector", "load_bundle", "save_bundle",
]
