"""Model bundles: a JSON manifest plus one little-endian blob per tensor.

Layout::

    bundle/
      manifest.json
      tensors/conv1.weight.bin
      tensors/...

The manifest records the format version, the model kind (``float`` or
``quant``), an architecture description and, per tensor, its name, shape,
dtype, frac_bits (quantised tensors only), relative path and SHA-256.
Saving is atomic (temp directory then rename) and byte-deterministic.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from . import nn, quant
from .errors import (BundleError, BundleShapeError, BundleVersionError, CanIdsError,
                     ChecksumError, MissingTensorError)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int8": "|i1", "int32": "<i4"}


def _entry(name: str, arr: np.ndarray, frac_bits=None) -> tuple[dict, bytes]:
    dtype = str(arr.dtype)
    if dtype not in _DTYPES:
        raise BundleError(f"unsupported dtype {dtype} for {name}")
    blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    entry = {"name": name, "shape": list(arr.shape), "dtype": dtype,
             "file": f"tensors/{name}.bin", "sha256": hashlib.sha256(blob).hexdigest()}
    if frac_bits is not None:
        entry["frac_bits"] = int(frac_bits)
    return entry, blob


def _float_payload(model: nn.CnnModel):
    arch = {
        "channels": list(model.channels),
        "hidden": int(model.dense1.weight.shape[0]),
        "input_shape": list(model.input_shape),
        "dropout_rate": model.dropout_rate,
        "folded": model.folded,
    }
    if model.bns:
        arch["bn_epsilon"] = model.bns[0].epsilon
        arch["bn_momentum"] = model.bns[0].momentum
    return arch, [(k, v, None) for k, v in model.state_dict().items()]


def _quant_payload(qm: quant.QuantModel):
    layers = []
    tensors = []
    named = [(f"conv{i}", l) for i, l in enumerate(qm.convs, 1)]
    named += [("dense1", qm.dense1), ("dense2", qm.dense2)]
    for name, l in named:
        layers.append({"name": name, "in_frac": l.in_frac, "weight_frac": l.weight_frac,
                       "out_frac": l.out_frac, "relu": l.relu})
        tensors.append((f"{name}.weight", l.weight, l.weight_frac))
        tensors.append((f"{name}.bias", l.bias, l.in_frac + l.weight_frac))
    arch = {"channels": list(qm.channels), "hidden": int(qm.dense1.weight.shape[0]),
            "input_shape": list(qm.input_shape), "input_frac": qm.input_frac,
            "layers": layers}
    return arch, tensors


def save_bundle(model, directory) -> None:
    directory = Path(directory)
    if isinstance(model, nn.CnnModel):
        kind, (arch, tensors) = "float", _float_payload(model)
    elif isinstance(model, quant.QuantModel):
        kind, (arch, tensors) = "quant", _quant_payload(model)
    else:
        raise TypeError(f"cannot save {type(model).__name__}")
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        (tmp / "tensors").mkdir()
        entries = []
        for name, arr, frac in tensors:
            entry, blob = _entry(name, arr, frac)
            (tmp / entry["file"]).write_bytes(blob)
            entries.append(entry)
        manifest = {"format_version": FORMAT_VERSION, "kind": kind,
                    "architecture": arch, "tensors": entries}
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
        os.chmod(tmp, 0o755)
        if directory.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{directory.name}.old.", dir=directory.parent))
            os.rename(directory, old / "b")
            os.rename(tmp, directory)
            shutil.rmtree(old)
        else:
            os.rename(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise BundleError(f"no manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise BundleError(f"corrupt manifest {path}: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise BundleVersionError(f"bundle format {version!r}, expected {FORMAT_VERSION}")
    return manifest


def _load_tensors(directory: Path, manifest: dict) -> dict[str, tuple[np.ndarray, dict]]:
    out = {}
    for e in manifest["tensors"]:
        path = directory / e["file"]
        if not path.is_file():
            raise MissingTensorError(e["name"], path)
        blob = path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != e["sha256"]:
            raise ChecksumError(e["name"])
        if e["dtype"] not in _DTYPES:
            raise BundleShapeError(f"{e['name']}: unknown dtype {e['dtype']}")
        dt = np.dtype(_DTYPES[e["dtype"]])
        shape = tuple(e["shape"])
        if len(blob) != int(np.prod(shape)) * dt.itemsize:
            raise BundleShapeError(f"{e['name']}: {len(blob)} bytes do not fit shape {shape}")
        arr = np.frombuffer(blob, dtype=dt).reshape(shape).astype(e["dtype"])
        out[e["name"]] = (arr, e)
    return out


def _build_float(arch: dict, t: dict) -> nn.CnnModel:
    n = len(arch["channels"])
    convs = [nn.ConvLayer(t[f"conv{i}.weight"][0], t[f"conv{i}.bias"][0]) for i in range(1, n + 1)]
    bns = None
    if not arch["folded"]:
        bns = [nn.BatchNormLayer(t[f"bn{i}.gamma"][0], t[f"bn{i}.beta"][0],
                                 t[f"bn{i}.running_mean"][0], t[f"bn{i}.running_var"][0],
                                 arch["bn_epsilon"], arch["bn_momentum"])
               for i in range(1, n + 1)]
    model = nn.CnnModel(convs, bns, nn.DenseLayer(t["dense1.weight"][0], t["dense1.bias"][0]),
                        nn.DenseLayer(t["dense2.weight"][0], t["dense2.bias"][0]),
                        arch["dropout_rate"], tuple(arch["input_shape"]))
    if list(model.channels) != list(arch["channels"]):
        raise BundleShapeError("conv channels disagree with the manifest")
    return model


def _build_quant(arch: dict, t: dict) -> quant.QuantModel:
    layers = {l["name"]: l for l in arch["layers"]}

    def tensors(name):
        w, we = t[f"{name}.weight"]
        b, be = t[f"{name}.bias"]
        l = layers[name]
        if we.get("frac_bits") != l["weight_frac"] or be.get("frac_bits") != l["in_frac"] + l["weight_frac"]:
            raise BundleShapeError(f"{name}: frac_bits disagree with layer description")
        return w, b, l

    convs = []
    for i in range(1, len(arch["channels"]) + 1):
        w, b, l = tensors(f"conv{i}")
        convs.append(quant.QConvLayer(w, b, l["weight_frac"], l["in_frac"], l["out_frac"], l["relu"]))
    dense = []
    for name in ("dense1", "dense2"):
        w, b, l = tensors(name)
        dense.append(quant.QDenseLayer(w, b, l["weight_frac"], l["in_frac"], l["out_frac"], l["relu"]))
    qm = quant.QuantModel(convs, dense[0], dense[1], arch["input_frac"], tuple(arch["input_shape"]))
    if list(qm.channels) != list(arch["channels"]):
        raise BundleShapeError("conv channels disagree with the manifest")
    return qm


def load_bundle(directory):
    """Rebuild a CnnModel or QuantModel, verifying checksums and shapes."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    tensors = _load_tensors(directory, manifest)
    arch = manifest["architecture"]
    try:
        if manifest["kind"] == "float":
            return _build_float(arch, tensors)
        if manifest["kind"] == "quant":
            return _build_quant(arch, tensors)
    except KeyError as exc:
        raise MissingTensorError(str(exc.args[0]), directory) from None
    except BundleError:
        raise
    except CanIdsError as exc:
        raise BundleShapeError(str(exc)) from None
    raise BundleError(f"unknown bundle kind {manifest['kind']!r}")
