"""Numpy CNN: conv/batch-norm/dropout/dense layers, BCE loss, backprop, Adam.

Tensors are NCHW.  Convolutions are 3x3, stride 1, zero "same" padding,
computed as an im2col matrix product.  Gradients are derived by hand per
layer; there is no autodiff graph.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DomainError, ShapeError, TrainingError, UsageError

CHANNELS = (40, 80, 120, 160, 200)
HIDDEN = 32
INPUT_SHAPE = (2, 2, 11)
BCE_EPS = 1e-7


@dataclass
class ConvLayer:
    weight: np.ndarray  # (out_ch, in_ch, 3, 3)
    bias: np.ndarray    # (out_ch,)

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (3, 3):
            raise ShapeError(f"conv kernel must be (O, C, 3, 3), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("conv bias does not match out channels")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNormLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError("batch-norm epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise DomainError("batch-norm momentum must be in (0, 1)")

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormLayer":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), **kw)


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"dense shapes {self.weight.shape} / {self.bias.shape} disagree")


# ---------------------------------------------------------------- layers

def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}- or {ndim}-d input, got shape {x.shape}")
    return x, False


def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((n, h, w, c, 3, 3), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[..., dy, dx] = xp[:, :, dy:dy + h, dx:dx + w].transpose(0, 2, 3, 1)
    return cols.reshape(n * h * w, c * 9)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = shape
    d = dcols.reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[:, :, dy:dy + h, dx:dx + w] += d[..., dy, dx].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def _conv(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, np.ndarray]:
    if x.shape[1] != layer.in_channels:
        raise ShapeError(f"conv expects {layer.in_channels} input channels, got {x.shape[1]}")
    n, _, h, w = x.shape
    cols = _im2col(x)
    out = cols @ layer.weight.reshape(layer.out_channels, -1).T + layer.bias
    return out.reshape(n, h, w, -1).transpose(0, 3, 1, 2), cols


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Same-padded stride-1 3x3 convolution of a (C,H,W) or (N,C,H,W) input."""
    xb, single = _as_batch(np.asarray(x), 4)
    out, _ = _conv(xb, layer)
    return out[0] if single else out


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, x_shape, layer: ConvLayer):
    """Returns (dx, dweight, dbias) given the im2col matrix of the forward input."""
    o = layer.out_channels
    d = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d.T @ cols).reshape(layer.weight.shape)
    db = d.sum(axis=0)
    dx = _col2im(d @ layer.weight.reshape(o, -1), x_shape)
    return dx, dw, db


def _bn_axes(x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batch norm expects 2-d or 4-d input, got {x.shape}")


def _bn_train(x: np.ndarray, layer: BatchNormLayer):
    axes, bshape = _bn_axes(x)
    m = x.size // x.shape[1]
    if m < 2:
        raise DomainError("train-mode batch norm needs at least 2 values per channel")
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + layer.epsilon)
    xhat = (x - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * layer.gamma.reshape(bshape) + layer.beta.reshape(bshape)
    mom = layer.momentum
    layer.running_mean[...] = mom * layer.running_mean + (1 - mom) * mu
    layer.running_var[...] = mom * layer.running_var + (1 - mom) * var
    return out, (xhat, inv_std)


def _bn_infer(x: np.ndarray, layer: BatchNormLayer) -> np.ndarray:
    _, bshape = _bn_axes(x)
    scale = layer.gamma / np.sqrt(layer.running_var + layer.epsilon)
    shift = layer.beta - layer.running_mean * scale
    return x * scale.reshape(bshape).astype(x.dtype) + shift.reshape(bshape).astype(x.dtype)


def batchnorm_forward(x: np.ndarray, layer: BatchNormLayer, mode: str = "infer") -> np.ndarray:
    """Train mode normalises with batch statistics and updates the running ones."""
    if mode == "train":
        return _bn_train(x, layer)[0]
    if mode == "infer":
        return _bn_infer(x, layer)
    raise DomainError(f"unknown mode {mode!r}")


def batchnorm_backward(dout: np.ndarray, cache, layer: BatchNormLayer):
    xhat, inv_std = cache
    axes, bshape = _bn_axes(dout)
    m = dout.size // dout.shape[1]
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * layer.gamma.reshape(bshape)
    dx = (inv_std.reshape(bshape) / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
    return dx, dgamma, dbeta


def _make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def dropout_forward(x: np.ndarray, rate: float, mode: str = "infer", seed=None):
    """Inverted dropout. Returns ``(output, mask)``; the mask already holds the 1/(1-rate) scale."""
    if not 0 <= rate < 1:
        raise DomainError(f"dropout rate {rate} outside [0, 1)")
    if mode == "infer" or rate == 0:
        return x, np.ones_like(x)
    if mode != "train":
        raise DomainError(f"unknown mode {mode!r}")
    rng = _make_rng(seed)
    keep = rng.random(x.shape, dtype=np.float64 if x.dtype == np.float64 else np.float32) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dense_forward(x: np.ndarray, layer: DenseLayer) -> np.ndarray:
    if x.shape[-1] != layer.weight.shape[1]:
        raise ShapeError(f"dense expects {layer.weight.shape[1]} inputs, got {x.shape[-1]}")
    return x @ layer.weight.T + layer.bias


def dense_backward(dout: np.ndarray, x: np.ndarray, layer: DenseLayer):
    return dout @ layer.weight, dout.T @ x, dout.sum(axis=0)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    x = np.asarray(x)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + z), z / (1 + z))


def bce_loss(p, y) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to ``p``."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.size == 0:
        raise DomainError("empty batch")
    if p.shape != y.shape:
        raise ShapeError("probabilities and labels differ in shape")
    pc = np.clip(p, BCE_EPS, 1 - BCE_EPS)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    grad = (-(y / pc) + (1 - y) / (1 - pc)) / p.size
    grad = np.where((p > BCE_EPS) & (p < 1 - BCE_EPS), grad, 0.0)
    return float(loss), grad


# ---------------------------------------------------------------- model

def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


@dataclass
class ForwardState:
    batch: np.ndarray
    caches: list[Any]
    probs: np.ndarray


@dataclass
class CnnModel:
    """Five conv blocks (conv, BN, ReLU, dropout), flatten, dense+ReLU, dense+sigmoid.

    ``bns`` is None for a batch-norm-folded model.
    """

    convs: list[ConvLayer]
    bns: list[BatchNormLayer] | None
    dense1: DenseLayer
    dense2: DenseLayer
    dropout_rate: float = 0.25
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    state: ForwardState | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if not 0 <= self.dropout_rate < 1:
            raise DomainError("dropout rate must be in [0, 1)")
        c = self.input_shape[0]
        for conv in self.convs:
            if conv.in_channels != c:
                raise ShapeError(f"conv chain broken: expected {c} in-channels, got {conv.in_channels}")
            c = conv.out_channels
        if self.bns is not None:
            if len(self.bns) != len(self.convs):
                raise ShapeError("one batch-norm layer per conv required")
            for bn, conv in zip(self.bns, self.convs):
                if bn.gamma.shape != (conv.out_channels,):
                    raise ShapeError("batch-norm width does not match conv")
        if self.dense1.weight.shape[1] != self.flatten_size:
            raise ShapeError(f"dense1 expects {self.dense1.weight.shape[1]} inputs, "
                             f"flatten gives {self.flatten_size}")
        if self.dense2.weight.shape != (1, self.dense1.weight.shape[0]):
            raise ShapeError("dense2 must map the hidden layer to one unit")

    @classmethod
    def create(cls, channels=CHANNELS, hidden: int = HIDDEN, input_shape=INPUT_SHAPE,
               dropout_rate: float = 0.25, seed: int = 0, dtype=np.float32,
               bn_epsilon: float = 1e-3, bn_momentum: float = 0.99) -> "CnnModel":
        """Glorot-uniform weights, zero biases, identity batch norm."""
        rng = np.random.default_rng(seed)
        convs, bns = [], []
        c = input_shape[0]
        for o in channels:
            convs.append(ConvLayer(_glorot(rng, (o, c, 3, 3), c * 9, o * 9, dtype),
                                   np.zeros(o, dtype)))
            bns.append(BatchNormLayer.identity(o, dtype, epsilon=bn_epsilon, momentum=bn_momentum))
            c = o
        flat = c * input_shape[1] * input_shape[2]
        d1 = DenseLayer(_glorot(rng, (hidden, flat), flat, hidden, dtype), np.zeros(hidden, dtype))
        d2 = DenseLayer(_glorot(rng, (1, hidden), hidden, 1, dtype), np.zeros(1, dtype))
        return cls(convs, bns, d1, d2, dropout_rate, tuple(input_shape))

    @classmethod
    def zeros(cls, channels=CHANNELS, hidden: int = HIDDEN, input_shape=INPUT_SHAPE,
              dtype=np.float32, **kw) -> "CnnModel":
        m = cls.create(channels, hidden, input_shape, dtype=dtype, **kw)
        for arr in m.parameters().values():
            arr[...] = 0
        for bn in m.bns:
            bn.gamma[...] = 1
        return m

    @property
    def folded(self) -> bool:
        return self.bns is None

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(c.out_channels for c in self.convs)

    @property
    def flatten_size(self) -> int:
        last = self.convs[-1].out_channels if self.convs else self.input_shape[0]
        return last * self.input_shape[1] * self.input_shape[2]

    @property
    def dtype(self):
        return self.dense1.weight.dtype

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name (live references)."""
        p = {}
        for i, conv in enumerate(self.convs, 1):
            p[f"conv{i}.weight"] = conv.weight
            p[f"conv{i}.bias"] = conv.bias
            if self.bns is not None:
                p[f"bn{i}.gamma"] = self.bns[i - 1].gamma
                p[f"bn{i}.beta"] = self.bns[i - 1].beta
        p["dense1.weight"] = self.dense1.weight
        p["dense1.bias"] = self.dense1.bias
        p["dense2.weight"] = self.dense2.weight
        p["dense2.bias"] = self.dense2.bias
        return p

    def buffers(self) -> dict[str, np.ndarray]:
        if self.bns is None:
            return {}
        b = {}
        for i, bn in enumerate(self.bns, 1):
            b[f"bn{i}.running_mean"] = bn.running_mean
            b[f"bn{i}.running_var"] = bn.running_var
        return b

    def state_dict(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = self.state_dict()
        if set(mine) != set(state):
            raise ShapeError(f"state keys differ: {sorted(set(mine) ^ set(state))}")
        for k, arr in mine.items():
            if arr.shape != state[k].shape:
                raise ShapeError(f"{k}: shape {state[k].shape} != {arr.shape}")
            arr[...] = state[k]

    def copy(self) -> "CnnModel":
        clone = copy.deepcopy(self)
        clone.state = None
        return clone

    def astype(self, dtype) -> "CnnModel":
        clone = self.copy()
        for layer in [*clone.convs, clone.dense1, clone.dense2]:
            layer.weight = layer.weight.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
        for bn in clone.bns or []:
            for name in ("gamma", "beta", "running_mean", "running_var"):
                setattr(bn, name, getattr(bn, name).astype(dtype))
        return clone


def count_parameters(model: CnnModel) -> int:
    return sum(int(a.size) for a in model.parameters().values())


def param_hash(model: CnnModel) -> str:
    """SHA-256 over every named tensor (parameters and running statistics)."""
    h = hashlib.sha256()
    for name, arr in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _check_batch(model: CnnModel, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=model.dtype)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"input must be (N, {model.input_shape}), got {x.shape}")
    return x


def model_forward(model: CnnModel, batch, mode: str = "infer", rng=None) -> np.ndarray:
    """Probabilities for an (N, 2, 2, 11) batch.

    Train mode uses batch statistics and dropout (``rng`` seeds it), updates
    the running statistics and keeps the activations for ``model_backward``.
    """
    x = _check_batch(model, batch)
    if mode == "infer":
        return sigmoid(_infer_logits(model, x))
    if mode != "train":
        raise DomainError(f"unknown mode {mode!r}")
    rng = _make_rng(rng)
    caches = []
    h = x
    for i, conv in enumerate(model.convs):
        h_in_shape = h.shape
        z, cols = _conv(h, conv)
        bn_cache = None
        if model.bns is not None:
            z, bn_cache = _bn_train(z, model.bns[i])
        a = relu(z)
        out, mask = dropout_forward(a, model.dropout_rate, "train", rng)
        caches.append((cols, h_in_shape, bn_cache, z > 0, mask))
        h = out
    flat = h.reshape(len(h), -1)
    z1 = dense_forward(flat, model.dense1)
    a1 = relu(z1)
    logits = dense_forward(a1, model.dense2)[:, 0]
    probs = sigmoid(logits)
    caches.append((flat, z1 > 0, a1, h.shape))
    model.state = ForwardState(x, caches, probs)
    return probs


def _infer_logits(model: CnnModel, x: np.ndarray) -> np.ndarray:
    h = x
    for i, conv in enumerate(model.convs):
        h, _ = _conv(h, conv)
        if model.bns is not None:
            h = _bn_infer(h, model.bns[i])
        h = relu(h)
    a1 = relu(dense_forward(h.reshape(len(h), -1), model.dense1))
    return dense_forward(a1, model.dense2)[:, 0]


def forward_sites(model: CnnModel, batch) -> dict[str, np.ndarray]:
    """Infer-mode activations at every quantisation site, plus the logit."""
    x = _check_batch(model, batch)
    sites = {"input": x}
    h = x
    for i, conv in enumerate(model.convs):
        h, _ = _conv(h, conv)
        if model.bns is not None:
            h = _bn_infer(h, model.bns[i])
        h = relu(h)
        sites[f"conv{i + 1}"] = h
    a1 = relu(dense_forward(h.reshape(len(h), -1), model.dense1))
    sites["dense1"] = a1
    sites["logit"] = dense_forward(a1, model.dense2)[:, 0]
    return sites


def model_backward(model: CnnModel, batch, labels) -> dict[str, np.ndarray]:
    """Gradients of mean BCE over the batch for every trainable parameter."""
    st = model.state
    if st is None:
        raise UsageError("model_backward needs a preceding train-mode model_forward")
    x = _check_batch(model, batch)
    if x.shape != st.batch.shape or not np.array_equal(x, st.batch):
        raise UsageError("batch differs from the one used in the forward pass")
    y = np.asarray(labels, dtype=model.dtype).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise ShapeError("one label per sample required")
    model.state = None
    grads: dict[str, np.ndarray] = {}
    n = len(y)
    # sigmoid + mean BCE collapse to (p - y) / N at the logit
    dlogit = ((st.probs - y) / n).astype(model.dtype)[:, None]
    flat, z1_pos, a1, h_shape = st.caches[-1]
    da1, grads["dense2.weight"], grads["dense2.bias"] = dense_backward(dlogit, a1, model.dense2)
    dz1 = da1 * z1_pos
    dflat, grads["dense1.weight"], grads["dense1.bias"] = dense_backward(dz1, flat, model.dense1)
    dh = dflat.reshape(h_shape)
    for i in range(len(model.convs) - 1, -1, -1):
        cols, in_shape, bn_cache, z_pos, mask = st.caches[i]
        dz = dh * mask * z_pos
        if bn_cache is not None:
            dz, grads[f"bn{i + 1}.gamma"], grads[f"bn{i + 1}.beta"] = \
                batchnorm_backward(dz, bn_cache, model.bns[i])
        dh, grads[f"conv{i + 1}.weight"], grads[f"conv{i + 1}.bias"] = \
            conv2d_backward(dz, cols, in_shape, model.convs[i])
    return {k: grads[k] for k in model.parameters()}


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def create(cls, params: dict[str, np.ndarray], **kw) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != {p.shape}")
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)
