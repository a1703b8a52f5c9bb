"""Symmetric int8 quantisation with power-of-two scales, and integer inference.

A tensor with ``frac_bits = f`` stores ``q = clamp(round(x * 2**f), -127, 127)``.
Because every scale is a power of two, moving an int32 accumulator at
scale ``2**-(f_in + f_w)`` to an int8 activation at ``2**-f_out`` is a
round-half-to-even right shift by ``f_in + f_w - f_out`` bits.

Integer matrix products run through float64 BLAS by default.  The operands
are integers with ``|a*b| <= 127**2`` and at most a few thousand terms per
dot product, so every partial sum is an integer below 2**53 and the result
is exact regardless of summation order.  ``exact_float=False`` selects a
pure int64 product instead (same bits, ~20x slower).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import DomainError, QuantizationError, ShapeError, TrainingError

QMAX = 127
MAX_FRAC = 15
INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class QuantParams:
    frac_bits: int
    bit_width: int = 8
    signed: bool = True
    zero_point: int = 0

    @property
    def scale(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def max_value(self) -> float:
        return QMAX * self.scale


@dataclass
class QuantTensor:
    values: np.ndarray  # int8
    params: QuantParams

    @property
    def shape(self):
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return dequantize_tensor(self)


def choose_scale(max_abs: float) -> QuantParams:
    """Largest ``f <= 15`` with ``max_abs <= 127 * 2**-f``."""
    max_abs = float(max_abs)
    if not math.isfinite(max_abs) or max_abs < 0:
        raise DomainError(f"max_abs must be finite and non-negative, got {max_abs}")
    if max_abs <= QMAX * 2.0 ** -MAX_FRAC:
        return QuantParams(MAX_FRAC)
    f = math.floor(math.log2(QMAX / max_abs))
    while max_abs > QMAX * 2.0 ** -f:
        f -= 1
    while max_abs <= QMAX * 2.0 ** -(f + 1):
        f += 1
    return QuantParams(min(f, MAX_FRAC))


def quantize_tensor(x, params: QuantParams) -> QuantTensor:
    scaled = np.asarray(x, dtype=np.float64) * 2.0 ** params.frac_bits
    return QuantTensor(np.clip(np.rint(scaled), -QMAX, QMAX).astype(np.int8), params)


def dequantize_tensor(q: QuantTensor) -> np.ndarray:
    return q.values.astype(np.float64) * q.params.scale


def round_shift(acc: np.ndarray, shift: int) -> np.ndarray:
    """``acc / 2**shift`` rounded half-to-even, in integer arithmetic."""
    acc = np.asarray(acc, dtype=np.int64)
    if shift < 0:
        raise QuantizationError(f"negative requantisation shift {shift}")
    if shift == 0:
        return acc
    q = acc >> shift
    r = acc - (q << shift)
    half = np.int64(1) << (shift - 1)
    return q + ((r > half) | ((r == half) & ((q & 1) == 1)))


# ---------------------------------------------------------------- BN folding

def fold_batchnorm(model: nn.CnnModel) -> nn.CnnModel:
    """Absorb each batch norm into the preceding convolution's weight and bias."""
    if model.folded:
        return model.copy()
    folded = model.copy()
    for conv, bn in zip(folded.convs, folded.bns):
        denom = bn.running_var.astype(np.float64) + bn.epsilon
        if np.any(denom <= 0):
            raise QuantizationError("running_var + epsilon must be positive to fold")
        scale = bn.gamma.astype(np.float64) / np.sqrt(denom)
        w = conv.weight.astype(np.float64) * scale[:, None, None, None]
        b = (conv.bias.astype(np.float64) - bn.running_mean) * scale + bn.beta
        conv.weight = w.astype(model.dtype)
        conv.bias = b.astype(model.dtype)
    folded.bns = None
    return folded


# ---------------------------------------------------------------- calibration

def site_names(n_convs: int) -> list[str]:
    return ["input"] + [f"conv{i}" for i in range(1, n_convs + 1)] + ["dense1"]


@dataclass
class CalibrationProfile:
    max_abs: dict[str, float]
    samples: int = 0

    def merge(self, other: "CalibrationProfile") -> "CalibrationProfile":
        return CalibrationProfile({k: max(v, other.max_abs[k]) for k, v in self.max_abs.items()},
                                  self.samples + other.samples)


def calibrate(model: nn.CnnModel, calib_set, batch_size: int = 256) -> CalibrationProfile:
    """Max |activation| at every site over ``calib_set`` (infer mode)."""
    x = getattr(calib_set, "x", calib_set)
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if len(x) == 0:
        raise DomainError("calibration set is empty")
    names = site_names(len(model.convs))
    prof = {k: 0.0 for k in names}
    for i in range(0, len(x), batch_size):
        sites = nn.forward_sites(model, x[i:i + batch_size])
        for k in names:
            prof[k] = max(prof[k], float(np.max(np.abs(sites[k]))))
    return CalibrationProfile(prof, len(x))


# ---------------------------------------------------------------- quantised model

@dataclass
class QConvLayer:
    weight: np.ndarray  # int8 (O, C, 3, 3)
    bias: np.ndarray    # int32 (O,) at scale 2**-(in_frac + weight_frac)
    weight_frac: int
    in_frac: int
    out_frac: int
    relu: bool = True

    @property
    def shift(self) -> int:
        return self.in_frac + self.weight_frac - self.out_frac


@dataclass
class QDenseLayer:
    weight: np.ndarray  # int8 (out, in)
    bias: np.ndarray    # int32 (out,)
    weight_frac: int
    in_frac: int
    out_frac: int | None  # None: final layer, dequantised to a real logit
    relu: bool = True

    @property
    def shift(self) -> int | None:
        if self.out_frac is None:
            return None
        return self.in_frac + self.weight_frac - self.out_frac


@dataclass
class QuantModel:
    convs: list[QConvLayer]
    dense1: QDenseLayer
    dense2: QDenseLayer
    input_frac: int
    input_shape: tuple[int, int, int] = nn.INPUT_SHAPE

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        f = self.input_frac
        for i, layer in enumerate([*self.convs, self.dense1, self.dense2]):
            if layer.in_frac != f:
                raise ShapeError(f"layer {i}: in_frac {layer.in_frac} != previous out_frac {f}")
            if layer.shift is not None and layer.shift < 0:
                raise QuantizationError(f"layer {i}: negative requantisation shift {layer.shift}")
            f = layer.out_frac
        for layer in [*self.convs, self.dense1, self.dense2]:
            if layer.weight.dtype != np.int8 or np.any(np.abs(layer.weight.astype(np.int16)) > QMAX):
                raise QuantizationError("weights must be int8 within [-127, 127]")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(c.weight.shape[0] for c in self.convs)

    def site_params(self) -> dict[str, QuantParams]:
        names = site_names(len(self.convs))
        fracs = [self.input_frac] + [c.out_frac for c in self.convs] + [self.dense1.out_frac]
        return {n: QuantParams(f) for n, f in zip(names, fracs)}


@dataclass
class ScalePlan:
    """Frozen frac_bits for every weight tensor and activation site."""

    weight_fracs: list[int]  # conv1..convN, dense1, dense2
    act_fracs: dict[str, int] = field(default_factory=dict)


def plan_scales(folded: nn.CnnModel, profile: CalibrationProfile) -> ScalePlan:
    names = site_names(len(folded.convs))
    missing = [n for n in names if n not in profile.max_abs]
    if missing:
        raise QuantizationError(f"calibration profile lacks sites {missing}")
    layers = [*folded.convs, folded.dense1, folded.dense2]
    wf = [choose_scale(np.max(np.abs(l.weight))).frac_bits for l in layers]
    acts = {"input": choose_scale(profile.max_abs["input"]).frac_bits}
    f_in = acts["input"]
    for i, name in enumerate(names[1:]):
        # a coarser output scale keeps the shift non-negative without losing range
        f_out = min(choose_scale(profile.max_abs[name]).frac_bits, f_in + wf[i])
        acts[name] = f_out
        f_in = f_out
    return ScalePlan(wf, acts)


def _quantize_bias(b: np.ndarray, frac: int, where: str) -> np.ndarray:
    q = np.rint(b.astype(np.float64) * 2.0 ** frac)
    if np.any(np.abs(q) > INT32_MAX):
        raise QuantizationError(f"{where}: bias does not fit int32 at 2**-{frac}")
    return q.astype(np.int32)


def _check_accumulator(weight: np.ndarray, bias: np.ndarray, where: str) -> None:
    k = int(np.prod(weight.shape[1:]))
    bound = k * QMAX * QMAX + int(np.max(np.abs(bias.astype(np.int64)), initial=0))
    if bound > INT32_MAX:
        raise QuantizationError(f"{where}: int32 accumulator bound {bound} exceeded")


def quantize_with_plan(folded: nn.CnnModel, plan: ScalePlan) -> QuantModel:
    if not folded.folded:
        raise DomainError("fold batch norm before quantising")
    names = site_names(len(folded.convs))
    f_in = plan.act_fracs["input"]
    convs = []
    for i, conv in enumerate(folded.convs):
        wf = plan.weight_fracs[i]
        f_out = plan.act_fracs[names[i + 1]]
        if f_in + wf - f_out < 0:
            raise QuantizationError(f"conv{i + 1}: requantisation shift {f_in + wf - f_out} < 0")
        w = quantize_tensor(conv.weight, QuantParams(wf)).values
        b = _quantize_bias(conv.bias, f_in + wf, f"conv{i + 1}")
        _check_accumulator(w, b, f"conv{i + 1}")
        convs.append(QConvLayer(w, b, wf, f_in, f_out))
        f_in = f_out
    wf = plan.weight_fracs[-2]
    f_out = plan.act_fracs["dense1"]
    if f_in + wf - f_out < 0:
        raise QuantizationError(f"dense1: requantisation shift {f_in + wf - f_out} < 0")
    w = quantize_tensor(folded.dense1.weight, QuantParams(wf)).values
    b = _quantize_bias(folded.dense1.bias, f_in + wf, "dense1")
    _check_accumulator(w, b, "dense1")
    d1 = QDenseLayer(w, b, wf, f_in, f_out)
    wf = plan.weight_fracs[-1]
    w = quantize_tensor(folded.dense2.weight, QuantParams(wf)).values
    b = _quantize_bias(folded.dense2.bias, f_out + wf, "dense2")
    _check_accumulator(w, b, "dense2")
    d2 = QDenseLayer(w, b, wf, f_out, None, relu=False)
    return QuantModel(convs, d1, d2, plan.act_fracs["input"], folded.input_shape)


def quantize_model(folded: nn.CnnModel, profile: CalibrationProfile) -> QuantModel:
    return quantize_with_plan(folded, plan_scales(folded, profile))


# ---------------------------------------------------------------- integer kernels

# float32 holds every integer up to 2**24 exactly; with |a|, |b| <= 127 a dot
# product over at most this many terms never leaves that range, whatever the
# summation order BLAS picks
F32_EXACT_TERMS = 2 ** 24 // (QMAX * QMAX)


def _int_matmul(a: np.ndarray, b, exact_float: bool = True) -> np.ndarray:
    """Exact int8 x int8 matrix product as int64.

    ``b`` is either an integer matrix or the chunk list from ``_weight_matrix``.
    """
    if not isinstance(b, list):
        b = _split_weight(np.asarray(b), exact_float)
    if not exact_float:
        return a.astype(np.int64) @ b[0][1]
    a = a.astype(np.float32)
    acc = None
    for lo, chunk in b:
        part = a[:, lo:lo + len(chunk)] @ chunk
        # chunk results are exact; their float64 sum stays far below 2**53
        acc = part.astype(np.float64) if acc is None else acc + part
    return acc.astype(np.int64)


def _split_weight(mat: np.ndarray, exact_float: bool) -> list:
    if not exact_float:
        return [(0, mat.astype(np.int64))]
    step = F32_EXACT_TERMS
    return [(lo, np.ascontiguousarray(mat[lo:lo + step], dtype=np.float32))
            for lo in range(0, max(len(mat), 1), step)]


def _weight_matrix(layer, exact_float: bool) -> list:
    """(K, out) weight matrix in accumulation-ready chunks, cached on the layer."""
    key = "_wmat_f32" if exact_float else "_wmat_i64"
    cached = layer.__dict__.get(key)
    if cached is None or cached[0] is not layer.weight or cached[1] is not layer.bias:
        mat = layer.weight.reshape(layer.weight.shape[0], -1).T
        cached = (layer.weight, layer.bias, _split_weight(mat, exact_float),
                  layer.bias.astype(np.int64))
        layer.__dict__[key] = cached
    return cached[2]


def _bias64(layer, exact_float: bool) -> np.ndarray:
    _weight_matrix(layer, exact_float)
    return layer.__dict__["_wmat_f32" if exact_float else "_wmat_i64"][3]


def _requantize(acc: np.ndarray, shift: int, relu: bool) -> np.ndarray:
    q = np.clip(round_shift(acc, shift), -QMAX, QMAX)
    if relu:
        q = np.maximum(q, 0)
    return q.astype(np.int8)


def qconv2d(x: QuantTensor, layer: QConvLayer, exact_float: bool = True) -> QuantTensor:
    """Integer same-padded 3x3 convolution with requantisation (and ReLU)."""
    if x.params.frac_bits != layer.in_frac:
        raise ShapeError(f"input frac_bits {x.params.frac_bits} != layer in_frac {layer.in_frac}")
    v, single = nn._as_batch(x.values, 4)
    o, c = layer.weight.shape[:2]
    if v.shape[1] != c:
        raise ShapeError(f"qconv expects {c} channels, got {v.shape[1]}")
    n, _, h, w = v.shape
    acc = _int_matmul(nn._im2col(v), _weight_matrix(layer, exact_float), exact_float)
    acc += _bias64(layer, exact_float)
    out = _requantize(acc, layer.shift, layer.relu).reshape(n, h, w, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    return QuantTensor(out[0] if single else out, QuantParams(layer.out_frac))


def qdense_accumulate(x: QuantTensor, layer: QDenseLayer, exact_float: bool = True) -> np.ndarray:
    if x.params.frac_bits != layer.in_frac:
        raise ShapeError(f"input frac_bits {x.params.frac_bits} != layer in_frac {layer.in_frac}")
    if x.values.shape[-1] != layer.weight.shape[1]:
        raise ShapeError(f"qdense expects {layer.weight.shape[1]} inputs, got {x.values.shape[-1]}")
    acc = _int_matmul(x.values, _weight_matrix(layer, exact_float), exact_float)
    return acc + _bias64(layer, exact_float)


def qdense(x: QuantTensor, layer: QDenseLayer, exact_float: bool = True) -> QuantTensor:
    if layer.out_frac is None:
        raise ShapeError("final layer has no int8 output; use qdense_accumulate")
    acc = qdense_accumulate(x, layer, exact_float)
    return QuantTensor(_requantize(acc, layer.shift, layer.relu), QuantParams(layer.out_frac))


def qmodel_logits(qm: QuantModel, batch, exact_float: bool = True) -> np.ndarray:
    x = np.asarray(batch)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != qm.input_shape:
        raise ShapeError(f"input must be (N, {qm.input_shape}), got {x.shape}")
    h = quantize_tensor(x, QuantParams(qm.input_frac))
    for layer in qm.convs:
        h = qconv2d(h, layer, exact_float)
    h = QuantTensor(h.values.reshape(len(x), -1), h.params)
    h = qdense(h, qm.dense1, exact_float)
    acc = qdense_accumulate(h, qm.dense2, exact_float)[:, 0]
    return acc.astype(np.float64) * 2.0 ** -(qm.dense2.in_frac + qm.dense2.weight_frac)


def qmodel_predict(qm: QuantModel, batch, exact_float: bool = True) -> np.ndarray:
    return nn.sigmoid(qmodel_logits(qm, batch, exact_float))


def qmodel_forward(qm: QuantModel, x) -> float:
    """Attack probability for one (2, 2, 11) window."""
    x = np.asarray(x)
    if x.shape != qm.input_shape:
        raise ShapeError(f"expected a single {qm.input_shape} tensor, got {x.shape}")
    return float(qmodel_predict(qm, x[None])[0])


# ---------------------------------------------------------------- fine-tuning

def _fake_quant(x: np.ndarray, frac: int, clamp: bool = True):
    s = x.dtype.type(2.0 ** frac)
    r = np.rint(x * s)
    if not clamp:
        return r / s, None
    inside = np.abs(r) <= QMAX
    return np.clip(r, -QMAX, QMAX) / s, inside


def _qat_forward(folded: nn.CnnModel, plan: ScalePlan, x: np.ndarray, keep: bool):
    names = site_names(len(folded.convs))
    h, _ = _fake_quant(x, plan.act_fracs["input"])
    f_in = plan.act_fracs["input"]
    caches = []
    for i, conv in enumerate(folded.convs):
        wf = plan.weight_fracs[i]
        wq, w_in = _fake_quant(conv.weight, wf)
        bq, _ = _fake_quant(conv.bias, f_in + wf, clamp=False)
        qconv = nn.ConvLayer(wq, bq)
        in_shape = h.shape
        z, cols = nn._conv(h, qconv)
        zq, z_in = _fake_quant(z, plan.act_fracs[names[i + 1]])
        a = nn.relu(zq)
        if keep:
            caches.append((cols, in_shape, qconv, w_in, z_in & (zq > 0)))
        h = a
        f_in = plan.act_fracs[names[i + 1]]
    flat = h.reshape(len(h), -1)
    wf = plan.weight_fracs[-2]
    w1, w1_in = _fake_quant(folded.dense1.weight, wf)
    b1, _ = _fake_quant(folded.dense1.bias, f_in + wf, clamp=False)
    d1 = nn.DenseLayer(w1, b1)
    z1q, z1_in = _fake_quant(nn.dense_forward(flat, d1), plan.act_fracs["dense1"])
    a1 = nn.relu(z1q)
    f_in = plan.act_fracs["dense1"]
    wf = plan.weight_fracs[-1]
    w2, w2_in = _fake_quant(folded.dense2.weight, wf)
    b2, _ = _fake_quant(folded.dense2.bias, f_in + wf, clamp=False)
    d2 = nn.DenseLayer(w2, b2)
    logits = nn.dense_forward(a1, d2)[:, 0]
    if keep:
        caches.append((flat, d1, w1_in, z1_in & (z1q > 0), a1, d2, w2_in, h.shape))
    return logits, caches


def fake_quant_forward(folded: nn.CnnModel, plan: ScalePlan, batch) -> np.ndarray:
    """Float simulation of the integer model at the plan's scales."""
    x = nn._check_batch(folded, batch)
    return nn.sigmoid(_qat_forward(folded, plan, x, keep=False)[0])


def _qat_backward(folded: nn.CnnModel, caches, probs, y) -> dict[str, np.ndarray]:
    g: dict[str, np.ndarray] = {}
    dlogit = ((probs - y) / len(y)).astype(folded.dtype)[:, None]
    flat, d1, w1_in, a1_mask, a1, d2, w2_in, h_shape = caches[-1]
    da1, dw2, g["dense2.bias"] = nn.dense_backward(dlogit, a1, d2)
    g["dense2.weight"] = dw2 * w2_in
    dz1 = da1 * a1_mask
    dflat, dw1, g["dense1.bias"] = nn.dense_backward(dz1, flat, d1)
    g["dense1.weight"] = dw1 * w1_in
    dh = dflat.reshape(h_shape)
    for i in range(len(folded.convs) - 1, -1, -1):
        cols, in_shape, qconv, w_in, mask = caches[i]
        dh, dw, g[f"conv{i + 1}.bias"] = nn.conv2d_backward(dh * mask, cols, in_shape, qconv)
        g[f"conv{i + 1}.weight"] = dw * w_in
    return {k: g[k] for k in folded.parameters()}


def fine_tune_quantized(folded: nn.CnnModel, profile: CalibrationProfile, data, epochs: int,
                        lr: float = 1e-5, batch_size: int = 64, seed: int = 0,
                        val=None, score=None):
    """Straight-through-estimator fine-tuning at frozen scales.

    Returns ``(tuned_folded_model, quant_model)``.  When ``val`` and
    ``score(qmodel, val) -> float`` are given, the epoch (0 included) with
    the best validation score is returned.
    """
    if not folded.folded:
        raise DomainError("fine-tuning expects a batch-norm-folded model")
    plan = plan_scales(folded, profile)
    model = folded.copy()
    qm = quantize_with_plan(model, plan)
    if epochs <= 0:
        return model, qm
    best = (score(qm, val), model.copy(), qm) if val is not None and score else None
    x_all = np.asarray(data.x, dtype=model.dtype)
    y_all = np.asarray(data.y, dtype=model.dtype)
    rng = np.random.default_rng(seed)
    params = model.parameters()
    adam = nn.AdamState.create(params)
    for _ in range(epochs):
        order = rng.permutation(len(y_all))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            logits, caches = _qat_forward(model, plan, x_all[idx], keep=True)
            probs = nn.sigmoid(logits)
            loss, _ = nn.bce_loss(probs, y_all[idx])
            if not math.isfinite(loss):
                raise TrainingError("fine-tuning loss is not finite")
            nn.adam_step(params, _qat_backward(model, caches, probs, y_all[idx]), adam, lr)
        qm = quantize_with_plan(model, plan)
        if best is not None:
            s_val = score(qm, val)
            if s_val > best[0]:
                best = (s_val, model.copy(), qm)
    if best is not None:
        return best[1], best[2]
    return model, qm
