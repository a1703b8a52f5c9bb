from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canids import nn, quant
from canids.errors import DomainError, QuantizationError, ShapeError
from canids.features import WindowSet
from canids.quant import (QConvLayer, QuantParams, QuantTensor, calibrate, choose_scale,
                          fold_batchnorm, quantize_model, quantize_tensor, round_shift)


@pytest.mark.parametrize("max_abs, f", [
    (0.0, 15), (1.0, 6), (0.5, 7), (0.25, 8), (127.0, 0), (127.5, -1), (1.984375, 6),
    (1.99, 5), (1e-9, 15), (300.0, -2),
])
def test_choose_scale_table(max_abs, f):
    assert choose_scale(max_abs).frac_bits == f


@given(st.floats(1e-6, 1e6))
def test_choose_scale_is_tightest(m):
    f = choose_scale(m).frac_bits
    assert m <= 127 * 2.0 ** -f
    if f < 15:
        assert m > 127 * 2.0 ** -(f + 1)


def test_choose_scale_domain():
    with pytest.raises(DomainError):
        choose_scale(-1.0)
    with pytest.raises(DomainError):
        choose_scale(float("nan"))


def test_quantize_values():
    q = quantize_tensor([0.5, -0.25, 1.0, -5.0, 0.0078125, 0.01171875], QuantParams(7))
    # 1.0 and -5.0 saturate; 0.75 and 1.5 LSB round half to even
    assert q.values.tolist() == [64, -32, 127, -127, 1, 2]
    assert q.values.dtype == np.int8


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_roundtrip_error_within_half_step(xs):
    x = np.array(xs)
    p = choose_scale(np.max(np.abs(x)))
    err = np.abs(quantize_tensor(x, p).dequantize() - x)
    assert np.all(err <= p.scale / 2)


@given(st.integers(-2**40, 2**40), st.integers(0, 30))
def test_round_shift_matches_rational_oracle(acc, shift):
    expected = round(Fraction(acc, 2 ** shift))  # Python rounds half to even
    assert int(round_shift(np.array([acc]), shift)[0]) == expected


def test_round_shift_ties():
    assert round_shift(np.array([2, 6, -2, -6, 3, -3]), 2).tolist() == [0, 2, 0, -2, 1, -1]
    with pytest.raises(QuantizationError):
        round_shift(np.array([1]), -1)


def _trained_like(seed=0):
    """Small model with non-trivial batch-norm statistics."""
    rng = np.random.default_rng(seed)
    m = nn.CnnModel.create((3, 4), 5, seed=seed, dtype=np.float64)
    for bn in m.bns:
        bn.gamma[...] = rng.uniform(0.5, 1.5, bn.gamma.shape)
        bn.beta[...] = rng.normal(0, 0.2, bn.beta.shape)
        bn.running_mean[...] = rng.normal(0, 0.3, bn.running_mean.shape)
        bn.running_var[...] = rng.uniform(0.2, 2.0, bn.running_var.shape)
    for c in m.convs:
        c.bias[...] = rng.normal(0, 0.1, c.bias.shape)
    return m


def _windows(n, seed=0):
    return np.random.default_rng(seed).integers(0, 2, (n, 2, 2, 11)).astype(np.float64)


def test_fold_preserves_inference():
    m = _trained_like()
    x = _windows(32)
    f = fold_batchnorm(m)
    assert f.folded and not m.folded
    assert np.allclose(nn.model_forward(f, x), nn.model_forward(m, x), atol=1e-12)
    assert fold_batchnorm(f).folded


def test_calibration_profile():
    f = fold_batchnorm(_trained_like())
    x = _windows(50)
    prof = calibrate(f, x, batch_size=16)
    sites = nn.forward_sites(f, x)
    assert list(prof.max_abs) == quant.site_names(2)
    assert prof.max_abs["input"] == 1.0 and prof.samples == 50
    for k, v in prof.max_abs.items():
        assert v == pytest.approx(np.max(np.abs(sites[k])))
    merged = prof.merge(calibrate(f, 3 * x[:5]))
    assert merged.max_abs["input"] == 3.0 and merged.samples == 55
    with pytest.raises(DomainError):
        calibrate(f, np.zeros((0, 2, 2, 11)))


def test_quantize_model_structure():
    f = fold_batchnorm(_trained_like())
    x = _windows(64)
    qm = quantize_model(f, calibrate(f, x))
    assert qm.input_frac == 6  # binary inputs: max 1.0
    assert qm.channels == (3, 4)
    prev = qm.input_frac
    for layer in [*qm.convs, qm.dense1]:
        assert layer.in_frac == prev and layer.shift >= 0
        assert layer.weight.dtype == np.int8 and layer.bias.dtype == np.int32
        prev = layer.out_frac
    assert qm.dense2.out_frac is None
    assert set(qm.site_params()) == set(quant.site_names(2))


def test_quant_model_tracks_float_model():
    f = fold_batchnorm(_trained_like(3))
    x = _windows(200, 1)
    qm = quantize_model(f, calibrate(f, x))
    pf = nn.model_forward(f, x)
    pq = quant.qmodel_predict(qm, x)
    assert np.max(np.abs(pf - pq)) < 0.05
    assert quant.qmodel_forward(qm, x[0]) == pytest.approx(pq[0])
    with pytest.raises(ShapeError):
        quant.qmodel_forward(qm, x[:2])


def test_fake_quant_simulates_integer_model():
    f = fold_batchnorm(_trained_like(4))
    x = _windows(100, 2)
    prof = calibrate(f, x)
    qm = quantize_model(f, prof)
    sim = quant.fake_quant_forward(f, quant.plan_scales(f, prof), x)
    assert np.allclose(sim, quant.qmodel_predict(qm, x), atol=1e-9)


def test_toy_conv_hand_table():
    # one output channel, one input channel, centre tap only
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 0.5
    assert choose_scale(0.5).frac_bits == 7
    assert quantize_tensor(w, QuantParams(7)).values[0, 0, 1, 1] == 64
    assert quantize_tensor([-0.25], QuantParams(7)).values[0] == -32
    assert quant._quantize_bias(np.array([0.1]), 6 + 7, "t")[0] == 819
    layer = QConvLayer(quantize_tensor(w, QuantParams(7)).values,
                       np.array([819], np.int32), 7, 6, 6)
    assert layer.shift == 7
    x = QuantTensor(np.full((1, 1, 1, 1), 64, np.int8), QuantParams(6))  # 1.0
    # 64*64 + 819 = 4915; 4915 / 128 = 38.4 -> 38, i.e. 0.59375 ~ 0.5 + 0.1
    assert quant.qconv2d(x, layer).values.ravel().tolist() == [38]


def test_qconv_exact_float_matches_int64_path():
    rng = np.random.default_rng(5)
    layer = QConvLayer(rng.integers(-127, 128, (6, 4, 3, 3)).astype(np.int8),
                       rng.integers(-5000, 5000, 6).astype(np.int32), 7, 5, 4)
    x = QuantTensor(rng.integers(-127, 128, (3, 4, 2, 11)).astype(np.int8), QuantParams(5))
    a = quant.qconv2d(x, layer, exact_float=True).values
    b = quant.qconv2d(x, layer, exact_float=False).values
    assert np.array_equal(a, b)
    with pytest.raises(ShapeError):
        quant.qconv2d(QuantTensor(x.values, QuantParams(6)), layer)


@pytest.mark.parametrize("k", [quant.F32_EXACT_TERMS, quant.F32_EXACT_TERMS + 1, 4400])
@pytest.mark.parametrize("sign", [1, -1])
def test_int_matmul_exact_at_extremes(k, sign):
    # every product at +-127*127 is the worst case for the float accumulator
    a = np.full((3, k), 127, np.int8)
    a[1] = -127
    a[2, ::2] = -127
    b = np.full((k, 2), sign * 127, np.int8)
    b[:, 1] = np.where(np.arange(k) % 3 == 0, 127, -127)
    expect = a.astype(object) @ b.astype(object)
    got = quant._int_matmul(a, quant._split_weight(b, True))
    assert got.dtype == np.int64 and got.tolist() == expect.tolist()
    assert quant._int_matmul(a, b, exact_float=False).tolist() == expect.tolist()


def test_quantize_rejects_unfolded():
    m = _trained_like()
    with pytest.raises(DomainError):
        quant.quantize_with_plan(m, quant.ScalePlan([7, 7, 7, 7], {}))


@settings(deadline=None, max_examples=5)
@given(st.integers(0, 1000))
def test_fine_tune_keeps_scales_and_never_worsens_val(seed):
    f = fold_batchnorm(_trained_like(seed % 7))
    x = _windows(128, seed)
    y = (x[:, 0, 0, 0] > 0).astype(np.int64)
    data = WindowSet(x, y, np.zeros(len(y)), np.zeros(len(y), np.int64))
    prof = calibrate(f, x)
    base = quantize_model(f, prof)

    def acc(qm, d):
        return float(np.mean((quant.qmodel_predict(qm, d.x) >= 0.5) == (d.y == 1)))

    tuned, qm = quant.fine_tune_quantized(f, prof, data, 2, lr=1e-3, seed=seed, val=data,
                                          score=acc)
    assert qm.site_params() == base.site_params()
    assert acc(qm, data) >= acc(base, data)
