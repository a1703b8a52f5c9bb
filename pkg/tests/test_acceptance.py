"""Acceptance gates.  Each test carries a ``criterion`` marker; the terminal
summary prints one PASS/FAIL line per criterion with the measured values.

The desk-scale fixture trains the full-size network once per session
(roughly ten minutes on one core) and is shared by criteria 5 to 8.
"""

import json
import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canids import bench, cli, features, model_io, nn, pipeline, quant
from canids.detector import Detector
from canids.metrics import ConfusionMatrix, EvalReport, evaluate_model, metrics, predict
from canids.quant import QConvLayer, QDenseLayer, QuantParams, QuantTensor

DESK_EPOCHS = 3
GRAD_SEEDS = range(10)
GRAD_TOL = 1e-4
# gradients smaller than this are compared absolutely (conv biases ahead of
# batch norm have an exact-zero true gradient)
GRAD_FLOOR = 1e-6


def _note(record_property, text):
    record_property("measured", text)
    print(text)


# ---------------------------------------------------------------- 1

PUBLISHED_TABLE = {
    # matrix (tn, fp, fn, tp): precision, recall, f1, fpr %, fnr %
    "dos": ((33282, 13, 0, 16705), ("0.9992", "1.0000", "0.9996"), ("0.04", "0")),
    "fuzzing": ((38784, 38, 136, 11042), ("0.9966", "0.9878", "0.9922"), ("0.1", "1.22")),
}


@pytest.mark.criterion(1, "metric reproduction from the published confusion matrices")
@pytest.mark.parametrize("attack", ["dos", "fuzzing"])
def test_c1_metric_reproduction(attack, record_property):
    cm, ratios, pct = PUBLISHED_TABLE[attack]
    m = metrics(ConfusionMatrix(*cm))
    got = [f"{m.precision:.4f}", f"{m.recall:.4f}", f"{m.f1:.4f}"]
    assert got == list(ratios)
    # percentages are printed with as many decimals as the table uses
    for value, printed in zip((m.fpr, m.fnr), pct):
        decimals = len(printed.split(".")[1]) if "." in printed else 0
        assert f"{100 * value:.{decimals}f}" == printed
    # exact rational cross-check of the stored floats
    tn, fp, fn, tp = cm
    assert m.precision == float(Fraction(tp, tp + fp))
    assert m.fnr == float(Fraction(fn, fn + tp))
    _note(record_property, f"{attack}: P/R/F1 {'/'.join(got)}, FPR {100 * m.fpr:.3f}%, "
                           f"FNR {100 * m.fnr:.3f}%")


# ---------------------------------------------------------------- 2

def _rel_err(a, n):
    a, n = np.asarray(a, np.float64), np.asarray(n, np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), GRAD_FLOOR)))


def _numeric(f, arr, h=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def _layer_errors(seed):
    rng = np.random.default_rng(seed)
    errs = {}

    conv = nn.ConvLayer(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    x = rng.normal(size=(2, 2, 2, 5))
    r = rng.normal(size=(2, 3, 2, 5))
    out, cols = nn._conv(x, conv)
    dx, dw, db = nn.conv2d_backward(r, cols, x.shape, conv)

    def f():
        return float(np.sum(nn.conv2d_forward(x, conv) * r))

    errs["conv"] = max(_rel_err(dx, _numeric(f, x)), _rel_err(dw, _numeric(f, conv.weight)),
                       _rel_err(db, _numeric(f, conv.bias)))

    bn = nn.BatchNormLayer(rng.uniform(0.5, 1.5, 3), rng.normal(size=3), np.zeros(3), np.ones(3))
    x = rng.normal(size=(4, 3, 2, 3))
    r = rng.normal(size=x.shape)
    _, cache = nn._bn_train(x, bn)
    dx, dg, dbeta = nn.batchnorm_backward(r, cache, bn)

    def f():
        return float(np.sum(nn.batchnorm_forward(x, bn, "train") * r))

    errs["batchnorm"] = max(_rel_err(dx, _numeric(f, x)), _rel_err(dg, _numeric(f, bn.gamma)),
                            _rel_err(dbeta, _numeric(f, bn.beta)))

    dense = nn.DenseLayer(rng.normal(size=(4, 6)), rng.normal(size=4))
    x = rng.normal(size=(3, 6))
    r = rng.normal(size=(3, 4))
    dx, dw, db = nn.dense_backward(r, x, dense)

    def f():
        return float(np.sum(nn.dense_forward(x, dense) * r))

    errs["dense"] = max(_rel_err(dx, _numeric(f, x)), _rel_err(dw, _numeric(f, dense.weight)),
                        _rel_err(db, _numeric(f, dense.bias)))

    x = rng.normal(size=(5, 7))
    r = rng.normal(size=x.shape)
    _, mask = nn.dropout_forward(x, 0.25, "train", seed=seed)

    def f():
        return float(np.sum(nn.dropout_forward(x, 0.25, "train", seed=seed)[0] * r))

    errs["dropout"] = _rel_err(r * mask, _numeric(f, x))

    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    r = rng.normal(size=x.shape)

    def f():
        return float(np.sum(nn.relu(x) * r))

    errs["relu"] = _rel_err(r * (x > 0), _numeric(f, x))

    z = rng.normal(size=6)
    y = rng.integers(0, 2, 6).astype(np.float64)

    def f():
        return nn.bce_loss(nn.sigmoid(z), y)[0]

    p = nn.sigmoid(z)
    _, dp = nn.bce_loss(p, y)
    errs["sigmoid+bce"] = max(_rel_err(dp * p * (1 - p), _numeric(f, z)),
                              _rel_err((p - y) / len(y), _numeric(f, z)))
    return errs


def _model_errors(seed):
    model = nn.CnnModel.create((3, 4), 5, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for bn in model.bns:
        bn.gamma[...] = rng.uniform(0.5, 1.5, bn.gamma.shape)
        bn.beta[...] = rng.normal(0, 0.3, bn.beta.shape)
    for c in model.convs:
        c.bias[...] = rng.normal(0, 0.1, c.bias.shape)
    x = rng.integers(0, 2, (6, 2, 2, 11)).astype(np.float64)
    y = rng.integers(0, 2, 6).astype(np.float64)

    def loss():
        p = nn.model_forward(model, x, "train", rng=seed)
        return nn.bce_loss(p, y)[0]

    nn.model_forward(model, x, "train", rng=seed)
    grads = nn.model_backward(model, x, y)
    return {name: _rel_err(grads[name], _numeric(loss, p))
            for name, p in model.parameters().items()}


@pytest.mark.criterion(2, "analytic gradients match central differences (float64)")
def test_c2_layer_gradients(record_property):
    worst = {}
    for seed in GRAD_SEEDS:
        for k, v in _layer_errors(seed).items():
            worst[k] = max(worst.get(k, 0.0), v)
    _note(record_property, "per-layer max rel err over 10 seeds: " +
          ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert max(worst.values()) < GRAD_TOL


@pytest.mark.criterion(2, "analytic gradients match central differences (float64)")
def test_c2_composed_model_gradient(record_property):
    worst = 0.0
    for seed in GRAD_SEEDS:
        errs = _model_errors(seed)
        worst = max(worst, max(errs.values()))
    _note(record_property, f"reduced model (conv-BN-ReLU-dropout x2, dense x2) max rel err "
                           f"over 10 seeds: {worst:.1e}")
    assert worst < GRAD_TOL


# ---------------------------------------------------------------- 3

def _naive_round_shift(acc, shift):
    # Python's round() on a Fraction rounds half to even
    return int(round(Fraction(acc, 2 ** shift)))


def _naive_requant(acc, shift, relu):
    q = max(-127, min(127, _naive_round_shift(acc, shift)))
    return max(q, 0) if relu else q


def _naive_qconv(x, w, b, shift, relu):
    n, c, h, wd = x.shape
    o = w.shape[0]
    out = np.zeros((n, o, h, wd), np.int64)
    for s in range(n):
        for k in range(o):
            for i in range(h):
                for j in range(wd):
                    acc = int(b[k])
                    for ci in range(c):
                        for dy in range(3):
                            for dx in range(3):
                                yy, xx = i + dy - 1, j + dx - 1
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += int(x[s, ci, yy, xx]) * int(w[k, ci, dy, dx])
                    out[s, k, i, j] = _naive_requant(acc, shift, relu)
    return out


@st.composite
def qconv_case(draw):
    n, c, o = draw(st.integers(1, 2)), draw(st.integers(1, 3)), draw(st.integers(1, 3))
    h, w = draw(st.integers(1, 3)), draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    x = rng.integers(-127, 128, (n, c, h, w)).astype(np.int8)
    wt = rng.integers(-127, 128, (o, c, 3, 3)).astype(np.int8)
    b = rng.integers(-2**20, 2**20, o).astype(np.int32)
    f_in, f_w = draw(st.integers(0, 8)), draw(st.integers(0, 8))
    f_out = draw(st.integers(0, f_in + f_w))
    return x, wt, b, f_in, f_w, f_out, draw(st.booleans())


@pytest.mark.criterion(3, "integer kernels bit-exact against naive oracles; roundtrip <= scale/2")
@settings(max_examples=1000, deadline=None, derandomize=True)
@given(qconv_case())
def test_c3_qconv_bit_exact(case):
    x, w, b, f_in, f_w, f_out, relu = case
    layer = QConvLayer(w, b, f_w, f_in, f_out, relu)
    ref = _naive_qconv(x, w, b, layer.shift, relu)
    for exact_float in (True, False):
        got = quant.qconv2d(QuantTensor(x, QuantParams(f_in)), layer, exact_float)
        assert got.values.dtype == np.int8 and got.params.frac_bits == f_out
        assert np.array_equal(got.values, ref)


@st.composite
def qdense_case(draw):
    n, k, o = draw(st.integers(1, 3)), draw(st.integers(1, 40)), draw(st.integers(1, 6))
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    x = rng.integers(-127, 128, (n, k)).astype(np.int8)
    w = rng.integers(-127, 128, (o, k)).astype(np.int8)
    b = rng.integers(-2**24, 2**24, o).astype(np.int32)
    f_in, f_w = draw(st.integers(0, 8)), draw(st.integers(0, 8))
    return x, w, b, f_in, f_w, draw(st.integers(0, f_in + f_w)), draw(st.booleans())


@pytest.mark.criterion(3, "integer kernels bit-exact against naive oracles; roundtrip <= scale/2")
@settings(max_examples=1000, deadline=None, derandomize=True)
@given(qdense_case())
def test_c3_qdense_bit_exact(case):
    x, w, b, f_in, f_w, f_out, relu = case
    layer = QDenseLayer(w, b, f_w, f_in, f_out, relu)
    accs = [[int(b[j]) + sum(int(x[i, t]) * int(w[j, t]) for t in range(x.shape[1]))
             for j in range(w.shape[0])] for i in range(x.shape[0])]
    ref = np.array([[_naive_requant(a, layer.shift, relu) for a in row] for row in accs])
    for exact_float in (True, False):
        qx = QuantTensor(x, QuantParams(f_in))
        assert np.array_equal(quant.qdense_accumulate(qx, layer, exact_float), np.array(accs))
        assert np.array_equal(quant.qdense(qx, layer, exact_float).values, ref)


@pytest.mark.criterion(3, "integer kernels bit-exact against naive oracles; roundtrip <= scale/2")
@settings(max_examples=1000, deadline=None)
@given(st.floats(-1e4, 1e4, allow_subnormal=True), st.integers(-6, 15))
def test_c3_roundtrip_within_half_scale(v, frac):
    p = QuantParams(frac)
    # inside the representable range the error is at most half a step
    v = float(np.clip(v, -p.max_value, p.max_value))
    back = quant.dequantize_tensor(quant.quantize_tensor([v], p))[0]
    assert abs(back - v) <= p.scale / 2


# ---------------------------------------------------------------- 4

@pytest.mark.criterion(4, "719,385 trainable parameters, flatten 4400, bit-exact bundle roundtrip")
def test_c4_architecture_and_roundtrip(tmp_path, record_property):
    model = nn.CnnModel.create(seed=0)
    count = nn.count_parameters(model)
    assert count == 719_385 and model.flatten_size == 4400
    save_bundle_and_compare(model, tmp_path / "float")
    f = quant.fold_batchnorm(model)
    x = np.random.default_rng(0).integers(0, 2, (64, 2, 2, 11))
    qm = quant.quantize_model(f, quant.calibrate(f, x))
    model_io.save_bundle(qm, tmp_path / "quant")
    back = model_io.load_bundle(tmp_path / "quant")
    for a, b in zip([*qm.convs, qm.dense1, qm.dense2], [*back.convs, back.dense1, back.dense2]):
        assert a.weight.tobytes() == b.weight.tobytes() and a.bias.tobytes() == b.bias.tobytes()
        assert (a.weight_frac, a.in_frac, a.out_frac) == (b.weight_frac, b.in_frac, b.out_frac)
    _note(record_property, f"parameters {count:,}, flatten {model.flatten_size}, "
                           f"float and int8 bundles bit-exact")


def save_bundle_and_compare(model, path):
    model_io.save_bundle(model, path)
    back = model_io.load_bundle(path)
    assert nn.count_parameters(back) == nn.count_parameters(model)
    for k, v in model.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes()


# ---------------------------------------------------------------- desk scale

@pytest.fixture(scope="session")
def desk():
    cfg = pipeline.merge_config(pipeline.DEFAULT_CONFIG, {"train": {"epochs": DESK_EPOCHS}})
    t0 = time.perf_counter()
    dos_log, fuzz_log = pipeline.build_logs(cfg)
    benign = int((~dos_log.attack_mask()).sum() + (~fuzz_log.attack_mask()).sum())
    from canids.train import transfer_train
    res = transfer_train(pipeline.train_config(cfg), features.window_set(dos_log),
                         features.window_set(fuzz_log), model=pipeline.make_model(cfg))
    train_time = time.perf_counter() - t0
    calib = pipeline.calibration_windows(
        features.WindowSet.concat([res.dos_split[0], res.fuzz_split[0]]), cfg)
    qm = pipeline.quantize_float_model(res.model, calib)
    return {"cfg": cfg, "benign": benign, "result": res, "qm": qm, "train_time": train_time,
            "fuzz_log": fuzz_log}


@pytest.mark.slow
@pytest.mark.criterion(5, "desk-scale AUC >= 0.99 (DoS) and >= 0.95 (fuzzing)")
def test_c5_desk_scale_auc(desk, record_property):
    res = desk["result"]
    auc_dos, auc_fuzz = res.reports["dos"].auc, res.reports["fuzzing"].auc
    _note(record_property, f"benign frames {desk['benign']}, epochs {DESK_EPOCHS}+{DESK_EPOCHS}, "
                           f"test windows {res.reports['dos'].samples}/"
                           f"{res.reports['fuzzing'].samples}, AUC DoS {auc_dos:.5f}, "
                           f"fuzzing {auc_fuzz:.5f}, "
                           f"F1 {res.reports['dos'].f1:.4f}/{res.reports['fuzzing'].f1:.4f}, "
                           f"data+training {desk['train_time']:.0f} s")
    assert desk["benign"] >= 50_000 and DESK_EPOCHS <= 10
    assert auc_dos >= 0.99 and auc_fuzz >= 0.95


@pytest.mark.slow
@pytest.mark.criterion(6, "int8 vs float: |dF1| <= 0.01 and verdict agreement >= 99%")
@pytest.mark.parametrize("attack", ["dos", "fuzzing"])
def test_c6_quantization_parity(desk, attack, record_property):
    res, qm = desk["result"], desk["qm"]
    test = res.dos_split[2] if attack == "dos" else res.fuzz_split[2]
    pf = predict(res.model, test.x)
    pq = predict(qm, test.x)
    f1_f = EvalReport.build(attack, pf, test.y).f1
    f1_q = evaluate_model(qm, test, attack).f1
    agree = float(np.mean((pf >= 0.5) == (pq >= 0.5)))
    _note(record_property, f"{attack}: F1 float {f1_f:.4f}, int8 {f1_q:.4f}, "
                           f"|dF1| {abs(f1_q - f1_f):.4f}, agreement {100 * agree:.2f}%")
    assert abs(f1_q - f1_f) <= 0.01 and agree >= 0.99


@pytest.mark.slow
@pytest.mark.criterion(7, "DoS F1 after the fuzzing phase within 0.01 of phase 1; one weight set")
def test_c7_transfer_retention(desk, record_property):
    res = desk["result"]
    before, after = res.phase1_reports["dos"].f1, res.reports["dos"].f1
    _note(record_property, f"DoS F1 phase 1 {before:.4f}, after phase 2 {after:.4f}, "
                           f"hash {res.param_hash[:12]}")
    assert after >= before - 0.01
    assert res.report_hashes["dos"] == res.report_hashes["fuzzing"] == res.param_hash
    assert nn.param_hash(res.model) == res.param_hash


class _TickClock:
    def __init__(self, durations):
        self._seq = [t for i, d in enumerate(durations) for t in (float(i), float(i) + d)]
        self._i = -1

    def __call__(self):
        self._i += 1
        return self._seq[self._i]


@pytest.mark.criterion(8, "latency statistics exact on injected clocks; line-rate budget")
def test_c8_latency_harness(record_property):
    det = Detector(lambda x: np.zeros(len(x)))
    # multiples of 2**-10 s keep every clock difference exact
    durations = [(k % 10 + 1) / 1024 for k in range(50)]
    stats = bench.measure_latency(det, [1, 2, 3], 50, warmup=0, clock=_TickClock(durations))
    assert stats.count == 50
    assert stats.mean == 5.5 / 1024
    assert stats.median == 5.5 / 1024
    # sorted samples: five of each 1..10 units; 0.99 * 49 = 48.51 lands between two 10s
    assert stats.p99 == 10 / 1024 and stats.max == 10 / 1024
    one = bench.measure_latency(det, [1], 30, warmup=29, clock=_TickClock([3 / 1024] * 30))
    assert one.count == 1 and one.mean == one.median == one.max == 3 / 1024
    budget = bench.line_rate_budget(stats, 1e6, 8, True)
    assert budget.frame_time == pytest.approx(135e-6, abs=1e-15)
    assert budget.block_time(64) == pytest.approx(8.64e-3, abs=1e-15)
    _note(record_property, f"frame {budget.frame_time * 1e6:.0f} us, 64 frames "
                           f"{budget.block_time(64) * 1e3:.2f} ms")


@pytest.mark.slow
@pytest.mark.criterion(8, "latency statistics exact on injected clocks; line-rate budget")
def test_c8_quantized_latency(desk, record_property):
    cfg = desk["cfg"]["bench"]
    ids = desk["fuzz_log"].ids()[:2048].tolist()
    det = Detector(desk["qm"])
    stats = bench.measure_latency(det, ids, int(cfg["reps"]), int(cfg["warmup"]))
    budget = bench.line_rate_budget(stats, cfg["bitrate"], cfg["dlc"], cfg["stuffed"])
    _note(record_property, f"int8 per-frame latency mean {stats.mean * 1e3:.3f} ms, "
                           f"median {stats.median * 1e3:.3f} ms, p99 {stats.p99 * 1e3:.3f} ms "
                           f"over {stats.count} frames; headroom {budget.headroom:.3f}")
    assert stats.mean <= 5e-3


# ---------------------------------------------------------------- 9

DETERMINISM_CFG = {
    "benign": {"duration": 3.0, "seed": 1},
    "benign_fuzzing": {"duration": 3.0, "seed": 2},
    "dos": {"burst_windows": [[0.5, 1.5]]},
    "fuzzing": {"burst_windows": [[0.5, 2.0]]},
    "model": {"channels": [8, 16, 16, 16, 16], "hidden": 16},
    "train": {"epochs": 1, "learning_rate": 1e-3},
    "quantize": {"calibration_windows": 256},
}


def _pipeline(root, cfg):
    def run(*argv):
        assert cli.main([str(a) for a in argv]) == 0

    run("generate", "--config", cfg, "--out", root / "b1.csv")
    run("generate", "--config", cfg, "--seed", 2, "--out", root / "b2.csv")
    run("inject", "--config", cfg, "--log", root / "b1.csv", "--attack", "dos",
        "--out", root / "dos.csv")
    run("inject", "--config", cfg, "--log", root / "b2.csv", "--attack", "fuzzing",
        "--out", root / "fuzz.csv")
    run("train", "--config", cfg, "--dos-log", root / "dos.csv", "--fuzz-log", root / "fuzz.csv",
        "--out", root / "float", "--history", root / "history.json", "--frozen-clock")
    run("quantize", "--config", cfg, "--model", root / "float", "--calib-log", root / "dos.csv",
        root / "fuzz.csv", "--out", root / "quant", "--report", root / "quant.json",
        "--frozen-clock")
    for attack, log in (("dos", "dos.csv"), ("fuzzing", "fuzz.csv")):
        run("evaluate", "--config", cfg, "--model", root / "quant", "--log", root / log,
            "--attack", attack, "--split", "test", "--out", root / f"eval_{attack}.json",
            "--roc-csv", root / f"roc_{attack}.csv", "--frozen-clock")
    run("detect", "--model", root / "quant", "--log", root / "b2.csv", "--out", root / "v.csv")


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.mark.criterion(9, "identical seeds give byte-identical bundles and frozen-clock reports")
def test_c9_determinism(tmp_path, record_property):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(DETERMINISM_CFG))
    a, b = tmp_path / "run_a", tmp_path / "run_b"
    for d in (a, b):
        d.mkdir()
        _pipeline(d, cfg)
    ta, tb = _tree(a), _tree(b)
    assert ta.keys() == tb.keys()
    differing = [k for k in ta if ta[k] != tb[k]]
    _note(record_property, f"{len(ta)} output files compared, {len(differing)} differ")
    assert differing == []
    assert any(k.startswith("float/tensors/") for k in ta)
    assert any(k.startswith("quant/tensors/") for k in ta)
