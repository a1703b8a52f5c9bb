"""Transfer-train a reduced network on DoS then fuzzing, then quantise it.

A narrow network and a short capture keep this to about a minute; the
full-size model is trained the same way by ``canids train``.
"""

import numpy as np

from canids import features, nn, pipeline, quant
from canids.metrics import evaluate_model, predict
from canids.train import TrainConfig, transfer_train

cfg = pipeline.merge_config(pipeline.DEFAULT_CONFIG, {
    "benign": {"duration": 4.0}, "benign_fuzzing": {"duration": 4.0},
    "dos": {"burst_windows": [[1, 2]]}, "fuzzing": {"burst_windows": [[1, 2.5]]},
})
dos_log, fuzz_log = pipeline.build_logs(cfg)
dos, fuzz = features.window_set(dos_log), features.window_set(fuzz_log)
print(f"windows: DoS {len(dos)}, fuzzing {len(fuzz)}")

model = nn.CnnModel.create((16, 32, 32, 32, 32), 32, seed=0)
print("trainable parameters:", nn.count_parameters(model))

res = transfer_train(TrainConfig(learning_rate=1e-3, epochs=2), dos, fuzz, model=model)
for name in ("dos", "fuzzing"):
    r = res.reports[name]
    print(f"float {name:8s} F1 {r.f1:.4f}  AUC {r.auc:.4f}  (phase 1 F1 "
          f"{res.phase1_reports[name].f1:.4f})")

# Fold batch norm, calibrate on training windows, quantise to int8
folded = quant.fold_batchnorm(res.model)
calib = features.WindowSet.concat([res.dos_split[0], res.fuzz_split[0]])
profile = quant.calibrate(folded, calib.x[:1024])
qm = quant.quantize_model(folded, profile)
print("activation frac bits:", {k: p.frac_bits for k, p in qm.site_params().items()})

for name, split in (("dos", res.dos_split), ("fuzzing", res.fuzz_split)):
    test = split[2]
    pf = predict(res.model, test.x)
    pq = predict(qm, test.x)
    agree = np.mean((pf >= 0.5) == (pq >= 0.5))
    print(f"int8  {name:8s} F1 {evaluate_model(qm, test, name).f1:.4f}  "
          f"verdict agreement {100 * agree:.2f}%")
