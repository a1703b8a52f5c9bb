"""How long a frame occupies the bus, and how long the detector takes per frame."""

import numpy as np

from canids import bench, canbus, nn, quant
from canids.detector import Detector

print("dlc  bits  stuffed  time @1 Mbps (us)")
for dlc in range(9):
    n, s = canbus.frame_bit_length(dlc), canbus.frame_bit_length(dlc, stuffed=True)
    print(f"{dlc:3d}  {n:4d}  {s:7d}  {s:8.0f}")
print(f"64 worst-case 8-byte frames: {64 * canbus.frame_time(8, 1e6, True) * 1e3:.2f} ms")

# Untrained full-size network, quantised with a random calibration set;
# latency does not depend on the weights
model = nn.CnnModel.create(seed=0)
folded = quant.fold_batchnorm(model)
x = np.random.default_rng(0).integers(0, 2, (256, 2, 2, 11))
qm = quant.quantize_model(folded, quant.calibrate(folded, x))

ids = np.random.default_rng(1).integers(0, 2048, 512).tolist()
for name, engine in (("float32", model), ("int8", qm)):
    stats = bench.measure_latency(Detector(engine), ids, reps=300, warmup=30)
    budget = bench.line_rate_budget(stats, 1e6, 8, True)
    print(f"{name:7s} mean {stats.mean * 1e3:.3f} ms  p99 {stats.p99 * 1e3:.3f} ms  "
          f"headroom {budget.headroom:.3f}"
          + ("  (below line rate)" if budget.below_line_rate else ""))
