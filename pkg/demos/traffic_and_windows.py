"""Synthetic CAN traffic, attack injection and the window encoding.

Run with ``python3 demos/traffic_and_windows.py``.
"""

import io

import numpy as np

from canids import canbus, features, trafgen

# Two seconds of benign traffic from the built-in 36-ECU profile
benign = trafgen.gen_benign(trafgen.default_profile(2.0, seed=1))
print(f"{len(benign)} benign frames, {len(set(benign.ids().tolist()))} distinct IDs")

# A DoS flood of ID 0x000 every 0.3 ms, then a fuzzing burst on top of it
dos = trafgen.inject_dos(benign, trafgen.DosParams(0.0003, ((0.5, 1.0),)))
both = trafgen.inject_fuzzing(dos, trafgen.FuzzParams(0.0004, 0.0012, ((1.2, 1.6),), seed=3))
mask = both.attack_mask()
print(f"after injection: {len(both)} frames, {mask.sum()} attack frames")

# The log format is plain CSV
buf = io.StringIO()
canbus.write_log(canbus.FrameLog(both.frames[:5]), buf)
print(buf.getvalue(), end="")

# Each window holds the four newest IDs as an 11-bit MSB-first block
w = features.IdWindow([0x316, 0x18F, 0x000, 0x7FF])
t = features.window_to_tensor(w)
print("window tensor shape:", t.shape)
print(t.reshape(4, 11).astype(int))

ws = features.window_set(both)
print(f"{len(ws)} windows, attack share {ws.y.mean():.3f}")
# label follows the newest frame in the window
assert np.array_equal(ws.y, mask[3:].astype(np.uint8))

print("bits per frame at dlc 8:", canbus.frame_bit_length(8), "nominal,",
      canbus.frame_bit_length(8, stuffed=True), "worst-case stuffed")
