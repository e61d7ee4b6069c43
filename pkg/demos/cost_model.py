"""
Counting the work: MACs, memory placement and device estimates
==============================================================
"""

from odphar.adapt import L1_BYTES, place
from odphar.cost import (
    REFERENCE_CLASSES,
    REFERENCE_INPUT,
    builtin_profile,
    calibrate_builtin,
    energy_ratio,
    estimate_inference,
    estimate_update,
    inference_breakdown,
)
from odphar.nn import ArchConfig
from odphar.train import init_weights

model = init_weights(ArchConfig(), REFERENCE_INPUT, REFERENCE_CLASSES, seed=0)

# per-layer multiply-accumulates for one 2 s window
parts = inference_breakdown(model.backbone, model.classifier)
for name, macs in parts.items():
    print("%-16s %9d" % (name, macs))
print("%-16s %9d" % ("total", sum(parts.values())))

# fitting the profiles takes milliseconds
for name, res in calibrate_builtin().items():
    print(name, {k: "%+.3f%%" % (100 * v) for k, v in res.residuals.items()}, "%.3fs" % res.seconds)

gap9, stm = builtin_profile("gap9"), builtin_profile("stm32f7")
inf = estimate_inference(gap9, model)
print("inference: %.3f ms, %.1f uJ" % (inf.latency_s * 1e3, inf.energy_j * 1e6))
for k in (12, 10, 8):
    upd = estimate_update(gap9, (model.backbone.flatten_dim, k))
    print("update with %2d classes: %.3f ms, %.2f uJ" % (k, upd.latency_s * 1e3, upd.energy_j * 1e6))
print("update energy STM32F7 / GAP9: %.0fx" % energy_ratio(stm, gap9, model.classifier))

# the trainable head lives in L1: how wide can the feature vector get?
for k in (12, 10, 8):
    lo, hi = 1, 1 << 16
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if place(0, mid, k, strict=False).l1_ok:
            lo = mid
        else:
            hi = mid - 1
    print("%2d classes: flatten_dim up to %d fits %d bytes of L1" % (k, lo, L1_BYTES))
