"""
Post-training quantization
==========================

Calibrate the v1.3 network on a few synthetic camera frames, emit int8
weights, and compare the integer forward pass with the float one.
"""

from tyrt.netzoo import build_graph, init_weights
from tyrt.pipeline import calibration_images
from tyrt.quantizer import format_calibration_report, ptq, quant_error

g = build_graph("v1_3", "small", input_resolution=256)
ws = init_weights(g, seed=0)

# frames go through the same mosaic -> demosaic -> resize path as at runtime
images = calibration_images(g, count=4, seed=0)
qws = ptq(g, ws, images)

errors = quant_error(g, qws, images[:1])
print(format_calibration_report(g, qws, errors))

# error measured in output quantization steps at the two heads
for name in g.outputs:
    print(f"{name}: rmse {errors[name].rmse_steps:.2f} steps, max abs {errors[name].max_abs:.4f}")
