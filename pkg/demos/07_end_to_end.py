"""
The whole loop
==============

Build, quantize and run ten synthetic frames through capture, demosaic,
tiled int8 inference and post-processing. Times are virtual: stage times
from the power profile, plus the planner's cycle estimate for inference.
"""

import tempfile
from pathlib import Path

from tyrt import pipeline
from tyrt.netzoo import build_graph, init_weights, save
from tyrt.quantizer import ptq

work = Path(tempfile.mkdtemp())
g = build_graph("v1_3", "small")
ws = ptq(g, init_weights(g), pipeline.calibration_images(g, count=4, seed=0))
model = save(work / "v13.tyrt", g, ws)

report = pipeline.run_pipeline(pipeline.RunConfig(model=model, out_dir=work / "run", frames=10))
print(pipeline.format_report(report))
print("outputs in", work / "run")
