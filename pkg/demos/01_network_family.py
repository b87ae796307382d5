"""
The TinyissimoYOLO family as layer graphs
=========================================

Build every variant, count parameters and multiply-accumulates, and look at
how resolution changes one but not the other.
"""

from tyrt.netzoo import VARIANTS, build_graph, count_macs, count_params, manifest

# all variants at 20 classes and 256x256 input
for version, size in VARIANTS:
    g = build_graph(version, size, num_classes=20, input_resolution=256)
    print(f"{version:>5} {size:<6} {count_params(g) / 1e6:6.3f} M params  {count_macs(g) / 1e6:8.1f} M MACs")

# parameters do not depend on the input size, MACs grow with its square
small = build_graph("v1_3", "small", input_resolution=128)
big = build_graph("v1_3", "small", input_resolution=256)
print("params equal:", count_params(small) == count_params(big))
print("MAC ratio 256/128:", count_macs(big) / count_macs(small))

# the manifest is the human-readable side of a model file
print("\n".join(manifest(big).splitlines()[:20]))
