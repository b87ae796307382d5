"""TinyissimoYOLO network family as explicit int8-executable layer graphs."""

from .builders import SIZES, VARIANTS, build_graph
from .execute import forward, forward_all, forward_float
from .fileformat import FormatError, load, loads, manifest, save, dumps
from .graph import GraphError, GraphSpec, LayerSpec, count_macs, count_params
from .weights import MissingWeights, WeightStore, init_weights, zero_weights

__all__ = [
    "SIZES", "VARIANTS", "build_graph", "forward", "forward_all", "forward_float",
    "FormatError", "load", "loads", "manifest", "save", "dumps", "GraphError", "GraphSpec",
    "LayerSpec", "count_macs", "count_params", "MissingWeights", "WeightStore",
    "init_weights", "zero_weights",
]
