"""Analytic parameter and operation counts.

Convention: one multiply-accumulate (MAC) per kernel tap; ``flops`` is
``2 * macs``. Convolutions count per output pixel, transposed convolutions
per input pixel (the scatter form). Normalisation and activation layers
are not counted.
"""

import numpy as np


def param_count(graph, trainable_only=True):
    """Number of scalar parameters (BatchNorm running stats excluded)."""
    total = sum(int(np.prod(s)) for s in graph.param_shapes().values())
    if not trainable_only:
        total += sum(int(np.prod(s)) for s in graph.buffer_shapes().values())
    return total


def macs(graph, input_shape=None):
    """Multiply-accumulates for one sample.

    ``input_shape`` (C, H, W) is only checked against the graph's declared
    input; graphs are built for a fixed resolution.
    """
    if input_shape is not None:
        declared = graph.shapes[graph.input_names[0]]
        if tuple(input_shape)[-3:] != declared:
            raise ValueError(f"graph was built for input {declared}, not {tuple(input_shape)}")
    total = 0
    for name, node in graph.nodes.items():
        total += node.layer.macs([graph.shapes[i] for i in node.inputs], graph.shapes[name])
    return total


def flops(graph, input_shape=None):
    return 2 * macs(graph, input_shape)
