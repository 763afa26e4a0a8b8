"""A DAG of layers with reverse-mode differentiation."""

from dataclasses import dataclass

import numpy as np

from .layers import Layer
from ..errors import GraphError, StateError


@dataclass(frozen=True)
class Node:
    name: str
    layer: Layer
    inputs: tuple


class ModelGraph:
    """Nodes are appended in topological order; each may only consume
    nodes that already exist, so the graph is acyclic by construction.

    Parameters are allocated lazily by :meth:`init_params`, which keeps
    shape audits of very large graphs free of memory cost.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes = {}
        self.input_names = []
        self.output_names = []
        self.shapes = {}
        self.params = {}
        self.buffers = {}
        self.grads = {}
        self.training = True
        self.stages = {}
        self._acts = None
        self._caches = None
        self._input_grads = None

    # -- construction -------------------------------------------------
    def add_input(self, name, shape):
        if name in self.shapes:
            raise GraphError(f"duplicate node name {name!r}")
        self.input_names.append(name)
        self.shapes[name] = tuple(int(s) for s in shape)
        return name

    def add(self, name, layer, inputs):
        if name in self.shapes:
            raise GraphError(f"duplicate node name {name!r}")
        inputs = (inputs,) if isinstance(inputs, str) else tuple(inputs)
        missing = [i for i in inputs if i not in self.shapes]
        if missing:
            raise GraphError(f"node {name!r}: unknown inputs {missing}")
        if layer.n_inputs is not None and len(inputs) != layer.n_inputs:
            raise GraphError(f"node {name!r}: expects {layer.n_inputs} inputs, got {len(inputs)}")
        try:
            out_shape = layer.output_shape(*(self.shapes[i] for i in inputs))
        except GraphError as exc:
            raise GraphError(f"node {name!r}: {exc}") from None
        self.nodes[name] = Node(name, layer, inputs)
        self.shapes[name] = tuple(out_shape)
        return name

    def set_outputs(self, names):
        for n in names:
            if n not in self.nodes:
                raise GraphError(f"unknown output node {n!r}")
        self.output_names = list(names)

    # -- parameters -----------------------------------------------------
    def param_shapes(self):
        return {f"{n}.{k}": s for n, node in self.nodes.items()
                for k, s in node.layer.param_shapes().items()}

    def buffer_shapes(self):
        return {f"{n}.{k}": s for n, node in self.nodes.items()
                for k, s in node.layer.buffer_shapes().items()}

    def init_params(self, seed=0):
        rng = np.random.default_rng(seed)
        self.params, self.buffers = {}, {}
        for name, node in self.nodes.items():
            for k, v in node.layer.init_params(rng, self.dtype).items():
                self.params[f"{name}.{k}"] = v
            for k, v in node.layer.init_buffers(self.dtype).items():
                self.buffers[f"{name}.{k}"] = v
        self.zero_grad()
        return self

    @property
    def initialized(self):
        return len(self.params) == len(self.param_shapes())

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        self.params = {k: v.astype(self.dtype) for k, v in self.params.items()}
        self.buffers = {k: v.astype(self.dtype) for k, v in self.buffers.items()}
        self.zero_grad()
        return self

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _node_params(self, name):
        return {k: self.params[f"{name}.{k}"] for k in self.nodes[name].layer.param_shapes()}

    def _node_buffers(self, name):
        return {k: self.buffers[f"{name}.{k}"] for k in self.nodes[name].layer.buffer_shapes()}

    # -- execution ------------------------------------------------------
    def forward(self, inputs, record=True):
        """Run the graph; returns the output tensors in declared order.

        Every intermediate activation stays available through
        :meth:`activation` until the next forward pass. ``record=False``
        skips the backward caches (inference).
        """
        if not self.initialized:
            raise StateError("parameters not initialised; call init_params() first")
        if isinstance(inputs, np.ndarray):
            inputs = [inputs]
        if len(inputs) != len(self.input_names):
            raise GraphError(f"expected {len(self.input_names)} inputs, got {len(inputs)}")
        acts, caches = {}, {}
        batch = None
        for name, x in zip(self.input_names, inputs):
            x = np.asarray(x, dtype=self.dtype)
            if x.ndim != 4 or x.shape[1:] != self.shapes[name]:
                raise GraphError(
                    f"input {name!r}: expected (N, {', '.join(map(str, self.shapes[name]))}),"
                    f" got {x.shape}"
                )
            if batch is not None and x.shape[0] != batch:
                raise GraphError(f"input {name!r}: batch size {x.shape[0]} != {batch}")
            batch = x.shape[0]
            acts[name] = x
        for name, node in self.nodes.items():
            xs = [acts[i] for i in node.inputs]
            buffers = self._node_buffers(name)
            y, cache = node.layer.forward(xs, self._node_params(name), buffers, self.training)
            acts[name] = y
            if record:
                caches[name] = cache
        self._acts = acts
        self._caches = caches if record else None
        return [acts[n] for n in self.output_names]

    def activation(self, name):
        if self._acts is None:
            raise StateError("no forward pass recorded")
        return self._acts[name]

    def backward(self, output_grads):
        """Accumulate parameter gradients into :attr:`grads`; returns them."""
        if self._caches is None:
            raise StateError("backward() requires a preceding recorded forward()")
        if isinstance(output_grads, np.ndarray):
            output_grads = [output_grads]
        if len(output_grads) != len(self.output_names):
            raise GraphError(
                f"expected {len(self.output_names)} output grads, got {len(output_grads)}"
            )
        if not self.grads:
            self.zero_grad()
        pending = {}
        for name, g in zip(self.output_names, output_grads):
            if g is None:
                continue
            g = np.asarray(g, dtype=self.dtype)
            if g.shape != self._acts[name].shape:
                raise GraphError(f"grad for {name!r} has shape {g.shape}, "
                                 f"expected {self._acts[name].shape}")
            pending[name] = pending[name] + g if name in pending else g
        for name in reversed(list(self.nodes)):
            if name not in pending:
                continue
            node = self.nodes[name]
            grad = pending.pop(name)
            in_grads, p_grads = node.layer.backward(grad, self._caches[name],
                                                    self._node_params(name))
            for k, v in p_grads.items():
                self.grads[f"{name}.{k}"] += v
            for src, g in zip(node.inputs, in_grads):
                pending[src] = pending[src] + g if src in pending else g
        self._input_grads = [pending.get(n) for n in self.input_names]
        self._caches = None
        return self.grads

    @property
    def input_grads(self):
        return self._input_grads

    def __len__(self):
        return len(self.nodes)

    def summary(self):
        lines = []
        for name, node in self.nodes.items():
            c, h, w = self.shapes[name]
            lines.append(f"{name:<28s} {type(node.layer).__name__:<10s} {c:>5d} x {h:>3d} x {w:>3d}")
        return "\n".join(lines)
