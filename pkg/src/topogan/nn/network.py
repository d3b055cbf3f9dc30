"""Declarative network specs and the models built from them.

A :class:`NetworkSpec` is an ordered list of layers.  Each layer reads the
previous layer's output unless it names another node as ``input``, which is
how side branches (extra output heads) are expressed.  Specs serialise to
plain JSON text.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np

from topogan.errors import DataError, SpecError, UsageError
from topogan.nn.layers import LAYER_TYPES, Layer

INPUT = "input"


@dataclasses.dataclass
class LayerSpec:
    kind: str
    name: str
    config: dict = dataclasses.field(default_factory=dict)
    input: str | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name, "config": self.config}
        if self.input is not None:
            d["input"] = self.input
        return d


@dataclasses.dataclass
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: list[LayerSpec]
    outputs: list[str]
    name: str = "net"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
            "outputs": list(self.outputs),
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            layers=[LayerSpec(l["kind"], l["name"], dict(l.get("config", {})), l.get("input")) for l in d["layers"]],
            outputs=list(d["outputs"]),
            name=d.get("name", "net"),
        )

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))

    def count(self, kind: str) -> int:
        return sum(1 for l in self.layers if l.kind == kind)


class SpecBuilder:
    """Small helper for writing specs as a sequence of calls."""

    def __init__(self, input_shape, name="net"):
        self.input_shape = tuple(input_shape)
        self.name = name
        self.layers: list[LayerSpec] = []
        self.outputs: list[str] = []
        self._counts: dict[str, int] = {}
        self._branch_from: str | None = None

    def add(self, kind, name=None, **config) -> str:
        if name is None:
            i = self._counts.get(kind, 0) + 1
            self._counts[kind] = i
            name = f"{kind}{i}"
        self.layers.append(LayerSpec(kind, name, config, self._branch_from))
        self._branch_from = None
        return name

    def branch(self, node: str) -> "SpecBuilder":
        """Make the next layer read from ``node`` instead of the last layer."""
        self._branch_from = node
        return self

    def output(self, node: str | None = None) -> str:
        node = node or self.layers[-1].name
        self.outputs.append(node)
        return node

    def build(self) -> NetworkSpec:
        outputs = self.outputs or [self.layers[-1].name]
        spec = NetworkSpec(self.input_shape, list(self.layers), outputs, self.name)
        shape_plan(spec)
        return spec


def _make_layer(ls: LayerSpec) -> Layer:
    try:
        cls = LAYER_TYPES[ls.kind]
    except KeyError:
        raise SpecError(f"unknown layer kind {ls.kind!r}") from None
    try:
        return cls(ls.name, **ls.config)
    except TypeError as exc:
        raise SpecError(f"bad config for {ls.name}: {exc}") from exc


def shape_plan(spec: NetworkSpec) -> dict[str, tuple[tuple, tuple]]:
    """Per-layer (input shape, output shape), checking that shapes compose."""
    shapes = {INPUT: tuple(spec.input_shape)}
    plan = {}
    prev = INPUT
    for ls in spec.layers:
        if ls.name in shapes:
            raise SpecError(f"duplicate layer name {ls.name!r}")
        src = ls.input or prev
        if src not in shapes:
            raise SpecError(f"{ls.name} reads from unknown node {src!r}")
        out = _make_layer(ls).output_shape(shapes[src])
        plan[ls.name] = (shapes[src], out)
        shapes[ls.name] = out
        prev = ls.name
    for o in spec.outputs:
        if o not in shapes:
            raise SpecError(f"unknown output node {o!r}")
    return plan


def param_count(spec: NetworkSpec, include_state: bool = True) -> int:
    """Closed-form parameter count; batchnorm running statistics count when ``include_state``."""
    plan = shape_plan(spec)
    total = 0
    for ls in spec.layers:
        layer = _make_layer(ls)
        in_shape, _ = plan[ls.name]
        total += sum(int(np.prod(s)) for s in layer.param_shapes(in_shape).values())
        if include_state:
            total += sum(int(np.prod(s)) for s in layer.state_shapes(in_shape).values())
    return total


@dataclasses.dataclass
class ForwardCache:
    entries: dict
    sources: dict
    batch_input_shape: tuple


class Model:
    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.plan = shape_plan(spec)
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        self.sources: dict[str, str] = {}
        prev = INPUT
        for ls in spec.layers:
            layer = _make_layer(ls)
            layer.build(self.plan[ls.name][0], rng, self.dtype)
            self.layers.append(layer)
            self.sources[ls.name] = ls.input or prev
            prev = ls.name
        self.log: list[dict] = []

    @property
    def output_shapes(self) -> list[tuple]:
        return [self.plan[o][1] for o in self.spec.outputs]

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{l.name}/{k}": v for l in self.layers for k, v in l.params.items()}

    def states(self) -> dict[str, np.ndarray]:
        return {f"{l.name}/{k}": v for l in self.layers for k, v in l.state.items()}

    def set_parameters(self, values: dict[str, np.ndarray], state: bool = False) -> None:
        for l in self.layers:
            target = l.state if state else l.params
            for k in target:
                key = f"{l.name}/{k}"
                if key in values:
                    v = np.asarray(values[key], dtype=self.dtype)
                    if v.shape != target[k].shape:
                        raise DataError(f"{key}: shape {v.shape} != {target[k].shape}")
                    target[k] = v.copy()

    def astype(self, dtype) -> "Model":
        clone = Model(self.spec, dtype=dtype)
        clone.set_parameters(self.parameters())
        clone.set_parameters(self.states(), state=True)
        return clone

    def _check_input(self, x):
        x = np.asarray(x)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise SpecError(f"input shape {x.shape[1:]} does not match network input {tuple(self.spec.input_shape)}")
        return x.astype(self.dtype, copy=False)

    def forward(self, x: np.ndarray, train: bool = False) -> tuple[list[np.ndarray], ForwardCache | None]:
        """Run the network; in train mode batch statistics are used and a cache is returned."""
        x = self._check_input(x)
        values = {INPUT: x}
        caches = {}
        for layer in self.layers:
            y, cache = layer.forward(values[self.sources[layer.name]], train)
            values[layer.name] = y
            if train:
                caches[layer.name] = cache
        outs = [values[o] for o in self.spec.outputs]
        if not train:
            return outs, None
        return outs, ForwardCache(caches, dict(self.sources), x.shape)

    def __call__(self, x: np.ndarray) -> np.ndarray | list[np.ndarray]:
        outs, _ = self.forward(x, train=False)
        return outs[0] if len(outs) == 1 else outs

    def backward(self, cache: ForwardCache | None, output_grads: Sequence[np.ndarray]) -> tuple[dict, np.ndarray]:
        """Gradients of all parameters plus the input gradient."""
        if cache is None:
            raise UsageError("backward needs the cache from a train-mode forward pass")
        if len(output_grads) != len(self.spec.outputs):
            raise UsageError(f"expected {len(self.spec.outputs)} output gradients, got {len(output_grads)}")
        pending: dict[str, np.ndarray] = {}
        for name, g in zip(self.spec.outputs, output_grads):
            if g is None:
                continue
            g = np.asarray(g, dtype=self.dtype)
            pending[name] = pending[name] + g if name in pending else g
        grads = {}
        for layer in reversed(self.layers):
            dy = pending.pop(layer.name, None)
            if dy is None:
                for k, v in layer.params.items():
                    grads[f"{layer.name}/{k}"] = np.zeros_like(v)
                continue
            dx, g = layer.backward(cache.entries[layer.name], dy)
            for k, v in g.items():
                grads[f"{layer.name}/{k}"] = v.astype(self.dtype, copy=False)
            src = cache.sources[layer.name]
            pending[src] = pending[src] + dx if src in pending else dx
        dx = pending.get(INPUT)
        if dx is None:
            dx = np.zeros(cache.batch_input_shape, dtype=self.dtype)
        return grads, dx

    def depth(self) -> int:
        """Number of parametrised layers (conv and dense)."""
        return sum(1 for l in self.layers if l.kind in ("conv2d", "dense"))
