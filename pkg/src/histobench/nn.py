"""Layer graphs, the concrete model builders, and checkpoint serialization.

A Network is a topologically ordered list of LayerNodes over the primitive
ops in tensor.py. Node 0 is the input; every later node consumes earlier
nodes only; the last node is the single output, a sigmoid over one unit, so
forward on [b, 3, 96, 96] yields [b, 1] probabilities. A training-mode
forward caches per-node backward closures on the network; backward consumes
that cache, so the pair must run back-to-back (single writer).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, ShapeError, StateError
from . import tensor as T

CHECKPOINT_MAGIC = b"HBCK"
CHECKPOINT_VERSION = 1

# canonical parameter order per parametric kind; checkpoint payload and
# gradient dicts both follow node declaration order then this order
_PARAM_ORDER = {"conv2d": ("kernels", "bias"), "dense": ("weights", "bias")}

# kinds an init-scheme walk may pass through when looking for the activation
# a weight tensor ultimately feeds
_PASS_THROUGH = {
    "add", "concat", "dropout", "maxpool", "flatten", "globalavgpool", "globalmaxpool",
}


@dataclass
class LayerNode:
    kind: str
    name: str
    inputs: list[int]
    params: dict[str, np.ndarray]
    attrs: dict


@dataclass
class TrainState:
    """Snapshot persisted alongside parameters in a checkpoint."""

    epoch: int = 0
    best_val_loss: float = math.inf
    adam_step: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)


def _infer_shape(kind: str, in_shapes: list[tuple[int, ...]], attrs: dict) -> tuple[int, ...]:
    """Per-sample output shape of one node; raises on illegal composition."""
    if kind == "dense":
        (shape,) = in_shapes
        if len(shape) != 1:
            raise ShapeError(f"dense expects a flat input, got per-sample shape {shape}")
        return (int(attrs["units"]),)
    if kind == "conv2d":
        (shape,) = in_shapes
        if len(shape) != 3:
            raise ShapeError(f"conv2d expects [c, h, w] input, got {shape}")
        c, h, w = shape
        kh, kw = attrs["kernel"]
        stride = attrs.get("stride", 1)
        oh, _, _ = T.conv_output_size(h, kh, stride, attrs["padding"])
        ow, _, _ = T.conv_output_size(w, kw, stride, attrs["padding"])
        return (int(attrs["filters"]), oh, ow)
    if kind == "maxpool":
        (shape,) = in_shapes
        if len(shape) != 3:
            raise ShapeError(f"maxpool expects [c, h, w] input, got {shape}")
        c, h, w = shape
        wh, ww = attrs["window"]
        sh, sw = attrs["stride"]
        oh, _, _ = T.conv_output_size(h, wh, sh, attrs["padding"])
        ow, _, _ = T.conv_output_size(w, ww, sw, attrs["padding"])
        return (c, oh, ow)
    if kind in ("relu", "sigmoid", "dropout"):
        (shape,) = in_shapes
        return shape
    if kind == "flatten":
        (shape,) = in_shapes
        return (int(np.prod(shape)),)
    if kind in ("globalavgpool", "globalmaxpool"):
        (shape,) = in_shapes
        if len(shape) != 3:
            raise ShapeError(f"global pool expects [c, h, w] input, got {shape}")
        return (shape[0],)
    if kind == "concat":
        if not in_shapes:
            raise ParameterError("concat needs at least one input")
        rank = len(in_shapes[0])
        for s in in_shapes:
            if len(s) != rank or s[1:] != in_shapes[0][1:]:
                raise ShapeError(f"concat inputs disagree beyond axis 0: {in_shapes}")
        return (sum(s[0] for s in in_shapes),) + in_shapes[0][1:]
    if kind == "add":
        a, b = in_shapes
        if a != b:
            raise ShapeError(f"add expects equal shapes, got {a} and {b}")
        return a
    raise ParameterError(f"unknown node kind {kind!r}")


def _expected_param_shapes(kind: str, in_shape: tuple[int, ...], attrs: dict) -> dict:
    if kind == "dense":
        return {"weights": (in_shape[0], int(attrs["units"])), "bias": (int(attrs["units"]),)}
    if kind == "conv2d":
        kh, kw = attrs["kernel"]
        f = int(attrs["filters"])
        return {"kernels": (f, in_shape[0], kh, kw), "bias": (f,)}
    return {}


class Network:
    """Immutable-topology model; parameters are the only mutable state
    besides the training-forward cache."""

    def __init__(self, name: str, nodes: list[LayerNode], input_shape: tuple[int, ...]):
        input_shape = tuple(int(s) for s in input_shape)
        if not nodes or nodes[0].kind != "input":
            raise ParameterError("node 0 must be the input node")
        names = set()
        shapes: list[tuple[int, ...]] = [input_shape]
        consumed = [False] * len(nodes)
        for i, node in enumerate(nodes):
            if node.name in names:
                raise ParameterError(f"duplicate node name {node.name!r}")
            names.add(node.name)
            if i == 0:
                continue
            if not node.inputs or any(not 0 <= j < i for j in node.inputs):
                raise ParameterError(
                    f"node {node.name!r} must reference earlier nodes, got {node.inputs}"
                )
            for j in node.inputs:
                consumed[j] = True
            shapes.append(_infer_shape(node.kind, [shapes[j] for j in node.inputs], node.attrs))
            expected = _expected_param_shapes(node.kind, shapes[node.inputs[0]], node.attrs)
            for pname, pshape in expected.items():
                arr = node.params.get(pname)
                if arr is None or arr.shape != pshape:
                    have = None if arr is None else arr.shape
                    raise ShapeError(
                        f"node {node.name!r} param {pname!r}: expected shape {pshape}, got {have}"
                    )
        if any(not c for c in consumed[:-1]):
            dangling = [nodes[i].name for i in range(len(nodes) - 1) if not consumed[i]]
            raise ParameterError(f"dangling nodes with no consumer: {dangling}")
        if nodes[-1].kind != "sigmoid" or shapes[-1] != (1,):
            raise ParameterError(
                f"output node must be a sigmoid over one unit, got {nodes[-1].kind!r} "
                f"with per-sample shape {shapes[-1]}"
            )
        self.name = name
        self.nodes = nodes
        self.input_shape = input_shape
        self.node_shapes = shapes
        self.trained = False
        self._tape = None

    # -- evaluation --------------------------------------------------------

    def _apply(self, node: LayerNode, args: list[np.ndarray], training: bool, rng) -> T.GradPair:
        k = node.kind
        if k == "dense":
            return T.dense(args[0], node.params["weights"], node.params["bias"])
        if k == "conv2d":
            return T.conv2d(args[0], node.params["kernels"], node.params["bias"],
                            padding=node.attrs["padding"], stride=node.attrs.get("stride", 1))
        if k == "relu":
            return T.activation(args[0], "relu")
        if k == "sigmoid":
            return T.activation(args[0], "sigmoid")
        if k == "maxpool":
            return T.maxpool2d(args[0], window=node.attrs["window"],
                               stride=node.attrs["stride"], padding=node.attrs["padding"])
        if k == "flatten":
            return T.flatten(args[0])
        if k == "globalavgpool":
            return T.global_pool(args[0], "avg")
        if k == "globalmaxpool":
            return T.global_pool(args[0], "max")
        if k == "concat":
            return T.concat(args)
        if k == "add":
            return T.add(args[0], args[1])
        if k == "dropout":
            return T.dropout(args[0], node.attrs["rate"], rng, training)
        raise ParameterError(f"unknown node kind {k!r}")

    def _run(self, x: np.ndarray, training: bool, rng):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"forward expects [b, {', '.join(map(str, self.input_shape))}], got {x.shape}"
            )
        if x.shape[0] < 1:
            raise ShapeError("forward needs a nonempty batch")
        values: list[np.ndarray] = [x]
        pairs: list[T.GradPair | None] = [None]
        for node in self.nodes[1:]:
            pair = self._apply(node, [values[j] for j in node.inputs], training, rng)
            values.append(pair.value)
            pairs.append(pair)
        return values, pairs

    def forward(self, x, training: bool = False, rng=None) -> np.ndarray:
        """Evaluate to [b, 1] probabilities; training mode caches the
        backward closures for one subsequent backward call."""
        values, pairs = self._run(x, training, rng)
        if training:
            self._tape = pairs
        return values[-1]

    def activations(self, x) -> list[np.ndarray]:
        """Inference values of every node (index-aligned with nodes)."""
        values, _ = self._run(x, False, None)
        return values

    def backward(self, upstream, want_input_grad: bool = False):
        """Consume the cached training forward; returns gradients keyed
        "<node>.<param>". Calling twice without a new training forward is a
        state error."""
        if self._tape is None:
            raise StateError("backward requires a preceding training-mode forward")
        pairs, self._tape = self._tape, None
        up = np.asarray(upstream, dtype=np.float64)
        out_shape = pairs[-1].value.shape
        if up.ndim == 1 and up.shape[0] == out_shape[0]:
            up = up.reshape(out_shape)
        if up.shape != out_shape:
            raise ShapeError(f"upstream shape {up.shape} does not match output {out_shape}")
        grads_out: list[np.ndarray | None] = [None] * len(self.nodes)
        grads_out[-1] = up
        param_grads: dict[str, np.ndarray] = {}
        for i in range(len(self.nodes) - 1, 0, -1):
            g = grads_out[i]
            if g is None:
                continue
            node = self.nodes[i]
            ret = pairs[i].backward(g)
            k = len(node.inputs)
            for j, dg in zip(node.inputs, ret[:k]):
                grads_out[j] = dg if grads_out[j] is None else grads_out[j] + dg
            for pname, pg in zip(_PARAM_ORDER.get(node.kind, ()), ret[k:]):
                param_grads[f"{node.name}.{pname}"] = pg
        if want_input_grad:
            return param_grads, grads_out[0]
        return param_grads

    # -- parameters --------------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        """Live parameter arrays, keyed "<node>.<param>", declaration order."""
        out: dict[str, np.ndarray] = {}
        for node in self.nodes:
            for pname in _PARAM_ORDER.get(node.kind, ()):
                out[f"{node.name}.{pname}"] = node.params[pname]
        return out

    def snapshot_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        live = self.params()
        if set(values) != set(live):
            raise ParameterError("parameter name sets differ")
        for k, arr in live.items():
            np.copyto(arr, values[k])


def count_params(net: Network) -> int:
    return sum(int(p.size) for p in net.params().values())


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


class GraphBuilder:
    """Accumulates nodes with shape checking; build() initializes parameters
    from one seed and returns the finished Network.

    Parametric ops accept a ``preset`` dict to carry existing weights into
    the new graph (the ensemble assembler uses this); presets are copied.
    """

    def __init__(self, input_shape=(3, 96, 96)):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.nodes: list[LayerNode] = [LayerNode("input", "input", [], {}, {})]
        self.shapes: list[tuple[int, ...]] = [self.input_shape]
        self._presets: list[dict | None] = [None]
        self._names = {"input"}

    def _add(self, kind, inputs, name, attrs, preset=None) -> int:
        for j in inputs:
            if not 0 <= j < len(self.nodes):
                raise ParameterError(f"{kind} references unknown node index {j}")
        if name is None:
            name = f"{kind}_{len(self.nodes)}"
        if name in self._names:
            raise ParameterError(f"duplicate node name {name!r}")
        shape = _infer_shape(kind, [self.shapes[j] for j in inputs], attrs)
        self.nodes.append(LayerNode(kind, name, list(inputs), {}, dict(attrs)))
        self.shapes.append(shape)
        self._presets.append(preset)
        self._names.add(name)
        return len(self.nodes) - 1

    def conv2d(self, src, filters, kernel, padding="valid", stride=1, name=None, preset=None):
        if filters < 1:
            raise ParameterError(f"conv2d needs filters >= 1, got {filters}")
        attrs = {"filters": int(filters), "kernel": tuple(kernel),
                 "padding": padding, "stride": int(stride)}
        return self._add("conv2d", [src], name, attrs, preset)

    def dense(self, src, units, name=None, preset=None):
        if units < 1:
            raise ParameterError(f"dense needs units >= 1, got {units}")
        return self._add("dense", [src], name, {"units": int(units)}, preset)

    def relu(self, src, name=None):
        return self._add("relu", [src], name, {})

    def sigmoid(self, src, name=None):
        return self._add("sigmoid", [src], name, {})

    def maxpool(self, src, window=(2, 2), stride=None, padding="valid", name=None):
        stride = tuple(stride) if stride is not None else tuple(window)
        attrs = {"window": tuple(window), "stride": stride, "padding": padding}
        return self._add("maxpool", [src], name, attrs)

    def flatten(self, src, name=None):
        return self._add("flatten", [src], name, {})

    def global_avg_pool(self, src, name=None):
        return self._add("globalavgpool", [src], name, {})

    def global_max_pool(self, src, name=None):
        return self._add("globalmaxpool", [src], name, {})

    def dropout(self, src, rate, name=None):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        return self._add("dropout", [src], name, {"rate": float(rate)})

    def concat(self, srcs, name=None):
        return self._add("concat", list(srcs), name, {})

    def add(self, a, b, name=None):
        return self._add("add", [a, b], name, {})

    def _init_std(self, idx: int, fan_in: int, fan_out: int) -> float:
        """He scaling for relu-feeding weights, Glorot for sigmoid-feeding;
        found by walking consumers through shape-only ops."""
        consumers: dict[int, list[int]] = {}
        for j, node in enumerate(self.nodes):
            for i in node.inputs:
                consumers.setdefault(i, []).append(j)
        queue = list(consumers.get(idx, []))
        seen = set(queue)
        while queue:
            j = queue.pop(0)
            kind = self.nodes[j].kind
            if kind == "relu":
                return math.sqrt(2.0 / fan_in)
            if kind == "sigmoid":
                return math.sqrt(2.0 / (fan_in + fan_out))
            if kind in _PASS_THROUGH:
                for nxt in consumers.get(j, []):
                    if nxt not in seen:
                        seen.add(nxt)
                        queue.append(nxt)
        return math.sqrt(2.0 / fan_in)

    def build(self, name: str, seed: int) -> Network:
        rng = np.random.default_rng(seed)
        for i, node in enumerate(self.nodes):
            expected = _expected_param_shapes(
                node.kind, self.shapes[node.inputs[0]] if node.inputs else (), node.attrs
            )
            if not expected:
                continue
            preset = self._presets[i]
            if preset is not None:
                for pname, pshape in expected.items():
                    arr = np.asarray(preset[pname], dtype=np.float64)
                    if arr.shape != pshape:
                        raise ShapeError(
                            f"preset for {node.name}.{pname} has shape {arr.shape}, "
                            f"expected {pshape}"
                        )
                    node.params[pname] = arr.copy()
                continue
            if node.kind == "dense":
                fan_in, fan_out = expected["weights"]
                std = self._init_std(i, fan_in, fan_out)
                node.params["weights"] = rng.normal(0.0, std, expected["weights"])
                node.params["bias"] = np.zeros(expected["bias"])
            else:  # conv2d
                f, c, kh, kw = expected["kernels"]
                std = self._init_std(i, c * kh * kw, f * kh * kw)
                node.params["kernels"] = rng.normal(0.0, std, expected["kernels"])
                node.params["bias"] = np.zeros(expected["bias"])
        return Network(name, self.nodes, self.input_shape)


# ---------------------------------------------------------------------------
# blocks and architectures
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InceptionSpec:
    """Output channels per branch: 1x1, 1x1->3x3, 1x1->5x5, maxpool->1x1.

    None omits a branch entirely (a single remaining branch degenerates to a
    plain convolution path); an explicit 0 is rejected. Reduction 1x1 convs
    use the branch's own output width.
    """

    b1: int | None = 8
    b3: int | None = 8
    b5: int | None = 4
    pool: int | None = 4


def residual_block(g: GraphBuilder, src: int, channels: int, name: str | None = None) -> int:
    """conv(3x3, same) -> relu -> conv(3x3, same), added to the block input,
    then relu. The input must already carry `channels` channels."""
    shape = g.shapes[src]
    if len(shape) != 3:
        raise ShapeError(f"residual block expects a [c, h, w] input, got {shape}")
    if shape[0] != channels:
        raise ShapeError(
            f"residual block with {channels} channels got input with {shape[0]}"
        )
    name = name or f"res{len(g.nodes)}"
    c1 = g.conv2d(src, channels, (3, 3), padding="same", name=f"{name}_conv1")
    r1 = g.relu(c1)
    c2 = g.conv2d(r1, channels, (3, 3), padding="same", name=f"{name}_conv2")
    s = g.add(c2, src)
    return g.relu(s)


def inception_block(g: GraphBuilder, src: int, spec: InceptionSpec, name: str | None = None) -> int:
    """Parallel same-padded branches, channel-concatenated."""
    name = name or f"inc{len(g.nodes)}"
    for label, width in (("b1", spec.b1), ("b3", spec.b3), ("b5", spec.b5), ("pool", spec.pool)):
        if width is not None and width < 1:
            raise ParameterError(f"inception branch {label} channel count must be >= 1, got {width}")
    branches = []
    if spec.b1 is not None:
        x = g.conv2d(src, spec.b1, (1, 1), padding="same", name=f"{name}_b1")
        branches.append(g.relu(x))
    if spec.b3 is not None:
        x = g.conv2d(src, spec.b3, (1, 1), padding="same", name=f"{name}_b3reduce")
        x = g.conv2d(g.relu(x), spec.b3, (3, 3), padding="same", name=f"{name}_b3")
        branches.append(g.relu(x))
    if spec.b5 is not None:
        x = g.conv2d(src, spec.b5, (1, 1), padding="same", name=f"{name}_b5reduce")
        x = g.conv2d(g.relu(x), spec.b5, (5, 5), padding="same", name=f"{name}_b5")
        branches.append(g.relu(x))
    if spec.pool is not None:
        x = g.maxpool(src, window=(3, 3), stride=(1, 1), padding="same", name=f"{name}_pool")
        x = g.conv2d(x, spec.pool, (1, 1), padding="same", name=f"{name}_pool_proj")
        branches.append(g.relu(x))
    if not branches:
        raise ParameterError("inception block needs at least one branch")
    return g.concat(branches, name=f"{name}_concat")


def attach_head(g: GraphBuilder, src: int, dropout_rate: float = 0.2) -> int:
    """concat[flatten, global-avg, global-max] -> dropout -> dense(1) -> sigmoid."""
    f = g.flatten(src, name="head_flatten")
    ga = g.global_avg_pool(src, name="head_gap")
    gm = g.global_max_pool(src, name="head_gmp")
    c = g.concat([f, ga, gm], name="head_concat")
    d = g.dropout(c, dropout_rate, name="head_dropout")
    out = g.dense(d, 1, name="head_dense")
    return g.sigmoid(out, name="head_sigmoid")


def build_mlp_baseline(seed: int = 0, input_shape=(3, 96, 96), hidden: int = 768) -> Network:
    g = GraphBuilder(input_shape)
    f = g.flatten(0, name="flatten")
    h = g.dense(f, hidden, name="hidden")
    r = g.relu(h, name="hidden_relu")
    o = g.dense(r, 1, name="output")
    g.sigmoid(o, name="output_sigmoid")
    return g.build("mlp_baseline", seed)


def build_conv_baseline(seed: int = 0, input_shape=(3, 96, 96), filters: int = 32) -> Network:
    g = GraphBuilder(input_shape)
    c = g.conv2d(0, filters, (3, 3), padding="valid", name="conv")
    r = g.relu(c, name="conv_relu")
    p = g.maxpool(r, name="pool")
    f = g.flatten(p, name="flatten")
    o = g.dense(f, 1, name="output")
    g.sigmoid(o, name="output_sigmoid")
    return g.build("conv_baseline", seed)


@dataclass
class MiniResNetConfig:
    stem_filters: int = 16
    stage_channels: tuple[int, ...] = (16, 32, 64)
    head_dropout: float = 0.2
    input_shape: tuple[int, int, int] = (3, 96, 96)


@dataclass
class MiniInceptionConfig:
    stem_filters: int = 16
    blocks: tuple[InceptionSpec, ...] = (
        InceptionSpec(8, 8, 4, 4),
        InceptionSpec(12, 12, 6, 6),
        InceptionSpec(16, 16, 8, 8),
    )
    head_dropout: float = 0.2
    input_shape: tuple[int, int, int] = (3, 96, 96)


def _downsample(g: GraphBuilder, src: int, name: str) -> int:
    _, h, w = g.shapes[src]
    if h < 2 or w < 2:
        raise ParameterError(
            f"config reduces spatial extent below 1 (feature map is {h}x{w} before {name})"
        )
    return g.maxpool(src, name=name)


def build_backbone_with_head(kind: str, config=None, seed: int = 0) -> Network:
    """Stem conv + residual or inception stack with 2x2 maxpool downsampling
    between blocks, then the shared pooling head."""
    if kind == "mini_resnet":
        cfg = config if config is not None else MiniResNetConfig()
        g = GraphBuilder(cfg.input_shape)
        x = g.relu(g.conv2d(0, cfg.stem_filters, (3, 3), padding="same", name="stem"),
                   name="stem_relu")
        for si, ch in enumerate(cfg.stage_channels, start=1):
            if g.shapes[x][0] != ch:
                # residual blocks require matching channels, so stages widen
                # through a 1x1 projection first
                x = g.relu(g.conv2d(x, ch, (1, 1), padding="same", name=f"stage{si}_widen"),
                           name=f"stage{si}_widen_relu")
            x = residual_block(g, x, ch, name=f"stage{si}")
            x = _downsample(g, x, name=f"stage{si}_pool")
        attach_head(g, x, cfg.head_dropout)
        return g.build("mini_resnet", seed)
    if kind == "mini_inception":
        cfg = config if config is not None else MiniInceptionConfig()
        g = GraphBuilder(cfg.input_shape)
        x = g.relu(g.conv2d(0, cfg.stem_filters, (3, 3), padding="same", name="stem"),
                   name="stem_relu")
        for bi, spec in enumerate(cfg.blocks, start=1):
            x = inception_block(g, x, spec, name=f"block{bi}")
            x = _downsample(g, x, name=f"block{bi}_down")
        attach_head(g, x, cfg.head_dropout)
        return g.build("mini_inception", seed)
    raise ParameterError(f"unknown backbone kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------


def _jsonable_attrs(attrs: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in attrs.items()}


def _tupled_attrs(attrs: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in attrs.items()}


def _param_keys(nodes: list[LayerNode]):
    for node in nodes:
        for pname in _PARAM_ORDER.get(node.kind, ()):
            yield node, pname


def save_checkpoint(net: Network, state: TrainState | None, path) -> None:
    """Little-endian container: magic "HBCK", u32 version, u32 header
    length, JSON header, then raw float64 payload in declaration order
    (parameters, then Adam m and v when present)."""
    keys = [f"{node.name}.{pname}" for node, pname in _param_keys(net.nodes)]
    has_moments = state is not None and bool(state.adam_m)
    if has_moments:
        for which, moments in (("m", state.adam_m), ("v", state.adam_v)):
            if set(moments) != set(keys):
                raise ParameterError(f"optimizer {which} moments do not cover the parameter set")
    header = {
        "name": net.name,
        "input_shape": list(net.input_shape),
        "nodes": [
            {
                "kind": n.kind,
                "name": n.name,
                "inputs": n.inputs,
                "attrs": _jsonable_attrs(n.attrs),
                "params": {p: list(n.params[p].shape) for p in _PARAM_ORDER.get(n.kind, ())},
            }
            for n in net.nodes
        ],
        "state": None if state is None else {
            "epoch": state.epoch,
            "best_val_loss": state.best_val_loss if math.isfinite(state.best_val_loss) else None,
            "adam_step": state.adam_step,
        },
        "has_moments": has_moments,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for node, pname in _param_keys(net.nodes):
            fh.write(np.ascontiguousarray(node.params[pname], dtype="<f8").tobytes())
        if has_moments:
            for moments in (state.adam_m, state.adam_v):
                for node, pname in _param_keys(net.nodes):
                    fh.write(
                        np.ascontiguousarray(moments[f"{node.name}.{pname}"], dtype="<f8").tobytes()
                    )
    tmp.replace(path)


def _read_array(blob: bytes, offset: int, shape: tuple[int, ...], path) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape)) if shape else 1
    nbytes = count * 8
    if offset + nbytes > len(blob):
        raise FormatError(
            f"{path}: truncated payload at offset {len(blob)} (expected {offset + nbytes} bytes)"
        )
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
    return arr, offset + nbytes


def load_checkpoint(path) -> tuple[Network, TrainState | None]:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header at offset {len(blob)}")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {version}")
    if len(blob) < 12 + hlen:
        raise FormatError(f"{path}: truncated header at offset {len(blob)}")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header at offset 12 ({e})") from None

    try:
        nodes = [
            LayerNode(d["kind"], d["name"], list(d["inputs"]), {}, _tupled_attrs(d["attrs"]))
            for d in header["nodes"]
        ]
        param_shapes = [
            {p: tuple(s) for p, s in d["params"].items()} for d in header["nodes"]
        ]
        input_shape = tuple(header["input_shape"])
        name = header["name"]
        state_doc = header["state"]
        has_moments = header["has_moments"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed header field ({e})") from None

    offset = 12 + hlen
    for node, shapes in zip(nodes, param_shapes):
        for pname in _PARAM_ORDER.get(node.kind, ()):
            if pname not in shapes:
                raise FormatError(f"{path}: header missing shape for {node.name}.{pname}")
            node.params[pname], offset = _read_array(blob, offset, shapes[pname], path)
    state = None
    if state_doc is not None:
        best = state_doc["best_val_loss"]
        state = TrainState(
            epoch=int(state_doc["epoch"]),
            best_val_loss=math.inf if best is None else float(best),
            adam_step=int(state_doc["adam_step"]),
        )
        if has_moments:
            for moments in (state.adam_m, state.adam_v):
                for node, shapes in zip(nodes, param_shapes):
                    for pname in _PARAM_ORDER.get(node.kind, ()):
                        moments[f"{node.name}.{pname}"], offset = _read_array(
                            blob, offset, shapes[pname], path
                        )
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes at offset {offset}")

    try:
        net = Network(name, nodes, input_shape)
    except (ParameterError, ShapeError) as e:
        raise FormatError(f"{path}: inconsistent checkpoint structure ({e})") from None
    net.trained = state is not None and state.epoch >= 1
    return net, state
