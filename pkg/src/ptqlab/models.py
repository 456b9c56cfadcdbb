"""Desk-scale model zoo: MLP and residual CNN graphs, batch-norm folding,
forward execution with hooks, block partitioning, and checkpoint files.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, HookError, ShapeError, TopologyError
from .tensor import Tensor


@dataclass
class LayerSpec:
    """One layer of a model graph.

    kind: linear | conv2d | batchnorm2d | relu | avgpool | residual_add | flatten
    params: learnable tensors by name (weight, bias, gamma, beta)
    buffers: non-learnable arrays (batchnorm running statistics)
    attrs: structural attributes (stride, padding, eps, momentum, from_layer)
    """

    kind: str
    name: str
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


@dataclass
class Unit:
    """A contiguous reconstruction unit: the stem, one block, or the head."""

    name: str
    role: str  # "stem" | "block" | "head"
    layer_indices: list[int]


@dataclass
class ModelGraph:
    """Ordered layers with residual skip edges and reconstruction-unit markers."""

    layers: list[LayerSpec]
    units: list[Unit]
    input_shape: tuple[int, ...]
    classes: int
    arch: str

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for pname, p in layer.params.items():
                yield f"layers.{i}.{layer.name}.{pname}", p
            for bname, b in layer.buffers.items():
                yield f"layers.{i}.{layer.name}.{bname}", b

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params.values()]

    def quantizable_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.kind in ("linear", "conv2d")]


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _linear(rng, name, in_f, out_f) -> LayerSpec:
    w = _kaiming_uniform(rng, (out_f, in_f), in_f)
    b = np.zeros(out_f, dtype=np.float32)
    return LayerSpec("linear", name, params={"weight": Tensor(w, requires_grad=True),
                                             "bias": Tensor(b, requires_grad=True)})


def _conv(rng, name, cin, cout, k=3, stride=1, padding=1) -> LayerSpec:
    w = _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k)
    b = np.zeros(cout, dtype=np.float32)
    return LayerSpec("conv2d", name, params={"weight": Tensor(w, requires_grad=True),
                                             "bias": Tensor(b, requires_grad=True)},
                     attrs={"stride": stride, "padding": padding})


def _bn(name, c) -> LayerSpec:
    return LayerSpec(
        "batchnorm2d", name,
        params={"gamma": Tensor(np.ones(c, dtype=np.float32), requires_grad=True),
                "beta": Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)},
        buffers={"running_mean": np.zeros(c, dtype=np.float32),
                 "running_var": np.ones(c, dtype=np.float32)},
        attrs={"eps": 1e-5, "momentum": 0.1},
    )


def build_model(arch: str, seed: int = 0, *, widths=None, stages=None, channels=None,
                input_shape=None, classes=None) -> ModelGraph:
    """Build an initialized model graph.

    arch "mlp": widths is the full layer-size chain (input, hidden..., output);
    each hidden layer is one block, the final linear is the head. A leading
    flatten is inserted when input_shape is an image.

    arch "rescnn": stem conv + `stages` residual blocks of `channels` channels
    + global-avgpool/linear head; one block per residual stage.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
    layers: list[LayerSpec] = []
    units: list[Unit] = []

    if arch == "mlp":
        if not widths or len(widths) < 2:
            raise ConfigError("mlp requires widths with at least input and output sizes")
        if input_shape is None:
            input_shape = (widths[0],)
        if int(np.prod(input_shape)) != widths[0]:
            raise ConfigError(f"input shape {input_shape} does not flatten to {widths[0]}")
        classes = widths[-1] if classes is None else classes
        if classes != widths[-1]:
            raise ConfigError("classes must equal the final width")
        if len(input_shape) > 1:
            layers.append(LayerSpec("flatten", "flatten0"))
        for i, (a, b) in enumerate(zip(widths[:-2], widths[1:-1])):
            start = len(layers)
            layers.append(_linear(rng, f"fc{i}", a, b))
            layers.append(LayerSpec("relu", f"relu{i}"))
            units.append(Unit(f"block{i}", "block", [start, start + 1]))
        start = len(layers)
        layers.append(_linear(rng, "head", widths[-2], widths[-1]))
        units.append(Unit("head", "head", [start]))

    elif arch == "rescnn":
        if not stages or not channels:
            raise ConfigError("rescnn requires stages and channels")
        if input_shape is None:
            input_shape = (3, 16, 16)
        if classes is None:
            classes = 10
        cin = input_shape[0]
        layers.append(_conv(rng, "stem", cin, channels))
        layers.append(_bn("stem_bn", channels))
        layers.append(LayerSpec("relu", "stem_relu"))
        units.append(Unit("stem", "stem", [0, 1, 2]))
        prev_out = 2
        for s in range(stages):
            start = len(layers)
            layers.append(_conv(rng, f"b{s}_conv1", channels, channels))
            layers.append(_bn(f"b{s}_bn1", channels))
            layers.append(LayerSpec("relu", f"b{s}_relu1"))
            layers.append(_conv(rng, f"b{s}_conv2", channels, channels))
            layers.append(_bn(f"b{s}_bn2", channels))
            layers.append(LayerSpec("residual_add", f"b{s}_add", attrs={"from_layer": prev_out}))
            layers.append(LayerSpec("relu", f"b{s}_relu2"))
            units.append(Unit(f"block{s}", "block", list(range(start, len(layers)))))
            prev_out = len(layers) - 1
        start = len(layers)
        layers.append(LayerSpec("avgpool", "pool"))
        layers.append(LayerSpec("flatten", "flatten"))
        layers.append(_linear(rng, "head", channels, classes))
        units.append(Unit("head", "head", [start, start + 1, start + 2]))

    else:
        raise ConfigError(f"unknown architecture {arch!r}")

    model = ModelGraph(layers=layers, units=units, input_shape=tuple(input_shape),
                       classes=classes, arch=arch)
    _validate_shapes(model)
    return model


def _layer_out_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape propagation for validation; shapes exclude the batch dimension."""
    if layer.kind == "linear":
        w = layer.params["weight"].shape
        if len(shape) != 1 or shape[0] != w[1]:
            raise ShapeError(f"{layer.name}: expects ({w[1]},), got {shape}")
        return (w[0],)
    if layer.kind == "conv2d":
        w = layer.params["weight"].shape
        c, h, wd = shape
        if c != w[1]:
            raise ShapeError(f"{layer.name}: channel mismatch {c} vs {w[1]}")
        st, pd = layer.attrs["stride"], layer.attrs["padding"]
        return (w[0], (h + 2 * pd - w[2]) // st + 1, (wd + 2 * pd - w[3]) // st + 1)
    if layer.kind == "batchnorm2d":
        return shape
    if layer.kind in ("relu", "residual_add"):
        return shape
    if layer.kind == "avgpool":
        return (shape[0],)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    raise ConfigError(f"unknown layer kind {layer.kind!r}")


def _validate_shapes(model: ModelGraph) -> None:
    shapes: list[tuple[int, ...]] = []
    shape = model.input_shape
    for layer in model.layers:
        if layer.kind == "residual_add":
            src = layer.attrs["from_layer"]
            if shapes[src] != shape:
                raise ShapeError(f"{layer.name}: skip source shape {shapes[src]} != {shape}")
        shape = _layer_out_shape(layer, shape)
        shapes.append(shape)
    covered = sorted(i for u in model.units for i in u.layer_indices)
    if covered != list(range(len(model.layers))):
        raise TopologyError("units do not cover the model exactly once")


def layer_forward(layer: LayerSpec, x: Tensor, saved: dict[int, Tensor],
                  params: dict[str, Tensor] | None = None, training: bool = False) -> Tensor:
    """Forward one layer; `params` overrides the layer's own parameter tensors."""
    p = params if params is not None else layer.params
    if layer.kind == "linear":
        return T.add_bias(T.matmul(x, T.transpose2d(p["weight"])), p["bias"])
    if layer.kind == "conv2d":
        out = T.conv2d(x, p["weight"], stride=layer.attrs["stride"], padding=layer.attrs["padding"])
        return T.add_bias(out, p["bias"])
    if layer.kind == "batchnorm2d":
        return T.batchnorm2d(x, p["gamma"], p["beta"],
                             layer.buffers["running_mean"], layer.buffers["running_var"],
                             eps=layer.attrs["eps"], momentum=layer.attrs["momentum"],
                             training=training)
    if layer.kind == "relu":
        return T.relu(x)
    if layer.kind == "avgpool":
        return T.avgpool_global(x)
    if layer.kind == "flatten":
        return T.reshape(x, (x.shape[0], -1))
    if layer.kind == "residual_add":
        return T.add(x, saved[layer.attrs["from_layer"]])
    raise ConfigError(f"unknown layer kind {layer.kind!r}")


def _skip_sources(model: ModelGraph) -> set[int]:
    return {l.attrs["from_layer"] for l in model.layers if l.kind == "residual_add"}


def forward(model: ModelGraph, x: Tensor, hooks=None, param_fn=None, training: bool = False,
            start: int = 0, stop: int | None = None) -> Tensor:
    """Run layers [start, stop) on x.

    hooks: optional mapping layer_index -> fn(Tensor) -> Tensor, applied to that
    layer's output (observe or replace; shape must be preserved).
    param_fn: optional fn(layer_index, layer) -> params dict, substituting the
    layer's parameters (used for quantized weights).
    """
    stop = len(model.layers) if stop is None else stop
    sources = _skip_sources(model)
    # a partial forward's input is by construction the output of layer start-1,
    # which is the skip source for a residual block entered at `start`
    saved: dict[int, Tensor] = {start - 1: x} if start > 0 else {}
    out = x
    for i in range(start, stop):
        layer = model.layers[i]
        params = param_fn(i, layer) if param_fn is not None else None
        out = layer_forward(layer, out, saved, params=params, training=training)
        if hooks is not None and i in hooks:
            replaced = hooks[i](out)
            if replaced is not None:
                if replaced.shape != out.shape:
                    raise HookError(f"hook at layer {i} changed shape {out.shape} -> {replaced.shape}")
                out = replaced
        if i in sources:
            saved[i] = out
    return out


def partition_blocks(model: ModelGraph) -> list[Unit]:
    """Blocks only (stem and head are separate non-block units)."""
    return [u for u in model.units if u.role == "block"]


def fold_batchnorm(model: ModelGraph) -> ModelGraph:
    """Fold every batchnorm2d into the conv2d immediately preceding it.

    Conv weights are scaled by gamma/sqrt(var+eps) per output channel and the
    bias absorbs beta - gamma*mean/sqrt(var+eps). Skip-edge indices and unit
    layer lists are remapped to the shortened layer list.
    """
    layers = model.layers
    drop: set[int] = set()
    new_params: dict[int, dict[str, Tensor]] = {}
    for i, layer in enumerate(layers):
        if layer.kind != "batchnorm2d":
            continue
        if i == 0 or layers[i - 1].kind != "conv2d":
            raise TopologyError(f"{layer.name}: batchnorm does not follow a conv2d")
        conv = layers[i - 1]
        gamma = layer.params["gamma"].data
        beta = layer.params["beta"].data
        mean = layer.buffers["running_mean"]
        var = layer.buffers["running_var"]
        scale = gamma / np.sqrt(var + layer.attrs["eps"])
        w = conv.params["weight"].data * scale[:, None, None, None]
        b = beta + (conv.params["bias"].data - mean) * scale
        new_params[i - 1] = {"weight": Tensor(w.astype(np.float32)),
                             "bias": Tensor(b.astype(np.float32))}
        drop.add(i)

    remap: dict[int, int] = {}
    folded_layers: list[LayerSpec] = []
    for i, layer in enumerate(layers):
        if i in drop:
            continue
        remap[i] = len(folded_layers)
        if i in new_params:
            layer = LayerSpec(layer.kind, layer.name, params=new_params[i],
                              buffers=dict(layer.buffers), attrs=dict(layer.attrs))
        else:
            layer = LayerSpec(layer.kind, layer.name, params=dict(layer.params),
                              buffers=dict(layer.buffers), attrs=dict(layer.attrs))
        if layer.kind == "residual_add":
            src = layer.attrs["from_layer"]
            if src not in remap:
                raise TopologyError(f"{layer.name}: skip source was folded away")
            layer.attrs["from_layer"] = remap[src]
        folded_layers.append(layer)

    folded_units = [Unit(u.name, u.role, [remap[i] for i in u.layer_indices if i in remap])
                    for u in model.units]
    folded = ModelGraph(layers=folded_layers, units=folded_units,
                        input_shape=model.input_shape, classes=model.classes, arch=model.arch)
    _validate_shapes(folded)
    return folded


# ---------------------------------------------------------------------------
# checkpoint file: magic "QDCK", version u16 LE, then records of
# (name-length u16, utf-8 name, rank u8, dims u32 x rank, payload f32 x prod)

CHECKPOINT_MAGIC = b"QDCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: ModelGraph, path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        for name, value in model.named_parameters():
            arr = value.data if isinstance(value, Tensor) else value
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<H", f.read(2))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(2)
            if not head:
                break
            (nlen,) = struct.unpack("<H", head)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            payload = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(dims)
            out[name] = payload.copy()
    return out


def load_checkpoint(model: ModelGraph, path) -> None:
    """Load parameters into an existing graph; names and shapes must match."""
    stored = read_checkpoint(path)
    for name, value in model.named_parameters():
        if name not in stored:
            raise ConfigError(f"checkpoint missing parameter {name}")
        arr = stored[name]
        target = value.data if isinstance(value, Tensor) else value
        if arr.shape != target.shape:
            raise ConfigError(f"{name}: checkpoint shape {arr.shape} != model {target.shape}")
        target[...] = arr
