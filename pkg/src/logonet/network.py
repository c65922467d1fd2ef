"""Declarative inception-network graphs: specs, building, execution, surgery.

A ``NetworkSpec`` is an ordered trunk of layers plus classifier heads
anchored after named trunk layers.  ``build`` turns a spec into a
``Network`` with freshly initialized parameters; the spec transforms
(``insert_global_pool``, ``attach_full_classify``,
``warp_first_layer_to_inception``, ``reinit_head``) implement the
architecture variants and fine-tuning head surgery.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tt
from .errors import (BuildError, CheckpointMismatchError, DimensionError,
                     FormatError, ParameterError, UnknownHeadError)
from .tensor import Parameter, Tensor, make_rng

INIT_STD = 0.01
CHECKPOINT_MAGIC = b"DLCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class InceptionSpec:
    """Channel plan for one inception meta-layer.

    Four parallel branches: 1x1 conv; 1x1 reduce then 3x3 conv; 1x1 reduce
    then 5x5 conv; 3x3 max-pool then 1x1 projection.  Branch outputs are
    concatenated along channels, so the layer emits
    ``out_1x1 + out_3x3 + out_5x5 + pool_proj`` channels.
    """

    out_1x1: int
    reduce_3x3: int
    out_3x3: int
    reduce_5x5: int
    out_5x5: int
    pool_proj: int
    stride: int = 1

    @property
    def total_channels(self) -> int:
        return self.out_1x1 + self.out_3x3 + self.out_5x5 + self.pool_proj

    def validate(self):
        for fname in ("out_1x1", "reduce_3x3", "out_3x3", "reduce_5x5",
                      "out_5x5", "pool_proj"):
            if getattr(self, fname) < 1:
                raise ParameterError(
                    f"InceptionSpec.{fname} must be >= 1, got {getattr(self, fname)}")
        if self.stride < 1:
            raise ParameterError(f"InceptionSpec.stride must be >= 1")


@dataclass(frozen=True)
class LayerSpec:
    """One trunk or head-pipeline layer.

    ``kind`` selects the op; only the fields relevant to that kind are used.
    """

    kind: str  # conv|maxpool|avgpool|inception|global_pool|flatten|linear|dropout|relu
    name: str
    out_channels: int = 0          # conv
    kernel: int = 0                # conv / pools
    stride: int = 1
    pad: int = 0
    out_features: int = 0          # linear
    p: float = 0.5                 # dropout default, overridable at train time
    inception: InceptionSpec | None = None


def conv(name, out_channels, kernel, stride=1, pad=0) -> LayerSpec:
    return LayerSpec("conv", name, out_channels=out_channels, kernel=kernel,
                     stride=stride, pad=pad)


def maxpool(name, kernel, stride, pad=0) -> LayerSpec:
    return LayerSpec("maxpool", name, kernel=kernel, stride=stride, pad=pad)


def avgpool(name, kernel, stride, pad=0) -> LayerSpec:
    return LayerSpec("avgpool", name, kernel=kernel, stride=stride, pad=pad)


def inception(name, spec: InceptionSpec) -> LayerSpec:
    return LayerSpec("inception", name, inception=spec)


def global_pool(name) -> LayerSpec:
    return LayerSpec("global_pool", name)


def flatten_layer(name) -> LayerSpec:
    return LayerSpec("flatten", name)


def linear_layer(name, out_features) -> LayerSpec:
    return LayerSpec("linear", name, out_features=out_features)


def dropout_layer(name, p=0.5) -> LayerSpec:
    return LayerSpec("dropout", name, p=p)


def relu_layer(name) -> LayerSpec:
    return LayerSpec("relu", name)


@dataclass(frozen=True)
class HeadSpec:
    """A classifier head anchored after a named trunk layer."""

    name: str
    anchor: str
    pipeline: tuple[LayerSpec, ...]
    loss_weight: float = 1.0
    final: bool = False


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    heads: tuple[HeadSpec, ...]
    in_channels: int = 3
    nominal_size: tuple[int, int] = (64, 64)
    variable_input: bool = False   # True once every head is globally pooled
    profile: str = "mini"

    @property
    def final_head(self) -> HeadSpec:
        return next(h for h in self.heads if h.final)

    @property
    def num_classes(self) -> int:
        last_linear = [l for l in self.final_head.pipeline if l.kind == "linear"][-1]
        return last_linear.out_features

    def head(self, name: str) -> HeadSpec:
        for h in self.heads:
            if h.name == name:
                return h
        raise UnknownHeadError(f"no head named {name!r}; heads: "
                               f"{[h.name for h in self.heads]}")

    def inception_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "inception"]

    def validate(self):
        names = [l.name for l in self.layers] + [h.name for h in self.heads]
        for h in self.heads:
            names += [l.name for l in h.pipeline]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise BuildError(f"duplicate layer/head names: {dupes}")
        if not self.heads:
            raise BuildError("network needs at least one head")
        finals = [h for h in self.heads if h.final]
        if len(finals) != 1:
            raise BuildError(f"exactly one final head required, got {len(finals)}")
        if abs(finals[0].loss_weight - 1.0) > 1e-12:
            raise BuildError("final head must have loss_weight 1.0")
        trunk_names = {l.name for l in self.layers}
        for h in self.heads:
            if h.anchor not in trunk_names:
                raise BuildError(f"head {h.name!r} anchored at unknown layer "
                                 f"{h.anchor!r}")
            if h.loss_weight < 0:
                raise BuildError(f"head {h.name!r} has negative loss_weight")
            if not any(l.kind == "linear" for l in h.pipeline):
                raise BuildError(f"head {h.name!r} has no linear layer")
        for l in self.layers:
            if l.kind == "inception":
                l.inception.validate()
        if self.profile == "full":
            incs = self.inception_layers()
            if len(incs) != 9:
                raise BuildError(f"full profile requires 9 inception layers, "
                                 f"got {len(incs)}")
            anchored = {h.anchor for h in self.heads}
            expected = {incs[2].name, incs[5].name, incs[8].name}
            if anchored != expected:
                raise BuildError(
                    f"full profile heads must anchor at inceptions 3/6/9 "
                    f"({sorted(expected)}), got {sorted(anchored)}")

    def to_json_dict(self) -> dict:
        def layer_dict(l: LayerSpec):
            d = {"kind": l.kind, "name": l.name}
            if l.kind == "conv":
                d.update(out_channels=l.out_channels, kernel=l.kernel,
                         stride=l.stride, pad=l.pad)
            elif l.kind in ("maxpool", "avgpool"):
                d.update(kernel=l.kernel, stride=l.stride, pad=l.pad)
            elif l.kind == "linear":
                d.update(out_features=l.out_features)
            elif l.kind == "dropout":
                d.update(p=l.p)
            elif l.kind == "inception":
                s = l.inception
                d.update(out_1x1=s.out_1x1, reduce_3x3=s.reduce_3x3,
                         out_3x3=s.out_3x3, reduce_5x5=s.reduce_5x5,
                         out_5x5=s.out_5x5, pool_proj=s.pool_proj,
                         stride=s.stride)
            return d

        return {
            "in_channels": self.in_channels,
            "nominal_size": list(self.nominal_size),
            "variable_input": self.variable_input,
            "profile": self.profile,
            "layers": [layer_dict(l) for l in self.layers],
            "heads": [{
                "name": h.name, "anchor": h.anchor,
                "loss_weight": h.loss_weight, "final": h.final,
                "pipeline": [layer_dict(l) for l in h.pipeline],
            } for h in self.heads],
        }

    def fingerprint(self) -> bytes:
        payload = json.dumps(self.to_json_dict(), sort_keys=True,
                             separators=(",", ":")).encode()
        return hashlib.sha256(payload).digest()


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------

def mini_spec(num_classes: int = 32, in_channels: int = 3,
              dropout_p: float = 0.5) -> NetworkSpec:
    """Desk-scale profile: 3 inception layers, 64x64 nominal input, 2 heads."""
    layers = (
        conv("conv1", 12, 5, stride=2, pad=2),
        relu_layer("conv1_relu"),
        maxpool("pool1", 3, 2, 1),
        inception("inception1", InceptionSpec(6, 6, 12, 3, 6, 6)),
        maxpool("pool2", 3, 2, 1),
        inception("inception2", InceptionSpec(12, 12, 24, 6, 12, 12)),
        inception("inception3", InceptionSpec(16, 16, 32, 8, 16, 16)),
    )
    heads = (
        HeadSpec("cls1", "inception2", (
            avgpool("cls1_pool", 2, 2),
            flatten_layer("cls1_flat"),
            linear_layer("cls1_fc1", 48),
            relu_layer("cls1_relu"),
            dropout_layer("cls1_drop", dropout_p),
            linear_layer("cls1_fc2", num_classes),
        ), loss_weight=0.3),
        HeadSpec("cls2", "inception3", (
            avgpool("cls2_pool", 8, 1),
            flatten_layer("cls2_flat"),
            dropout_layer("cls2_drop", dropout_p),
            linear_layer("cls2_fc", num_classes),
        ), loss_weight=1.0, final=True),
    )
    return NetworkSpec(layers, heads, in_channels=in_channels,
                       nominal_size=(64, 64), profile="mini")


def full_spec(num_classes: int = 1000, in_channels: int = 3,
              dropout_p: float = 0.7) -> NetworkSpec:
    """Nine-inception profile mirroring the classic GoogLeNet channel plan."""
    inc = InceptionSpec
    layers = (
        conv("conv1", 64, 7, stride=2, pad=3),
        relu_layer("conv1_relu"),
        maxpool("pool1", 3, 2, 1),
        conv("conv2", 64, 1),
        relu_layer("conv2_relu"),
        conv("conv3", 192, 3, pad=1),
        relu_layer("conv3_relu"),
        maxpool("pool2", 3, 2, 1),
        inception("inception1", inc(64, 96, 128, 16, 32, 32)),
        inception("inception2", inc(128, 128, 192, 32, 96, 64)),
        maxpool("pool3", 3, 2, 1),
        inception("inception3", inc(192, 96, 208, 16, 48, 64)),
        inception("inception4", inc(160, 112, 224, 24, 64, 64)),
        inception("inception5", inc(128, 128, 256, 24, 64, 64)),
        inception("inception6", inc(112, 144, 288, 32, 64, 64)),
        inception("inception7", inc(256, 160, 320, 32, 128, 128)),
        maxpool("pool4", 3, 2, 1),
        inception("inception8", inc(256, 160, 320, 32, 128, 128)),
        inception("inception9", inc(384, 192, 384, 48, 128, 128)),
    )
    heads = (
        HeadSpec("cls1", "inception3", (
            avgpool("cls1_pool", 5, 3),
            flatten_layer("cls1_flat"),
            linear_layer("cls1_fc1", 1024),
            relu_layer("cls1_relu"),
            dropout_layer("cls1_drop", dropout_p),
            linear_layer("cls1_fc2", num_classes),
        ), loss_weight=0.3),
        HeadSpec("cls2", "inception6", (
            avgpool("cls2_pool", 5, 3),
            flatten_layer("cls2_flat"),
            linear_layer("cls2_fc1", 1024),
            relu_layer("cls2_relu"),
            dropout_layer("cls2_drop", dropout_p),
            linear_layer("cls2_fc2", num_classes),
        ), loss_weight=0.3),
        HeadSpec("cls3", "inception9", (
            avgpool("cls3_pool", 7, 1),
            flatten_layer("cls3_flat"),
            dropout_layer("cls3_drop", dropout_p),
            linear_layer("cls3_fc", num_classes),
        ), loss_weight=1.0, final=True),
    )
    return NetworkSpec(layers, heads, in_channels=in_channels,
                       nominal_size=(224, 224), profile="full")


def spec_for_profile(profile: str, num_classes: int, dropout_p: float = 0.5,
                     in_channels: int = 3) -> NetworkSpec:
    if profile == "mini":
        return mini_spec(num_classes, in_channels, dropout_p)
    if profile == "full":
        return full_spec(num_classes, in_channels, dropout_p)
    raise ParameterError(f"unknown profile {profile!r} (mini|full)")


# ---------------------------------------------------------------------------
# building and execution
# ---------------------------------------------------------------------------

class Network:
    """A built network: spec plus named parameters and an iteration counter."""

    def __init__(self, spec: NetworkSpec, params: dict[str, Parameter],
                 iteration: int = 0):
        self.spec = spec
        self.params = params
        self.iteration = iteration

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __repr__(self):
        return (f"Network(profile={self.spec.profile!r}, "
                f"params={len(self.params)}, iteration={self.iteration})")


def _init_param(params, name, shape, rng):
    if name.endswith(".bias"):
        data = np.zeros(shape)
    else:
        data = rng.normal(0.0, INIT_STD, size=shape)
    params[name] = Parameter(name, Tensor(data))


def _conv_param_shapes(name, in_c, out_c, k):
    return [(f"{name}.weight", (out_c, in_c, k, k)),
            (f"{name}.bias", (1, out_c, 1, 1))]


def _inception_param_shapes(name, in_c, spec: InceptionSpec):
    shapes = []
    shapes += _conv_param_shapes(f"{name}.b1x1", in_c, spec.out_1x1, 1)
    shapes += _conv_param_shapes(f"{name}.red3", in_c, spec.reduce_3x3, 1)
    shapes += _conv_param_shapes(f"{name}.b3x3", spec.reduce_3x3, spec.out_3x3, 3)
    shapes += _conv_param_shapes(f"{name}.red5", in_c, spec.reduce_5x5, 1)
    shapes += _conv_param_shapes(f"{name}.b5x5", spec.reduce_5x5, spec.out_5x5, 5)
    shapes += _conv_param_shapes(f"{name}.poolproj", in_c, spec.pool_proj, 1)
    return shapes


def _layer_output_shape(layer: LayerSpec, c: int, h: int, w: int):
    """Symbolic (c, h, w) after one layer; mirrors the op preconditions."""
    def pool_out(size, k, stride, pad):
        out = (size + 2 * pad - k) // stride + 1
        if out < 1:
            raise DimensionError(
                f"window {k} stride {stride} pad {pad} yields empty output "
                f"on spatial size {size}")
        return out

    if layer.kind == "conv":
        return (layer.out_channels,
                pool_out(h, layer.kernel, layer.stride, layer.pad),
                pool_out(w, layer.kernel, layer.stride, layer.pad))
    if layer.kind in ("maxpool", "avgpool"):
        return (c,
                pool_out(h, layer.kernel, layer.stride, layer.pad),
                pool_out(w, layer.kernel, layer.stride, layer.pad))
    if layer.kind == "inception":
        s = layer.inception
        return (s.total_channels,
                pool_out(h, 1, s.stride, 0),
                pool_out(w, 1, s.stride, 0))
    if layer.kind == "global_pool":
        if h < 1 or w < 1:
            raise DimensionError("global_pool on empty spatial dims")
        return (c, 1, 1)
    if layer.kind == "flatten":
        return (c * h * w, 1, 1)
    if layer.kind == "linear":
        if h != 1 or w != 1:
            raise DimensionError(
                f"linear needs flattened input, got spatial {h}x{w}")
        return (layer.out_features, 1, 1)
    if layer.kind in ("dropout", "relu"):
        return (c, h, w)
    raise BuildError(f"unknown layer kind {layer.kind!r}")


def trunk_shapes(spec: NetworkSpec, hw=None) -> dict[str, tuple[int, int, int]]:
    """Per-trunk-layer output shapes (c, h, w) for a given input size."""
    h, w = hw or spec.nominal_size
    shapes = {}
    c = spec.in_channels
    for layer in spec.layers:
        try:
            c, h, w = _layer_output_shape(layer, c, h, w)
        except DimensionError as exc:
            raise BuildError(f"layer {layer.name!r}: {exc}") from exc
        shapes[layer.name] = (c, h, w)
    return shapes


def build(spec: NetworkSpec, seed) -> Network:
    """Initialize all parameters and shape-check the graph at nominal size.

    Fresh weights are zero-mean Gaussian with std 0.01; biases are zero.
    The first shape incompatibility is reported with the failing layer name.
    """
    spec.validate()
    rng = make_rng(seed)
    shapes = trunk_shapes(spec)

    params: dict[str, Parameter] = {}
    c, h, w = spec.in_channels, *spec.nominal_size
    for layer in spec.layers:
        if layer.kind == "conv":
            for name, shp in _conv_param_shapes(layer.name, c, layer.out_channels,
                                                layer.kernel):
                _init_param(params, name, shp, rng)
        elif layer.kind == "inception":
            for name, shp in _inception_param_shapes(layer.name, c, layer.inception):
                _init_param(params, name, shp, rng)
        c, h, w = shapes[layer.name]

    for head in spec.heads:
        c, h, w = shapes[head.anchor]
        for layer in head.pipeline:
            if layer.kind == "linear":
                in_features = c * h * w
                _init_param(params, f"{layer.name}.weight",
                            (layer.out_features, in_features, 1, 1), rng)
                _init_param(params, f"{layer.name}.bias",
                            (1, layer.out_features, 1, 1), rng)
            try:
                c, h, w = _layer_output_shape(layer, c, h, w)
            except DimensionError as exc:
                raise BuildError(
                    f"head {head.name!r} layer {layer.name!r}: {exc}") from exc

    net = Network(spec, params)
    probe = Tensor(np.zeros((1, spec.in_channels, *spec.nominal_size)))
    with tt.no_grad():
        forward(net, probe, mode="train", rng=make_rng(0))
    return net


def _run_layer(net: Network, layer: LayerSpec, x: Tensor, mode: str,
               rng, dropout_p) -> Tensor:
    p = net.params
    if layer.kind == "conv":
        return tt.conv2d(x, p[f"{layer.name}.weight"].value,
                         p[f"{layer.name}.bias"].value, layer.stride, layer.pad)
    if layer.kind == "maxpool":
        return tt.maxpool2d(x, layer.kernel, layer.stride, layer.pad)
    if layer.kind == "avgpool":
        return tt.avgpool2d(x, layer.kernel, layer.stride, layer.pad)
    if layer.kind == "inception":
        return _run_inception(net, layer, x)
    if layer.kind == "global_pool":
        return tt.global_avg_pool(x)
    if layer.kind == "flatten":
        return tt.flatten(x)
    if layer.kind == "linear":
        return tt.linear(x, p[f"{layer.name}.weight"].value,
                         p[f"{layer.name}.bias"].value)
    if layer.kind == "dropout":
        if mode != "train":
            return x
        prob = layer.p if dropout_p is None else dropout_p
        seed = rng if rng is not None else 0
        return tt.dropout(x, prob, "train", seed)
    if layer.kind == "relu":
        return tt.relu(x)
    raise BuildError(f"unknown layer kind {layer.kind!r}")


def _run_inception(net: Network, layer: LayerSpec, x: Tensor) -> Tensor:
    p = net.params
    s = layer.inception
    name = layer.name

    def branch_conv(prefix, inp, stride=1, pad=0):
        return tt.relu(tt.conv2d(inp, p[f"{name}.{prefix}.weight"].value,
                                 p[f"{name}.{prefix}.bias"].value,
                                 stride=stride, pad=pad))

    b1 = branch_conv("b1x1", x, stride=s.stride)
    r3 = branch_conv("red3", x)
    b3 = branch_conv("b3x3", r3, stride=s.stride, pad=1)
    r5 = branch_conv("red5", x)
    b5 = branch_conv("b5x5", r5, stride=s.stride, pad=2)
    pooled = tt.maxpool2d(x, 3, s.stride, 1)
    b4 = branch_conv("poolproj", pooled)
    return tt.concat_channels([b1, b3, b5, b4])


def forward(net: Network, batch: Tensor, mode: str = "test", rng=None,
            dropout_p: float | None = None) -> dict[str, Tensor]:
    """Run the trunk and heads; returns logits per head name.

    Train mode evaluates every head; test mode only the final one.  Nets
    that have not been made globally pooled reject non-nominal input sizes.
    """
    spec = net.spec
    if mode not in ("train", "test"):
        raise ParameterError(f"forward: mode must be train|test, got {mode!r}")
    n, c, h, w = batch.shape
    if c != spec.in_channels:
        raise DimensionError(
            f"forward: input has {c} channels, spec expects {spec.in_channels}")
    if not spec.variable_input and (h, w) != tuple(spec.nominal_size):
        raise DimensionError(
            f"forward: fixed-size network expects input "
            f"{spec.nominal_size[0]}x{spec.nominal_size[1]}, got {h}x{w}; "
            f"the global-pool (GP) variant accepts variable input sizes")

    anchors = {hd.anchor for hd in spec.heads}
    if mode == "test":
        anchors = {spec.final_head.anchor}
        last_needed = [i for i, l in enumerate(spec.layers)
                       if l.name == spec.final_head.anchor][0]
    else:
        last_needed = len(spec.layers) - 1

    cached: dict[str, Tensor] = {}
    x = batch
    for i, layer in enumerate(spec.layers):
        if i > last_needed:
            break
        x = _run_layer(net, layer, x, mode, rng, dropout_p)
        if layer.name in anchors:
            cached[layer.name] = x

    heads = spec.heads if mode == "train" else (spec.final_head,)
    logits: dict[str, Tensor] = {}
    for head in heads:
        hx = cached[head.anchor]
        for layer in head.pipeline:
            hx = _run_layer(net, layer, hx, mode, rng, dropout_p)
        logits[head.name] = hx
    return logits


def predict(net: Network, batch: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Final-head class indices and probabilities; ties take the lowest index."""
    with tt.no_grad():
        logits = forward(net, batch, mode="test")[net.spec.final_head.name]
    probs = tt.softmax_probs(logits.data.reshape(batch.shape[0], -1))
    return probs.argmax(axis=1), probs


# ---------------------------------------------------------------------------
# architecture transforms
# ---------------------------------------------------------------------------

def _gp_insert_index(pipeline: tuple[LayerSpec, ...]) -> int | None:
    """Index where a global pool goes: before the flatten/linear that feeds
    the first linear layer.  None if the head is already globally pooled."""
    first_linear = next(i for i, l in enumerate(pipeline) if l.kind == "linear")
    for i, l in enumerate(pipeline[:first_linear]):
        if l.kind == "global_pool":
            return None
    # Hop back over the elementwise chain so the pool lands before the
    # flatten whose output the linear consumes.
    idx = first_linear
    j = first_linear
    while j > 0 and pipeline[j - 1].kind in ("flatten", "dropout", "relu"):
        j -= 1
        if pipeline[j].kind == "flatten":
            idx = j
    return idx


def insert_global_pool(spec: NetworkSpec) -> tuple[NetworkSpec, list[str]]:
    """The GP transform: globally pool every head before its first linear.

    Returns the new spec and the parameter names of each head's first
    linear layer, which now take 1x1xchannels input and must be freshly
    initialized.  Applying the transform twice is a warning no-op.
    """
    if not spec.heads:
        raise ParameterError("insert_global_pool: spec has no heads")
    new_heads = []
    flagged: list[str] = []
    changed = False
    for head in spec.heads:
        idx = _gp_insert_index(head.pipeline)
        if idx is None:
            warnings.warn(f"head {head.name!r} is already globally pooled; "
                          f"skipping", stacklevel=2)
            new_heads.append(head)
            continue
        gp = global_pool(f"{head.name}_gp")
        pipeline = head.pipeline[:idx] + (gp,) + head.pipeline[idx:]
        new_heads.append(replace(head, pipeline=pipeline))
        first_linear = next(l for l in pipeline if l.kind == "linear")
        flagged += [f"{first_linear.name}.weight", f"{first_linear.name}.bias"]
        changed = True
    if not changed:
        return spec, []
    return replace(spec, heads=tuple(new_heads), variable_input=True), flagged


def attach_full_classify(spec: NetworkSpec, aux_weight: float = 0.3,
                         hidden_features: int = 64) -> NetworkSpec:
    """Attach a classifier head after every inception layer that lacks one.

    New heads use the auxiliary pipeline shape (pool to ~4x4, two linear
    layers) with ``aux_weight``; the existing final head stays final.
    """
    incs = spec.inception_layers()
    if not incs:
        raise ParameterError("attach_full_classify: spec has no inception layers")
    if aux_weight < 0:
        raise ParameterError("attach_full_classify: aux_weight must be >= 0")
    shapes = trunk_shapes(spec)
    num_classes = spec.num_classes
    anchored = {h.anchor for h in spec.heads}
    new_heads = list(spec.heads)
    for layer in incs:
        if layer.name in anchored:
            continue
        _, h, _ = shapes[layer.name]
        k = max(1, h // 4)
        base = f"aux_{layer.name}"
        pipeline = (
            avgpool(f"{base}_pool", k, k),
            flatten_layer(f"{base}_flat"),
            linear_layer(f"{base}_fc1", hidden_features),
            relu_layer(f"{base}_relu"),
            dropout_layer(f"{base}_drop"),
            linear_layer(f"{base}_fc2", num_classes),
        )
        new_heads.append(HeadSpec(base, layer.name, pipeline,
                                  loss_weight=aux_weight))
    order = {l.name: i for i, l in enumerate(spec.layers)}
    new_heads.sort(key=lambda h: order[h.anchor])
    return replace(spec, heads=tuple(new_heads))


def donor_partition(num_donors: int, target: InceptionSpec, seed) -> dict[str, np.ndarray]:
    """Seeded assignment of donor filter indices to the three conv branches.

    Donors are drawn without replacement while they last; if the branches
    demand more filters than exist, the remainder is sampled with
    replacement.
    """
    rng = make_rng(seed)
    needed = target.out_1x1 + target.out_3x3 + target.out_5x5
    perm = rng.permutation(num_donors)
    if needed > num_donors:
        extra = rng.integers(0, num_donors, size=needed - num_donors)
        perm = np.concatenate([perm, extra])
    return {
        "b1x1": perm[:target.out_1x1],
        "b3x3": perm[target.out_1x1:target.out_1x1 + target.out_3x3],
        "b5x5": perm[target.out_1x1 + target.out_3x3:needed],
    }


def warp_first_layer_to_inception(net: Network, target: InceptionSpec,
                                  seed) -> Network:
    """Turn a pretrained first conv layer into an inception layer.

    Donor filters are partitioned across the 1x1/3x3/5x5 branches and
    bilinearly resized to each branch's kernel size (donor biases travel
    with their filters).  The 1x1 reduce and pool-projection convs are
    freshly initialized; the layer keeps the donor conv's stride, so the
    downstream geometry is unchanged.
    """
    target.validate()
    spec = net.spec
    first = spec.layers[0]
    if first.kind != "conv":
        raise ParameterError(
            f"warp_first_layer_to_inception: first layer {first.name!r} is "
            f"{first.kind}, expected a plain convolution")
    donors = net.params[f"{first.name}.weight"].value.data
    donor_bias = net.params[f"{first.name}.bias"].value.data.reshape(-1)
    k, in_c, _, _ = donors.shape
    if target.reduce_3x3 != in_c or target.reduce_5x5 != in_c:
        raise ParameterError(
            f"warp target reduce channels ({target.reduce_3x3}, "
            f"{target.reduce_5x5}) must equal the donor input channel count "
            f"{in_c} so warped filters stay channel-compatible")

    target = replace(target, stride=first.stride)
    new_first = inception(first.name, target)
    new_spec = replace(spec, layers=(new_first,) + spec.layers[1:])
    new_net = build(new_spec, seed)

    part = donor_partition(k, target, seed)
    kernel_size = {"b1x1": 1, "b3x3": 3, "b5x5": 5}
    for branch, idx in part.items():
        size = kernel_size[branch]
        warped = tt.bilinear_resize(donors[idx], size, size).data
        new_net.params[f"{first.name}.{branch}.weight"].value.data[...] = warped
        new_net.params[f"{first.name}.{branch}.bias"].value.data[...] = \
            donor_bias[idx].reshape(1, -1, 1, 1)

    fresh = {f"{first.name}.{b}.{s}" for b in ("b1x1", "b3x3", "b5x5",
                                               "red3", "red5", "poolproj")
             for s in ("weight", "bias")}
    fresh |= {f"{first.name}.weight", f"{first.name}.bias"}
    for name, param in net.params.items():
        if name in fresh or name not in new_net.params:
            continue
        if new_net.params[name].value.shape == param.value.shape:
            new_net.params[name].value.data[...] = param.value.data
    new_net.iteration = net.iteration
    return new_net


def reinit_head(net: Network, head_name: str, num_classes: int, seed) -> Network:
    """Replace a head's output linear layer with a fresh num_classes-way one.

    Every other parameter is carried over unchanged (verifiable by hash).
    """
    head = net.spec.head(head_name)
    last_linear = [l for l in head.pipeline if l.kind == "linear"][-1]
    new_pipeline = tuple(
        replace(l, out_features=num_classes) if l.name == last_linear.name else l
        for l in head.pipeline)
    new_heads = tuple(replace(h, pipeline=new_pipeline) if h.name == head_name else h
                      for h in net.spec.heads)
    new_spec = replace(net.spec, heads=new_heads)
    new_net = build(new_spec, seed)
    excluded = {f"{last_linear.name}.weight", f"{last_linear.name}.bias"}
    for name, param in net.params.items():
        if name in excluded:
            continue
        if name in new_net.params and new_net.params[name].value.shape == param.value.shape:
            new_net.params[name].value.data[...] = param.value.data
    new_net.iteration = net.iteration
    return new_net


def parameter_fingerprints(net: Network) -> dict[str, str]:
    """sha256 of each parameter's raw bytes; handy for locality checks."""
    return {name: hashlib.sha256(p.value.data.tobytes()).hexdigest()
            for name, p in net.params.items()}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: Network, path):
    """Binary checkpoint: magic, version, spec fingerprint, iteration, params.

    Parameter payloads are little-endian float64, so a save/load round trip
    is bit-exact.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(net.spec.fingerprint())
        f.write(struct.pack("<Q", net.iteration))
        f.write(struct.pack("<I", len(net.params)))
        for name in sorted(net.params):
            p = net.params[name]
            encoded = name.encode()
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            shape = p.value.shape
            f.write(struct.pack("<B", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
            f.write(p.value.data.astype("<f8").tobytes())


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return data


def read_checkpoint_payload(path):
    """Parse a checkpoint file into (fingerprint, iteration, {name: array})."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(
                f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        fingerprint = _read_exact(f, 32, "fingerprint")
        (iteration,) = struct.unpack("<Q", _read_exact(f, 8, "iteration"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, name_len, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "shape"))
            numel = int(np.prod(shape)) if shape else 1
            raw = _read_exact(f, 8 * numel, f"payload of {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return fingerprint, iteration, arrays


def load_checkpoint(path, expected_spec: NetworkSpec, allowlist=(), seed=0) -> Network:
    """Restore a network; fingerprint mismatches need a surgery allowlist.

    With a matching fingerprint every parameter must be present with its
    exact shape.  After head surgery the fingerprints differ: parameters
    named in ``allowlist`` may be missing, new, or reshaped (they keep the
    fresh seeded initialization); any other discrepancy is refused.
    """
    fingerprint, iteration, arrays = read_checkpoint_payload(path)
    expected_fp = expected_spec.fingerprint()
    allow = set(allowlist)
    exact = fingerprint == expected_fp
    if not exact and not allow:
        raise CheckpointMismatchError(
            f"checkpoint fingerprint {fingerprint.hex()} does not match "
            f"expected spec fingerprint {expected_fp.hex()}; pass a "
            f"head-surgery allowlist to load across surgery")
    net = build(expected_spec, seed)
    mismatched = []
    for name, param in net.params.items():
        arr = arrays.get(name)
        if arr is not None and arr.shape == param.value.shape:
            param.value.data[...] = arr
        elif name in allow:
            continue
        else:
            mismatched.append(name)
    extra = [n for n in arrays if n not in net.params and n not in allow]
    if mismatched or extra:
        raise CheckpointMismatchError(
            f"checkpoint/spec parameter mismatch outside allowlist: "
            f"missing or reshaped {mismatched}, unexpected {extra} "
            f"(checkpoint {fingerprint.hex()[:12]}..., "
            f"expected {expected_fp.hex()[:12]}...)")
    net.iteration = iteration
    return net
