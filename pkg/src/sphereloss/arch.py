"""Table-driven description of the lightweight face network.

The descriptor (:class:`ArchSpec`) drives three things: shape inference,
parameter/MAC accounting, and instantiation of a (width-scaled) trainable
model built from :mod:`sphereloss.nn` primitives plus the CBAM and inverted
residual blocks defined here.

Conventions
-----------
* Shapes are reported as ``(H, W, C)``; tensors inside blocks are ``(N, C, H, W)``.
* All convolutions use zero same-padding; stride 2 gives ``ceil(size / 2)``.
* Bottleneck hidden width is ``t * C_in``.  CBAM sits after the projection
  and before the residual add.
* MACs count convolution / dense multiply-adds (including the CBAM MLP and
  its 7x7 spatial conv); FLOPs are ``2 * MACs``.  Activations, gating
  products and BatchNorm are not counted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._io import write_csv, write_json
from .exceptions import ConfigInvalid, ShapeInferenceFailure, ShapeMismatch
from .nn.primitives import (
    Module,
    Primitive,
    PrimitiveSpec,
    Sequential,
    conv2d_backward,
    conv2d_forward,
    conv_out_size,
)
from .rng import CounterRNG

OPERATORS = ("Conv3x3", "DWConv3x3", "Bottleneck", "Conv1x1", "LinearGDConv7x7", "LinearConv1x1")
ONE_PLUS_TANH = "OnePlusTanh"
SIGMOID = "Sigmoid"
GATES = (ONE_PLUS_TANH, SIGMOID)
SPATIAL_KERNEL = 7
RESIDUAL_INIT_SCALE = 0.1
_TINY = np.finfo(np.float64).tiny
_BELOW_TWO = np.nextafter(2.0, 0.0)


@dataclass(frozen=True)
class LayerSpec:
    """One table row: operator, expansion ``t``, channels ``c``, repeats ``n``, stride ``s``."""

    operator: str
    t: int | None = None
    c: int = 1
    n: int = 1
    s: int = 1

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ConfigInvalid(f"unknown operator {self.operator!r}")
        if self.operator == "Bottleneck" and (self.t is None or self.t < 1):
            raise ConfigInvalid("bottleneck needs expansion t >= 1")
        if self.n < 1 or self.s not in (1, 2) or self.c < 1:
            raise ConfigInvalid(f"invalid layer {self}")


@dataclass(frozen=True)
class ArchSpec:
    input_shape: tuple = (112, 112, 3)
    layers: tuple = ()
    use_cbam: bool = True
    cbam_reduction: int = 16
    cbam_gate: str = ONE_PLUS_TANH
    cbam_scope: str = "both"

    def __post_init__(self):
        if self.cbam_gate not in GATES:
            raise ConfigInvalid(f"unknown gate {self.cbam_gate!r}")
        if self.cbam_scope not in ("both", "spatial"):
            raise ConfigInvalid("cbam_scope must be 'both' or 'spatial'")
        if self.cbam_reduction < 1:
            raise ConfigInvalid("cbam_reduction must be >= 1")

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1].c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["layers"] = [asdict(layer) for layer in self.layers]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        layers = tuple(LayerSpec(**layer) for layer in d.pop("layers"))
        shape = tuple(d.pop("input_shape", (112, 112, 3)))
        return cls(input_shape=shape, layers=layers, **d)

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ArchSpec":
        return cls.from_json(Path(path).read_text())


def build_default_arch() -> ArchSpec:
    """The eleven-row 112x112 architecture with CBAM (1+tanh) in every bottleneck."""
    rows = (
        LayerSpec("Conv3x3", c=64, s=2),
        LayerSpec("DWConv3x3", c=64),
        LayerSpec("Bottleneck", t=2, c=64, n=1, s=2),
        LayerSpec("Bottleneck", t=2, c=64, n=9, s=1),
        LayerSpec("Bottleneck", t=4, c=128, n=1, s=2),
        LayerSpec("Bottleneck", t=2, c=128, n=16, s=1),
        LayerSpec("Bottleneck", t=8, c=256, n=1, s=2),
        LayerSpec("Bottleneck", t=2, c=256, n=6, s=1),
        LayerSpec("Conv1x1", c=1024),
        LayerSpec("LinearGDConv7x7", c=1024),
        LayerSpec("LinearConv1x1", c=512),
    )
    return ArchSpec(input_shape=(112, 112, 3), layers=rows)


def infer_shapes(arch: ArchSpec, strict_gdc: bool = True) -> list:
    """Output shape ``(H, W, C)`` of every row, in order.

    With ``strict_gdc`` the global depthwise conv must see a 7x7 map;
    otherwise its kernel takes whatever spatial size arrives.
    """
    h, w, c = arch.input_shape
    out = []
    for i, layer in enumerate(arch.layers):
        op = layer.operator
        if op in ("Conv3x3", "Conv1x1"):
            if layer.n != 1:
                raise ShapeInferenceFailure(i, "plain convolutions take n = 1")
            h, w, c = conv_out_size(h, layer.s), conv_out_size(w, layer.s), layer.c
        elif op == "DWConv3x3":
            if layer.c != c:
                raise ShapeInferenceFailure(i, f"depthwise conv cannot change channels {c} -> {layer.c}")
            h, w = conv_out_size(h, layer.s), conv_out_size(w, layer.s)
        elif op == "Bottleneck":
            h, w, c = conv_out_size(h, layer.s), conv_out_size(w, layer.s), layer.c
        elif op == "LinearGDConv7x7":
            if layer.c != c:
                raise ShapeInferenceFailure(i, f"global depthwise conv cannot change channels {c} -> {layer.c}")
            if strict_gdc and (h, w) != (7, 7):
                raise ShapeInferenceFailure(i, f"GDConv7x7 needs a 7x7 input, got {h}x{w}")
            h, w = 1, 1
        elif op == "LinearConv1x1":
            if (h, w) != (1, 1):
                raise ShapeInferenceFailure(i, f"embedding projection needs a 1x1 input, got {h}x{w}")
            c = layer.c
        out.append((h, w, c))
    if out and out[-1][:2] != (1, 1):
        raise ShapeInferenceFailure(len(out) - 1, "network does not end at 1x1 spatial size")
    return out


def reduced_channels(c: int, reduction: int) -> int:
    return max(1, c // reduction)


def _cbam_cost(arch: ArchSpec, h: int, w: int, c: int):
    if not arch.use_cbam:
        return 0, 0
    cr = reduced_channels(c, arch.cbam_reduction)
    k2 = SPATIAL_KERNEL * SPATIAL_KERNEL
    params = 2 * c * cr + 2 * k2
    macs = 2 * (2 * c * cr) + h * w * 2 * k2
    return params, macs


@dataclass
class FlopsReport:
    rows: list = field(default_factory=list)

    CSV_HEADER = ("layer", "out_h", "out_w", "out_c", "params", "macs")

    @property
    def params_total(self) -> int:
        return sum(r["params"] for r in self.rows)

    @property
    def macs_total(self) -> int:
        return sum(r["macs"] for r in self.rows)

    @property
    def flops_total(self) -> int:
        return 2 * self.macs_total

    def totals(self) -> dict:
        return {"params_total": self.params_total, "macs_total": self.macs_total, "flops_total": self.flops_total}

    def write_csv(self, path, comment: str | None = None):
        rows = [(r["layer"], r["out_h"], r["out_w"], r["out_c"], r["params"], r["macs"]) for r in self.rows]
        return write_csv(path, self.CSV_HEADER, rows, comment=comment)

    def write_json(self, path, **extra):
        return write_json(path, {**self.totals(), **extra})


def count_flops_params(arch: ArchSpec, strict_gdc: bool = True) -> FlopsReport:
    """Per-row parameter and MAC counts (repeated bottlenecks summed into their row)."""
    shapes = infer_shapes(arch, strict_gdc=strict_gdc)
    report = FlopsReport()
    h, w, c = arch.input_shape
    for i, (layer, (ho, wo, co)) in enumerate(zip(arch.layers, shapes)):
        op = layer.operator
        if op in ("Conv3x3", "Conv1x1"):
            k = 3 if op == "Conv3x3" else 1
            params = k * k * c * co + co
            macs = ho * wo * co * k * k * c
        elif op == "DWConv3x3":
            params = 9 * c + c
            macs = ho * wo * c * 9
        elif op == "Bottleneck":
            params = macs = 0
            cin, hin, win = c, h, w
            for j in range(layer.n):
                stride = layer.s if j == 0 else 1
                hb, wb = conv_out_size(hin, stride), conv_out_size(win, stride)
                hidden = layer.t * cin
                params += cin * hidden + hidden + 9 * hidden + hidden + hidden * co
                macs += hin * win * cin * hidden + hb * wb * hidden * 9 + hb * wb * hidden * co
                cp, cm = _cbam_cost(arch, hb, wb, co)
                params += cp
                macs += cm
                cin, hin, win = co, hb, wb
        elif op == "LinearGDConv7x7":
            params = c * h * w
            macs = c * h * w
        else:  # LinearConv1x1
            params = c * co
            macs = c * co
        report.rows.append(
            {"layer": f"{i:02d}_{op}", "out_h": ho, "out_w": wo, "out_c": co, "params": int(params), "macs": int(macs)}
        )
        h, w, c = ho, wo, co
    return report


# -- gates -----------------------------------------------------------------


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def gate(kind: str, a):
    """Gate activation and its derivative.

    ``1 + tanh(a)`` is evaluated as ``2 sigmoid(2a)`` and kept strictly inside
    ``(0, 2)`` so saturated inputs never zero out or exactly double a feature.
    """
    a = np.asarray(a, dtype=np.float64)
    if kind == ONE_PLUS_TANH:
        sig = _sigmoid(2.0 * a)
        g = np.clip(2.0 * sig, _TINY, _BELOW_TWO)
        return g, 4.0 * sig * (1.0 - sig)
    if kind == SIGMOID:
        sig = _sigmoid(a)
        return sig, sig * (1.0 - sig)
    raise ConfigInvalid(f"unknown gate {kind!r}")


# -- blocks ----------------------------------------------------------------


def _he(rng, shape, fan_in):
    return rng.normal(shape) * np.sqrt(2.0 / fan_in)


class CBAM(Module):
    """Channel-then-spatial attention with configurable gate activation.

    Channel gate: shared two-layer ReLU MLP (width ``c // reduction``) over the
    average- and max-pooled descriptors, summed.  Spatial gate: 7x7 conv over
    the stacked channel-mean and channel-max maps.
    """

    def __init__(self, channels: int, reduction: int = 16, gate_kind: str = ONE_PLUS_TANH, scope: str = "both", rng=None, params=None):
        self.channels = channels
        self.reduction = reduction
        self.spatial_gate = gate_kind
        self.channel_gate = gate_kind if scope == "both" else SIGMOID
        cr = reduced_channels(channels, reduction)
        if params is None:
            rng = rng or CounterRNG(0)
            k = SPATIAL_KERNEL
            params = {
                "mlp1": _he(rng, (cr, channels), channels),
                "mlp2": _he(rng, (channels, cr), cr),
                "spatial": _he(rng, (1, 2, k, k), 2 * k * k),
            }
        self.params = params
        self.children = []

    def forward(self, x, training: bool = True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"CBAM expects (N, {self.channels}, H, W), got {x.shape}")
        p = self.params
        if p["mlp1"].shape[1] != self.channels or p["mlp2"].shape[0] != self.channels:
            raise ShapeMismatch(f"CBAM weights are sized for {p['mlp1'].shape[1]} channels, input has {self.channels}")
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w)
        avg = flat.mean(axis=2)
        arg_hw = flat.argmax(axis=2)
        mx = np.take_along_axis(flat, arg_hw[:, :, None], axis=2)[:, :, 0]
        pre_avg, pre_max = avg @ p["mlp1"].T, mx @ p["mlp1"].T
        h_avg, h_max = np.maximum(pre_avg, 0.0), np.maximum(pre_max, 0.0)
        a_c = h_avg @ p["mlp2"].T + h_max @ p["mlp2"].T
        g_c, dg_c = gate(self.channel_gate, a_c)
        x1 = x * g_c[:, :, None, None]

        arg_c = x1.argmax(axis=1)
        s_max = np.take_along_axis(x1, arg_c[:, None], axis=1)[:, 0]
        stacked = np.stack([x1.mean(axis=1), s_max], axis=1)
        a_s, aux = conv2d_forward(stacked, p["spatial"], 1)
        g_s, dg_s = gate(self.spatial_gate, a_s)
        y = x1 * g_s
        cache = dict(x=x, avg=avg, mx=mx, arg_hw=arg_hw, pre_avg=pre_avg, pre_max=pre_max, h_avg=h_avg, h_max=h_max,
                     g_c=g_c, dg_c=dg_c, x1=x1, arg_c=arg_c, stacked=stacked, aux=aux, g_s=g_s, dg_s=dg_s,
                     a_c=a_c, a_s=a_s)
        return y, cache

    def backward(self, cache, dy):
        p = self.params
        x, x1, g_s = cache["x"], cache["x1"], cache["g_s"]
        n, c, h, w = x.shape
        dx1 = dy * g_s
        da_s = np.sum(dy * x1, axis=1, keepdims=True) * cache["dg_s"]
        dstack, dspatial = conv2d_backward(da_s, cache["stacked"].shape, p["spatial"], 1, cache["aux"], cache["stacked"])
        dx1 += dstack[:, 0:1] / c
        np.put_along_axis(
            dx1, cache["arg_c"][:, None],
            np.take_along_axis(dx1, cache["arg_c"][:, None], axis=1) + dstack[:, 1:2], axis=1,
        )
        g_c = cache["g_c"]
        dx = dx1 * g_c[:, :, None, None]
        da_c = np.sum(dx1 * x, axis=(2, 3)) * cache["dg_c"]
        dmlp2 = da_c.T @ cache["h_avg"] + da_c.T @ cache["h_max"]
        dpre_avg = (da_c @ p["mlp2"]) * (cache["pre_avg"] > 0)
        dpre_max = (da_c @ p["mlp2"]) * (cache["pre_max"] > 0)
        dmlp1 = dpre_avg.T @ cache["avg"] + dpre_max.T @ cache["mx"]
        davg = dpre_avg @ p["mlp1"]
        dmx = dpre_max @ p["mlp1"]
        dx += davg[:, :, None, None] / (h * w)
        dflat = dx.reshape(n, c, h * w)
        np.put_along_axis(
            dflat, cache["arg_hw"][:, :, None],
            np.take_along_axis(dflat, cache["arg_hw"][:, :, None], axis=2) + dmx[:, :, None], axis=2,
        )
        return dflat.reshape(x.shape), {"mlp1": dmlp1, "mlp2": dmlp2, "spatial": dspatial}


def cbam_block(x, params: dict, reduction: int = 16, gate_kind: str = ONE_PLUS_TANH, scope: str = "both"):
    """Functional CBAM forward; returns ``(output, cache)``.  Use :func:`cbam_block_backward` with the cache."""
    block = CBAM(np.shape(x)[1], reduction, gate_kind, scope, params=params)
    y, cache = block.forward(x)
    cache["block"] = block
    return y, cache


def cbam_block_backward(cache, dy):
    return cache["block"].backward(cache, dy)


class Bottleneck(Sequential):
    """Inverted residual: 1x1 expand + PReLU, 3x3 depthwise + PReLU, linear 1x1 project, CBAM.

    The identity shortcut is added iff ``stride == 1`` and ``c_in == c_out``.
    """

    def __init__(self, c_in: int, t: int, c_out: int, stride: int, use_cbam: bool = True, reduction: int = 16,
                 gate_kind: str = ONE_PLUS_TANH, scope: str = "both", batchnorm: bool = False, rng=None):
        rng = rng or CounterRNG(0)
        hidden = t * c_in
        layers = [("expand", Primitive(PrimitiveSpec("Conv2D", c_in, hidden, 1), rng.spawn("expand")))]
        if batchnorm:
            layers.append(("bn1", Primitive(PrimitiveSpec("BatchNorm", hidden, hidden), rng)))
        layers.append(("act1", Primitive(PrimitiveSpec("PReLU", hidden, hidden), rng)))
        layers.append(("dw", Primitive(PrimitiveSpec("DepthwiseConv2D", hidden, hidden, 3, stride), rng.spawn("dw"))))
        if batchnorm:
            layers.append(("bn2", Primitive(PrimitiveSpec("BatchNorm", hidden, hidden), rng)))
        layers.append(("act2", Primitive(PrimitiveSpec("PReLU", hidden, hidden), rng)))
        layers.append(("project", Primitive(PrimitiveSpec("Conv2D", hidden, c_out, 1), rng.spawn("project"))))
        if batchnorm:
            layers.append(("bn3", Primitive(PrimitiveSpec("BatchNorm", c_out, c_out), rng)))
        if use_cbam:
            layers.append(("cbam", CBAM(c_out, reduction, gate_kind, scope, rng=rng.spawn("cbam"))))
        super().__init__(layers)
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.residual = stride == 1 and c_in == c_out
        if self.residual and not batchnorm:
            # without normalization, He-scaled branches compound over deep stacks
            self.children[[n for n, _ in self.children].index("project")][1].params["W"] *= RESIDUAL_INIT_SCALE

    def forward(self, x, training: bool = True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeMismatch(f"bottleneck expects (N, {self.c_in}, H, W), got {x.shape}")
        y, caches = super().forward(x, training)
        return (y + x if self.residual else y), caches

    def backward(self, caches, dy):
        dx, grads = super().backward(caches, dy)
        return (dx + dy if self.residual else dx), grads


def bottleneck_block(x, t: int, c_out: int, stride: int, use_cbam: bool = True, rng=None, **cbam_kw):
    """Build a fresh bottleneck for ``x`` and run it; returns ``(output, cache, block)``."""
    block = Bottleneck(np.shape(x)[1], t, c_out, stride, use_cbam=use_cbam, rng=rng, **cbam_kw)
    y, cache = block.forward(x)
    return y, cache, block


# -- instantiation ---------------------------------------------------------


def scale_arch(arch: ArchSpec, width_mult: float, input_size: int) -> ArchSpec:
    """Channels scaled by ``width_mult`` (floored, min 1) on a square input."""
    if not 0 < width_mult <= 1:
        raise ConfigInvalid("width_mult must lie in (0, 1]")
    layers = tuple(replace(layer, c=max(1, int(layer.c * width_mult))) for layer in arch.layers)
    return replace(arch, input_shape=(input_size, input_size, arch.input_shape[2]), layers=layers)


def instantiate_toy(arch: ArchSpec, width_mult: float = 1.0, input_size: int = 112, batchnorm: bool = False,
                    seed: int = 0, in_channels: int | None = None) -> Sequential:
    """Trainable backbone for ``arch`` at reduced width and input size.

    The global depthwise conv kernel is resized to the final spatial size.
    The last projection is a Dense layer (identical to a 1x1 conv on a 1x1
    map) in parameter group ``"embedding"``.
    """
    if input_size not in (28, 56, 112):
        raise ConfigInvalid("input_size must be 28, 56 or 112")
    scaled = scale_arch(arch, width_mult, input_size)
    shapes = infer_shapes(scaled, strict_gdc=False)
    rng = CounterRNG(seed).spawn("toy")
    c = in_channels or scaled.input_shape[2]
    h = scaled.input_shape[0]
    layers = []

    def conv_act(name, spec, act=True):
        layers.append((name, Primitive(spec, rng.spawn(name))))
        if batchnorm:
            layers.append((name + "_bn", Primitive(PrimitiveSpec("BatchNorm", spec.out_channels, spec.out_channels), rng)))
        if act:
            layers.append((name + "_act", Primitive(PrimitiveSpec("PReLU", spec.out_channels, spec.out_channels), rng)))

    for i, (layer, (ho, _, co)) in enumerate(zip(scaled.layers, shapes)):
        op = layer.operator
        if op == "Conv3x3":
            conv_act(f"l{i}_conv", PrimitiveSpec("Conv2D", c, co, 3, layer.s))
        elif op == "DWConv3x3":
            conv_act(f"l{i}_dw", PrimitiveSpec("DepthwiseConv2D", c, c, 3, layer.s))
        elif op == "Conv1x1":
            conv_act(f"l{i}_conv", PrimitiveSpec("Conv2D", c, co, 1, layer.s))
        elif op == "Bottleneck":
            cin = c
            for j in range(layer.n):
                stride = layer.s if j == 0 else 1
                layers.append((f"l{i}_b{j}", Bottleneck(
                    cin, layer.t, co, stride, use_cbam=scaled.use_cbam, reduction=scaled.cbam_reduction,
                    gate_kind=scaled.cbam_gate, scope=scaled.cbam_scope, batchnorm=batchnorm, rng=rng.spawn(i, j))))
                cin = co
        elif op == "LinearGDConv7x7":
            conv_act(f"l{i}_gdc", PrimitiveSpec("GlobalDepthwiseConv", c, c, h), act=False)
            layers.append((f"l{i}_flatten", Primitive(PrimitiveSpec("Flatten", c, c), params={})))
        else:
            layers.append((f"l{i}_embed", Primitive(PrimitiveSpec("Dense", c, co), rng.spawn("embed"), group="embedding")))
        c, h = co, ho
    return Sequential(layers)
