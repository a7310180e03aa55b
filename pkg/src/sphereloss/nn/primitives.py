"""Trainable primitives with explicit forward/backward passes.

Tensors are float64 NumPy arrays; images use ``(N, C, H, W)`` layout.  Each
forward returns ``(output, cache)`` and the matching backward consumes the
cache and returns ``(input_grad, param_grads)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ConfigInvalid, ShapeMismatch, StaleCache

KINDS = (
    "Dense",
    "LinearHead",
    "PReLU",
    "BatchNorm",
    "Conv2D",
    "DepthwiseConv2D",
    "GlobalDepthwiseConv",
    "Flatten",
)
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
PRELU_INIT = 0.25


@dataclass(frozen=True)
class PrimitiveSpec:
    """Kind plus shape parameters of one primitive.

    ``kernel_size`` for ``GlobalDepthwiseConv`` is the full spatial extent of
    its input (it may be even, e.g. 2 for a 2x2 map).
    """

    kind: str
    in_channels: int = 1
    out_channels: int = 1
    kernel_size: int = 1
    stride: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigInvalid(f"unknown primitive kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigInvalid("channels must be >= 1")
        if self.stride not in (1, 2):
            raise ConfigInvalid("stride must be 1 or 2")
        if self.kind in ("Conv2D", "DepthwiseConv2D") and self.kernel_size % 2 == 0:
            raise ConfigInvalid("kernel size must be odd")


def init_params(spec: PrimitiveSpec, rng) -> dict:
    """He-normal weights (variance 2/fan_in); PReLU slopes 0.25; BN identity.

    ``rng`` is anything with a ``normal(shape)`` method returning standard normals.
    """
    k, cin, cout = spec.kernel_size, spec.in_channels, spec.out_channels
    if spec.kind == "Dense":
        return {"W": rng.normal((cin, cout)) * np.sqrt(2.0 / cin)}
    if spec.kind == "LinearHead":
        return {"W": rng.normal((cin, cout)) * np.sqrt(2.0 / cin), "b": np.zeros(cout)}
    if spec.kind == "PReLU":
        return {"alpha": np.full(cin, PRELU_INIT)}
    if spec.kind == "BatchNorm":
        return {"gamma": np.ones(cin), "beta": np.zeros(cin)}
    if spec.kind == "Conv2D":
        return {"W": rng.normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))}
    if spec.kind in ("DepthwiseConv2D", "GlobalDepthwiseConv"):
        return {"W": rng.normal((cin, k, k)) * np.sqrt(2.0 / (k * k))}
    return {}


def init_buffers(spec: PrimitiveSpec) -> dict:
    if spec.kind == "BatchNorm":
        return {"running_mean": np.zeros(spec.in_channels), "running_var": np.ones(spec.in_channels)}
    return {}


# -- convolution kernels ---------------------------------------------------


def conv_out_size(size: int, stride: int) -> int:
    """Same-padding output size for an odd kernel: ``ceil(size / stride)``."""
    return -(-size // stride)


def _windows(x, k, stride):
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return xp.shape, win


def _scatter_windows(dwin, xp_shape, k, stride, x_shape):
    """Adjoint of ``_windows``: accumulate window gradients back onto the input."""
    pad = k // 2
    dxp = np.zeros(xp_shape)
    ho, wo = dwin.shape[2], dwin.shape[3]
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dwin[..., i, j]
    return dxp[:, :, pad : pad + x_shape[2], pad : pad + x_shape[3]]


def conv2d_forward(x, w, stride):
    k = w.shape[-1]
    if k == 1:
        xs = x[:, :, ::stride, ::stride]
        return np.einsum("nchw,oc->nohw", xs, w[:, :, 0, 0], optimize=True), (x.shape, None)
    xp_shape, win = _windows(x, k, stride)
    return np.einsum("nchwij,ocij->nohw", win, w, optimize=True), (xp_shape, win)


def conv2d_backward(dy, x_shape, w, stride, aux, x):
    xp_shape, win = aux
    k = w.shape[-1]
    if k == 1:
        xs = x[:, :, ::stride, ::stride]
        dw = np.einsum("nohw,nchw->oc", dy, xs, optimize=True)[:, :, None, None]
        dxs = np.einsum("nohw,oc->nchw", dy, w[:, :, 0, 0], optimize=True)
        dx = np.zeros(x_shape)
        dx[:, :, ::stride, ::stride] = dxs
        return dx, dw
    dw = np.einsum("nohw,nchwij->ocij", dy, win, optimize=True)
    dwin = np.einsum("nohw,ocij->nchwij", dy, w, optimize=True)
    return _scatter_windows(dwin, xp_shape, k, stride, x_shape), dw


def depthwise_forward(x, w, stride):
    k = w.shape[-1]
    xp_shape, win = _windows(x, k, stride)
    return np.einsum("nchwij,cij->nchw", win, w, optimize=True), (xp_shape, win)


def depthwise_backward(dy, x_shape, w, stride, aux):
    xp_shape, win = aux
    k = w.shape[-1]
    dw = np.einsum("nchw,nchwij->cij", dy, win, optimize=True)
    dwin = dy[..., None, None] * w[None, :, None, None, :, :]
    return _scatter_windows(dwin, xp_shape, k, stride, x_shape), dw


# -- functional forward/backward -------------------------------------------


def _expect(cond, msg):
    if not cond:
        raise ShapeMismatch(msg)


def primitive_forward(spec: PrimitiveSpec, params: dict, x, training: bool = True, buffers: dict | None = None):
    """Apply one primitive; returns ``(output, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    kind = spec.kind
    cache = {"spec": spec, "params": params, "x": x}
    if kind in ("Dense", "LinearHead"):
        _expect(x.ndim == 2 and x.shape[1] == params["W"].shape[0], f"{kind} expects (N, {params['W'].shape[0]}), got {x.shape}")
        y = x @ params["W"]
        if kind == "LinearHead":
            y = y + params["b"]
    elif kind == "PReLU":
        _expect(x.ndim >= 2 and x.shape[1] == params["alpha"].size, f"PReLU expects {params['alpha'].size} channels, got {x.shape}")
        a = params["alpha"].reshape((1, -1) + (1,) * (x.ndim - 2))
        y = np.where(x > 0, x, a * x)
    elif kind == "BatchNorm":
        c = params["gamma"].size
        _expect(x.ndim in (2, 4) and x.shape[1] == c, f"BatchNorm expects {c} channels, got {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        shape = (1, c) + (1,) * (x.ndim - 2)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if buffers is not None:
                buffers["running_mean"] *= BN_MOMENTUM
                buffers["running_mean"] += (1 - BN_MOMENTUM) * mean
                buffers["running_var"] *= BN_MOMENTUM
                buffers["running_var"] += (1 - BN_MOMENTUM) * var
        else:
            mean, var = buffers["running_mean"], buffers["running_var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
        y = params["gamma"].reshape(shape) * xhat + params["beta"].reshape(shape)
        cache.update(xhat=xhat, inv=inv, axes=axes, shape=shape, training=training)
    elif kind == "Conv2D":
        _expect(x.ndim == 4 and x.shape[1] == params["W"].shape[1], f"Conv2D expects (N, {params['W'].shape[1]}, H, W), got {x.shape}")
        y, aux = conv2d_forward(x, params["W"], spec.stride)
        cache["aux"] = aux
    elif kind == "DepthwiseConv2D":
        _expect(x.ndim == 4 and x.shape[1] == params["W"].shape[0], f"DepthwiseConv2D expects {params['W'].shape[0]} channels, got {x.shape}")
        y, aux = depthwise_forward(x, params["W"], spec.stride)
        cache["aux"] = aux
    elif kind == "GlobalDepthwiseConv":
        w = params["W"]
        _expect(x.ndim == 4 and x.shape[1:] == w.shape, f"GlobalDepthwiseConv expects (N, {w.shape}), got {x.shape}")
        y = np.einsum("nchw,chw->nc", x, w)[:, :, None, None]
    elif kind == "Flatten":
        y = x.reshape(x.shape[0], -1)
    else:  # pragma: no cover - guarded by PrimitiveSpec
        raise ConfigInvalid(kind)
    return y, cache


def primitive_backward(spec: PrimitiveSpec, cache: dict, dy):
    """Exact gradients of ``primitive_forward``; returns ``(dx, param_grads)``."""
    if cache.get("spec") != spec:
        raise StaleCache(f"cache was produced by {cache.get('spec')}, not {spec}")
    params, x = cache["params"], cache["x"]
    dy = np.asarray(dy, dtype=np.float64)
    kind = spec.kind
    if kind in ("Dense", "LinearHead"):
        grads = {"W": x.T @ dy}
        if kind == "LinearHead":
            grads["b"] = dy.sum(axis=0)
        return dy @ params["W"].T, grads
    if kind == "PReLU":
        a = params["alpha"].reshape((1, -1) + (1,) * (x.ndim - 2))
        pos = x > 0
        dx = np.where(pos, dy, a * dy)
        sum_axes = (0,) + tuple(range(2, x.ndim))
        return dx, {"alpha": np.where(pos, 0.0, x * dy).sum(axis=sum_axes)}
    if kind == "BatchNorm":
        xhat, inv, axes, shape = cache["xhat"], cache["inv"], cache["axes"], cache["shape"]
        gamma = params["gamma"]
        grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        dxhat = dy * gamma.reshape(shape)
        if not cache["training"]:
            return dxhat * inv.reshape(shape), grads
        m = x.size // gamma.size
        dx = (inv.reshape(shape) / m) * (
            m * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
        )
        return dx, grads
    if kind == "Conv2D":
        dx, dw = conv2d_backward(dy, x.shape, params["W"], spec.stride, cache["aux"], x)
        return dx, {"W": dw}
    if kind == "DepthwiseConv2D":
        dx, dw = depthwise_backward(dy, x.shape, params["W"], spec.stride, cache["aux"])
        return dx, {"W": dw}
    if kind == "GlobalDepthwiseConv":
        g = dy[:, :, 0, 0]
        return g[:, :, None, None] * params["W"][None], {"W": np.einsum("nc,nchw->chw", g, x)}
    if kind == "Flatten":
        return dy.reshape(x.shape), {}
    raise ConfigInvalid(kind)  # pragma: no cover


def output_shape(spec: PrimitiveSpec, shape: tuple) -> tuple:
    """Per-sample output shape (no batch axis)."""
    if spec.kind in ("Dense", "LinearHead"):
        return (spec.out_channels,)
    if spec.kind in ("PReLU", "BatchNorm"):
        return tuple(shape)
    if spec.kind == "Conv2D":
        return (spec.out_channels, conv_out_size(shape[1], spec.stride), conv_out_size(shape[2], spec.stride))
    if spec.kind == "DepthwiseConv2D":
        return (shape[0], conv_out_size(shape[1], spec.stride), conv_out_size(shape[2], spec.stride))
    if spec.kind == "GlobalDepthwiseConv":
        return (shape[0], 1, 1)
    return (int(np.prod(shape)),)


# -- stateful wrappers -----------------------------------------------------


class Module:
    """Parameter container with ``forward``/``backward``.

    Subclasses expose ``params`` (name -> array) for their own leaves and
    ``children`` for nested modules; gradients use the same dotted names as
    :meth:`named_parameters`.
    """

    group = "body"
    children: list = []

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for key, val in getattr(self, "params", {}).items():
            out[prefix + key] = val
        for name, child in self.children:
            out.update(child.named_parameters(prefix + name + "."))
        return out

    def param_groups(self, prefix: str = "", inherited: str | None = None) -> dict:
        group = inherited or self.group
        out = {prefix + key: group for key in getattr(self, "params", {})}
        for name, child in self.children:
            child_group = child.group if child.group != "body" else group
            out.update(child.param_groups(prefix + name + ".", child_group))
        return out

    def n_params(self) -> int:
        return int(sum(v.size for v in self.named_parameters().values()))


class Primitive(Module):
    def __init__(self, spec: PrimitiveSpec, rng=None, params: dict | None = None, group: str = "body"):
        self.spec = spec
        if params is None:
            if rng is None:
                raise ConfigInvalid("need rng or params")
            params = init_params(spec, rng)
        self.params = params
        self.buffers = init_buffers(spec)
        self.group = group
        self.children = []

    def forward(self, x, training: bool = True):
        return primitive_forward(self.spec, self.params, x, training, self.buffers)

    def backward(self, cache, dy):
        return primitive_backward(self.spec, cache, dy)

    def __repr__(self):
        return f"Primitive({self.spec})"


class Sequential(Module):
    def __init__(self, layers, group: str = "body"):
        self.children = [(name, layer) for name, layer in layers]
        self.group = group

    def forward(self, x, training: bool = True):
        caches = []
        for _, layer in self.children:
            x, c = layer.forward(x, training)
            caches.append(c)
        return x, caches

    def backward(self, caches, dy):
        grads = {}
        for (name, layer), cache in zip(reversed(self.children), reversed(caches)):
            dy, g = layer.backward(cache, dy)
            for key, val in g.items():
                grads[f"{name}.{key}"] = val
        return dy, grads
