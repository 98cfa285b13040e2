"""Small float64 neural-network engine: 1-D conv stacks, dense layers, Adam.

Networks are :class:`Sequential` lists of layers. Parameters live in one
flat float64 buffer (:class:`Params`) with named views, which makes the
optimizer, gradient checks and checkpoints trivial.

Shapes exclude the batch axis. Conv/pool tensors are (channels, length).
"""
import json
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class Params:
    """Flat parameter vector with named, shaped views into it."""

    def __init__(self, layout, flat=None):
        self.layout = OrderedDict(layout)
        self.size = sum(int(np.prod(s)) for _, s in self.layout.values())
        self.flat = np.zeros(self.size) if flat is None else np.asarray(flat, dtype=np.float64)
        if self.flat.shape != (self.size,):
            raise ShapeError(f"flat buffer has {self.flat.shape}, layout needs ({self.size},)")
        self.version = 0

    @classmethod
    def from_specs(cls, specs):
        layout, off = [], 0
        for name, shape in specs:
            layout.append((name, (off, tuple(shape))))
            off += int(np.prod(shape))
        return cls(layout)

    def __getitem__(self, name):
        off, shape = self.layout[name]
        return self.flat[off:off + int(np.prod(shape))].reshape(shape)

    def __setitem__(self, name, value):
        self[name][...] = value
        self.version += 1

    def __contains__(self, name):
        return name in self.layout

    def names(self):
        return list(self.layout)

    def zeros_like(self):
        p = Params(self.layout)
        return p

    def copy(self):
        p = Params(self.layout, self.flat.copy())
        return p

    def touch(self):
        """Mark the buffer as modified (invalidates forward caches)."""
        self.version += 1


# ------------------------------------------------------------------ layers

class Layer:
    kind = "layer"

    def __init__(self):
        self.name = ""
        self.in_shape = self.out_shape = None

    def build(self, in_shape):
        self.in_shape = tuple(in_shape)
        self.out_shape = self._out_shape(self.in_shape)
        return self.out_shape

    def _out_shape(self, s):
        return s

    def param_specs(self):
        return []

    def init(self, params, rng):
        pass

    def spec(self):
        return {"kind": self.kind}

    def signature(self, cache):
        return None


class Dense(Layer):
    kind = "dense"

    def __init__(self, units):
        super().__init__()
        self.units = int(units)

    def _out_shape(self, s):
        if len(s) != 1:
            raise ShapeError(f"dense expects a flat input, got {s}")
        return (self.units,)

    def param_specs(self):
        return [(self.name + ".w", (self.units, self.in_shape[0])), (self.name + ".b", (self.units,))]

    def init(self, params, rng):
        fan_in, fan_out = self.in_shape[0], self.units
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        params[self.name + ".w"] = rng.uniform(-lim, lim, (self.units, fan_in))

    def forward(self, P, x):
        return x @ P[self.name + ".w"].T + P[self.name + ".b"], x

    def backward(self, P, x, g):
        return g @ P[self.name + ".w"], {".w": g.T @ x, ".b": g.sum(axis=0)}

    def spec(self):
        return {"kind": self.kind, "units": self.units}


class Conv1D(Layer):
    kind = "conv1d"

    def __init__(self, channels, kernel, padding=0):
        super().__init__()
        self.channels, self.kernel, self.padding = int(channels), int(kernel), int(padding)

    def _out_shape(self, s):
        if len(s) != 2:
            raise ShapeError(f"conv1d expects (channels, length), got {s}")
        length = s[1] + 2 * self.padding
        if self.kernel > length:
            raise ShapeError(f"conv kernel {self.kernel} wider than input length {length}")
        return (self.channels, (length - self.kernel) // 1 + 1)

    def param_specs(self):
        cin = self.in_shape[0]
        return [(self.name + ".w", (self.channels, cin, self.kernel)), (self.name + ".b", (self.channels,))]

    def init(self, params, rng):
        cin = self.in_shape[0]
        lim = math.sqrt(6.0 / (cin * self.kernel + self.channels * self.kernel))
        params[self.name + ".w"] = rng.uniform(-lim, lim, (self.channels, cin, self.kernel))

    def forward(self, P, x):
        if self.padding:
            x = np.pad(x, ((0, 0), (0, 0), (self.padding, self.padding)))
        x = np.ascontiguousarray(x)
        return kernels.conv1d_forward(x, P[self.name + ".w"], P[self.name + ".b"]), x

    def backward(self, P, x, g):
        gx, gw, gb = kernels.conv1d_backward(x, P[self.name + ".w"], np.ascontiguousarray(g))
        if self.padding:
            gx = gx[:, :, self.padding:-self.padding]
        return gx, {".w": gw, ".b": gb}

    def spec(self):
        return {"kind": self.kind, "channels": self.channels, "kernel": self.kernel, "padding": self.padding}


class MaxPool1D(Layer):
    kind = "maxpool1d"

    def __init__(self, width=2):
        super().__init__()
        self.width = int(width)

    def _out_shape(self, s):
        if len(s) != 2 or s[1] < self.width:
            raise ShapeError(f"maxpool width {self.width} does not fit input {s}")
        return (s[0], (s[1] - self.width) // self.width + 1)

    def forward(self, P, x):
        out, idx = kernels.maxpool1d_forward(np.ascontiguousarray(x), self.width)
        return out, idx

    def backward(self, P, idx, g):
        return kernels.maxpool1d_backward(np.ascontiguousarray(g), idx, self.in_shape[1]), {}

    def signature(self, idx):
        return idx

    def spec(self):
        return {"kind": self.kind, "width": self.width}


class Upsample1D(Layer):
    kind = "upsample1d"

    def __init__(self, factor=2):
        super().__init__()
        self.factor = int(factor)

    def _out_shape(self, s):
        return (s[0], s[1] * self.factor)

    def forward(self, P, x):
        return np.repeat(x, self.factor, axis=2), None

    def backward(self, P, cache, g):
        n, c, l = g.shape
        return g.reshape(n, c, l // self.factor, self.factor).sum(axis=3), {}

    def spec(self):
        return {"kind": self.kind, "factor": self.factor}


class ReLU(Layer):
    kind = "relu"

    def forward(self, P, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, P, mask, g):
        return g * mask, {}

    def signature(self, mask):
        return mask


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, P, x):
        y = expit(x)
        return y, y

    def backward(self, P, y, g):
        return g * y * (1.0 - y), {}


class Flatten(Layer):
    kind = "flatten"

    def _out_shape(self, s):
        return (int(np.prod(s)),)

    def forward(self, P, x):
        return x.reshape(len(x), -1), None

    def backward(self, P, cache, g):
        return g.reshape((len(g),) + self.in_shape), {}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(v) for v in shape)

    def _out_shape(self, s):
        if int(np.prod(s)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {s} to {self.shape}")
        return self.shape

    def forward(self, P, x):
        return x.reshape((len(x),) + self.shape), None

    def backward(self, P, cache, g):
        return g.reshape((len(g),) + self.in_shape), {}

    def spec(self):
        return {"kind": self.kind, "shape": list(self.shape)}


class Concat(Layer):
    """Run one sub-network per slice of axis 0 and concatenate the flattened outputs."""

    kind = "concat"

    def __init__(self, branches):
        super().__init__()
        self.branches = [b if isinstance(b, Sequential) else Sequential(b) for b in branches]

    def _out_shape(self, s):
        if s[0] != len(self.branches):
            raise ShapeError(f"concat has {len(self.branches)} branches but input axis 0 is {s[0]}")
        total = 0
        for i, br in enumerate(self.branches):
            br.name = f"{self.name}.{i}"
            total += int(np.prod(br.build(s[1:])))
        return (total,)

    def param_specs(self):
        return [spec for br in self.branches for spec in br.param_specs()]

    def init(self, params, rng):
        for br in self.branches:
            br.init(params, rng)

    def forward(self, P, x):
        outs, caches = [], []
        for i, br in enumerate(self.branches):
            y, c = br._forward(P, x[:, i])
            outs.append(y.reshape(len(x), -1))
            caches.append(c)
        return np.concatenate(outs, axis=1), caches

    def backward(self, P, caches, g):
        gx = np.zeros((len(g),) + self.in_shape)
        grads, off = {}, 0
        for i, br in enumerate(self.branches):
            width = int(np.prod(br.out_shape))
            gi, gr = br._backward(P, caches[i], g[:, off:off + width].reshape((len(g),) + br.out_shape))
            gx[:, i] = gi
            grads.update(gr)
            off += width
        # branch grads are already fully qualified
        return gx, {"": grads}

    def signature(self, caches):
        return [br.signature(c) for br, c in zip(self.branches, caches)]

    def spec(self):
        return {"kind": self.kind, "branches": [br.spec() for br in self.branches]}


_KINDS = {cls.kind: cls for cls in (Dense, Conv1D, MaxPool1D, Upsample1D, ReLU, Sigmoid, Flatten, Reshape)}


def layer_from_spec(d):
    d = dict(d)
    kind = d.pop("kind")
    if kind == "concat":
        return Concat([Sequential([layer_from_spec(x) for x in br]) for br in d["branches"]])
    if kind not in _KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return _KINDS[kind](**d)


class Sequential:
    """Ordered layer list with build-time shape inference."""

    def __init__(self, layers, input_shape=None, name=""):
        self.layers = list(layers)
        self.name = name
        self.in_shape = self.out_shape = None
        if input_shape is not None:
            self.build(input_shape)

    def build(self, in_shape):
        self.in_shape = tuple(in_shape)
        s = self.in_shape
        for i, layer in enumerate(self.layers):
            layer.name = f"{self.name}.{i}.{layer.kind}" if self.name else f"{i}.{layer.kind}"
            try:
                s = layer.build(s)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}) in {self.name or 'net'}: {exc}") from exc
        self.out_shape = s
        return s

    def param_specs(self):
        return [spec for layer in self.layers for spec in layer.param_specs()]

    def init(self, params, rng):
        for layer in self.layers:
            layer.init(params, rng)

    def init_params(self, rng):
        params = Params.from_specs(self.param_specs())
        self.init(params, rng)
        params.version = 0
        return params

    def spec(self):
        return [layer.spec() for layer in self.layers]

    def _forward(self, P, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(P, x)
            caches.append(c)
        return x, caches

    def _backward(self, P, caches, g):
        grads = {}
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            g, gr = layer.backward(P, c, g)
            for suffix, val in gr.items():
                if suffix == "":
                    grads.update(val)
                else:
                    grads[layer.name + suffix] = val
        return g, grads

    def signature(self, caches):
        return [layer.signature(c) for layer, c in zip(self.layers, caches)]


@dataclass
class Cache:
    layers: list
    params_id: int
    version: int


def forward(net, params, x):
    """Run ``net`` on a batch; returns (output, cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.in_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match declared {net.in_shape} (layer 0)")
    y, caches = net._forward(params, x)
    return y, Cache(caches, id(params), params.version)


def backward(net, params, cache, output_grad):
    """Backpropagate ``output_grad``; returns (param_grads as Params, input_grad)."""
    if cache.params_id != id(params) or cache.version != params.version:
        raise StaleCacheError("cache was produced for a different parameter state")
    gx, grads = net._backward(params, cache.layers, np.asarray(output_grad, dtype=np.float64))
    out = params.zeros_like()
    for name, val in grads.items():
        out[name] = val
    return out, gx


def kink_signature(net, cache):
    """Bytes identifying every ReLU on/off state and max-pool winner in ``cache``."""
    parts = []

    def walk(obj):
        if obj is None:
            return
        if isinstance(obj, list):
            for o in obj:
                walk(o)
        else:
            parts.append(np.ascontiguousarray(obj).tobytes())

    walk(net.signature(cache.layers))
    return b"".join(parts)


# -------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(np.zeros(params.size), np.zeros(params.size), 0)


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied in place; returns (params, state)."""
    g = grads.flat if isinstance(grads, Params) else np.asarray(grads, dtype=np.float64)
    if g.shape != params.flat.shape:
        raise ShapeError(f"gradient shape {g.shape} != parameter shape {params.flat.shape}")
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise FloatingPointError(f"non-finite gradient at {len(bad)} coordinates (first {bad[:5].tolist()}) "
                                 f"at Adam step {state.t + 1}")
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * g
    state.v *= beta2
    state.v += (1 - beta2) * g * g
    mhat = state.m / (1 - beta1 ** state.t)
    vhat = state.v / (1 - beta2 ** state.t)
    params.flat -= lr * mhat / (np.sqrt(vhat) + eps)
    params.touch()
    return params, state


# --------------------------------------------------------- gradient check

def gradient_check(params, loss_fn, eps=1e-5, seed=0, fraction=0.01, min_coords=50, rtol=1e-5):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, grad)`` or ``(loss, grad, signature)``.
    When a signature (see :func:`kink_signature`) is returned, coordinates
    whose +/-eps perturbation changes it straddle a ReLU or max-pool kink and
    are skipped, and replacement coordinates are drawn instead.

    The relative error's denominator is floored at the smallest gradient a
    central difference can resolve to ``rtol`` given float64 rounding of the
    loss, ``u * |loss| / (eps * rtol)``; below that the quotient is noise.

    Returns ``(max_rel_error, n_checked)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must be in [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    out = loss_fn(params)
    grad = out[1].flat if isinstance(out[1], Params) else np.asarray(out[1])
    sig0 = out[2] if len(out) > 2 else None
    floor = max(1e-8, np.finfo(float).eps * abs(float(out[0])) / (eps * rtol))
    want = max(min_coords, int(math.ceil(fraction * params.size)))
    order = rng.permutation(params.size)
    worst, checked = 0.0, 0
    for i in order:
        if checked >= want:
            break
        orig = params.flat[i]
        params.flat[i] = orig + eps
        params.touch()
        plus = loss_fn(params)
        params.flat[i] = orig - eps
        params.touch()
        minus = loss_fn(params)
        params.flat[i] = orig
        params.touch()
        if sig0 is not None and (plus[2] != sig0 or minus[2] != sig0):
            continue
        num = (plus[0] - minus[0]) / (2 * eps)
        ana = grad[i]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
        checked += 1
    if checked < min(min_coords, params.size):
        raise RuntimeError(f"only {checked} kink-free coordinates available for the gradient check")
    return worst, checked


# ------------------------------------------------------------ checkpoints

_MAGIC = b"CCLCKPT1"


def save_checkpoint(path, header, flat):
    """Write ``MAGIC | u64 LE header length | header JSON | float64 LE params``."""
    flat = np.asarray(flat, dtype="<f8")
    header = dict(header, n_params=int(flat.size))
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a ccloc checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode())
        data = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if data.size != header["n_params"]:
        raise ValueError(f"{path}: expected {header['n_params']} parameters, found {data.size}")
    return header, data
