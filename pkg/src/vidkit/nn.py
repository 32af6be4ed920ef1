"""Layers, networks with named tap points, and the bit-exact checkpoint format.

A Network is an ordered list of named layers plus a tap registry mapping tap
names to layer names; forward_with_taps captures those activations. The
teacher here is a plain conv-group CNN and the student an MLP built from
bottleneck linear stages.
"""

import json
import struct

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CHECKPOINT_VERSION = 1


class ForwardContext:
    def __init__(self, training, rng=None):
        self.training = training
        self.rng = rng if rng is not None else np.random.default_rng(0)


class Layer:
    def params(self):
        return []

    def state(self):
        """Non-trainable arrays that belong in a checkpoint."""
        return []


class Linear(Layer):
    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(np.zeros((in_features, out_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, ctx):
        return T.add(T.matmul(x, self.weight), self.bias)


class BottleneckLinear(Layer):
    """Two linear maps h -> h/4 -> h with no nonlinearity between."""

    def __init__(self, width):
        if width % 4 != 0:
            raise ValueError(f"bottleneck width {width} not divisible by 4")
        inner = width // 4
        self.down = Linear(width, inner)
        self.up = Linear(inner, width)

    def params(self):
        return [(f"down.{n}", p) for n, p in self.down.params()] + [
            (f"up.{n}", p) for n, p in self.up.params()
        ]

    def forward(self, x, ctx):
        return self.up.forward(self.down.forward(x, ctx), ctx)


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0):
        self.stride = stride
        self.pad = pad
        self.weight = Tensor(np.zeros((out_channels, in_channels, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, ctx):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0):
        self.stride = stride
        self.pad = pad
        self.weight = Tensor(np.zeros((in_channels, out_channels, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, ctx):
        return T.transposed_conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ReLU(Layer):
    def forward(self, x, ctx):
        return T.relu(x)


class BatchNorm(Layer):
    def __init__(self, num_features, momentum=0.9, eps=1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, ctx):
        return T.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=ctx.training, momentum=self.momentum, eps=self.eps,
        )


class Dropout(Layer):
    def __init__(self, rate=0.2):
        self.rate = rate

    def forward(self, x, ctx):
        return T.dropout(x, self.rate, ctx.rng, training=ctx.training)


class MaxPool2d(Layer):
    def __init__(self, kernel=2, stride=2):
        self.kernel = kernel
        self.stride = stride

    def forward(self, x, ctx):
        return T.max_pool2d(x, k=self.kernel, stride=self.stride)


class GlobalAvgPool(Layer):
    def forward(self, x, ctx):
        return T.global_avg_pool(x)


class Flatten(Layer):
    def forward(self, x, ctx):
        return T.flatten(x)


class Network:
    def __init__(self, input_shape=None):
        self.layers = []  # list of (name, layer)
        self.taps = {}  # tap name -> layer name
        self.input_shape = input_shape

    def append(self, name, layer, tap=None):
        if any(n == name for n, _ in self.layers):
            raise ValueError(f"duplicate layer name {name}")
        self.layers.append((name, layer))
        if tap is not None:
            if tap in self.taps:
                raise ValueError(f"duplicate tap name {tap}")
            self.taps[tap] = name

    def named_params(self):
        out = []
        for lname, layer in self.layers:
            for pname, p in layer.params():
                out.append((f"{lname}.{pname}", p))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def named_state(self):
        out = []
        for lname, layer in self.layers:
            for sname, arr in layer.state():
                out.append((f"{lname}.{sname}", arr))
        return out

    def param_count(self):
        return sum(p.data.size for p in self.params())

    def forward(self, batch, ctx):
        taps = {}
        by_layer = {lname: tap for tap, lname in self.taps.items()}
        x = batch
        for lname, layer in self.layers:
            x = layer.forward(x, ctx)
            if lname in by_layer:
                taps[by_layer[lname]] = x
        return x, taps


def forward_with_taps(net, batch, mode="eval", rng=None):
    """Run the network, returning (logits, tap activations)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    ctx = ForwardContext(training=(mode == "train"), rng=rng)
    return net.forward(batch, ctx)


def init_params(net, seed):
    """Fan-in-scaled uniform weights (bound sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    for name, p in net.named_params():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            w = p.data
            if w.ndim == 2:
                fan_in = w.shape[0]
            else:  # conv (cout,cin,k,k) or transposed conv (cin,cout,k,k)
                fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            bound = np.sqrt(6.0 / fan_in)
            p.data[...] = rng.uniform(-bound, bound, size=w.shape)
        elif leaf in ("bias", "beta"):
            p.data[...] = 0.0
        elif leaf == "gamma":
            p.data[...] = 1.0
        else:
            p.data[...] = rng.normal(size=p.data.shape)
    for name, arr in net.named_state():
        if name.endswith("running_mean"):
            arr[...] = 0.0
        elif name.endswith("running_var"):
            arr[...] = 1.0


def build_mlp(input_dim, hidden_width, num_classes, drop_rate=0.2):
    """Student MLP: linear, three bottleneck linears, linear head.

    Dropout, batch norm and ReLU sit between consecutive top-level stages
    (never inside a bottleneck). Taps: fc1..fc4 at the stage outputs,
    'penultimate' after the last hidden activation.
    """
    h = hidden_width
    if h % 4 != 0:
        raise ValueError(f"hidden width {h} not divisible by 4")
    net = Network(input_shape=(input_dim,))
    net.append("fc1", Linear(input_dim, h), tap="fc1")
    for i in range(2, 5):
        net.append(f"drop{i - 1}", Dropout(drop_rate))
        net.append(f"bn{i - 1}", BatchNorm(h))
        net.append(f"relu{i - 1}", ReLU())
        net.append(f"fc{i}", BottleneckLinear(h), tap=f"fc{i}")
    net.append("drop4", Dropout(drop_rate))
    net.append("bn4", BatchNorm(h))
    net.append("relu4", ReLU(), tap="penultimate")
    net.append("head", Linear(h, num_classes), tap="logits")
    return net


def build_cnn(channels_per_group, num_classes, input_shape):
    """Teacher CNN: conv groups (conv3x3 + bn + relu), pooling between groups,
    global-average-pool head. Taps at each group end, the pooled penultimate
    layer, and the logits."""
    c, hgt, wid = input_shape
    if not channels_per_group:
        raise ValueError("need at least one conv group")
    halvings = len(channels_per_group) - 1
    if hgt // (2 ** halvings) < 1 or wid // (2 ** halvings) < 1:
        raise ShapeError(
            f"input {hgt}x{wid} underflows after {halvings} pooling stages"
        )
    net = Network(input_shape=input_shape)
    prev = c
    for gi, ch in enumerate(channels_per_group, start=1):
        if gi > 1:
            net.append(f"pool{gi - 1}", MaxPool2d(2, 2))
        net.append(f"conv{gi}", Conv2d(prev, ch, 3, stride=1, pad=1))
        net.append(f"gbn{gi}", BatchNorm(ch))
        net.append(f"grelu{gi}", ReLU(), tap=f"group{gi}")
        prev = ch
    net.append("gap", GlobalAvgPool(), tap="penultimate")
    net.append("head", Linear(prev, num_classes), tap="logits")
    return net


def mlp_param_count(input_dim, h, num_classes):
    """Closed form for build_mlp linear-stage parameters (weights + biases)."""
    return (
        input_dim * h + h
        + 3 * (2 * h * (h // 4) + h // 4 + h)
        + h * num_classes + num_classes
    )


# ---------------------------------------------------------------------------
# checkpoint format: u32 header length, JSON header, little-endian blob


def save_arrays(named_arrays, path, dtype="float64"):
    names, shapes, offsets = [], [], []
    blobs = []
    off = 0
    np_dtype = np.dtype(dtype).newbyteorder("<")
    for name, arr in named_arrays:
        names.append(name)
        shapes.append(list(arr.shape))
        offsets.append(off)
        raw = np.ascontiguousarray(arr, dtype=np_dtype).tobytes()
        blobs.append(raw)
        off += len(raw)
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "names": names,
            "shapes": shapes,
            "dtype": dtype,
            "byte_offsets": offsets,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_arrays(path):
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        blob = f.read()
    np_dtype = np.dtype(header["dtype"]).newbyteorder("<")
    out = {}
    names = header["names"]
    offsets = header["byte_offsets"]
    for i, name in enumerate(names):
        shape = tuple(header["shapes"][i])
        count = int(np.prod(shape)) if shape else 1
        start = offsets[i]
        arr = np.frombuffer(blob, dtype=np_dtype, count=count, offset=start)
        out[name] = arr.reshape(shape).astype(np.float64)
    return out


def save_checkpoint(net, path, dtype="float64"):
    entries = [(n, p.data) for n, p in net.named_params()]
    entries += net.named_state()
    save_arrays(entries, path, dtype=dtype)


def load_checkpoint(net, path):
    loaded = load_arrays(path)
    for name, p in net.named_params():
        if name not in loaded:
            raise KeyError(f"checkpoint missing parameter {name}")
        if loaded[name].shape != p.data.shape:
            raise ShapeError(f"checkpoint shape mismatch for {name}")
        p.data[...] = loaded[name]
    for name, arr in net.named_state():
        if name in loaded:
            arr[...] = loaded[name]
