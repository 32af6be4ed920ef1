"""Dense float64 tensors with reverse-mode automatic differentiation.

A `GradTape` records primitive applications while active (as a context
manager); `backward` replays it in reverse. Tensors are immutable after
creation except for `.grad` accumulation during a single backward pass.
Heavy kernels (conv, transposed conv, pooling) live in `vidkit.kernels`.
"""

import math

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._tracked = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(out_data, inputs, backward_fn):
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        out._tracked = True
        tape.records.append((out, inputs, backward_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b, fwd, op_name):
    try:
        out = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{op_name}: incompatible shapes {a.shape} and {b.shape}") from e
    return out


def backward(loss, tape):
    """Accumulate d(loss)/d(tensor) into .grad for every tracked tensor."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward: tape already consumed")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, inputs, backward_fn in reversed(tape.records):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for t, g in zip(inputs, grads):
            if g is None or not t._tracked:
                continue
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g


# ---------------------------------------------------------------------------
# elementwise / linear algebra primitives


def add(a, b):
    out = _binary(a, b, np.add, "add")
    return _make(out, (a, b), lambda gy: (_unbroadcast(gy, a.shape), _unbroadcast(gy, b.shape)))


def sub(a, b):
    out = _binary(a, b, np.subtract, "sub")
    return _make(out, (a, b), lambda gy: (_unbroadcast(gy, a.shape), _unbroadcast(-gy, b.shape)))


def mul(a, b):
    out = _binary(a, b, np.multiply, "mul")
    return _make(
        out,
        (a, b),
        lambda gy: (_unbroadcast(gy * b.data, a.shape), _unbroadcast(gy * a.data, b.shape)),
    )


def div(a, b):
    out = _binary(a, b, np.divide, "div")
    return _make(
        out,
        (a, b),
        lambda gy: (
            _unbroadcast(gy / b.data, a.shape),
            _unbroadcast(-gy * a.data / (b.data * b.data), b.shape),
        ),
    )


def scalar_mul(a, c):
    c = float(c)
    return _make(a.data * c, (a,), lambda gy: (gy * c,))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda gy: (gy @ b.data.T, a.data.T @ gy),
    )


def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda gy: (gy * mask,))


def softplus(a):
    # overflow-safe: max(a,0) + log1p(exp(-|a|)); strictly positive output
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.maximum(np.maximum(x, 0.0) + np.log1p(e), np.finfo(np.float64).tiny)
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda gy: (gy * sig,))


def log(a):
    return _make(np.log(a.data), (a,), lambda gy: (gy / a.data,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda gy: (gy * out,))


def square(a):
    return _make(a.data * a.data, (a,), lambda gy: (gy * 2.0 * a.data,))


def tsum(a, axis=None):
    out = a.data.sum(axis=axis)

    def bwd(gy):
        if axis is None:
            return (np.broadcast_to(gy, a.shape).copy(),)
        g = np.expand_dims(gy, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bwd)


def tmean(a, axis=None):
    count = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def bwd(gy):
        if axis is None:
            return (np.broadcast_to(gy / count, a.shape).copy(),)
        g = np.expand_dims(gy, axis) / count
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bwd)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda gy: (gy.reshape(a.shape),))


def flatten(a):
    return reshape(a, (a.shape[0], -1))


def broadcast(a, shape):
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from e
    return _make(out, (a,), lambda gy: (_unbroadcast(gy, a.shape),))


# ---------------------------------------------------------------------------
# spatial primitives (backed by vidkit.kernels)


def conv2d(x, w, b, stride=1, pad=0):
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input/weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight channels {w.shape[1]}")
    k = w.shape[2]
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {x.shape}")
    out = kernels.conv2d_forward(x.data, w.data, b.data, stride, pad)

    def bwd(gy):
        return kernels.conv2d_backward(x.data, w.data, gy, stride, pad)

    return _make(out, (x, w, b), bwd)


def transposed_conv2d(x, w, b, stride=1, pad=0):
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"transposed_conv2d: need 4-d input/weight, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"transposed_conv2d: input channels {x.shape[1]} != weight in-channels {w.shape[0]}"
        )
    out = kernels.convt2d_forward(x.data, w.data, b.data, stride, pad)

    def bwd(gy):
        return kernels.convt2d_backward(x.data, w.data, gy, stride, pad)

    return _make(out, (x, w, b), bwd)


def max_pool2d(x, k=2, stride=2):
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"max_pool2d: window {k} exceeds input {x.shape}")
    out, idx = kernels.maxpool2d_forward(x.data, k, stride)
    shape = x.shape

    def bwd(gy):
        return (kernels.maxpool2d_backward(gy, idx, shape),)

    return _make(out, (x,), bwd)


def global_avg_pool(x):
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(gy):
        return (np.broadcast_to(gy[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization / regularization / classification primitives


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Batch normalization over features (2-d input) or channels (4-d input).

    Running statistics are plain arrays updated in place in training mode
    (ema with the given momentum) and consumed in eval mode.
    """
    nd = x.data.ndim
    if nd == 2:
        axes, bshape = (0,), (1, -1)
    elif nd == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batchnorm: need 2-d or 4-d input, got {x.shape}")
    g = gamma.data.reshape(bshape)
    b = beta.data.reshape(bshape)
    m = x.data.size // gamma.data.size
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.ravel()
        running_var *= momentum
        running_var += (1 - momentum) * var.ravel()
    else:
        mu = running_mean.reshape(bshape)
        var = running_var.reshape(bshape)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * ivar
    out = g * xhat + b

    def bwd(gy):
        dbeta = gy.sum(axis=axes)
        dgamma = (gy * xhat).sum(axis=axes)
        if training:
            dx = (g * ivar) * (
                gy
                - dbeta.reshape(bshape) / m
                - xhat * dgamma.reshape(bshape) / m
            )
        else:
            dx = gy * g * ivar
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), bwd)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not training or rate == 0.0:
        return _make(x.data.copy(), (x,), lambda gy: (gy,))
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda gy: (gy * keep,))


def log_softmax(x):
    """Log-softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bwd(gy):
        return (gy - sm * gy.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bwd)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: need 2-d logits, got {logits.shape}")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    out = -logp[np.arange(n), labels].sum() / n
    sm = np.exp(logp)

    def bwd(gy):
        g = sm.copy()
        g[np.arange(n), labels] -= 1.0
        return (gy * g / n,)

    return _make(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# generic dispatch + gradient checking

_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar_mul": scalar_mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "transposed_conv2d": transposed_conv2d,
    "relu": relu,
    "softplus": softplus,
    "log": log,
    "exp": exp,
    "square": square,
    "sum": tsum,
    "mean": tmean,
    "max_pool2d": max_pool2d,
    "global_avg_pool": global_avg_pool,
    "batchnorm": batchnorm,
    "dropout": dropout,
    "softmax_logits": log_softmax,
    "flatten": flatten,
    "reshape": reshape,
    "broadcast": broadcast,
}


def primitive_forward(op_kind, inputs, attrs=None):
    """Apply a primitive by name, with finiteness validation on both sides."""
    if op_kind not in _PRIMITIVES:
        raise KeyError(f"unknown primitive {op_kind!r}")
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op_kind}: non-finite input")
    out = _PRIMITIVES[op_kind](*inputs, **(attrs or {}))
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{op_kind}: non-finite output")
    return out


def grad_check(f, inputs, step=1e-4):
    """Max relative error between analytic and central-difference gradients.

    `f` maps the input tensors to a scalar Tensor. Inputs are perturbed one
    coordinate at a time; the analytic gradient comes from one taped pass.
    """
    for t in inputs:
        t.zero_grad()
    with GradTape() as tape:
        out = f(inputs)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    backward(out, tape)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    max_err = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(inputs).item()
            flat[i] = orig - step
            lo = f(inputs).item()
            flat[i] = orig
            num = (hi - lo) / (2.0 * step)
            err = abs(an.ravel()[i] - num) / max(1e-12, abs(num))
            if err > max_err:
                max_err = err
    return max_err


def parameters_l2(params):
    return math.sqrt(sum(float((p.data * p.data).sum()) for p in params))
