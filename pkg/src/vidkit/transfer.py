"""Variational Gaussian q(t|s), regressor construction, and the transfer losses.

q(t|s) has a heteroscedastic mean network and homoscedastic per-channel (or
per-dimension) variance sigma^2 = softplus(alpha) + epsilon. The negative
log-likelihood of the teacher activation under q is the transfer term; unit
variance with constants dropped collapses it to plain MSE matching.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

DEFAULT_EPSILON = 1e-6
INIT_SIGMA_SQ = 5.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def alpha_for_sigma_sq(sigma_sq, epsilon=DEFAULT_EPSILON):
    """Invert softplus so that softplus(alpha) + epsilon == sigma_sq."""
    return math.log(math.expm1(sigma_sq - epsilon))


class AsSpatial(nn.Layer):
    """View a (B, N) vector batch as (B, N, 1, 1) for deconv regressors."""

    def forward(self, x, ctx):
        return T.reshape(x, (x.shape[0], x.shape[1], 1, 1))


class VariationalGaussian:
    """q(t|s): mean network plus unconstrained variance parameters.

    layout 'conv' keeps one variance per channel, 'vector' one per dimension.
    fixed_variance pins sigma^2 to a constant (used for the MSE reductions).
    """

    def __init__(self, mean_net, n_variances, layout, epsilon=DEFAULT_EPSILON,
                 init_sigma_sq=INIT_SIGMA_SQ, fixed_variance=None):
        if layout not in ("conv", "vector"):
            raise ValueError(f"unknown layout {layout!r}")
        self.mean_net = mean_net
        self.layout = layout
        self.epsilon = epsilon
        self.fixed_variance = fixed_variance
        self.alpha = Tensor(
            np.full(n_variances, alpha_for_sigma_sq(init_sigma_sq, epsilon)),
            requires_grad=True,
        )

    def sigma_sq(self):
        if self.fixed_variance is not None:
            return Tensor(np.full(self.alpha.shape, float(self.fixed_variance)))
        return T.add(T.softplus(self.alpha), Tensor(np.array(self.epsilon)))

    def mean(self, s, ctx=None):
        ctx = ctx or nn.ForwardContext(training=False)
        out, _ = self.mean_net.forward(s, ctx)
        return out

    def params(self):
        ps = self.mean_net.params()
        if self.fixed_variance is None:
            ps = ps + [self.alpha]
        return ps

    def named_params(self, prefix=""):
        out = [(f"{prefix}mean.{n}", p) for n, p in self.mean_net.named_params()]
        if self.fixed_variance is None:
            out.append((f"{prefix}alpha", self.alpha))
        return out


@dataclass
class TransferPair:
    teacher_tap: str
    student_tap: str
    q: VariationalGaussian
    weight: float | None = None  # per-pair override of lambda2


@dataclass
class MsePair:
    teacher_tap: str
    student_tap: str
    adaptor: object | None = None  # Network-like with .forward, or None = identity
    weight: float | None = None


@dataclass
class TransferObjective:
    lambda1: float = 1.0
    lambda2: float = 0.0
    pairs: list = field(default_factory=list)
    mse_pairs: list = field(default_factory=list)
    kd_temperature: float = 4.0
    kd_weight: float = 0.0

    def __post_init__(self):
        if self.lambda1 <= 0:
            raise ValueError("lambda1 must be > 0")
        if self.lambda2 < 0:
            raise ValueError("lambda2 must be >= 0")
        if self.pairs and self.mse_pairs:
            raise ValueError("pairs and mse_pairs are mutually exclusive in one run")

    def transfer_params(self):
        ps = []
        for pair in self.pairs:
            ps.extend(pair.q.params())
        for pair in self.mse_pairs:
            if pair.adaptor is not None:
                ps.extend(pair.adaptor.params())
        return ps


@dataclass
class LossReport:
    total: float
    task: float
    per_pair_nll: list
    kd_term: float | None = None

    def to_json_dict(self):
        return {
            "total": self.total,
            "task": self.task,
            "per_pair_nll": list(self.per_pair_nll),
            "kd_term": self.kd_term,
        }


def _as_batched(t, layout):
    want = 4 if layout == "conv" else 2
    if t.data.ndim == want - 1:
        return T.reshape(t, (1,) + t.shape)
    if t.data.ndim != want:
        raise ShapeError(f"{layout} layout expects {want - 1}- or {want}-d activation, got {t.shape}")
    return t


def gaussian_nll_conv(t, q, s, include_constant=False, ctx=None):
    """Batch-averaged negative log q(t|s) for a conv activation.

    Sum over (c,h,w) of log sigma_c + (t - mu(s))^2 / (2 sigma_c^2); the
    additive Gaussian constant is included only on request (MI bench).
    """
    if q.layout != "conv":
        raise ShapeError("gaussian_nll_conv needs a conv-layout q")
    t = _as_batched(t, "conv")
    mu = _as_batched(q.mean(s, ctx), "conv")
    if mu.shape != t.shape:
        raise ShapeError(f"mean shape {mu.shape} != target shape {t.shape}")
    b, c, h, w = t.shape
    if q.alpha.shape != (c,):
        raise ShapeError(f"alpha length {q.alpha.shape} != channel count {c}")
    sig2 = q.sigma_sq()
    quad = T.div(T.square(T.sub(t, mu)), T.scalar_mul(T.reshape(sig2, (1, c, 1, 1)), 2.0))
    nll = T.add(
        T.scalar_mul(T.tsum(quad), 1.0 / b),
        T.scalar_mul(T.tsum(T.log(sig2)), 0.5 * h * w),
    )
    if include_constant:
        nll = T.add(nll, Tensor(np.array(c * h * w * HALF_LOG_2PI)))
    return nll


def gaussian_nll_vec(t, q, s, include_constant=False, ctx=None):
    """Batch-averaged negative log q(t|s) for a vector activation (per-dim sigma)."""
    if q.layout != "vector":
        raise ShapeError("gaussian_nll_vec needs a vector-layout q")
    t = _as_batched(t, "vector")
    mu = _as_batched(q.mean(s, ctx), "vector")
    if mu.shape != t.shape:
        raise ShapeError(f"mean shape {mu.shape} != target shape {t.shape}")
    b, n = t.shape
    if q.alpha.shape != (n,):
        raise ShapeError(f"alpha length {q.alpha.shape} != dimension count {n}")
    sig2 = q.sigma_sq()
    quad = T.div(T.square(T.sub(t, mu)), T.scalar_mul(T.reshape(sig2, (1, n)), 2.0))
    nll = T.add(
        T.scalar_mul(T.tsum(quad), 1.0 / b),
        T.scalar_mul(T.tsum(T.log(sig2)), 0.5),
    )
    if include_constant:
        nll = T.add(nll, Tensor(np.array(n * HALF_LOG_2PI)))
    return nll


def gaussian_nll(t, q, s, include_constant=False, ctx=None):
    fn = gaussian_nll_conv if q.layout == "conv" else gaussian_nll_vec
    return fn(t, q, s, include_constant=include_constant, ctx=ctx)


# ---------------------------------------------------------------------------
# regressor (mean network) construction

REGRESSOR_KINDS = ("conv3_wide", "conv2_narrow", "linear_logit", "deconv_stack")


def build_mean_net(kind, student_shape, teacher_shape):
    """Mean-network architectures, shared with the MSE-baseline adaptors.

    conv3_wide: three 1x1 convs, hidden width = 2x teacher channels.
    conv2_narrow: two 1x1 convs, hidden width = teacher channels / 2.
    linear_logit: a single linear map (penultimate -> logits).
    deconv_stack: 4x4 stride-1 deconv from 1x1, then 4x4/stride-2/pad-1
    deconvs (no nonlinearities) until the teacher spatial size is reached.
    """
    if kind == "linear_logit":
        (s_n,) = student_shape
        (t_n,) = teacher_shape
        net = nn.Network(input_shape=student_shape)
        net.append("linear", nn.Linear(s_n, t_n))
        return net

    if kind in ("conv3_wide", "conv2_narrow"):
        s_c = student_shape[0]
        t_c, t_h, t_w = teacher_shape
        if student_shape[1:] != (t_h, t_w):
            raise ShapeError(
                f"{kind} requires equal spatial dims, got {student_shape} vs {teacher_shape}"
            )
        net = nn.Network(input_shape=student_shape)
        if kind == "conv3_wide":
            hidden = 2 * t_c
            net.append("conv1", nn.Conv2d(s_c, hidden, 1))
            net.append("bn1", nn.BatchNorm(hidden))
            net.append("relu1", nn.ReLU())
            net.append("conv2", nn.Conv2d(hidden, hidden, 1))
            net.append("bn2", nn.BatchNorm(hidden))
            net.append("relu2", nn.ReLU())
            net.append("conv3", nn.Conv2d(hidden, t_c, 1))
        else:
            hidden = max(1, t_c // 2)
            net.append("conv1", nn.Conv2d(s_c, hidden, 1))
            net.append("bn1", nn.BatchNorm(hidden))
            net.append("relu1", nn.ReLU())
            net.append("conv2", nn.Conv2d(hidden, t_c, 1))
        return net

    if kind == "deconv_stack":
        (s_n,) = student_shape
        t_c, t_h, t_w = teacher_shape
        if t_h != t_w:
            raise ShapeError(f"deconv_stack needs square teacher maps, got {teacher_shape}")
        size, doublings = 4, 0
        while size < t_h:
            size *= 2
            doublings += 1
        if size != t_h:
            raise ShapeError(f"deconv_stack cannot reach spatial size {t_h} (need 4*2^m)")
        net = nn.Network(input_shape=student_shape)
        net.append("as_spatial", AsSpatial())
        net.append("deconv0", nn.ConvTranspose2d(s_n, t_c, 4, stride=1, pad=0))
        for i in range(doublings):
            net.append(f"deconv{i + 1}", nn.ConvTranspose2d(t_c, t_c, 4, stride=2, pad=1))
        return net

    raise ValueError(f"unknown regressor kind {kind!r}; expected one of {REGRESSOR_KINDS}")


def build_regressor(kind, student_shape, teacher_shape, epsilon=DEFAULT_EPSILON,
                    init_sigma_sq=INIT_SIGMA_SQ, fixed_variance=None):
    mean_net = build_mean_net(kind, student_shape, teacher_shape)
    layout = "vector" if kind == "linear_logit" else "conv"
    n_var = teacher_shape[0]
    return VariationalGaussian(
        mean_net, n_var, layout, epsilon=epsilon,
        init_sigma_sq=init_sigma_sq, fixed_variance=fixed_variance,
    )


# ---------------------------------------------------------------------------
# losses


def _tap(taps, name, who):
    if name not in taps:
        raise KeyError(f"missing {who} tap {name!r}; have {sorted(taps)}")
    return taps[name]


def kd_loss(teacher_logits, student_logits, temperature):
    """T^2 * KL(softmax(teacher/T) || softmax(student/T)), batch-averaged."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(
            f"kd_loss: logit shapes differ {teacher_logits.shape} vs {student_logits.shape}"
        )
    b = teacher_logits.shape[0]
    zt = teacher_logits.data / temperature
    zt = zt - zt.max(axis=-1, keepdims=True)
    pt = np.exp(zt)
    pt /= pt.sum(axis=-1, keepdims=True)
    log_pt = np.log(pt)
    const = float((pt * log_pt).sum()) / b
    ls = T.log_softmax(T.scalar_mul(student_logits, 1.0 / temperature))
    cross = T.scalar_mul(T.tsum(T.mul(Tensor(pt), ls)), 1.0 / b)
    return T.scalar_mul(T.sub(Tensor(np.array(const)), cross), temperature**2)


def mse_match_loss(teacher_tap, student_tap, adaptor=None, ctx=None):
    """Unit-variance Gaussian matching: sum (t - mu(s))^2 / 2, batch-averaged
    and divided by the element count for comparability with the VID term."""
    if adaptor is None:
        mu = student_tap
    else:
        ctx = ctx or nn.ForwardContext(training=False)
        mu, _ = adaptor.forward(student_tap, ctx)
    t = teacher_tap
    if t.data.ndim == mu.data.ndim - 1:
        t = T.reshape(t, (1,) + t.shape)
    if mu.shape != t.shape:
        raise ShapeError(f"mse_match_loss: adaptor output {mu.shape} != target {t.shape}")
    b = t.shape[0]
    n_k = int(np.prod(t.shape[1:]))
    return T.scalar_mul(T.tsum(T.square(T.sub(t, mu))), 0.5 / b / n_k)


def vid_loss(task_loss, objective, teacher_taps, student_taps, ctx=None):
    """Full transfer objective: lambda1*task + sum_k (lambda2/N_k)*NLL_k (+ KD).

    Teacher taps must be detached (no gradient record); gradients flow into
    the student and the variational parameters only.

    Returns (total: Tensor, report: LossReport).
    """
    total = T.scalar_mul(task_loss, objective.lambda1)
    per_pair = []
    for pair in objective.pairs:
        t = _tap(teacher_taps, pair.teacher_tap, "teacher")
        if t._tracked:
            raise ValueError(f"teacher tap {pair.teacher_tap!r} is not detached")
        s = _tap(student_taps, pair.student_tap, "student")
        n_k = int(np.prod(t.shape[1:] if t.data.ndim in (2, 4) else t.shape))
        nll = gaussian_nll(t, pair.q, s, ctx=ctx)
        lam = objective.lambda2 if pair.weight is None else pair.weight
        scaled = T.scalar_mul(nll, 1.0 / n_k)
        per_pair.append(scaled.item())
        total = T.add(total, T.scalar_mul(scaled, lam))
    for pair in objective.mse_pairs:
        t = _tap(teacher_taps, pair.teacher_tap, "teacher")
        s = _tap(student_taps, pair.student_tap, "student")
        mse = mse_match_loss(t, s, pair.adaptor, ctx=ctx)
        lam = objective.lambda2 if pair.weight is None else pair.weight
        per_pair.append(mse.item())
        total = T.add(total, T.scalar_mul(mse, lam))
    kd_term = None
    if objective.kd_weight > 0:
        kd = kd_loss(
            _tap(teacher_taps, "logits", "teacher"),
            _tap(student_taps, "logits", "student"),
            objective.kd_temperature,
        )
        kd_term = kd.item()
        total = T.add(total, T.scalar_mul(kd, objective.kd_weight))
    report = LossReport(
        total=total.item(), task=task_loss.item(), per_pair_nll=per_pair, kd_term=kd_term
    )
    return total, report
