"""Evaluation and diagnostics: accuracy, log-likelihood heatmaps (PGM),
sorted variance spectra (CSV), and a mutual-information-bound bench with a
closed-form Gaussian oracle."""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import train as vtrain
from . import transfer
from .tensor import GradTape, ShapeError, Tensor, backward

ENTROPY_STD_GAUSSIAN = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass
class HeatmapImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8


@dataclass
class VarianceSpectrum:
    pair_id: str
    sigma_sq: np.ndarray  # sorted descending


@dataclass
class MIEstimate:
    bound: float
    std_error: float
    i_true: float
    entropy: float
    rho: float

    def to_json_dict(self):
        return {
            "rho": self.rho,
            "bound_nats": self.bound,
            "std_error": self.std_error,
            "i_true_nats": self.i_true,
            "entropy_nats": self.entropy,
        }


def evaluate_accuracy(net, images, labels, batch_size=256):
    """Argmax-logit accuracy in [0,1]; ties resolve to the lowest class index."""
    return vtrain.eval_accuracy(net, images, labels, batch_size=batch_size)


# ---------------------------------------------------------------------------
# heatmaps


def logq_spatial(q, t, s):
    """Channel-summed log density per spatial cell, constants dropped.

    Returns a float (H, W) map for a single image: sum_c log q(t_chw | s).
    """
    if q.layout != "conv":
        raise ShapeError("heatmaps need a conv-layout q")
    t_data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if t_data.ndim == 3:
        t_data = t_data[None]
    if t_data.shape[0] != 1:
        raise ShapeError(f"logq_spatial expects a single image, got batch {t_data.shape[0]}")
    s_in = s if isinstance(s, Tensor) else Tensor(s)
    if s_in.data.ndim in (1, 3):
        s_in = Tensor(s_in.data[None])
    mu = q.mean(s_in).data
    if mu.shape != t_data.shape:
        raise ShapeError(f"mean shape {mu.shape} != target shape {t_data.shape}")
    sig2 = q.sigma_sq().data  # (C,)
    per_elem = -(
        0.5 * np.log(sig2)[None, :, None, None]
        + (t_data - mu) ** 2 / (2.0 * sig2[None, :, None, None])
    )
    return per_elem[0].sum(axis=0)


def bilinear_resize(img, out_h, out_w):
    in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return img.astype(np.float64).copy()
    ys = np.linspace(0, in_h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0, in_w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)


def nearest_resize(img, out_h, out_w):
    ys = np.clip(np.round(np.linspace(0, img.shape[0] - 1, out_h)).astype(int), 0, img.shape[0] - 1)
    xs = np.clip(np.round(np.linspace(0, img.shape[1] - 1, out_w)).astype(int), 0, img.shape[1] - 1)
    return img[np.ix_(ys, xs)].astype(np.float64)


def normalize_to_u8(img):
    """Per-image min-max to [0,255]; constant maps become mid-gray 128."""
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-300:
        return np.full(img.shape, 128, dtype=np.uint8)
    scaled = (img - lo) / (hi - lo) * 255.0
    return np.round(scaled).astype(np.uint8)


def emit_heatmap(q, t, s, input_size, interp="bilinear"):
    """Render log q(t_{h,w}|s) as a grayscale map at the input's spatial size."""
    raw = logq_spatial(q, t, s)
    if raw.max() - raw.min() < 1e-300:
        pixels = np.full((input_size, input_size), 128, dtype=np.uint8)
        return HeatmapImage(input_size, input_size, pixels)
    norm = (raw - raw.min()) / (raw.max() - raw.min()) * 255.0
    resize = bilinear_resize if interp == "bilinear" else nearest_resize
    up = resize(norm, input_size, input_size)
    return HeatmapImage(input_size, input_size, np.round(up).astype(np.uint8))


def magnitude_map(t, input_size, interp="bilinear"):
    """Channel-averaged activation magnitude, rendered like a heatmap."""
    t_data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if t_data.ndim == 4:
        t_data = t_data[0]
    raw = np.abs(t_data).mean(axis=0)
    if raw.max() - raw.min() < 1e-300:
        return HeatmapImage(input_size, input_size, np.full((input_size, input_size), 128, np.uint8))
    norm = (raw - raw.min()) / (raw.max() - raw.min()) * 255.0
    resize = bilinear_resize if interp == "bilinear" else nearest_resize
    return HeatmapImage(input_size, input_size, np.round(resize(norm, input_size, input_size)).astype(np.uint8))


def write_pgm(image, path):
    with open(path, "wb") as f:
        f.write(f"P5\n{image.width} {image.height}\n255\n".encode())
        f.write(image.pixels.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def background_fraction(q, teacher_taps, student_taps, masks):
    """Fraction of images whose background mean log q beats the foreground mean.

    Diagnostic only; mirrors the observation that near-zero background
    activations are the easy part of the density to explain.
    """
    hits, total = 0, 0
    for t_img, s_img, mask in zip(teacher_taps, student_taps, masks):
        raw = logq_spatial(q, t_img[None], s_img[None])
        up = bilinear_resize(raw, mask.shape[0], mask.shape[1])
        bg, fg = up[~mask], up[mask]
        if bg.size and fg.size:
            total += 1
            if bg.mean() >= fg.mean():
                hits += 1
    return hits / max(1, total)


# ---------------------------------------------------------------------------
# variance spectra


def dump_variances(pairs, out_dir=None):
    """Sorted descending sigma^2 per transfer pair; one CSV per pair."""
    spectra = []
    for i, pair in enumerate(pairs):
        sig2 = np.sort(pair.q.sigma_sq().data)[::-1]
        pair_id = f"pair{i}_{pair.teacher_tap}_{pair.student_tap}"
        spectra.append(VarianceSpectrum(pair_id, sig2))
        if out_dir is not None:
            with open(f"{out_dir}/variances_{pair_id}.csv", "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["rank", "sigma_sq"])
                for rank, v in enumerate(sig2):
                    writer.writerow([rank, repr(float(v))])
    return spectra


# ---------------------------------------------------------------------------
# MI bound bench


@dataclass
class MIBenchConfig:
    steps: int = 3000
    lr: float = 0.2
    seed: int = 0
    init_sigma_sq: float = transfer.INIT_SIGMA_SQ


def mi_bound_bench(rho, n_samples, cfg=None):
    """Fit a linear-Gaussian q(t|s) on correlated Gaussian pairs and evaluate
    the variational bound B = H(t) + E[log q(t|s)] on held-out samples.

    The oracle is the closed form I(t;s) = -0.5*ln(1 - rho^2).
    """
    if abs(rho) >= 1:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    cfg = cfg or MIBenchConfig()
    rng = np.random.default_rng(cfg.seed)
    def draw(n):
        s = rng.standard_normal(n)
        t = rho * s + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
        return t[:, None], s[:, None]

    t_train, s_train = draw(n_samples)
    t_held, s_held = draw(n_samples)

    q = transfer.build_regressor(
        "linear_logit", (1,), (1,), init_sigma_sq=cfg.init_sigma_sq
    )
    t_tensor, s_tensor = Tensor(t_train), Tensor(s_train)
    params = q.params()
    for step in range(cfg.steps):
        for p in params:
            p.zero_grad()
        with GradTape() as tape:
            nll = transfer.gaussian_nll_vec(t_tensor, q, s_tensor, include_constant=True)
        backward(nll, tape)
        for p in params:
            p.data -= cfg.lr * p.grad

    w = dict(q.mean_net.named_params())
    mu = s_held @ w["linear.weight"].data + w["linear.bias"].data
    sig2 = float(q.sigma_sq().data[0])
    logq = -(0.5 * math.log(2.0 * math.pi * sig2) + (t_held - mu) ** 2 / (2.0 * sig2))
    logq = logq.ravel()
    bound = ENTROPY_STD_GAUSSIAN + float(logq.mean())
    se = float(logq.std(ddof=1)) / math.sqrt(logq.size)
    i_true = -0.5 * math.log(1.0 - rho * rho)
    return MIEstimate(bound=bound, std_error=se, i_true=i_true,
                      entropy=ENTROPY_STD_GAUSSIAN, rho=rho)
