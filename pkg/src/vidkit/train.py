"""SGD training loop with weight decay, stepwise LR decay, global gradient
clipping, seeded subsampling, and validation-based grid selection.

A run is fully determined by (config, seed): batch order, dropout masks and
initialization all come from one seeded generator, so reruns produce
bit-identical checkpoints.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import data as vdata
from . import nn
from . import tensor as T
from . import transfer
from .tensor import GradTape, Tensor, backward


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 0.1
    lr_decay_factor: float = 0.2
    decay_milestones: tuple = (0.3, 0.6, 0.8)
    weight_decay: float = 0.0
    momentum: float = 0.0
    grad_clip_norm: float = 100.0
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 0.0

    def __post_init__(self):
        ms = tuple(self.decay_milestones)
        if any(not 0 < m < 1 for m in ms) or any(a >= b for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing in (0,1): {ms}")
        if self.base_lr <= 0 or self.lr_decay_factor <= 0:
            raise ValueError("rates must be positive")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be > 0")
        self.decay_milestones = ms


class OptimizerState:
    def __init__(self, params):
        self.params = list(params)
        self.buffers = [np.zeros_like(p.data) for p in self.params]
        self.lr = 0.0
        self.epoch = 0


@dataclass
class RunResult:
    final_train_acc: float
    final_val_acc: float
    test_acc: float
    loss_history: list
    checkpoint_path: str | None
    seed: int
    best_epoch: int = 0
    best_val_acc: float = 0.0


def lr_at(epoch, cfg):
    """base_lr * factor^(milestones passed); milestones are epoch fractions."""
    passed = sum(1 for m in cfg.decay_milestones if epoch >= int(m * cfg.epochs))
    return cfg.base_lr * cfg.lr_decay_factor**passed


def clip_grad_norm(params, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is None:
            raise ValueError("clip_grad_norm: parameter has no gradient")
        total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad *= scale
    return scale


def sgd_step(params, state, cfg):
    """v <- momentum*v + g + wd*w; w <- w - lr*v."""
    for p, v in zip(params, state.buffers):
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient")
        v *= cfg.momentum
        v += p.grad
        if cfg.weight_decay:
            v += cfg.weight_decay * p.data
        p.data -= state.lr * v


def subsample_per_class(spec, m, seed):
    """Keep exactly m examples per class, chosen by a seeded shuffle."""
    rng = np.random.default_rng(seed)
    keep = []
    for idx in vdata.per_class_indices(spec.labels, spec.num_classes):
        if len(idx) < m:
            raise ValueError(f"class has only {len(idx)} examples, need {m}")
        keep.append(rng.permutation(idx)[:m])
    return spec.subset(np.sort(np.concatenate(keep)), spec.name + f"-m{m}")


def scaled_epochs(ref_steps, n_train, batch_size, max_epochs=100000):
    """Epoch count giving roughly ref_steps optimizer updates for this data size."""
    steps_per_epoch = max(1, math.ceil(n_train / batch_size))
    return min(max_epochs, max(1, round(ref_steps / steps_per_epoch)))


@dataclass
class DataBundle:
    train: vdata.DatasetSpec
    val: vdata.DatasetSpec
    test: vdata.DatasetSpec
    stats: tuple

    @classmethod
    def from_specs(cls, train_pool, test, val_fraction=0.2, seed=0):
        train, val = vdata.split_train_val(train_pool, fraction=val_fraction, seed=seed)
        stats = vdata.compute_norm_stats(train)
        return cls(train, val, test, stats)


def _net_input(net, images):
    x = images
    if net.input_shape is not None and len(net.input_shape) == 1:
        x = images.reshape(images.shape[0], -1)
    return Tensor(x)


def eval_accuracy(net, images, labels, batch_size=256):
    """Argmax accuracy in eval mode; argmax ties resolve to the lowest index."""
    correct = 0
    for start in range(0, len(images), batch_size):
        xb = images[start : start + batch_size]
        yb = labels[start : start + batch_size]
        logits, _ = nn.forward_with_taps(net, _net_input(net, xb), "eval")
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / len(images)


def _precompute_teacher_taps(teacher, images, tap_names, batch_size=256):
    """Teacher is frozen and eval-mode deterministic, so taps are computed once."""
    chunks = {name: [] for name in tap_names}
    for start in range(0, len(images), batch_size):
        xb = images[start : start + batch_size]
        _, taps = nn.forward_with_taps(teacher, _net_input(teacher, xb), "eval")
        for name in tap_names:
            chunks[name].append(taps[name].data)
    return {name: np.concatenate(parts) for name, parts in chunks.items()}


def train_student(teacher, student, objective, bundle, cfg, checkpoint_path=None,
                  metrics_path=None, init_student=True):
    """Train `student` (and the variational/adaptor parameters) under the
    transfer objective; `teacher` stays frozen in eval mode throughout.

    With no teacher and an empty objective this is plain supervised training.
    """
    rng = np.random.default_rng(cfg.seed)
    if init_student:
        nn.init_params(student, cfg.seed)
        for i, pair in enumerate(objective.pairs):
            nn.init_params(pair.q.mean_net, cfg.seed + 1000 + i)
        for i, pair in enumerate(objective.mse_pairs):
            if pair.adaptor is not None:
                nn.init_params(pair.adaptor, cfg.seed + 1000 + i)

    xtr = vdata.normalize_images(bundle.train.images, bundle.stats)
    ytr = bundle.train.labels
    xval = vdata.normalize_images(bundle.val.images, bundle.stats)
    xtest = vdata.normalize_images(bundle.test.images, bundle.stats)

    teacher_tap_names = sorted(
        {p.teacher_tap for p in objective.pairs}
        | {p.teacher_tap for p in objective.mse_pairs}
        | ({"logits"} if objective.kd_weight > 0 else set())
    )
    teacher_taps_all = (
        _precompute_teacher_taps(teacher, xtr, teacher_tap_names) if teacher_tap_names else {}
    )

    params = student.params() + objective.transfer_params()
    state = OptimizerState(params)
    named = _system_named_params(student, objective)

    history = []
    best = {"val_acc": -1.0, "epoch": -1, "state": None}
    try:
        for epoch in range(cfg.epochs):
            state.lr = lr_at(epoch, cfg)
            state.epoch = epoch
            order = rng.permutation(len(xtr))
            report = None
            for start in range(0, len(xtr), cfg.batch_size):
                sel = order[start : start + cfg.batch_size]
                xb, yb = xtr[sel], ytr[sel]
                t_taps = {
                    name: Tensor(arr[sel]) for name, arr in teacher_taps_all.items()
                }
                for p in params:
                    p.zero_grad()
                ctx = nn.ForwardContext(training=True, rng=rng)
                with GradTape() as tape:
                    logits, s_taps = student.forward(_net_input(student, xb), ctx)
                    s_taps["logits"] = logits
                    task = T.cross_entropy(logits, yb)
                    total, report = transfer.vid_loss(task, objective, t_taps, s_taps, ctx=ctx)
                if not math.isfinite(total.item()):
                    raise T.NonFiniteError(
                        f"non-finite loss at epoch {epoch} (total={total.item()})"
                    )
                backward(total, tape)
                clip_grad_norm(params, cfg.grad_clip_norm)
                sgd_step(params, state, cfg)
            val_acc = eval_accuracy(student, xval, bundle.val.labels)
            entry = {"epoch": epoch, "val_accuracy": val_acc}
            entry.update(report.to_json_dict() if report else {})
            history.append(entry)
            if val_acc > best["val_acc"]:
                best = {
                    "val_acc": val_acc,
                    "epoch": epoch,
                    "state": [(n, p.data.copy()) for n, p in named]
                    + [(n, a.copy()) for n, a in _system_named_state(student, objective)],
                }
    except (T.NonFiniteError, T.ShapeError) as e:
        raise type(e)(f"run aborted at epoch {len(history)}: {e}") from e

    final_train_acc = eval_accuracy(student, xtr, ytr)
    final_val_acc = eval_accuracy(student, xval, bundle.val.labels)
    # restore the best-validation weights before the test evaluation
    if best["state"] is not None:
        lookup = dict(best["state"])
        for n, p in named:
            p.data[...] = lookup[n]
        for n, a in _system_named_state(student, objective):
            a[...] = lookup[n]
    test_acc = eval_accuracy(student, xtest, bundle.test.labels)

    if checkpoint_path is not None:
        entries = [(n, p.data) for n, p in named] + list(_system_named_state(student, objective))
        nn.save_arrays(entries, checkpoint_path)
    if metrics_path is not None:
        with open(metrics_path, "w") as f:
            for entry in history:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    return RunResult(
        final_train_acc=final_train_acc,
        final_val_acc=final_val_acc,
        test_acc=test_acc,
        loss_history=history,
        checkpoint_path=str(checkpoint_path) if checkpoint_path else None,
        seed=cfg.seed,
        best_epoch=best["epoch"],
        best_val_acc=best["val_acc"],
    )


def _system_named_params(student, objective):
    named = [(f"student.{n}", p) for n, p in student.named_params()]
    for i, pair in enumerate(objective.pairs):
        named += pair.q.named_params(prefix=f"pair{i}.")
    for i, pair in enumerate(objective.mse_pairs):
        if pair.adaptor is not None:
            named += [(f"mse{i}.{n}", p) for n, p in pair.adaptor.named_params()]
    return named


def _system_named_state(student, objective):
    named = [(f"student.{n}", a) for n, a in student.named_state()]
    for i, pair in enumerate(objective.pairs):
        named += [(f"pair{i}.mean.{n}", a) for n, a in pair.q.mean_net.named_state()]
    for i, pair in enumerate(objective.mse_pairs):
        if pair.adaptor is not None:
            named += [(f"mse{i}.{n}", a) for n, a in pair.adaptor.named_state()]
    return named


def load_system_checkpoint(student, objective, path):
    loaded = nn.load_arrays(path)
    for n, p in _system_named_params(student, objective):
        p.data[...] = loaded[n]
    for n, a in _system_named_state(student, objective):
        if n in loaded:
            a[...] = loaded[n]


def train_teacher(teacher, bundle, cfg, checkpoint_path=None, metrics_path=None):
    """Plain supervised training of the teacher network."""
    objective = transfer.TransferObjective(lambda1=1.0, lambda2=0.0)
    return train_student(
        None, teacher, objective, bundle, cfg,
        checkpoint_path=checkpoint_path, metrics_path=metrics_path,
    )


def grid_select(candidates, evaluate):
    """Run `evaluate` (returning validation accuracy) on every grid cell.

    Best cell is the highest accuracy; ties prefer smaller lambda2, then
    smaller lambda1 (less regularization). Returns (best_candidate, table).
    """
    cands = list(candidates)
    if not cands:
        raise ValueError("empty hyperparameter grid")
    table = []
    for cand in cands:
        acc = evaluate(cand)
        table.append({**cand, "val_acc": acc})
    best = max(
        table,
        key=lambda row: (row["val_acc"], -row.get("lambda2", 0.0), -row.get("lambda1", 0.0)),
    )
    best_cand = {k: v for k, v in best.items() if k != "val_acc"}
    return best_cand, table
