"""Command-line surface: train a teacher, run transfer experiments, evaluate,
emit diagnostics, run the MI bench, and sweep hyperparameter grids — all from
one declarative JSON config.

Exit codes: 0 success, 2 config validation, 3 numeric failure (NaN/Inf),
4 missing artifact.
"""

import argparse
import csv
import hashlib
import json
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import data as vdata
from . import evalviz, nn, train, transfer
from .tensor import NonFiniteError, ShapeError


class ConfigError(ValueError):
    """Config validation failure; `pointer` is a JSON-pointer into the config."""

    def __init__(self, pointer, message):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}")


class MissingArtifactError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# config schema: {key: (type(s), required, default)}; unknown keys rejected

_DATASET_KEYS = {
    "num_classes": (int, True, None),
    "per_class": (int, True, None),
    "image_size": (int, True, None),
    "seed": (int, False, 0),
    "noise_sigma": ((int, float), False, 0.1),
    "test_per_class": (int, False, 50),
    "path": (str, False, None),
    "test_path": (str, False, None),
}
_TEACHER_KEYS = {
    "channels_per_group": (list, True, None),
    "checkpoint": (str, False, None),
}
_STUDENT_KEYS = {
    "hidden_width": (int, True, None),
    "drop_rate": ((int, float), False, 0.2),
}
_PAIR_KEYS = {
    "teacher_tap": (str, True, None),
    "student_tap": (str, True, None),
    "regressor": (str, True, None),
}
_TRAIN_KEYS = {
    "epochs": (int, True, None),
    "batch_size": (int, False, 64),
    "base_lr": ((int, float), False, 0.1),
    "lr_decay_factor": ((int, float), False, 0.2),
    "decay_milestones": (list, False, [0.3, 0.6, 0.8]),
    "weight_decay": ((int, float), False, 0.0),
    "momentum": ((int, float), False, 0.0),
    "grad_clip_norm": ((int, float), False, 100.0),
    "lambda1": ((int, float), False, 1.0),
    "lambda2": ((int, float), False, 0.0),
    "kd_weight": ((int, float), False, 1.6),
    "kd_temperature": ((int, float), False, 4.0),
}
_GRID_KEYS = {
    "lambda1": (list, False, None),
    "lambda2": (list, False, None),
}
_MIBENCH_KEYS = {
    "rhos": (list, True, None),
    "n_samples": (int, False, 50000),
    "steps": (int, False, 3000),
    "lr": ((int, float), False, 0.2),
    "seed": (int, False, 0),
}
_TOP_KEYS = {
    "dataset": (dict, False, None),
    "teacher": (dict, False, None),
    "student": (dict, False, None),
    "method": (str, False, "none"),
    "pairs": (list, False, []),
    "train": (dict, False, None),
    "grid": (dict, False, None),
    "seeds": (list, False, [0]),
    "subsample_m": (list, False, None),
    "output_dir": (str, False, "."),
    "mi_bench": (dict, False, None),
}

KNOWN_METHODS = ("vid_i", "vid_lp", "kd", "fitnet", "logit_mse",
                 "linear_logit_mse", "none")


def _check_section(section, keys, pointer):
    if not isinstance(section, dict):
        raise ConfigError(pointer, f"expected an object, got {type(section).__name__}")
    for k in section:
        if k not in keys:
            raise ConfigError(f"{pointer}/{k}", "unknown key")
    out = {}
    for k, (typ, required, default) in keys.items():
        if k in section:
            if not isinstance(section[k], typ) or isinstance(section[k], bool):
                raise ConfigError(f"{pointer}/{k}", f"expected {typ}, got {section[k]!r}")
            out[k] = section[k]
        elif required:
            raise ConfigError(f"{pointer}/{k}", "required key missing")
        elif default is not None:
            out[k] = default
    return out


def resolve_config(raw, require=()):
    """Validate and fill defaults; `require` lists mandatory top-level sections."""
    cfg = _check_section(raw, _TOP_KEYS, "")
    for section in require:
        if section not in cfg or cfg[section] is None:
            raise ConfigError(f"/{section}", "required section missing")
    if "dataset" in cfg:
        cfg["dataset"] = _check_section(cfg["dataset"], _DATASET_KEYS, "/dataset")
    if "teacher" in cfg:
        cfg["teacher"] = _check_section(cfg["teacher"], _TEACHER_KEYS, "/teacher")
    if "student" in cfg:
        cfg["student"] = _check_section(cfg["student"], _STUDENT_KEYS, "/student")
    if "train" in cfg:
        cfg["train"] = _check_section(cfg["train"], _TRAIN_KEYS, "/train")
    if "grid" in cfg and cfg["grid"] is not None:
        cfg["grid"] = _check_section(cfg["grid"], _GRID_KEYS, "/grid")
    if "mi_bench" in cfg and cfg["mi_bench"] is not None:
        cfg["mi_bench"] = _check_section(cfg["mi_bench"], _MIBENCH_KEYS, "/mi_bench")
    cfg["pairs"] = [
        _check_section(p, _PAIR_KEYS, f"/pairs/{i}") for i, p in enumerate(cfg.get("pairs", []))
    ]
    for part in cfg["method"].split("+"):
        if part not in KNOWN_METHODS:
            raise ConfigError("/method", f"unknown method {part!r}; known: {KNOWN_METHODS}")
    if not all(isinstance(s, int) for s in cfg["seeds"]) or not cfg["seeds"]:
        raise ConfigError("/seeds", "must be a non-empty list of integers")
    return cfg


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def load_config(path, require=()):
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise MissingArtifactError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError("", f"invalid JSON: {e}")
    return resolve_config(raw, require=require)


# ---------------------------------------------------------------------------
# builders


def build_bundle(dcfg):
    if dcfg.get("path"):
        if not os.path.exists(dcfg["path"]):
            raise MissingArtifactError(f"dataset file not found: {dcfg['path']}")
        pool = vdata.load_vidd(dcfg["path"])
        test = vdata.load_vidd(dcfg["test_path"]) if dcfg.get("test_path") else None
        if test is None:
            raise ConfigError("/dataset/test_path", "required when /dataset/path is set")
        return train.DataBundle.from_specs(pool, test, seed=dcfg["seed"]), None
    pool, masks = vdata.generate_sprites(
        dcfg["num_classes"], dcfg["per_class"], dcfg["image_size"],
        seed=dcfg["seed"], noise_sigma=dcfg["noise_sigma"],
    )
    test, test_masks = vdata.generate_sprites(
        dcfg["num_classes"], dcfg["test_per_class"], dcfg["image_size"],
        seed=dcfg["seed"] + 10_000, noise_sigma=dcfg["noise_sigma"],
    )
    return train.DataBundle.from_specs(pool, test, seed=dcfg["seed"]), (pool, test, masks, test_masks)


def build_teacher(cfg):
    d = cfg["dataset"]
    shape = (1, d["image_size"], d["image_size"])
    return nn.build_cnn(cfg["teacher"]["channels_per_group"], d["num_classes"], shape)


def build_student(cfg):
    d = cfg["dataset"]
    input_dim = d["image_size"] * d["image_size"]
    return nn.build_mlp(
        input_dim, cfg["student"]["hidden_width"], d["num_classes"],
        drop_rate=cfg["student"]["drop_rate"],
    )


def _tap_shape(net, tap, cfg):
    """Activation shape (without batch) at a named tap, found by a dry run."""
    d = cfg["dataset"]
    x = np.zeros((1, 1, d["image_size"], d["image_size"]))
    _, taps = nn.forward_with_taps(net, train._net_input(net, x), "eval")
    if tap not in taps:
        raise ConfigError("/pairs", f"tap {tap!r} not found; have {sorted(taps)}")
    return taps[tap].shape[1:]


def build_objective(cfg, teacher, student):
    """Translate a method string plus pair list into a transfer objective."""
    tcfg = cfg["train"]
    method_parts = cfg["method"].split("+")
    num_classes = cfg["dataset"]["num_classes"]
    h = cfg["student"]["hidden_width"]
    pairs, mse_pairs = [], []
    for part in method_parts:
        if part in ("vid_i", "fitnet"):
            if not cfg["pairs"]:
                raise ConfigError("/pairs", f"method {part!r} needs at least one pair")
            for p in cfg["pairs"]:
                s_shape = _tap_shape(student, p["student_tap"], cfg)
                t_shape = _tap_shape(teacher, p["teacher_tap"], cfg)
                if part == "vid_i":
                    q = transfer.build_regressor(p["regressor"], s_shape, t_shape)
                    pairs.append(transfer.TransferPair(p["teacher_tap"], p["student_tap"], q))
                else:
                    adaptor = transfer.build_mean_net(p["regressor"], s_shape, t_shape)
                    mse_pairs.append(transfer.MsePair(p["teacher_tap"], p["student_tap"], adaptor))
        elif part == "vid_lp":
            q = transfer.build_regressor("linear_logit", (h,), (num_classes,))
            pairs.append(transfer.TransferPair("logits", "penultimate", q))
        elif part == "logit_mse":
            mse_pairs.append(transfer.MsePair("logits", "logits", adaptor=None))
        elif part == "linear_logit_mse":
            adaptor = transfer.build_mean_net("linear_logit", (h,), (num_classes,))
            mse_pairs.append(transfer.MsePair("logits", "penultimate", adaptor))
        # "kd" and "none" add no pairs
    return transfer.TransferObjective(
        lambda1=tcfg["lambda1"],
        lambda2=tcfg["lambda2"] if (pairs or mse_pairs) else 0.0,
        pairs=pairs,
        mse_pairs=mse_pairs,
        kd_temperature=tcfg["kd_temperature"],
        kd_weight=tcfg["kd_weight"] if "kd" in method_parts else 0.0,
    )


def train_config_from(cfg, seed, overrides=None):
    tcfg = dict(cfg["train"])
    kd_keys = {"kd_weight", "kd_temperature"}
    kwargs = {k: v for k, v in tcfg.items() if k not in kd_keys}
    kwargs["decay_milestones"] = tuple(kwargs.get("decay_milestones", (0.3, 0.6, 0.8)))
    kwargs["seed"] = seed
    if overrides:
        kwargs.update(overrides)
    return train.TrainConfig(**kwargs)


def write_manifest(out_dir, command, cfg, results, artifacts, elapsed):
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seeds": cfg.get("seeds", []),
        "artifacts": artifacts,
        "wall_clock_sec": round(elapsed, 3),
        "results": results,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(cfg, out_dir):
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    bundle, _ = build_bundle(cfg["dataset"])
    teacher = build_teacher(cfg)
    ckpt = os.path.join(out_dir, "teacher.ckpt")
    metrics = os.path.join(out_dir, "teacher_metrics.jsonl")
    result = train.train_teacher(
        teacher, bundle, train_config_from(cfg, cfg["seeds"][0]),
        metrics_path=metrics,
    )
    # best-validation weights are restored in place; store them unprefixed
    nn.save_checkpoint(teacher, ckpt)
    results = [{
        "seed": result.seed,
        "val_acc": result.final_val_acc,
        "test_acc": result.test_acc,
        "best_epoch": result.best_epoch,
    }]
    write_manifest(out_dir, "train-teacher", cfg, results,
                   {"checkpoint": ckpt, "metrics": metrics}, time.time() - t0)
    print(f"teacher test accuracy {result.test_acc:.4f} -> {ckpt}")
    return 0


def _load_teacher(cfg, out_dir):
    teacher = build_teacher(cfg)
    # the teacher artifact lives next to the config's output_dir even when the
    # command's own outputs are redirected with --out
    default = os.path.join(cfg.get("output_dir", out_dir), "teacher.ckpt")
    ckpt = cfg["teacher"].get("checkpoint") or default
    if not os.path.exists(ckpt):
        raise MissingArtifactError(f"teacher checkpoint not found: {ckpt}")
    try:
        nn.load_checkpoint(teacher, ckpt)
    except (KeyError, ShapeError) as e:
        raise MissingArtifactError(f"checkpoint {ckpt} does not match the configured teacher: {e}")
    return teacher


def _run_cell(cfg, teacher, bundle, m, seed, out_dir, save_epoch0=False):
    """One (subsample size, seed) experiment cell. Independent of other cells."""
    student = build_student(cfg)
    objective = build_objective(cfg, teacher, student)
    tag = f"{cfg['method'].replace('+', '_')}_m{m if m is not None else 'all'}_s{seed}"
    ckpt = os.path.join(out_dir, f"student_{tag}.ckpt")
    metrics = os.path.join(out_dir, f"student_{tag}.jsonl")
    if save_epoch0:
        nn.init_params(student, seed)
        for i, pair in enumerate(objective.pairs):
            nn.init_params(pair.q.mean_net, seed + 1000 + i)
        entries = [(n, p.data) for n, p in train._system_named_params(student, objective)]
        entries += list(train._system_named_state(student, objective))
        nn.save_arrays(entries, os.path.join(out_dir, f"student_{tag}_epoch0.ckpt"))
    result = train.train_student(
        teacher, student, objective, bundle,
        train_config_from(cfg, seed), checkpoint_path=ckpt, metrics_path=metrics,
    )
    return {
        "method": cfg["method"], "m": m, "seed": seed,
        "lambda1": cfg["train"]["lambda1"], "lambda2": cfg["train"]["lambda2"],
        "val_acc": result.final_val_acc, "best_val_acc": result.best_val_acc,
        "test_acc": result.test_acc, "checkpoint": ckpt, "metrics": metrics,
    }


def _subsampled_bundle(cfg, full_pool, test, m, seed):
    pool = full_pool if m is None else train.subsample_per_class(full_pool, m, seed=seed)
    return train.DataBundle.from_specs(pool, test, seed=cfg["dataset"]["seed"])


def cmd_distill(cfg, out_dir, threads=1, save_epoch0=False):
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    teacher = _load_teacher(cfg, out_dir)
    if cfg["dataset"].get("path"):
        full_pool = vdata.load_vidd(cfg["dataset"]["path"])
        test = vdata.load_vidd(cfg["dataset"]["test_path"])
    else:
        d = cfg["dataset"]
        full_pool, _ = vdata.generate_sprites(
            d["num_classes"], d["per_class"], d["image_size"],
            seed=d["seed"], noise_sigma=d["noise_sigma"])
        test, _ = vdata.generate_sprites(
            d["num_classes"], d["test_per_class"], d["image_size"],
            seed=d["seed"] + 10_000, noise_sigma=d["noise_sigma"])

    ms = cfg.get("subsample_m") or [None]
    cells = [(m, seed) for m in ms for seed in cfg["seeds"]]

    def run(cell):
        m, seed = cell
        bundle = _subsampled_bundle(cfg, full_pool, test, m, seed)
        return _run_cell(cfg, teacher, bundle, m, seed, out_dir, save_epoch0=save_epoch0)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]

    summary = os.path.join(out_dir, "summary.csv")
    chash = config_hash(cfg)
    with open(summary, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config_hash", "method", "m", "lambda1", "lambda2", "seed",
                    "val_acc", "test_acc"])
        for r in results:
            w.writerow([chash, r["method"], r["m"], r["lambda1"], r["lambda2"],
                        r["seed"], r["val_acc"], r["test_acc"]])
        w.writerow([])
        w.writerow(["config_hash", "method", "m", "seeds", "test_acc_mean", "test_acc_sd"])
        for m in ms:
            accs = [r["test_acc"] for r in results if r["m"] == m]
            sd = statistics.stdev(accs) if len(accs) > 1 else 0.0
            w.writerow([chash, cfg["method"], m,
                        " ".join(map(str, cfg["seeds"])),
                        statistics.mean(accs), sd])
    write_manifest(out_dir, "distill", cfg, results, {"summary": summary}, time.time() - t0)
    for m in ms:
        accs = [r["test_acc"] for r in results if r["m"] == m]
        sd = statistics.stdev(accs) if len(accs) > 1 else 0.0
        print(f"{cfg['method']} m={m if m is not None else 'all'}: "
              f"test acc {statistics.mean(accs):.4f} ± {sd:.4f} over {len(accs)} seeds")
    return 0


def cmd_eval(cfg, out_dir, checkpoint):
    if not os.path.exists(checkpoint):
        raise MissingArtifactError(f"checkpoint not found: {checkpoint}")
    bundle, _ = build_bundle(cfg["dataset"])
    student = build_student(cfg)
    teacher = build_teacher(cfg)
    objective = build_objective(cfg, teacher, student)
    train.load_system_checkpoint(student, objective, checkpoint)
    xtest = vdata.normalize_images(bundle.test.images, bundle.stats)
    acc = evalviz.evaluate_accuracy(student, xtest, bundle.test.labels)
    print(json.dumps({"checkpoint": checkpoint, "test_acc": acc}))
    return 0


def cmd_heatmap(cfg, out_dir, checkpoint, image_indices, interp="bilinear"):
    if not os.path.exists(checkpoint):
        raise MissingArtifactError(f"checkpoint not found: {checkpoint}")
    os.makedirs(out_dir, exist_ok=True)
    bundle, _ = build_bundle(cfg["dataset"])
    teacher = _load_teacher(cfg, out_dir)
    student = build_student(cfg)
    objective = build_objective(cfg, teacher, student)
    if not objective.pairs:
        raise ConfigError("/method", "heatmaps need a method with variational pairs")
    train.load_system_checkpoint(student, objective, checkpoint)

    xtest = vdata.normalize_images(bundle.test.images, bundle.stats)
    n = len(xtest)
    for idx in image_indices:
        if not 0 <= idx < n:
            raise IndexError(f"image index {idx} out of range [0, {n})")
    report = {"checkpoint": checkpoint, "images": {}}
    size = cfg["dataset"]["image_size"]
    tag = os.path.splitext(os.path.basename(checkpoint))[0]
    for idx in image_indices:
        x = xtest[idx : idx + 1]
        _, t_taps = nn.forward_with_taps(teacher, train._net_input(teacher, x), "eval")
        _, s_taps = nn.forward_with_taps(student, train._net_input(student, x), "eval")
        entry = {}
        for i, pair in enumerate(objective.pairs):
            if pair.q.layout != "conv":
                continue
            t = t_taps[pair.teacher_tap].data
            s = s_taps[pair.student_tap]
            raw = evalviz.logq_spatial(pair.q, t, s)
            img = evalviz.emit_heatmap(pair.q, t, s, size, interp=interp)
            path = os.path.join(out_dir, f"heatmap_{tag}_img{idx}_pair{i}.pgm")
            evalviz.write_pgm(img, path)
            entry[f"pair{i}_mean_logq"] = float(raw.mean())
            mag = evalviz.magnitude_map(t, size, interp=interp)
            evalviz.write_pgm(mag, os.path.join(out_dir, f"magnitude_{tag}_img{idx}_pair{i}.pgm"))
        report["images"][str(idx)] = entry
    rpath = os.path.join(out_dir, f"heatmap_report_{tag}.json")
    with open(rpath, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    print(f"wrote heatmaps for {len(image_indices)} images -> {out_dir}")
    return 0


def cmd_variances(cfg, out_dir, checkpoint):
    if not os.path.exists(checkpoint):
        raise MissingArtifactError(f"checkpoint not found: {checkpoint}")
    os.makedirs(out_dir, exist_ok=True)
    teacher = build_teacher(cfg)
    student = build_student(cfg)
    objective = build_objective(cfg, teacher, student)
    if not objective.pairs:
        raise ConfigError("/method", "variance spectra need a method with variational pairs")
    train.load_system_checkpoint(student, objective, checkpoint)
    spectra = evalviz.dump_variances(objective.pairs, out_dir=out_dir)
    for s in spectra:
        print(f"{s.pair_id}: max {s.sigma_sq[0]:.6g}, min {s.sigma_sq[-1]:.6g}")
    return 0


def cmd_mi_bench(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    mcfg = cfg.get("mi_bench")
    if mcfg is None:
        raise ConfigError("/mi_bench", "required section missing")
    if not mcfg["rhos"]:
        raise ConfigError("/mi_bench/rhos", "need at least one correlation value")
    bench = evalviz.MIBenchConfig(steps=mcfg["steps"], lr=mcfg["lr"], seed=mcfg["seed"])
    report = []
    for rho in mcfg["rhos"]:
        est = evalviz.mi_bound_bench(float(rho), mcfg["n_samples"], bench)
        report.append(est.to_json_dict())
        print(f"rho={rho}: bound {est.bound:.6f} nats, true {est.i_true:.6f}, se {est.std_error:.6f}")
    path = os.path.join(out_dir, "mi_bench.json")
    with open(path, "w") as f:
        json.dump({"config_hash": config_hash(cfg), "estimates": report}, f, indent=2, sort_keys=True)
    return 0


def cmd_grid(cfg, out_dir, threads=1):
    t0 = time.time()
    os.makedirs(out_dir, exist_ok=True)
    gcfg = cfg.get("grid")
    if not gcfg:
        raise ConfigError("/grid", "required section missing")
    l1s = gcfg.get("lambda1") or [cfg["train"]["lambda1"]]
    l2s = gcfg.get("lambda2") or [cfg["train"]["lambda2"]]
    teacher = _load_teacher(cfg, out_dir)
    bundle, _ = build_bundle(cfg["dataset"])
    candidates = [{"lambda1": float(a), "lambda2": float(b)} for a in l1s for b in l2s]

    def evaluate(cand):
        accs = []
        for seed in cfg["seeds"]:
            student = build_student(cfg)
            local = dict(cfg)
            local["train"] = {**cfg["train"], **cand}
            objective = build_objective(local, teacher, student)
            result = train.train_student(
                teacher, student, objective, bundle, train_config_from(local, seed))
            accs.append(result.best_val_acc)
        return statistics.mean(accs)

    best, table = train.grid_select(candidates, evaluate)
    path = os.path.join(out_dir, "grid.csv")
    chash = config_hash(cfg)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config_hash", "seeds", "lambda1", "lambda2", "val_acc"])
        for row in table:
            w.writerow([chash, " ".join(map(str, cfg["seeds"])),
                        row["lambda1"], row["lambda2"], row["val_acc"]])
    write_manifest(out_dir, "grid", cfg, table, {"grid": path, "best": best}, time.time() - t0)
    print(f"best cell: lambda1={best['lambda1']} lambda2={best['lambda2']}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="vidkit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train-teacher", "distill", "eval", "heatmap", "variances",
                 "mi-bench", "grid"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--seed", type=int, default=None, help="override the seed list")
        s.add_argument("--out", default=None, help="override output_dir")
        s.add_argument("--threads", type=int, default=1,
                       help="parallel independent runs; never affects within-run numerics")
        if name in ("eval", "heatmap", "variances"):
            s.add_argument("--checkpoint", required=True)
        if name == "heatmap":
            s.add_argument("--images", type=int, nargs="+", default=[0])
            s.add_argument("--interp", choices=("bilinear", "nearest"), default="bilinear")
        if name == "distill":
            s.add_argument("--save-epoch0", action="store_true",
                           help="also write the initialized (untrained) system checkpoint")
    return p


_REQUIRED = {
    "train-teacher": ("dataset", "teacher", "train"),
    "distill": ("dataset", "teacher", "student", "train"),
    "eval": ("dataset", "teacher", "student", "train"),
    "heatmap": ("dataset", "teacher", "student", "train"),
    "variances": ("dataset", "teacher", "student", "train"),
    "mi-bench": ("mi_bench",),
    "grid": ("dataset", "teacher", "student", "train", "grid"),
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, require=_REQUIRED[args.command])
        if args.seed is not None:
            cfg["seeds"] = [args.seed]
        out_dir = args.out or cfg.get("output_dir", ".")
        if args.command == "train-teacher":
            return cmd_train_teacher(cfg, out_dir)
        if args.command == "distill":
            return cmd_distill(cfg, out_dir, threads=args.threads,
                               save_epoch0=args.save_epoch0)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir, args.checkpoint)
        if args.command == "heatmap":
            return cmd_heatmap(cfg, out_dir, args.checkpoint, args.images, interp=args.interp)
        if args.command == "variances":
            return cmd_variances(cfg, out_dir, args.checkpoint)
        if args.command == "mi-bench":
            return cmd_mi_bench(cfg, out_dir)
        if args.command == "grid":
            return cmd_grid(cfg, out_dir, threads=args.threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NonFiniteError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (MissingArtifactError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
