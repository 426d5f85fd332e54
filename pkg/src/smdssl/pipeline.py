"""Run orchestration: wiring configs, data, training, and analysis into
reproducible run directories.

Layout of a run directory:
    config.json      echo of the validated config (sufficient to re-run)
    metadata.json    environment notes (thread cap, versions, timestamps)
    checkpoints/     epoch_N.ckpt and final.ckpt from pre-training
    curves.csv       per-step global/component/total loss series
    ft/<task>/<strategy>/   fine-tuned model.ckpt and fit.json
    report.json      per-task evaluation entries
"""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .data import build_ft_dataset, compute_stats, filter_visits, make_split, read_visits
from .models import checkpoint_header, init_model, load_checkpoint, save_checkpoint
from .seeding import derive_rng
from .training import cka_block_report, evaluate, finetune, p_view_samples, pretrain

STRATEGIES = ("linear", "full_ft")


def apply_thread_cap():
    """Cap BLAS pools to SMDSSL_THREADS (if set); returns what was applied."""
    value = os.environ.get("SMDSSL_THREADS")
    if not value:
        return {"requested": None, "applied": False}
    limit = int(value)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=limit)
        return {"requested": limit, "applied": True}
    except ImportError:
        return {"requested": limit, "applied": False}


def write_metadata(out_dir, extra=None):
    meta = {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "dtype": "float64",
        "threads": apply_thread_cap(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    meta.update(extra or {})
    with open(os.path.join(out_dir, "metadata.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


class LoadedData:
    """Visits plus the derived split and development-split statistics."""

    def __init__(self, cfg: RunConfig):
        if not os.path.exists(cfg.data.visits):
            raise FileNotFoundError(f"visits file not found: {cfg.data.visits}")
        self.visits = read_visits(cfg.data.visits)
        self.split = make_split(self.visits, cfg.seed)
        dev = filter_visits(self.visits, self.split.development())
        self.stats = compute_stats(dev)
        self.dev_visits = dev
        self.p_view = p_view_samples(cfg.data.sample_rate, cfg.augment.signal.segment_seconds)
        self.dims = {
            "static_dim": int(self.visits[0].static.shape[0]),
            "structured_dim": int(self.visits[0].structured.shape[1]),
            "channels": int(self.visits[0].signals.shape[1]),
        }


def run_pretrain(cfg: RunConfig):
    """Pre-train on the development split; returns the final checkpoint path."""
    data = LoadedData(cfg)
    out_dir = cfg.out_dir
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    cfg.to_json(os.path.join(out_dir, "config.json"))
    write_metadata(out_dir, {"stage": "pretrain", "n_visits": len(data.visits)})
    model = init_model(cfg.model, data.dims, cfg.seed)
    curves = pretrain(
        data.dev_visits, model, cfg.loss, cfg.augment, cfg.train,
        data.stats, cfg.data.sample_rate, cfg.seed, checkpoint_dir=ckpt_dir,
    )
    curves.write_csv(os.path.join(out_dir, "curves.csv"))
    final = os.path.join(ckpt_dir, "final.ckpt")
    save_checkpoint(model, final)
    return {"checkpoint": final, "curves": curves, "model": model, "data": data}


def run_finetune(cfg: RunConfig, task, strategy, checkpoint=None, out_dir=None):
    """Fine-tune from a checkpoint (or from random init when absent)."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {STRATEGIES}")
    data = LoadedData(cfg)
    if checkpoint is not None:
        if not os.path.exists(checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
        model = load_checkpoint(checkpoint)
    else:
        model = init_model(cfg.model, data.dims, cfg.seed)
    result = finetune(
        model, data.visits, data.split, task, strategy, cfg.train,
        data.stats, data.p_view, cfg.seed, cfg.data.label_fraction,
    )
    out_dir = out_dir or cfg.out_dir
    ft_dir = os.path.join(out_dir, "ft", task, strategy)
    os.makedirs(ft_dir, exist_ok=True)
    config_echo = os.path.join(out_dir, "config.json")
    if not os.path.exists(config_echo):
        cfg.to_json(config_echo)  # fine-tuning from random init has no pretrain echo
    save_checkpoint(model, os.path.join(ft_dir, "model.ckpt"))
    with open(os.path.join(ft_dir, "fit.json"), "w", encoding="utf-8") as f:
        json.dump({
            "task": task, "strategy": strategy,
            "best_val_auroc": result.best_val_auroc,
            "best_epoch": result.best_epoch,
            "val_trace": result.val_trace,
            "epochs_run": result.epochs_run,
            "from_checkpoint": checkpoint,
        }, f, indent=2)
        f.write("\n")
    return {"model": model, "fit": result, "ft_dir": ft_dir, "data": data}


def run_eval(run_dir, task):
    """Evaluate a run dir holding fine-tuned models for both strategies."""
    config_path = os.path.join(run_dir, "config.json")
    if not os.path.exists(config_path):
        raise FileNotFoundError(f"run directory has no config.json: {run_dir}")
    from .config import load_run_config

    cfg = load_run_config(config_path)
    data = LoadedData(cfg)
    fits = []
    models = {}
    for strategy in STRATEGIES:
        ft_dir = os.path.join(run_dir, "ft", task, strategy)
        fit_path = os.path.join(ft_dir, "fit.json")
        model_path = os.path.join(ft_dir, "model.ckpt")
        if not (os.path.exists(fit_path) and os.path.exists(model_path)):
            raise FileNotFoundError(
                f"missing fine-tuning artifacts for strategy {strategy!r} in {run_dir}")
        with open(fit_path, "r", encoding="utf-8") as f:
            fit = json.load(f)
        from .training import FitResult

        fits.append(FitResult(strategy, task, fit["best_val_auroc"], fit["best_epoch"],
                              fit["val_trace"], fit["epochs_run"]))
        models[strategy] = load_checkpoint(model_path)
    test_trajs, _ = build_ft_dataset(filter_visits(data.visits, data.split.test), task, data.stats)
    entry = evaluate(fits, models, test_trajs, data.p_view, cfg.seed,
                     cfg.train.bootstrap_resamples, cfg.train.eval_batch_size)
    report_path = os.path.join(run_dir, "report.json")
    report = {}
    if os.path.exists(report_path):
        with open(report_path, "r", encoding="utf-8") as f:
            report = json.load(f)
    report[task] = entry
    with open(report_path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return entry


def run_beta_sweep(cfg: RunConfig, grid, task="elevated_map"):
    """Sensitivity curve over the component-loss weight.

    Every point shares data, seeds, and the fixed global weight; emits one
    row per weight with validation AUROC and test CI columns.
    """
    if not grid:
        raise ConfigError("beta sweep grid is empty")
    rows = []
    base_out = cfg.out_dir
    for beta in grid:
        import copy as _copy

        point = _copy.deepcopy(cfg)
        point.loss.component_weight = float(beta)
        point.out_dir = os.path.join(base_out, f"beta_{beta:g}")
        pt = run_pretrain(point)
        for strategy in STRATEGIES:
            run_finetune(point, task, strategy, checkpoint=pt["checkpoint"],
                         out_dir=point.out_dir)
        entry = run_eval(point.out_dir, task)
        rows.append({
            "beta": float(beta),
            "val_auroc": max(entry["validation_auroc"].values()),
            "strategy": entry["strategy"],
            "test_auroc": entry["auroc"],
            "ci_lo": entry["auroc_ci95"][0],
            "ci_hi": entry["auroc_ci95"][1],
        })
    csv_path = os.path.join(base_out, "beta_sweep.csv")
    os.makedirs(base_out, exist_ok=True)
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write("beta,val_auroc,strategy,test_auroc,ci_lo,ci_hi\n")
        for row in rows:
            f.write(f"{row['beta']:g},{row['val_auroc']:.6f},{row['strategy']},"
                    f"{row['test_auroc']:.6f},{row['ci_lo']:.6f},{row['ci_hi']:.6f}\n")
    return rows, csv_path


def build_probe_signals(data: LoadedData, probe_seed=0, probe_size=512):
    """A fixed batch of model-input signal segments from admitted windows."""
    from .data import build_pt_dataset

    trajs = build_pt_dataset(data.dev_visits, data.stats, seed=derive_rng(probe_seed, "probe").integers(1 << 30))
    segments = []
    for traj in trajs:
        for t in range(traj.signals.shape[0]):
            if not traj.signal_missing[t]:
                segments.append(traj.signals[t, :, : data.p_view])
            if len(segments) >= probe_size:
                break
        if len(segments) >= probe_size:
            break
    if len(segments) < 2:
        raise ValueError("probe set needs at least two signals")
    return np.stack(segments)


def run_cka(run_dirs, probe_size=512, out_path=None):
    """Per-stage and whole-encoder CKA across three pre-trained runs.

    ``run_dirs`` maps the roles smd/component_only/global_only to run
    directories whose checkpoints share one architecture and dataset.
    """
    headers = {}
    models = {}
    for role, run_dir in run_dirs.items():
        ckpt = os.path.join(run_dir, "checkpoints", "final.ckpt")
        if not os.path.exists(ckpt):
            raise FileNotFoundError(f"no final checkpoint in {run_dir}")
        headers[role] = checkpoint_header(ckpt)
        models[role] = load_checkpoint(ckpt)
    archs = {role: h["config"]["signal_encoder"] for role, h in headers.items()}
    first = next(iter(archs.values()))
    if any(a != first for a in archs.values()):
        raise ConfigError("architecture mismatch across checkpoints")

    from .config import load_run_config

    cfgs = {role: load_run_config(os.path.join(d, "config.json")) for role, d in run_dirs.items()}
    data_keys = {(c.data.visits, c.seed, c.data.sample_rate) for c in cfgs.values()}
    if len(data_keys) != 1:
        raise ConfigError("CKA runs must share the same dataset and seed")
    data = LoadedData(cfgs["smd"])
    probe = build_probe_signals(data, probe_seed=cfgs["smd"].seed, probe_size=probe_size)
    report = cka_block_report(models, probe)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write("stage,vs_component,vs_global\n")
            for row in report["per_stage"]:
                f.write(f"{row['stage']},{row['vs_component']:.6f},{row['vs_global']:.6f}\n")
            f.write("\n")
            f.write("pair,cka\n")
            for pair, value in report["whole_encoder"].items():
                f.write(f"{pair},{value:.6f}\n")
    return report
