"""Pre-training and fine-tuning loops, evaluation, and CKA analysis.

One pre-training step: draw a fresh view pair per trajectory, push both
views through the shared encoders, compute the global loss on trajectory
projections and the component loss on per-timestep signal projections
(reusing the same signal embeddings for both paths), then take an Adam step
on the weighted sum. Fine-tuning either trains a linear classifier on
frozen embeddings or the whole network with early stopping on validation
AUROC; evaluation reports the strategy with the better validation score.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from .augment import make_view_pair
from .autodiff import Tensor
from .config import TrainConfig
from .data import build_ft_dataset, build_pt_dataset, filter_visits
from .metrics import auprc, auroc, bootstrap_ci, cka
from .models import TrajectoryModel, save_checkpoint
from .seeding import derive_rng, derive_seed_sequence


class NonFiniteLossError(ArithmeticError):
    """Training produced a non-finite loss; carries the failing step's terms."""


def derive_int(master_seed, *tags):
    return int(derive_seed_sequence(master_seed, *tags).generate_state(1)[0])


class Adam:
    """Adam with bias correction; gradients are read from each tensor."""

    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.t = 0

    @staticmethod
    def from_config(named_params, cfg: TrainConfig):
        return Adam(named_params, lr=cfg.lr, beta1=cfg.adam_beta1,
                    beta2=cfg.adam_beta2, eps=cfg.adam_eps)

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# batch assembly


def view_inputs(p_view):
    """Index helper: a trajectory's model input is its first p_view samples."""
    return slice(0, p_view)


def assemble_eval_batch(trajs, p_view):
    """Stack trajectories for plain (non-augmented) encoding."""
    d = np.stack([t.static for t in trajs])
    w = np.stack([t.structured for t in trajs])
    s = np.stack([t.signals[:, :, :p_view] for t in trajs])
    return d, w, s


def assemble_view_batch(trajs, aug_cfg, stats, sample_rate, rng):
    """Augment each trajectory into two views and stack them [hat; tilde].

    Returns (d, w, s, present) where the arrays cover 2B rows and
    ``present`` is the (B, T) signal-presence mask shared by both views.
    """
    pairs = [make_view_pair(t, aug_cfg, stats, sample_rate, rng) for t in trajs]
    d = np.concatenate([
        np.stack([p.static_hat for p in pairs]),
        np.stack([p.static_tilde for p in pairs]),
    ])
    w = np.concatenate([
        np.stack([p.structured_hat for p in pairs]),
        np.stack([p.structured_tilde for p in pairs]),
    ])
    s = np.concatenate([
        np.stack([p.signals_hat for p in pairs]),
        np.stack([p.signals_tilde for p in pairs]),
    ])
    present = ~np.stack([p.signal_missing for p in pairs])
    return d, w, s, present


def pt_forward(model: TrajectoryModel, loss_cfg, d, w, s, present, return_info=False):
    """Both losses for one stacked view batch.

    Returns (global_term, component_term) plus per-timestep instrumentation
    when requested. The signal embeddings feed the component head and the
    sequence path, matching the reuse of augmented signals for both levels.
    """
    two_b, T = s.shape[0], s.shape[1]
    B = two_b // 2
    normalize = loss_cfg.family == "nt_xent" and model.config.head.normalize_for_nt_xent
    s_flat = np.reshape(s, (two_b * T,) + s.shape[2:])
    sig_emb = model.embed_signals(Tensor(s_flat))
    sig_proj = model.project_signals(sig_emb, normalize=normalize)
    sig_pred = model.signal_predictor(sig_proj) if loss_cfg.family == "simsiam" else None
    z = model.encode_trajectory(d, w, s, signal_embeddings=sig_emb)
    g_proj = model.project_global(z, normalize=normalize)
    g_pred = model.global_predictor(g_proj) if loss_cfg.family == "simsiam" else None

    kwargs = {}
    if loss_cfg.family == "simsiam":
        kwargs = {"p_hat": g_pred[:B], "p_tilde": g_pred[B:]}
    global_term = L.global_loss(loss_cfg, g_proj[:B], g_proj[B:], **kwargs)

    per_t = []
    for t in range(T):
        rows = np.flatnonzero(present[:, t])
        hat_rows = rows * T + t
        tilde_rows = (rows + B) * T + t
        pair = {"h_hat": sig_proj[hat_rows], "h_tilde": sig_proj[tilde_rows]}
        if sig_pred is not None:
            pair["p_hat"] = sig_pred[hat_rows]
            pair["p_tilde"] = sig_pred[tilde_rows]
        per_t.append(pair)
    if return_info:
        component_term, info = L.component_loss(per_t, loss_cfg, return_info=True)
        return global_term, component_term, info
    return global_term, L.component_loss(per_t, loss_cfg)


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class Curves:
    """Per-step loss log."""

    steps: list = field(default_factory=list)

    def append(self, step, epoch, global_loss, component_loss, total):
        self.steps.append({
            "step": step, "epoch": epoch,
            "global_loss": global_loss, "component_loss": component_loss,
            "total_loss": total,
        })

    def epoch_means(self, key):
        by_epoch = {}
        for row in self.steps:
            by_epoch.setdefault(row["epoch"], []).append(row[key])
        return {e: float(np.mean(v)) for e, v in sorted(by_epoch.items())}

    def smoothed(self, key, window=50):
        values = np.array([row[key] for row in self.steps])
        if len(values) < window:
            window = max(1, len(values))
        kernel = np.ones(window) / window
        return np.convolve(values, kernel, mode="valid")

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("step,epoch,global_loss,component_loss,total_loss\n")
            for row in self.steps:
                f.write(f"{row['step']},{row['epoch']},"
                        f"{row['global_loss']:.17g},{row['component_loss']:.17g},"
                        f"{row['total_loss']:.17g}\n")


def pretrain(visits, model: TrajectoryModel, loss_cfg, aug_cfg, train_cfg,
             stats, sample_rate, seed, checkpoint_dir=None):
    """Optimize alpha*global + beta*component over the pre-training windows.

    A fresh window offset and fresh augmentations are drawn every epoch.
    Both loss series are logged every step regardless of their weights, so
    a zero-weight term is still monitored (through its never-updated random
    head). Returns the per-step curves.
    """
    opt = Adam.from_config(model.named_parameters(), train_cfg)
    curves = Curves()
    model.set_training(True)
    step = 0
    for epoch in range(train_cfg.pt_epochs):
        trajs = build_pt_dataset(visits, stats, seed=derive_int(seed, "pt-data", epoch))
        order = derive_rng(seed, "pt-order", epoch).permutation(len(trajs))
        n_batches = len(trajs) // train_cfg.batch_size
        if n_batches == 0:
            raise ValueError(
                f"pre-training dataset ({len(trajs)} windows) is smaller than one batch")
        for b in range(n_batches):
            idx = order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
            batch = [trajs[i] for i in idx]
            rng = derive_rng(seed, "pt-aug", epoch, b)
            d, w, s, present = assemble_view_batch(batch, aug_cfg, stats, sample_rate, rng)
            g_term, c_term = pt_forward(model, loss_cfg, d, w, s, present)
            total = L.combined_loss(g_term, c_term, loss_cfg.global_weight, loss_cfg.component_weight)
            g_val, c_val, t_val = g_term.item(), c_term.item(), total.item()
            if not (np.isfinite(g_val) and np.isfinite(c_val) and np.isfinite(t_val)):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} batch {b}: "
                    f"global={g_val} component={c_val} total={t_val}")
            opt.zero_grad()
            ad.backward(total)
            opt.step()
            curves.append(step, epoch, g_val, c_val, t_val)
            step += 1
        if checkpoint_dir is not None:
            save_checkpoint(model, f"{checkpoint_dir}/epoch_{epoch}.ckpt")
    return curves


# ---------------------------------------------------------------------------
# fine-tuning


def bce_with_logits(logits, targets):
    y = Tensor(np.asarray(targets, dtype=float))
    return ad.mean(ad.add(
        ad.mul(ad.softplus(ad.neg(logits)), y),
        ad.mul(ad.softplus(logits), ad.sub(1.0, y)),
    ))


def encode_dataset(model, trajs, p_view, batch_size=256):
    """Frozen, eval-mode trajectory embeddings (no graph)."""
    was_training = any(getattr(m, "training", False) for m in model.modules())
    model.set_training(False)
    chunks = []
    with ad.no_grad():
        for i in range(0, len(trajs), batch_size):
            d, w, s = assemble_eval_batch(trajs[i : i + batch_size], p_view)
            chunks.append(model.encode_trajectory(d, w, s).data)
    model.set_training(was_training)
    return np.concatenate(chunks) if chunks else np.zeros((0, model.config.sequence.hidden))


def predict_scores(model, trajs, p_view, batch_size=256):
    z = encode_dataset(model, trajs, p_view, batch_size)
    with ad.no_grad():
        logits = model.classify(Tensor(z)).data
    return 1.0 / (1.0 + np.exp(-logits))


@dataclass
class FitResult:
    strategy: str
    task: str
    best_val_auroc: float
    best_epoch: int
    val_trace: list
    epochs_run: int


def _labels(trajs):
    return np.array([t.label for t in trajs], dtype=int)


def finetune_linear(model, train_trajs, val_trajs, train_cfg, p_view, seed):
    """Train only the classifier on frozen eval-mode embeddings."""
    z_train = encode_dataset(model, train_trajs, p_view, train_cfg.eval_batch_size)
    z_val = encode_dataset(model, val_trajs, p_view, train_cfg.eval_batch_size)
    y_train = _labels(train_trajs)
    y_val = _labels(val_trajs)
    model.reinit_classifier(derive_int(seed, "linear-head"))
    opt = Adam.from_config(model.classifier.named_parameters(), train_cfg)
    rng = derive_rng(seed, "linear-batches")
    best = (-np.inf, None, -1)
    trace = []
    epochs_run = 0
    for epoch in range(train_cfg.ft_max_epochs):
        order = rng.permutation(len(train_trajs))
        for i in range(0, len(order), train_cfg.batch_size):
            idx = order[i : i + train_cfg.batch_size]
            logits = model.classify(Tensor(z_train[idx]))
            loss = bce_with_logits(logits, y_train[idx])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        with ad.no_grad():
            val_scores = model.classify(Tensor(z_val)).data
        score = auroc(y_val, val_scores)
        trace.append(score)
        epochs_run = epoch + 1
        if score > best[0]:
            best = (score, copy.deepcopy(model.classifier.state_arrays()), epoch)
        elif epoch - best[2] >= train_cfg.early_stop_patience:
            break
    model.classifier.load_state_arrays({k: v for k, (v, _) in best[1].items()})
    return FitResult("linear", "", float(best[0]), best[2], trace, epochs_run)


def finetune_full(model, train_trajs, val_trajs, train_cfg, p_view, seed):
    """Train the whole network; early stop and restore on validation AUROC."""
    y_val = _labels(val_trajs)
    model.reinit_classifier(derive_int(seed, "ft-head"))
    opt = Adam.from_config(model.named_parameters(), train_cfg)
    rng = derive_rng(seed, "ft-batches")
    best = (-np.inf, None, -1)
    trace = []
    epochs_run = 0
    for epoch in range(train_cfg.ft_max_epochs):
        model.set_training(True)
        order = rng.permutation(len(train_trajs))
        for i in range(0, len(order), train_cfg.batch_size):
            idx = order[i : i + train_cfg.batch_size]
            if len(idx) < 2:
                continue  # train-mode batchnorm needs at least two rows
            batch = [train_trajs[j] for j in idx]
            d, w, s = assemble_eval_batch(batch, p_view)
            logits = model.classify(model.encode_trajectory(d, w, s))
            loss = bce_with_logits(logits, _labels(batch))
            if not np.isfinite(loss.item()):
                raise NonFiniteLossError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        val_scores = predict_scores(model, val_trajs, p_view, train_cfg.eval_batch_size)
        score = auroc(y_val, val_scores)
        trace.append(score)
        epochs_run = epoch + 1
        if score > best[0]:
            best = (score, {k: (v.copy(), t) for k, (v, t) in model.state_arrays().items()}, epoch)
        elif epoch - best[2] >= train_cfg.early_stop_patience:
            break
    model.load_state_arrays({k: v for k, (v, _) in best[1].items()})
    return FitResult("full_ft", "", float(best[0]), best[2], trace, epochs_run)


def finetune(model, visits, split, task, strategy, train_cfg, stats, p_view,
             seed, label_fraction=1.0):
    """Build the labeled FT datasets and run the requested strategy."""
    train_pat = restrict_patients(split.dev_train, label_fraction, seed)
    val_pat = restrict_patients(split.validation, label_fraction, seed)
    train_trajs, _ = build_ft_dataset(filter_visits(visits, train_pat), task, stats)
    val_trajs, _ = build_ft_dataset(filter_visits(visits, val_pat), task, stats)
    if not train_trajs or not val_trajs:
        raise ValueError(f"fine-tuning needs labeled windows in both train and validation for {task}")
    if len(set(_labels(val_trajs))) < 2:
        raise ValueError("validation set has a single class; AUROC undefined")
    if strategy == "linear":
        result = finetune_linear(model, train_trajs, val_trajs, train_cfg, p_view, seed)
    elif strategy == "full_ft":
        result = finetune_full(model, train_trajs, val_trajs, train_cfg, p_view, seed)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    result.task = task
    return result


def restrict_patients(patients, fraction, seed):
    """Deterministic labeled subset (ceil so tiny splits keep one patient)."""
    if fraction >= 1.0:
        return list(patients)
    rng = derive_rng(seed, "label-subset")
    n = max(1, int(np.ceil(fraction * len(patients))))
    order = rng.permutation(len(patients))
    return [patients[i] for i in sorted(order[:n])]


def p_view_samples(sample_rate, segment_seconds):
    """Model-input signal length: the first augmentation segment."""
    return int(round(segment_seconds * sample_rate))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(fits, models_by_strategy, test_trajs, p_view, seed, n_resamples=100,
             eval_batch_size=256):
    """Pick the strategy with the best validation AUROC (ties prefer the
    cheaper linear probe) and report test metrics with bootstrap CIs."""
    if not test_trajs:
        raise ValueError("empty test set")
    by_strategy = {f.strategy: f for f in fits}
    chosen = max(by_strategy, key=lambda s: (by_strategy[s].best_val_auroc, s == "linear"))
    model = models_by_strategy[chosen]
    y = _labels(test_trajs)
    scores = predict_scores(model, test_trajs, p_view, eval_batch_size)
    point_auroc = auroc(y, scores)
    point_auprc = auprc(y, scores)
    auroc_ci = bootstrap_ci(y, scores, auroc, n_resamples, seed)
    auprc_ci = bootstrap_ci(y, scores, auprc, n_resamples, seed)
    return {
        "task": by_strategy[chosen].task,
        "strategy": chosen,
        "validation_auroc": {s: f.best_val_auroc for s, f in by_strategy.items()},
        "auroc": point_auroc,
        "auroc_ci95": list(auroc_ci),
        "auprc": point_auprc,
        "auprc_ci95": list(auprc_ci),
        "n_test": len(test_trajs),
        "bootstrap_resamples": n_resamples,
    }


# ---------------------------------------------------------------------------
# representation similarity


def stage_activations(model, probe_signals, batch_size=256):
    """Pooled per-stage CNN outputs plus the final embedding on a probe set."""
    model.set_training(False)
    stages = None
    finals = []
    with ad.no_grad():
        for i in range(0, len(probe_signals), batch_size):
            emb, blocks = model.embed_signals(
                Tensor(probe_signals[i : i + batch_size]), collect_stages=True)
            finals.append(emb.data)
            if stages is None:
                stages = [[b.data] for b in blocks]
            else:
                for acc, b in zip(stages, blocks):
                    acc.append(b.data)
    return [np.concatenate(acc) for acc in stages], np.concatenate(finals)


def cka_block_report(models_by_name, probe_signals):
    """Average per-stage CKA of the combined-objective model against every
    stage of each single-level model, plus whole-encoder pairwise CKA.

    ``models_by_name`` must hold keys 'smd', 'component_only', 'global_only'
    with architecturally identical signal encoders.
    """
    required = ("smd", "component_only", "global_only")
    for key in required:
        if key not in models_by_name:
            raise ValueError(f"cka_block_report needs a {key!r} model")
    cfgs = [models_by_name[k].config.signal_encoder for k in required]
    if any(c != cfgs[0] for c in cfgs[1:]):
        raise ValueError("architecture mismatch across checkpoints")
    acts = {}
    final = {}
    for name, model in models_by_name.items():
        acts[name], final[name] = stage_activations(model, probe_signals)
    n_stages = len(acts["smd"])
    rows = []
    for i in range(n_stages):
        row = {"stage": i}
        for other in ("component_only", "global_only"):
            sims = [cka(acts["smd"][i], acts[other][j]) for j in range(n_stages)]
            row[f"vs_{other.replace('_only', '')}"] = float(np.mean(sims))
        rows.append(row)
    pairwise = {
        "smd_vs_component": cka(final["smd"], final["component_only"]),
        "smd_vs_global": cka(final["smd"], final["global_only"]),
        "component_vs_global": cka(final["component_only"], final["global_only"]),
    }
    return {"per_stage": rows, "whole_encoder": pairwise}
