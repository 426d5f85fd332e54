"""Self-supervised objectives: contrastive, variance/covariance, and
stop-gradient cosine families, composed into global, per-timestep
(component), and combined losses.

The component loss restricts every anchor's negative pool to the same
timestep across the batch: nearby timesteps of one trajectory are often
almost identical and must not appear as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FAMILIES = ("nt_xent", "vicreg", "simsiam")

# smallest batch for which each family's loss is defined
MIN_BATCH = {"nt_xent": 1, "vicreg": 2, "simsiam": 1}


@dataclass
class LossConfig:
    family: str = "nt_xent"
    temperature: float = 0.1
    invariance_weight: float = 1.0
    variance_weight: float = 1.0
    covariance_weight: float = 1.0
    global_weight: float = 1.0
    component_weight: float = 1.0
    variance_eps: float = 1e-4

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.global_weight < 0 or self.component_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.global_weight == 0 and self.component_weight == 0:
            raise ValueError("at least one of the global/component weights must be positive")
        return self


def nt_xent(h_hat, h_tilde, temperature=0.1, return_info=False):
    """Normalized temperature-scaled cross-entropy over 2B unit-norm rows.

    Row i of one view is the positive for row i of the other; every one of
    the remaining 2B-1 rows (both views, self excluded) is in the softmax
    denominator. Averaged over all 2B anchors.
    """
    h_hat, h_tilde = ad.as_tensor(h_hat), ad.as_tensor(h_tilde)
    if h_hat.shape != h_tilde.shape:
        raise ValueError(f"view shapes differ: {h_hat.shape} vs {h_tilde.shape}")
    B = h_hat.shape[0]
    if B == 0:
        raise ValueError("nt_xent needs at least one pair")
    z = ad.concat([h_hat, h_tilde], axis=0)
    sims = ad.div(ad.matmul(z, ad.transpose(z, (1, 0))), temperature)
    # remove self-similarity from every denominator
    mask = np.zeros((2 * B, 2 * B))
    np.fill_diagonal(mask, -1e9)
    logits = ad.add(sims, Tensor(mask))
    denom = ad.logsumexp(logits, axis=1)
    pos_idx = np.concatenate([np.arange(B) + B, np.arange(B)])
    pos = _gather_pairs(sims, pos_idx)
    loss = ad.mean(ad.sub(denom, pos))
    if return_info:
        info = {"anchors": 2 * B, "logits_per_anchor": np.full(2 * B, 2 * B - 1)}
        return loss, info
    return loss


def _gather_pairs(sims, pos_idx):
    """Positive similarities sims[i, pos_idx[i]] with gradient support."""
    n = sims.shape[0]
    onehot = np.zeros((n, n))
    onehot[np.arange(n), pos_idx] = 1.0
    return ad.sum_(ad.mul(sims, Tensor(onehot)), axis=1)


def vicreg(h_hat, h_tilde, invariance_weight=1.0, variance_weight=1.0,
           covariance_weight=1.0, eps=1e-4, return_terms=False):
    """Invariance + variance-hinge + covariance penalty.

    Invariance is the mean squared error over all entries of the paired
    projections; variance and covariance are computed per branch (unbiased
    column statistics over the batch) and averaged across the two branches.
    """
    h_hat, h_tilde = ad.as_tensor(h_hat), ad.as_tensor(h_tilde)
    B, D = h_hat.shape
    if B < 2:
        raise ValueError(f"vicreg variance needs a batch of at least 2, got {B}")
    diff = ad.sub(h_hat, h_tilde)
    inv = ad.mean(ad.mul(diff, diff))

    def branch_terms(h):
        centered = ad.sub(h, ad.mean(h, axis=0, keepdims=True))
        col_var = ad.div(ad.sum_(ad.mul(centered, centered), axis=0), B - 1)
        std = ad.sqrt(ad.add(col_var, eps))
        var_term = ad.mean(ad.relu(ad.sub(1.0, std)))
        cov = ad.div(ad.matmul(ad.transpose(centered, (1, 0)), centered), B - 1)
        off = ad.mul(cov, Tensor(1.0 - np.eye(D)))
        cov_term = ad.div(ad.sum_(ad.mul(off, off)), D)
        return var_term, cov_term

    var_hat, cov_hat = branch_terms(h_hat)
    var_til, cov_til = branch_terms(h_tilde)
    var = ad.mul(ad.add(var_hat, var_til), 0.5)
    cov = ad.mul(ad.add(cov_hat, cov_til), 0.5)
    total = ad.add(
        ad.add(ad.mul(inv, invariance_weight), ad.mul(var, variance_weight)),
        ad.mul(cov, covariance_weight),
    )
    if return_terms:
        return total, {"invariance": inv.item(), "variance": var.item(), "covariance": cov.item()}
    return total


def simsiam(p_hat, p_tilde, h_hat, h_tilde):
    """Negative symmetric cosine between each predictor output and the
    other branch's projection; the projection branch is stop-gradient."""
    p_hat, p_tilde = ad.as_tensor(p_hat), ad.as_tensor(p_tilde)
    h_hat, h_tilde = ad.as_tensor(h_hat).detach(), ad.as_tensor(h_tilde).detach()
    first = ad.mean(ad.cosine_sim(p_hat, h_tilde, axis=1))
    second = ad.mean(ad.cosine_sim(p_tilde, h_hat, axis=1))
    return ad.mul(ad.add(first, second), -0.5)


def pair_loss(cfg: LossConfig, h_hat, h_tilde, p_hat=None, p_tilde=None, return_info=False):
    """Dispatch one projection pair to the configured family."""
    if cfg.family == "nt_xent":
        return nt_xent(h_hat, h_tilde, cfg.temperature, return_info=return_info)
    if cfg.family == "vicreg":
        loss = vicreg(h_hat, h_tilde, cfg.invariance_weight, cfg.variance_weight,
                      cfg.covariance_weight, cfg.variance_eps)
    elif cfg.family == "simsiam":
        if p_hat is None or p_tilde is None:
            raise ValueError("simsiam needs predictor outputs for both views")
        loss = simsiam(p_hat, p_tilde, h_hat, h_tilde)
    else:
        raise ValueError(f"unknown loss family {cfg.family!r}")
    if return_info:
        B = ad.as_tensor(h_hat).shape[0]
        return loss, {"anchors": 2 * B, "logits_per_anchor": None}
    return loss


def global_loss(cfg: LossConfig, h_hat, h_tilde, p_hat=None, p_tilde=None):
    """Family loss on the trajectory-level projections."""
    return pair_loss(cfg, h_hat, h_tilde, p_hat, p_tilde)


def component_loss(per_timestep_pairs, cfg: LossConfig, return_info=False):
    """Mean family loss over timesteps, negatives restricted per timestep.

    ``per_timestep_pairs`` is a sequence of dicts with keys ``h_hat``,
    ``h_tilde`` (each (B_t, D); rows for trajectories whose signal at t is
    missing are already excluded) and optionally ``p_hat``/``p_tilde``.
    Timesteps whose effective batch is below the family minimum are skipped
    and the average is renormalized; if every timestep is skipped the batch
    carries no component signal, which is an error.
    """
    terms = []
    infos = []
    for t, pair in enumerate(per_timestep_pairs):
        B_t = ad.as_tensor(pair["h_hat"]).shape[0]
        if B_t < MIN_BATCH[cfg.family]:
            infos.append({"t": t, "skipped": True, "anchors": 0, "logits_per_anchor": None})
            continue
        if return_info:
            loss_t, info = pair_loss(cfg, pair["h_hat"], pair["h_tilde"],
                                     pair.get("p_hat"), pair.get("p_tilde"), return_info=True)
            info.update(t=t, skipped=False)
            infos.append(info)
        else:
            loss_t = pair_loss(cfg, pair["h_hat"], pair["h_tilde"],
                               pair.get("p_hat"), pair.get("p_tilde"))
        terms.append(loss_t)
    if not terms:
        raise ValueError("component loss undefined: every timestep was skipped")
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    loss = ad.div(total, float(len(terms)))
    if return_info:
        return loss, infos
    return loss


def combined_loss(global_term, component_term, alpha, beta):
    """Weighted pre-training objective alpha * global + beta * component."""
    return ad.add(ad.mul(ad.as_tensor(global_term), float(alpha)),
                  ad.mul(ad.as_tensor(component_term), float(beta)))
