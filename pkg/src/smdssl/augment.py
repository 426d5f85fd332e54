"""Per-modality stochastic view generation.

A base trajectory yields two views: each raw signal is cut into two
disjoint segments (one per view) which are then masked and noised
independently; the structured series gets history cutout (re-imputed by
forward fill) plus feature-scaled noise; the static vector gets dropout to
the training mean plus feature-scaled noise. The per-timestep signal views
are reused by the component loss, so they are kept alongside the views.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SignalAugmentConfig:
    mask_frac: float = 0.25
    noise_sd: float = 0.25
    segment_seconds: float = 10.0
    random_segments: bool = False  # default: first/second segment of the raw signal


@dataclass
class StructuredAugmentConfig:
    cutout_prob: float = 0.25
    cutout_frac: float = 0.25
    noise_frac_of_sd: float = 0.10


@dataclass
class StaticAugmentConfig:
    dropout_frac: float = 0.25
    noise_frac_of_sd: float = 0.10


@dataclass
class AugmentConfig:
    signal: SignalAugmentConfig = field(default_factory=SignalAugmentConfig)
    structured: StructuredAugmentConfig = field(default_factory=StructuredAugmentConfig)
    static: StaticAugmentConfig = field(default_factory=StaticAugmentConfig)

    def validate(self):
        for frac in (self.signal.mask_frac, self.structured.cutout_prob,
                     self.structured.cutout_frac, self.static.dropout_frac):
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"augmentation fraction {frac} outside [0, 1]")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ViewPair:
    """Two augmented views of one base trajectory.

    Signals have shape (T, C, P_view); structured/static match the base.
    ``signal_missing`` is shared: a missing timestep is zeros in both views.
    """

    static_hat: np.ndarray
    static_tilde: np.ndarray
    structured_hat: np.ndarray
    structured_tilde: np.ndarray
    signals_hat: np.ndarray
    signals_tilde: np.ndarray
    signal_missing: np.ndarray


def mask_and_noise(segment, mask_frac, noise_sd, rng):
    """Zero an exact fraction of samples per channel, then add noise."""
    out = segment.copy()
    C, P = out.shape
    n_mask = int(np.floor(mask_frac * P))
    for c in range(C):
        if n_mask:
            idx = rng.choice(P, size=n_mask, replace=False)
            out[c, idx] = 0.0
    if noise_sd > 0:
        out += rng.normal(0.0, noise_sd, size=out.shape)
    return out


def split_segments(p_raw, p_view, random_segments, rng):
    """Start indices of two disjoint segments of length p_view."""
    if 2 * p_view > p_raw:
        raise ValueError(f"raw signal of {p_raw} samples cannot hold two {p_view}-sample views")
    if not random_segments:
        return 0, p_view
    first = int(rng.integers(0, p_raw - 2 * p_view + 1))
    second = int(rng.integers(first + p_view, p_raw - p_view + 1))
    if rng.random() < 0.5:
        first, second = second, first
    return first, second


def augment_signal_pair(signal, cfg: AugmentConfig, sample_rate, rng):
    """(C, P_raw) raw signal -> two independently corrupted (C, P_view) views."""
    p_view = int(round(cfg.signal.segment_seconds * sample_rate))
    start_hat, start_tilde = split_segments(signal.shape[1], p_view, cfg.signal.random_segments, rng)
    hat = mask_and_noise(signal[:, start_hat : start_hat + p_view], cfg.signal.mask_frac, cfg.signal.noise_sd, rng)
    tilde = mask_and_noise(signal[:, start_tilde : start_tilde + p_view], cfg.signal.mask_frac, cfg.signal.noise_sd, rng)
    return hat, tilde


def forward_fill_columns(values, missing, fallback):
    """Forward-fill masked entries per column; a masked leading run takes the
    first later observed value, or the per-column fallback if none exists."""
    out = values.copy()
    T, M = out.shape
    for m in range(M):
        col_missing = missing[:, m]
        if not col_missing.any():
            continue
        last = None
        for t in range(T):
            if col_missing[t]:
                if last is not None:
                    out[t, m] = last
            else:
                last = out[t, m]
        if col_missing[0]:
            observed = np.flatnonzero(~col_missing)
            lead_value = out[observed[0], m] if observed.size else fallback[m]
            t = 0
            while t < T and col_missing[t]:
                out[t, m] = lead_value
                t += 1
    return out


def augment_structured(w, cfg: AugmentConfig, feature_sds, feature_means, rng):
    """History cutout (per feature, with probability cutout_prob) plus noise."""
    T, M = w.shape
    n_cut = int(np.floor(cfg.structured.cutout_frac * T))
    missing = np.zeros((T, M), dtype=bool)
    for m in range(M):
        if n_cut and rng.random() < cfg.structured.cutout_prob:
            missing[rng.choice(T, size=n_cut, replace=False), m] = True
    out = forward_fill_columns(w, missing, feature_means)
    if cfg.structured.noise_frac_of_sd > 0:
        out = out + rng.normal(0.0, 1.0, size=out.shape) * (cfg.structured.noise_frac_of_sd * feature_sds)
    return out


def augment_static(d, cfg: AugmentConfig, feature_sds, feature_means, rng):
    """Drop an exact fraction of features to their training means, add noise."""
    out = d.copy()
    L = out.shape[0]
    n_drop = int(np.floor(cfg.static.dropout_frac * L))
    if n_drop:
        idx = rng.choice(L, size=n_drop, replace=False)
        out[idx] = feature_means[idx]
    if cfg.static.noise_frac_of_sd > 0:
        out = out + rng.normal(0.0, 1.0, size=L) * (cfg.static.noise_frac_of_sd * feature_sds)
    return out


def make_view_pair(traj, cfg: AugmentConfig, stats, sample_rate, rng) -> ViewPair:
    """Augment one admitted trajectory into a paired view.

    ``stats`` supplies per-feature training means/sds for the structured and
    static modalities. Missing-signal timesteps stay all-zero in both views
    and keep their mask bit.
    """
    T, C = traj.signals.shape[0], traj.signals.shape[1]
    p_view = int(round(cfg.signal.segment_seconds * sample_rate))
    sig_hat = np.zeros((T, C, p_view))
    sig_tilde = np.zeros((T, C, p_view))
    for t in range(T):
        if traj.signal_missing[t]:
            continue
        sig_hat[t], sig_tilde[t] = augment_signal_pair(traj.signals[t], cfg, sample_rate, rng)
    return ViewPair(
        static_hat=augment_static(traj.static, cfg, stats.static_sd, stats.static_mean, rng),
        static_tilde=augment_static(traj.static, cfg, stats.static_sd, stats.static_mean, rng),
        structured_hat=augment_structured(traj.structured, cfg, stats.structured_sd, stats.structured_mean, rng),
        structured_tilde=augment_structured(traj.structured, cfg, stats.structured_sd, stats.structured_mean, rng),
        signals_hat=sig_hat,
        signals_tilde=sig_tilde,
        signal_missing=traj.signal_missing.copy(),
    )
