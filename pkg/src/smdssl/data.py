"""Trajectory data model: visit records, window extraction, imputation,
patient-level splits, and the JSON Lines interchange format.

Visits are hourly-resampled stays. Pre-training windows are drawn one per
non-overlapping 12-hour block with a random start offset, which guarantees
that any two admitted windows never overlap (the negative-pair structure
both losses rely on). Fine-tuning windows slide at 1-hour increments and
carry task labels. All modalities are z-scored with development-split
statistics at assembly time; missing values are forward-filled or imputed
with the (normalized) training mean, and missing signals stay zero.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .seeding import derive_rng

SCHEMA_VERSION = 1
T_LEN = 8           # timesteps per trajectory
BLOCK_HOURS = 12    # pre-training block length
MAX_MISSING_SIGNALS = 1

TASKS = ("elevated_map", "mortality24")
PRESSURE_THRESHOLD_MMHG = 20.0
MORTALITY_HORIZON_HOURS = 24.0


@dataclass
class VisitRecord:
    """One hourly-resampled hospital visit."""

    patient_id: str
    static: np.ndarray           # (L,) raw values, NaN where missing
    structured: np.ndarray       # (H, M) raw values, NaN where missing
    signals: np.ndarray          # (H, C, P) raw segments; zeros where missing
    signal_missing: np.ndarray   # (H,) bool
    death_time: Optional[float] = None   # hours from visit start
    pressure_mean: Optional[np.ndarray] = None  # (H,), NaN where not annotated
    latent: Optional[np.ndarray] = None  # generator state, for oracle checks only

    @property
    def n_hours(self):
        return self.structured.shape[0]

    def validate(self):
        H = self.n_hours
        if self.signals.shape[0] != H or self.signal_missing.shape[0] != H:
            raise ValueError(f"visit {self.patient_id}: hourly grids disagree")
        return self


@dataclass
class Trajectory:
    """One fixed-length window, normalized and imputed, ready for a model."""

    static: np.ndarray           # (L,)
    structured: np.ndarray       # (T, M)
    signals: np.ndarray          # (T, C, P_raw) normalized; zeros where missing
    signal_missing: np.ndarray   # (T,) bool
    patient_id: str
    block_id: str
    start_hour: int
    label: Optional[int] = None


@dataclass
class FeatureStats:
    """Development-split moments used for normalization and imputation."""

    static_mean: np.ndarray
    static_sd: np.ndarray
    structured_mean: np.ndarray
    structured_sd: np.ndarray
    signal_mean: np.ndarray   # per channel
    signal_sd: np.ndarray

    def to_dict(self):
        return {k: np.asarray(v).tolist() for k, v in vars(self).items()}

    @staticmethod
    def from_dict(d):
        return FeatureStats(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


@dataclass
class DatasetSplit:
    """Patient-disjoint partition; validation is carved out of development."""

    dev_train: list
    validation: list
    test: list

    def development(self):
        return self.dev_train + self.validation

    def all_patients(self):
        return self.dev_train + self.validation + self.test


# ---------------------------------------------------------------------------
# splits and statistics


def split_patients(patient_ids, ratios, seed):
    """Deterministic disjoint partition of patients by the given ratios."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    ids = sorted(set(patient_ids))
    if len(ids) < len(ratios):
        raise ValueError(f"cannot split {len(ids)} patients into {len(ratios)} partitions")
    rng = derive_rng(seed, "patient-split")
    order = rng.permutation(len(ids))
    bounds = np.round(np.cumsum(ratios) * len(ids)).astype(int)
    parts, start = [], 0
    for b in bounds:
        parts.append([ids[i] for i in order[start:b]])
        start = b
    return parts


def make_split(visits, seed, dev_frac=0.8, val_frac_of_dev=0.2) -> DatasetSplit:
    dev, test = split_patients([v.patient_id for v in visits], (dev_frac, 1.0 - dev_frac), seed)
    val, train = split_patients(dev, (val_frac_of_dev, 1.0 - val_frac_of_dev), seed + 1)
    return DatasetSplit(dev_train=sorted(train), validation=sorted(val), test=sorted(test))


def compute_stats(visits) -> FeatureStats:
    """Per-feature moments over the observed entries of the given visits."""
    if not visits:
        raise ValueError("cannot compute statistics from zero visits")
    L = visits[0].static.shape[0]
    M = visits[0].structured.shape[1]
    C = visits[0].signals.shape[1]

    def moments(total, count, sq):
        mean = total / np.maximum(count, 1)
        var = sq / np.maximum(count, 1) - mean**2
        sd = np.sqrt(np.maximum(var, 0.0))
        return mean, np.where(sd > 1e-8, sd, 1.0)

    s_tot, s_cnt, s_sq = np.zeros(L), np.zeros(L), np.zeros(L)
    w_tot, w_cnt, w_sq = np.zeros(M), np.zeros(M), np.zeros(M)
    g_tot, g_cnt, g_sq = np.zeros(C), np.zeros(C), np.zeros(C)
    for v in visits:
        obs = ~np.isnan(v.static)
        s_tot += np.where(obs, v.static, 0.0)
        s_sq += np.where(obs, v.static**2, 0.0)
        s_cnt += obs
        obs = ~np.isnan(v.structured)
        w_tot += np.where(obs, v.structured, 0.0).sum(axis=0)
        w_sq += np.where(obs, v.structured**2, 0.0).sum(axis=0)
        w_cnt += obs.sum(axis=0)
        present = ~v.signal_missing
        if present.any():
            seg = v.signals[present]  # (n, C, P)
            g_tot += seg.sum(axis=(0, 2))
            g_sq += (seg**2).sum(axis=(0, 2))
            g_cnt += present.sum() * seg.shape[2]
    sm, ss = moments(s_tot, s_cnt, s_sq)
    wm, ws = moments(w_tot, w_cnt, w_sq)
    gm, gs = moments(g_tot, g_cnt, g_sq)
    return FeatureStats(sm, ss, wm, ws, gm, gs)


# ---------------------------------------------------------------------------
# window assembly


def _ffill_then_mean(values):
    """Forward-fill NaNs per column; leading/all-NaN entries become 0
    (the training mean of a z-scored feature)."""
    out = values.copy()
    T, M = out.shape
    for m in range(M):
        last = np.nan
        for t in range(T):
            if np.isnan(out[t, m]):
                out[t, m] = last
            else:
                last = out[t, m]
    return np.nan_to_num(out, nan=0.0)


def assemble_trajectory(visit, start, stats, block_id, label=None) -> Optional[Trajectory]:
    """Normalize + impute the window [start, start+T); None if inadmissible."""
    end = start + T_LEN
    mask = visit.signal_missing[start:end].copy()
    if mask.sum() > MAX_MISSING_SIGNALS:
        return None
    structured = (visit.structured[start:end] - stats.structured_mean) / stats.structured_sd
    structured = _ffill_then_mean(structured)
    static = (visit.static - stats.static_mean) / stats.static_sd
    static = np.nan_to_num(static, nan=0.0)
    signals = np.zeros_like(visit.signals[start:end])
    for t in range(T_LEN):
        if not mask[t]:
            raw = visit.signals[start + t]
            signals[t] = (raw - stats.signal_mean[:, None]) / stats.signal_sd[:, None]
    return Trajectory(
        static=static, structured=structured, signals=signals, signal_missing=mask,
        patient_id=visit.patient_id, block_id=block_id, start_hour=int(start), label=label,
    )


def build_pt_dataset(visits, stats, seed):
    """One pre-training window per 12-hour block, random start offset.

    Tail hours that do not fill a block are discarded, so windows from
    different blocks can never overlap. Windows violating the missing-signal
    rule are skipped.
    """
    rng = derive_rng(seed, "pt-offsets")
    out = []
    max_offset = BLOCK_HOURS - T_LEN
    for visit in visits:
        n_blocks = visit.n_hours // BLOCK_HOURS
        for blk in range(n_blocks):
            offset = int(rng.integers(0, max_offset + 1))
            start = blk * BLOCK_HOURS + offset
            traj = assemble_trajectory(visit, start, stats, block_id=f"{visit.patient_id}:{blk}")
            if traj is not None:
                out.append(traj)
    return out


def label_for_window(visit, start, task):
    """(label, ok): ok=False when a required annotation is absent."""
    end = start + T_LEN
    if task == "elevated_map":
        if visit.pressure_mean is None or np.isnan(visit.pressure_mean[end - 1]):
            return None, False
        return int(visit.pressure_mean[end - 1] > PRESSURE_THRESHOLD_MMHG), True
    if task == "mortality24":
        if visit.death_time is None:
            return 0, True
        return int(visit.death_time - end < MORTALITY_HORIZON_HOURS), True
    raise ValueError(f"unknown task {task!r}")


def build_ft_dataset(visits, task, stats):
    """Sliding 8-hour windows at 1-hour increments with task labels.

    Returns (trajectories, dropped) where dropped counts windows lost to a
    missing required annotation.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    out = []
    dropped = 0
    for visit in visits:
        for start in range(0, visit.n_hours - T_LEN + 1):
            label, ok = label_for_window(visit, start, task)
            if not ok:
                dropped += 1
                continue
            traj = assemble_trajectory(
                visit, start, stats, block_id=f"{visit.patient_id}:ft{start}", label=label,
            )
            if traj is not None:
                out.append(traj)
    return out, dropped


def filter_visits(visits, patient_ids):
    keep = set(patient_ids)
    return [v for v in visits if v.patient_id in keep]


# ---------------------------------------------------------------------------
# JSON Lines interchange


def _hide_nan(values):
    arr = np.asarray(values, dtype=float)
    obj = arr.astype(object)
    obj[np.isnan(arr)] = None
    return obj.tolist()


def _restore_nan(values):
    def conv(x):
        if isinstance(x, list):
            return [conv(v) for v in x]
        return np.nan if x is None else float(x)

    return np.asarray(conv(values), dtype=float)


def write_visits(visits, path, inline_signals=False):
    """Write visits as JSON Lines; signals go to a float32 sidecar blob
    unless ``inline_signals`` is set."""
    path = os.fspath(path)
    blob_name = os.path.basename(path) + ".bin"
    blob_path = os.path.join(os.path.dirname(path) or ".", blob_name)
    offset = 0
    blob = open(blob_path, "wb") if not inline_signals else None
    try:
        with open(path, "w", encoding="utf-8") as f:
            for v in visits:
                record = {
                    "v": SCHEMA_VERSION,
                    "patient_id": v.patient_id,
                    "hours": list(range(v.n_hours)),
                    "static": _hide_nan(v.static),
                    "structured": _hide_nan(v.structured),
                    "signal_missing": [bool(b) for b in v.signal_missing],
                    "labels": {
                        "death_time": v.death_time,
                        "pressure_mean": _hide_nan(v.pressure_mean) if v.pressure_mean is not None else None,
                    },
                }
                if v.latent is not None:
                    record["latent"] = np.asarray(v.latent, dtype=float).tolist()
                if inline_signals:
                    record["signals"] = np.asarray(v.signals, dtype=float).tolist()
                else:
                    raw = np.ascontiguousarray(v.signals, dtype="<f4").tobytes()
                    blob.write(raw)
                    record["signals"] = {
                        "path": blob_name,
                        "offset": offset,
                        "shape": list(v.signals.shape),
                    }
                    offset += len(raw)
                f.write(json.dumps(record) + "\n")
    finally:
        if blob is not None:
            blob.close()
    if inline_signals and os.path.exists(blob_path):
        os.remove(blob_path)


def read_visits(path):
    path = os.fspath(path)
    base = os.path.dirname(path) or "."
    blobs = {}
    visits = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("v") != SCHEMA_VERSION:
                raise ValueError(f"unsupported schema version {rec.get('v')!r}")
            sig = rec["signals"]
            if isinstance(sig, dict):
                blob_path = os.path.join(base, sig["path"])
                if blob_path not in blobs:
                    with open(blob_path, "rb") as bf:
                        blobs[blob_path] = bf.read()
                shape = tuple(sig["shape"])
                count = int(np.prod(shape))
                signals = np.frombuffer(
                    blobs[blob_path], dtype="<f4", count=count, offset=sig["offset"]
                ).reshape(shape).astype(float)
            else:
                signals = np.asarray(sig, dtype=float)
            labels = rec.get("labels") or {}
            pressure = labels.get("pressure_mean")
            visits.append(VisitRecord(
                patient_id=rec["patient_id"],
                static=_restore_nan(rec["static"]),
                structured=_restore_nan(rec["structured"]),
                signals=signals,
                signal_missing=np.asarray(rec["signal_missing"], dtype=bool),
                death_time=labels.get("death_time"),
                pressure_mean=_restore_nan(pressure) if pressure is not None else None,
                latent=np.asarray(rec["latent"], dtype=float) if "latent" in rec else None,
            ).validate())
    return visits


def write_trajectories(trajectories, path, task=None):
    """Trajectory records share the visit schema; hours are absolute."""
    with open(os.fspath(path), "w", encoding="utf-8") as f:
        for tr in trajectories:
            record = {
                "v": SCHEMA_VERSION,
                "patient_id": tr.patient_id,
                "hours": list(range(tr.start_hour, tr.start_hour + T_LEN)),
                "static": _hide_nan(tr.static),
                "structured": _hide_nan(tr.structured),
                "signals": np.asarray(tr.signals, dtype=float).tolist(),
                "signal_missing": [bool(b) for b in tr.signal_missing],
                "labels": {} if tr.label is None else {task or "label": int(tr.label)},
                "block_id": tr.block_id,
            }
            f.write(json.dumps(record) + "\n")


def read_trajectories(path):
    out = []
    with open(os.fspath(path), "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            labels = rec.get("labels") or {}
            label = next(iter(labels.values())) if labels else None
            out.append(Trajectory(
                static=_restore_nan(rec["static"]),
                structured=_restore_nan(rec["structured"]),
                signals=np.asarray(rec["signals"], dtype=float),
                signal_missing=np.asarray(rec["signal_missing"], dtype=bool),
                patient_id=rec["patient_id"],
                block_id=rec.get("block_id", ""),
                start_hour=int(rec["hours"][0]),
                label=None if label is None else int(label),
            ))
    return out
