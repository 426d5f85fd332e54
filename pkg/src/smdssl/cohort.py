"""Synthetic cohort with a known scalar latent state.

Each patient carries a clipped Gaussian AR(1) latent severity in [0, 1].
Signals are harmonic stacks whose fundamental frequency and amplitude rise
with the latent, structured/static features are affine in it, the hourly
pressure annotation is an exact affine readout, and the death hazard is
exponential in it. Labels therefore depend on the latent only, so the
pipeline's direction checks have a known learnable target, and prevalences
have closed forms (clipping never moves a value across a threshold inside
(0, 1), so Gaussian marginals apply exactly).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .data import VisitRecord
from .seeding import derive_rng

PRESSURE_BASE = 20.0  # annotation equals the label threshold exactly at latent == pressure_threshold


@dataclass
class CohortSpec:
    name: str = "custom"
    n_patients: int = 200
    hours_min: int = 24
    hours_max: int = 36
    sample_rate: float = 125.0   # Hz
    channels: int = 1
    segment_hold_seconds: float = 30.0   # raw signal length at each hour mark
    # latent AR(1): g' = g + reversion*(mean - g) + drift + step_sd * eps
    latent_mean: float = 0.58
    latent_init_mean: float = 0.55
    latent_init_sd: float = 0.12
    latent_reversion: float = 0.12
    latent_drift: float = 0.002
    latent_step_sd: float = 0.05
    # signal model: harmonics of f0 + f1*latent with 1/k amplitude falloff.
    # Amplitude is constant by default so the latent is written only into
    # the spectrum, not into trivially learnable signal energy.
    n_harmonics: int = 2
    signal_base_freq: float = 0.2
    signal_freq_gain: float = 0.7
    signal_amp_base: float = 1.0
    signal_amp_gain: float = 0.0
    signal_noise_sd: float = 1.4
    signal_missing_rate: float = 0.03
    # structured/static: affine in the latent
    structured_features: int = 6
    structured_noise_sd: float = 0.25
    structured_missing_rate: float = 0.15
    static_features: int = 4
    static_noise_sd: float = 0.25
    static_missing_rate: float = 0.10
    # annotations
    pressure_gain: float = 30.0
    pressure_threshold: float = 0.5   # latent value at which pressure crosses 20 mmHg
    pressure_missing_rate: float = 0.0
    hazard_base: float = 6e-4
    hazard_steepness: float = 3.0
    seed: int = 0

    def validate(self):
        if self.n_patients <= 0:
            raise ValueError("n_patients must be positive")
        if not (0 < self.hours_min <= self.hours_max):
            raise ValueError("visit hour range is invalid")
        for rate in (self.signal_missing_rate, self.structured_missing_rate,
                     self.static_missing_rate, self.pressure_missing_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"rate {rate} outside [0, 1]")
        if not 0.0 <= self.latent_reversion <= 1.0:
            raise ValueError("latent_reversion outside [0, 1]")
        max_freq = self.n_harmonics * (self.signal_base_freq + self.signal_freq_gain)
        if max_freq >= self.sample_rate / 2:
            raise ValueError(f"highest harmonic {max_freq} Hz violates Nyquist at {self.sample_rate} Hz")
        return self

    @property
    def samples_per_segment(self):
        return int(round(self.segment_hold_seconds * self.sample_rate))

    def to_dict(self):
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d):
        unknown = set(d) - {f.name for f in dataclasses.fields(CohortSpec)}
        if unknown:
            raise ValueError(f"unknown cohort spec keys: {sorted(unknown)}")
        return CohortSpec(**d).validate()

    @staticmethod
    def from_json(path):
        with open(path, "r", encoding="utf-8") as f:
            return CohortSpec.from_dict(json.load(f))


def default_specs():
    """Desk-scale presets: ``small`` for the CI suite, ``medium`` for the
    acceptance pipeline. Both use a low sample rate so the CNN stack stays
    CPU-friendly; the signal content (not the rate) carries the task."""
    small = CohortSpec(name="small", n_patients=200, hours_min=26, hours_max=40,
                       sample_rate=4.0, seed=0)
    medium = CohortSpec(name="medium", n_patients=2000, hours_min=12, hours_max=18,
                        sample_rate=4.0, seed=0)
    return {"small": small.validate(), "medium": medium.validate()}


def latent_marginal(spec: CohortSpec, t):
    """Mean and variance of the pre-clip latent at hour t (closed form)."""
    rho = 1.0 - spec.latent_reversion
    shift = spec.latent_reversion * spec.latent_mean + spec.latent_drift
    mean = spec.latent_init_mean
    var = spec.latent_init_sd**2
    for _ in range(t):
        mean = rho * mean + shift
        var = rho * rho * var + spec.latent_step_sd**2
    return mean, var


def elevated_end_probability(spec: CohortSpec):
    """P(latent at the visit's last hour exceeds the pressure threshold),
    mixing the Gaussian marginal over the uniform visit-length range.
    Valid when the death hazard is zero (deaths truncate visits)."""
    from math import erf, sqrt

    total = 0.0
    lengths = range(spec.hours_min, spec.hours_max + 1)
    for H in lengths:
        mean, var = latent_marginal(spec, H - 1)
        z = (spec.pressure_threshold - mean) / sqrt(var)
        total += 0.5 * (1.0 - erf(z / sqrt(2.0)))
    return total / len(lengths)


def _simulate_latent(spec, hours, rng):
    g = np.empty(hours)
    g[0] = spec.latent_init_mean + spec.latent_init_sd * rng.standard_normal()
    steps = rng.standard_normal(hours - 1) if hours > 1 else []
    for t in range(1, hours):
        g[t] = (g[t - 1] + spec.latent_reversion * (spec.latent_mean - g[t - 1])
                + spec.latent_drift + spec.latent_step_sd * steps[t - 1])
    return g


def _synth_signal(spec, latent_value, rng):
    """(C, P) harmonic stack for one hour mark."""
    p = spec.samples_per_segment
    t_axis = np.arange(p) / spec.sample_rate
    freq = spec.signal_base_freq + spec.signal_freq_gain * latent_value
    amp = spec.signal_amp_base + spec.signal_amp_gain * latent_value
    out = np.zeros((spec.channels, p))
    for c in range(spec.channels):
        for k in range(1, spec.n_harmonics + 1):
            phase = rng.uniform(0.0, 2.0 * np.pi)
            out[c] += (amp / k) * np.sin(2.0 * np.pi * k * freq * t_axis + phase)
    if spec.signal_noise_sd > 0:
        out += spec.signal_noise_sd * rng.standard_normal(out.shape)
    return out


def _sample_death_hour(spec, clipped_latent, rng):
    """First death event under the hourly hazard, or None."""
    for t, h in enumerate(clipped_latent):
        hazard = spec.hazard_base * np.exp(spec.hazard_steepness * h)
        if rng.random() < 1.0 - np.exp(-hazard):
            return t + float(rng.random())
    return None


def generate(spec: CohortSpec):
    """Deterministic synthetic visits for the given spec."""
    spec.validate()
    coeff_rng = derive_rng(spec.seed, "cohort-coefficients")
    w_intercept = coeff_rng.normal(0.0, 1.0, spec.structured_features)
    w_slope = coeff_rng.normal(1.5, 0.3, spec.structured_features)
    d_intercept = coeff_rng.normal(0.0, 1.0, spec.static_features)
    d_slope = coeff_rng.normal(1.5, 0.3, spec.static_features)

    visits = []
    for i in range(spec.n_patients):
        rng = derive_rng(spec.seed, "cohort-patient", i)
        hours = int(rng.integers(spec.hours_min, spec.hours_max + 1))
        g = _simulate_latent(spec, hours, rng)
        h = np.clip(g, 0.0, 1.0)
        death_time = _sample_death_hour(spec, h, rng)
        if death_time is not None:
            hours = min(hours, int(np.floor(death_time)) + 1)
            g, h = g[:hours], h[:hours]

        structured = (w_intercept + np.outer(h, w_slope)
                      + spec.structured_noise_sd * rng.standard_normal((hours, spec.structured_features)))
        structured[rng.random((hours, spec.structured_features)) < spec.structured_missing_rate] = np.nan

        static = (d_intercept + d_slope * h[0]
                  + spec.static_noise_sd * rng.standard_normal(spec.static_features))
        static[rng.random(spec.static_features) < spec.static_missing_rate] = np.nan

        signal_missing = rng.random(hours) < spec.signal_missing_rate
        signals = np.zeros((hours, spec.channels, spec.samples_per_segment))
        for t in range(hours):
            if not signal_missing[t]:
                signals[t] = _synth_signal(spec, h[t], rng)

        pressure = PRESSURE_BASE + spec.pressure_gain * (h - spec.pressure_threshold)
        if spec.pressure_missing_rate > 0:
            pressure[rng.random(hours) < spec.pressure_missing_rate] = np.nan

        visits.append(VisitRecord(
            patient_id=f"p{i:05d}",
            static=static,
            structured=structured,
            signals=signals,
            signal_missing=signal_missing,
            death_time=death_time,
            pressure_mean=pressure,
            latent=g,
        ).validate())
    return visits
