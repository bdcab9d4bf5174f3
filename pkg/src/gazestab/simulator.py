"""Desk-scale synthetic trials: a minimum-jerk approach then a noisy fixation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GazeError, Trial, samples_from_arrays


@dataclass(frozen=True)
class SimConfig:
    n_trials: int = 200
    sample_rate: float = 60.0
    trial_len: int = 300
    plane_extent: float = 2.0
    plane_distance: float = 3.0
    saccade_peak_speed: float = 2.5
    fixation_noise_sigma: float = 0.02
    fixation_bias_sigma: float = 0.015
    noise_corr: float = 0.9
    speed_jitter: float = 0.1
    min_start_distance: float = 0.4
    max_offset: float = 0.09
    onset_range: tuple[int, int] = (60, 120)
    # larger gaze shifts take longer: landing index grows with distance
    duration_span: float = 1.0
    duration_jitter: float = 3.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "onset_range", tuple(int(v) for v in self.onset_range))
        lo, hi = self.onset_range
        if not 1 <= lo <= hi:
            raise GazeError("onset_range must be an increasing positive interval")
        if self.trial_len <= hi:
            raise GazeError("trial_len must exceed max(onset_range)")
        if min(self.fixation_noise_sigma, self.fixation_bias_sigma, self.speed_jitter) < 0:
            raise GazeError("sigmas must be non-negative")
        if self.n_trials < 0 or self.saccade_peak_speed <= 0:
            raise GazeError("invalid SimConfig")
        if self.duration_span <= 0 or self.duration_jitter < 0:
            raise GazeError("duration_span must be positive and duration_jitter non-negative")
        if not 0.0 <= self.noise_corr < 1.0:
            raise GazeError("noise_corr must lie in [0, 1)")


def min_jerk_profile(n: int) -> np.ndarray:
    """Normalized minimum-jerk position at ``n + 1`` evenly spaced phases."""
    s = np.linspace(0.0, 1.0, n + 1)
    return 10 * s**3 - 15 * s**4 + 6 * s**5


def _ar1_noise(rng: np.random.Generator, n: int, sigma: float, rho: float) -> np.ndarray:
    """Stationary AR(1) noise, two axes, marginal stddev ``sigma``."""
    out = np.empty((n, 2))
    out[0] = rng.normal(0.0, sigma, 2)
    innov = rng.normal(0.0, sigma * np.sqrt(1.0 - rho**2), (n, 2))
    for i in range(1, n):
        out[i] = rho * out[i - 1] + innov[i]
    return out


def _clip_radius(offsets: np.ndarray, r: float) -> np.ndarray:
    norm = np.linalg.norm(offsets, axis=-1, keepdims=True)
    scale = np.minimum(1.0, r / np.maximum(norm, 1e-300))
    return offsets * scale


def simulate_trial(cfg: SimConfig, rng: np.random.Generator, trial_id: str = "sim") -> Trial:
    half = cfg.plane_extent / 2.0
    margin = 0.15 * half
    target = rng.uniform(-half + margin, half - margin, 2)
    while True:
        start = rng.uniform(-half + 0.1 * half, half - 0.1 * half, 2)
        if np.linalg.norm(start - target) >= cfg.min_start_distance:
            break
    lo, hi = cfg.onset_range
    dist = float(np.linalg.norm(start - target))
    frac = min(1.0, (dist - cfg.min_start_distance) / cfg.duration_span)
    landing = lo + frac * (hi - lo) + rng.normal(0.0, cfg.duration_jitter)
    landing = int(np.clip(round(landing), lo, hi))
    # minimum-jerk peak speed is 1.875 * distance / duration
    need = int(np.ceil(1.875 * dist / cfg.saccade_peak_speed * cfg.sample_rate))
    landing = min(max(landing, need), hi)

    bias = rng.normal(0.0, cfg.fixation_bias_sigma, 2) if cfg.fixation_bias_sigma > 0 else np.zeros(2)
    center = target + bias

    n = cfg.trial_len
    phase = min_jerk_profile(landing)
    if cfg.speed_jitter > 0:
        steps = np.diff(phase) * np.clip(1.0 + rng.normal(0.0, cfg.speed_jitter, landing), 0.05, None)
        phase = np.concatenate([[0.0], np.cumsum(steps) / steps.sum()])
    path = np.empty((n, 2))
    path[:landing + 1] = start + phase[:, None] * (center - start)
    path[landing:] = center

    if cfg.fixation_noise_sigma > 0:
        noise = _ar1_noise(rng, n, cfg.fixation_noise_sigma, cfg.noise_corr)
    else:
        noise = np.zeros((n, 2))
    pos = path + noise
    # keep the fixation inside the cleaning radius and everything on the plane
    pos[landing:] = target + _clip_radius(pos[landing:] - target, cfg.max_offset)
    pos = np.clip(pos, -0.99 * half, 0.99 * half)

    t = np.arange(n) / cfg.sample_rate
    samples = samples_from_arrays(t, pos, cfg.sample_rate, cfg.plane_distance)
    return Trial(
        id=trial_id,
        target=(float(target[0]), float(target[1])),
        samples=tuple(samples),
        plane_distance=cfg.plane_distance,
        plane_extent=(cfg.plane_extent, cfg.plane_extent),
        extra={"landing_index": landing, "start": [float(start[0]), float(start[1])],
               "bias": [float(bias[0]), float(bias[1])]},
    )


def simulate_corpus(cfg: SimConfig) -> list[Trial]:
    """``cfg.n_trials`` trials, each from its own child of the seed sequence."""
    children = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.n_trials)
    return [simulate_trial(cfg, np.random.default_rng(child), f"s{cfg.rng_seed}-{i:05d}")
            for i, child in enumerate(children)]
