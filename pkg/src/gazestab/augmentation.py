"""Target-contracted synthetic fixation sequences and corpus blending."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .core import GazeError, Trial, TrialStateError


@dataclass(frozen=True)
class AugmentConfig:
    beta: float = 0.5
    blend_ratio: float = 0.5
    rng_seed: int = 0
    literal_formula: bool = False

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise GazeError("beta must lie in (0, 1)")
        if not 0.0 <= self.blend_ratio <= 1.0:
            raise GazeError("blend_ratio must lie in [0, 1]")


def _ray_angle_deg(p: np.ndarray, q: np.ndarray, origin, plane_distance: float) -> float:
    o = np.asarray(origin, dtype=np.float64)
    a = np.array([p[0], p[1], plane_distance]) - o
    b = np.array([q[0], q[1], plane_distance]) - o
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def synthesize_trial(trial: Trial, beta: float, sample_rate: float = 60.0,
                     literal_formula: bool = False) -> Trial:
    """Contract every post-onset point toward the target by ``beta``.

    Samples up to and including the onset index are copied. Later points
    become ``g + beta * (p - g)`` and their linear speed is recomputed from
    the contracted positions (the predecessor of the first contracted point
    is the untouched onset sample). With ``literal_formula`` the raw position
    is scaled instead of the target offset.
    """
    if trial.fixation_onset is None:
        raise TrialStateError(f"trial {trial.id!r} has no fixation onset")
    if not 0.0 < beta < 1.0:
        raise GazeError("beta must lie in (0, 1)")
    onset = trial.fixation_onset
    g = np.asarray(trial.target, dtype=np.float64)
    pos = trial.positions()
    new_pos = pos.copy()
    if literal_formula:
        new_pos[onset + 1:] = g + beta * pos[onset + 1:]
    else:
        new_pos[onset + 1:] = g + beta * (pos[onset + 1:] - g)
    dt = 1.0 / sample_rate

    samples = list(trial.samples[:onset + 1])
    ang_method = "beta_scaled"
    for i in range(onset + 1, len(trial.samples)):
        src = trial.samples[i]
        lin = float(np.linalg.norm(new_pos[i] - new_pos[i - 1]) / dt)
        origin = src.gaze_origin
        if origin is not None:
            ang = _ray_angle_deg(new_pos[i], new_pos[i - 1], origin, trial.plane_distance) / dt
            ang_method = "ray_lift"
        else:
            ang = src.ang_speed * beta
        samples.append(replace(src, pos=(float(new_pos[i, 0]), float(new_pos[i, 1])),
                               lin_speed=lin, ang_speed=ang, gaze_dir=None))
    extra = dict(trial.extra)
    extra.update({"synthetic": True, "beta": beta, "source_id": trial.id,
                  "ang_speed_method": ang_method})
    return replace(trial, id=f"{trial.id}#syn", samples=tuple(samples), extra=extra)


def source_id(trial: Trial) -> str:
    """Id of the real trial a (possibly synthetic) trial derives from."""
    return str(trial.extra.get("source_id", trial.id))


def blend_corpus(real: Sequence[Trial], cfg: AugmentConfig = AugmentConfig(),
                 sample_rate: float = 60.0) -> list[Trial]:
    """All real trials plus seeded synthetic counterparts, shuffled.

    The synthetic count ``s`` solves ``s / (s + r) = blend_ratio`` rounded to
    the nearest trial; when it exceeds the real count, sources are reused.
    """
    if not real:
        raise GazeError("cannot blend an empty corpus")
    rng = np.random.default_rng(cfg.rng_seed)
    r = len(real)
    if cfg.blend_ratio >= 1.0:
        raise GazeError("blend_ratio of 1 leaves no room for real trials")
    n_syn = int(round(cfg.blend_ratio * r / (1.0 - cfg.blend_ratio)))
    picks: list[int] = []
    while len(picks) < n_syn:
        take = min(r, n_syn - len(picks))
        picks.extend(sorted(rng.choice(r, size=take, replace=False).tolist()))
    synthetic = []
    for k, idx in enumerate(picks):
        syn = synthesize_trial(real[idx], cfg.beta, sample_rate, cfg.literal_formula)
        if k >= r:
            syn = replace(syn, id=f"{syn.id}{k // r}")
        synthetic.append(syn)
    corpus = list(real) + synthetic
    order = rng.permutation(len(corpus))
    return [corpus[i] for i in order]
