"""Stabilization metrics and the corpus evaluation harness.

Convention for the two ratios: raw distance over predicted distance, so a
value above 1 means the prediction sits tighter / closer than the raw gaze.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core import GazeError, Trial
from .training import Forecaster, history_window, sliding_rollout


def _dist(points, target) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if p.shape[0] == 0:
        raise GazeError("empty point set")
    return np.linalg.norm(p - np.asarray(target, dtype=np.float64), axis=1)


def concentration_improvement(raw, pred, target, eps: float = 1e-9) -> float:
    """Ratio of root-mean-square distances to the target, raw over predicted."""
    r = np.sqrt(np.mean(_dist(raw, target) ** 2))
    p = np.sqrt(np.mean(_dist(pred, target) ** 2))
    return float(r / (p + eps))


def accuracy_improvement(raw, pred, target, eps: float = 1e-9) -> float:
    """Ratio of mean distances to the target, raw over predicted."""
    return float(np.mean(_dist(raw, target)) / (np.mean(_dist(pred, target)) + eps))


def average_distance(pred, target) -> float:
    return float(np.mean(_dist(pred, target)))


@dataclass(frozen=True)
class EvalConfig:
    horizon: int = 64
    window: int = 16
    hist_buffer: int = 96
    sample_rate: float = 60.0
    epsilon: float = 1e-9


@dataclass
class TrialMetrics:
    trial_id: str
    ci: float
    ai: float
    ad_pred: float
    ad_raw: float
    n_points: int
    rollout_seconds: float = 0.0


@dataclass
class MetricsReport:
    per_trial: list[TrialMetrics]
    skipped: list[tuple[str, str]] = field(default_factory=list)
    epsilon: float = 1e-9

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for key in ("ci", "ai", "ad_pred", "ad_raw"):
            vals = np.array([getattr(m, key) for m in self.per_trial], dtype=np.float64)
            out[key] = (float(vals.mean()), float(vals.std())) if vals.size else (float("nan"),) * 2
        return out

    def timing(self) -> tuple[float, float]:
        secs = np.array([m.rollout_seconds for m in self.per_trial])
        return (float(secs.mean()), float(secs.std())) if secs.size else (float("nan"),) * 2

    def to_dict(self, include_timing: bool = False) -> dict:
        trials = []
        for m in self.per_trial:
            d = asdict(m)
            if not include_timing:
                d.pop("rollout_seconds")
            trials.append(d)
        agg = {k: {"mean": v[0], "std": v[1]} for k, v in self.aggregate().items()}
        out = {"epsilon": self.epsilon, "n_trials": len(self.per_trial),
               "aggregate": agg, "per_trial": trials,
               "skipped": [{"trial_id": t, "reason": r} for t, r in self.skipped]}
        if include_timing:
            mean, std = self.timing()
            out["timing"] = {"mean_seconds": mean, "std_seconds": std}
        return out

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def to_text(self, include_timing: bool = True) -> str:
        agg = self.aggregate()
        lines = [f"trials evaluated: {len(self.per_trial)}  skipped: {len(self.skipped)}",
                 f"{'metric':<8}{'mean':>14}{'std':>14}"]
        for label, key in (("CI", "ci"), ("AI", "ai"), ("AD", "ad_pred"), ("AD_raw", "ad_raw")):
            mean, std = agg[key]
            lines.append(f"{label:<8}{mean:>14.6f}{std:>14.6f}")
        if include_timing:
            mean, std = self.timing()
            lines.append(f"{'rollout':<8}{mean:>13.6f}s{std:>13.6f}s")
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["trial_id", "ci", "ai", "ad_pred", "ad_raw", "n_points", "rollout_seconds"])
            for m in self.per_trial:
                writer.writerow([m.trial_id, repr(m.ci), repr(m.ai), repr(m.ad_pred),
                                 repr(m.ad_raw), m.n_points, repr(m.rollout_seconds)])


def predict_trial(model: Forecaster, trial: Trial, cfg: EvalConfig = EvalConfig()) -> np.ndarray:
    """Roll the model forward from the pre-onset history; ``[horizon, 2]`` positions."""
    hist, times = history_window(trial, cfg.hist_buffer, cfg.sample_rate)
    param = next(iter(model.parameters()), None) if isinstance(model, torch.nn.Module) else None
    dtype = param.dtype if param is not None else torch.float32
    with torch.no_grad():
        out = sliding_rollout(model, torch.tensor(hist, dtype=dtype), cfg.window, cfg.horizon,
                              times=torch.tensor(times, dtype=dtype), sample_rate=cfg.sample_rate,
                              hist_len=getattr(getattr(model, "cfg", None), "hist_len", None))
    return out[:, :2].double().numpy()


def evaluate_corpus(model: Forecaster, trials: Sequence[Trial],
                    cfg: EvalConfig = EvalConfig()) -> MetricsReport:
    """Per-trial CI/AI/AD of rolled-out predictions against the raw fixation."""
    if isinstance(model, torch.nn.Module):
        model.eval()
    per_trial, skipped = [], []
    for trial in trials:
        onset = trial.fixation_onset
        if onset is None:
            skipped.append((trial.id, "no fixation onset"))
            continue
        if len(trial) - onset < cfg.horizon:
            skipped.append((trial.id, f"fixation shorter than horizon {cfg.horizon}"))
            continue
        raw = trial.positions()[onset:onset + cfg.horizon]
        start = time.perf_counter()
        pred = predict_trial(model, trial, cfg)
        elapsed = time.perf_counter() - start
        g = trial.target
        per_trial.append(TrialMetrics(
            trial.id,
            concentration_improvement(raw, pred, g, cfg.epsilon),
            accuracy_improvement(raw, pred, g, cfg.epsilon),
            average_distance(pred, g),
            average_distance(raw, g),
            len(pred),
            elapsed,
        ))
    return MetricsReport(per_trial, skipped, cfg.epsilon)
