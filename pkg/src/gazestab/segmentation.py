"""Fixation-onset detection and trial exclusion rules."""
from __future__ import annotations

import csv
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (FixationConfig, GazeError, GazeSample, InsufficientDataError, Trial,
                   TrialStateError)


class ExclusionReason(str, enum.Enum):
    NONE = "none"
    SHORT_FIXATION = "short_fixation"
    OUT_OF_BOUNDS = "out_of_bounds"
    FIXATION_LOSS = "fixation_loss"


@dataclass(frozen=True)
class CleaningRules:
    min_uninterrupted_fixation: float = 2.5
    eval_window: float = 5.0
    max_consecutive_outside: int = 24
    outside_radius: float = 0.1
    plane_extent: float = 2.0

    def __post_init__(self):
        if min(self.min_uninterrupted_fixation, self.eval_window, self.outside_radius,
               self.plane_extent) <= 0:
            raise GazeError("CleaningRules values must be strictly positive")
        if self.max_consecutive_outside < 1:
            raise GazeError("max_consecutive_outside must be >= 1")


@dataclass(frozen=True)
class SegmentationResult:
    trial_id: str
    onset_index: int | None
    search_len: int
    fixation_len: int
    excluded: bool
    exclusion_reason: ExclusionReason = ExclusionReason.NONE

    def __post_init__(self):
        if self.excluded != (self.exclusion_reason is not ExclusionReason.NONE):
            raise GazeError("excluded must agree with exclusion_reason")
        if self.onset_index is not None and self.excluded:
            raise GazeError("excluded trials carry no onset")


def _distances(trial: Trial) -> np.ndarray:
    return np.linalg.norm(trial.positions() - np.asarray(trial.target), axis=1)


def fixation_onset(trial: Trial, cfg: FixationConfig = FixationConfig()) -> int | None:
    """Index of the first window that is inside the target region and slow.

    A window is ``cfg.window_samples`` consecutive samples; it qualifies when
    every sample lies within ``region_radius`` of the target and the mean
    angular speed is below ``ang_vel_threshold``.
    """
    w = cfg.window_samples
    n = len(trial.samples)
    if n < w:
        raise InsufficientDataError(f"trial {trial.id!r} shorter than the {w}-sample window")
    inside = (_distances(trial) <= cfg.region_radius).astype(np.int64)
    ang = trial.speeds()[:, 1]
    inside_count = np.convolve(inside, np.ones(w, dtype=np.int64), mode="valid")
    csum = np.concatenate([[0.0], np.cumsum(ang)])
    window_sum = csum[w:] - csum[:-w]
    ok = (inside_count == w) & (window_sum < cfg.ang_vel_threshold * w)
    hits = np.flatnonzero(ok)
    return int(hits[0]) if hits.size else None


def _longest_run(mask: np.ndarray) -> int:
    best = run = 0
    for m in mask:
        run = run + 1 if m else 0
        best = max(best, run)
    return best


def classify_trial(trial: Trial, rules: CleaningRules = CleaningRules(),
                   cfg: FixationConfig = FixationConfig()) -> SegmentationResult:
    n = len(trial.samples)

    def excluded(reason: ExclusionReason) -> SegmentationResult:
        return SegmentationResult(trial.id, None, 0, 0, True, reason)

    try:
        dist = _distances(trial)
        pos = trial.positions()
    except (ValueError, GazeError):
        return excluded(ExclusionReason.SHORT_FIXATION)
    if not np.all(np.isfinite(pos)):
        return excluded(ExclusionReason.SHORT_FIXATION)

    # (1) uninterrupted fixation inside the early evaluation window
    t = trial.times()
    early = (t - t[0]) < rules.eval_window
    run = _longest_run(dist[early] <= rules.outside_radius)
    if run / cfg.sample_rate < rules.min_uninterrupted_fixation - 1e-9:
        return excluded(ExclusionReason.SHORT_FIXATION)

    # (2) gaze leaving the virtual area
    half = rules.plane_extent / 2.0
    if np.any(np.abs(pos) > half):
        return excluded(ExclusionReason.OUT_OF_BOUNDS)

    # (3) loss of fixation after onset
    try:
        onset = fixation_onset(trial, cfg)
    except InsufficientDataError:
        onset = None
    if onset is None:
        return excluded(ExclusionReason.SHORT_FIXATION)
    outside_run = _longest_run(dist[onset:] > rules.outside_radius)
    if outside_run >= rules.max_consecutive_outside:
        return excluded(ExclusionReason.FIXATION_LOSS)
    return SegmentationResult(trial.id, onset, onset, n - onset, False)


def clean_corpus(trials: Sequence[Trial], rules: CleaningRules = CleaningRules(),
                 cfg: FixationConfig = FixationConfig(),
                 threads: int = 1) -> tuple[list[Trial], list[SegmentationResult]]:
    """Classify every trial; return kept trials (with onset set) and the report.

    Rules are checked in order short_fixation, out_of_bounds, fixation_loss and
    the first match wins. Output order follows input order.
    """
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            report = list(pool.map(lambda tr: classify_trial(tr, rules, cfg), trials))
    else:
        report = [classify_trial(tr, rules, cfg) for tr in trials]
    kept = [tr.with_onset(res.onset_index) for tr, res in zip(trials, report) if not res.excluded]
    return kept, report


def split_phases(trial: Trial) -> tuple[list[GazeSample], list[GazeSample]]:
    if trial.fixation_onset is None:
        raise TrialStateError(f"trial {trial.id!r} has no fixation onset")
    k = trial.fixation_onset
    return list(trial.samples[:k]), list(trial.samples[k:])


def write_report(path: str | Path, report: Sequence[SegmentationResult]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial_id", "onset_index", "excluded", "reason"])
        for r in report:
            writer.writerow([r.trial_id, "" if r.onset_index is None else r.onset_index,
                             str(r.excluded).lower(), r.exclusion_reason.value])
