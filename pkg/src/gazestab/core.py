"""Gaze domain types, plane geometry and velocity derivation.

All positions live in target-plane coordinates: meters, origin at the
plane center, the plane sitting ``plane_distance`` meters along +z from
the viewer.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np


class GazeError(ValueError):
    """Base class for domain errors raised by this package."""


class InsufficientDataError(GazeError):
    pass


class NoIntersectionError(GazeError):
    pass


class TrialStateError(GazeError):
    pass


class SchemaError(GazeError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class GazeSample:
    t: float
    pos: tuple[float, float]
    lin_speed: float = 0.0
    ang_speed: float = 0.0
    head_pos: tuple[float, float, float] | None = None
    gaze_origin: tuple[float, float, float] | None = None
    gaze_dir: tuple[float, float, float] | None = None
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise GazeError(f"non-finite timestamp {self.t!r}")
        if self.lin_speed < 0 or self.ang_speed < 0:
            raise GazeError("speeds must be non-negative")
        if self.gaze_dir is not None:
            norm = math.sqrt(sum(c * c for c in self.gaze_dir))
            if abs(norm - 1.0) > 1e-6:
                raise GazeError(f"gaze_dir norm {norm} is not unit")


@dataclass(frozen=True)
class FixationConfig:
    region_radius: float = 0.1
    ang_vel_threshold: float = 20.0
    window_samples: int = 12
    sample_rate: float = 60.0

    def __post_init__(self):
        if min(self.region_radius, self.ang_vel_threshold, self.sample_rate) <= 0:
            raise GazeError("FixationConfig values must be strictly positive")
        if self.window_samples < 2:
            raise GazeError("window_samples must be >= 2")


@dataclass(frozen=True)
class Trial:
    id: str
    target: tuple[float, float]
    samples: tuple[GazeSample, ...]
    plane_distance: float = 3.0
    plane_extent: tuple[float, float] = (2.0, 2.0)
    fixation_onset: int | None = None
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise GazeError(f"trial {self.id!r} has no samples")
        ts = [s.t for s in self.samples]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise GazeError(f"trial {self.id!r} timestamps decrease")
        hx, hy = self.plane_extent[0] / 2, self.plane_extent[1] / 2
        if abs(self.target[0]) > hx or abs(self.target[1]) > hy:
            raise GazeError(f"trial {self.id!r} target outside plane extent")
        if self.fixation_onset is not None:
            if not 0 <= self.fixation_onset <= len(self.samples) - 12:
                raise GazeError(f"trial {self.id!r} fixation_onset out of range")

    def __len__(self) -> int:
        return len(self.samples)

    def positions(self) -> np.ndarray:
        return np.array([s.pos for s in self.samples], dtype=np.float64)

    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples], dtype=np.float64)

    def speeds(self) -> np.ndarray:
        """``[n, 2]`` array of (lin_speed, ang_speed)."""
        return np.array([(s.lin_speed, s.ang_speed) for s in self.samples], dtype=np.float64)

    def features(self) -> np.ndarray:
        """``[n, 4]`` feature matrix: pos_x, pos_y, lin_speed, ang_speed."""
        return np.concatenate([self.positions(), self.speeds()], axis=1)

    def with_onset(self, onset: int | None) -> "Trial":
        return replace(self, fixation_onset=onset)

    def check_sampling(self, sample_rate: float = 60.0, jitter: float = 0.2) -> bool:
        """True when every sampling interval is within ``jitter`` of 1/rate."""
        if len(self.samples) < 2:
            return True
        dt = np.diff(self.times())
        nominal = 1.0 / sample_rate
        return bool(np.all(np.abs(dt - nominal) <= jitter * nominal))


def visual_angle(object_diameter: float, distance: float) -> float:
    """Angle in degrees subtended by an object of the given diameter."""
    if not distance > 0:
        raise GazeError("distance must be positive")
    if object_diameter < 0:
        raise GazeError("object_diameter must be non-negative")
    return math.degrees(2.0 * math.atan(object_diameter / (2.0 * distance)))


def project_to_plane(origin: Sequence[float], direction: Sequence[float],
                     plane_distance: float) -> np.ndarray:
    """Intersect a gaze ray with the plane ``z = plane_distance``."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if d[2] <= 1e-12:
        raise NoIntersectionError("gaze ray does not reach the target plane")
    s = (plane_distance - o[2]) / d[2]
    if s < 0:
        raise NoIntersectionError("target plane lies behind the gaze origin")
    hit = o + s * d
    return hit[:2].copy()


def _angle_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    cos = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def derive_velocities(samples: Sequence[GazeSample], sample_rate: float = 60.0,
                      plane_distance: float = 3.0) -> list[GazeSample]:
    """Fill lin_speed and ang_speed by backward differences.

    Angular speed comes from consecutive gaze directions when every sample
    carries one; otherwise from the plane displacement using the small-angle
    relation at ``plane_distance``. Index 0 copies index 1.
    """
    if len(samples) < 2:
        raise InsufficientDataError("need at least 2 samples to derive velocities")
    pos = np.array([s.pos for s in samples], dtype=np.float64)
    if not np.all(np.isfinite(pos)):
        raise GazeError("positions must be finite")
    dt = 1.0 / sample_rate
    step = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    lin = np.empty(len(samples))
    lin[1:] = step / dt
    lin[0] = lin[1]
    ang = np.empty(len(samples))
    if all(s.gaze_dir is not None for s in samples):
        dirs = np.array([s.gaze_dir for s in samples], dtype=np.float64)
        ang[1:] = _angle_between(dirs[1:], dirs[:-1]) / dt
    else:
        ang[1:] = np.degrees(step / plane_distance) / dt
    ang[0] = ang[1]
    return [replace(s, lin_speed=float(l), ang_speed=float(a))
            for s, l, a in zip(samples, lin, ang)]


def samples_from_arrays(t: np.ndarray, pos: np.ndarray, sample_rate: float = 60.0,
                        plane_distance: float = 3.0) -> list[GazeSample]:
    raw = [GazeSample(t=float(ti), pos=(float(p[0]), float(p[1]))) for ti, p in zip(t, pos)]
    return derive_velocities(raw, sample_rate, plane_distance)


# --- JSONL interchange -------------------------------------------------------

_SAMPLE_KEYS = {"t", "pos", "lin_speed", "ang_speed", "head_pos", "gaze_origin", "gaze_dir"}
_TRIAL_KEYS = {"id", "target", "plane_distance", "plane_extent", "samples", "fixation_onset"}


def _vec(value, n: int, what: str):
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or len(value) != n:
        raise SchemaError(f"{what} must be a list of {n} numbers")
    return tuple(float(v) for v in value)


def sample_to_dict(s: GazeSample) -> dict[str, Any]:
    out: dict[str, Any] = {"t": s.t, "pos": list(s.pos),
                           "lin_speed": s.lin_speed, "ang_speed": s.ang_speed}
    for key in ("head_pos", "gaze_origin", "gaze_dir"):
        v = getattr(s, key)
        if v is not None:
            out[key] = list(v)
    out.update(s.extra)
    return out


def sample_from_dict(d: dict[str, Any]) -> GazeSample:
    try:
        return GazeSample(
            t=float(d["t"]),
            pos=_vec(d["pos"], 2, "pos"),
            lin_speed=float(d.get("lin_speed", 0.0)),
            ang_speed=float(d.get("ang_speed", 0.0)),
            head_pos=_vec(d.get("head_pos"), 3, "head_pos"),
            gaze_origin=_vec(d.get("gaze_origin"), 3, "gaze_origin"),
            gaze_dir=_vec(d.get("gaze_dir"), 3, "gaze_dir"),
            extra={k: v for k, v in d.items() if k not in _SAMPLE_KEYS},
        )
    except KeyError as exc:
        raise SchemaError(f"sample missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"bad sample: {exc}") from None


def trial_to_dict(trial: Trial) -> dict[str, Any]:
    out: dict[str, Any] = {
        "id": trial.id,
        "target": list(trial.target),
        "plane_distance": trial.plane_distance,
        "samples": [sample_to_dict(s) for s in trial.samples],
    }
    if trial.plane_extent != (2.0, 2.0):
        out["plane_extent"] = list(trial.plane_extent)
    if trial.fixation_onset is not None:
        out["fixation_onset"] = trial.fixation_onset
    out.update(trial.extra)
    return out


def trial_from_dict(d: dict[str, Any]) -> Trial:
    if not isinstance(d, dict):
        raise SchemaError("trial record must be a JSON object")
    try:
        samples = d["samples"]
        if not isinstance(samples, list):
            raise SchemaError("samples must be a list")
        onset = d.get("fixation_onset")
        return Trial(
            id=str(d["id"]),
            target=_vec(d["target"], 2, "target"),
            samples=tuple(sample_from_dict(s) for s in samples),
            plane_distance=float(d.get("plane_distance", 3.0)),
            plane_extent=_vec(d.get("plane_extent", [2.0, 2.0]), 2, "plane_extent"),
            fixation_onset=None if onset is None else int(onset),
            extra={k: v for k, v in d.items() if k not in _TRIAL_KEYS},
        )
    except KeyError as exc:
        raise SchemaError(f"trial missing field {exc.args[0]!r}") from None
    except SchemaError:
        raise
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc)) from None


def dumps_trial(trial: Trial) -> str:
    return json.dumps(trial_to_dict(trial), separators=(",", ":"))


def write_trials(path: str | Path, trials: Iterable[Trial]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for trial in trials:
            fh.write(dumps_trial(trial))
            fh.write("\n")
            n += 1
    return n


def iter_trials(path: str | Path) -> Iterator[Trial]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", lineno) from None
            try:
                yield trial_from_dict(record)
            except GazeError as exc:
                msg = str(exc) if not isinstance(exc, SchemaError) else str(exc)
                raise SchemaError(msg, lineno) from None


def read_trials(path: str | Path) -> list[Trial]:
    return list(iter_trials(path))
