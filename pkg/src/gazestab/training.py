"""Losses, sliding-window rollout, the training loop and gradient checking."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .augmentation import source_id
from .core import GazeError, InsufficientDataError, Trial
from .model import GazeForecaster, ModelConfig, parameter_group

log = logging.getLogger(__name__)

Forecaster = Callable[[Tensor, Tensor], Tensor]


@dataclass(frozen=True)
class LossConfig:
    lambda_c: float = 0.001
    lambda_v: float = 0.05
    lam: float = 0.9
    weight_decay: float = 1e-4
    velocity_dt: float = 1.0

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_v, self.lam, self.weight_decay) < 0:
            raise GazeError("loss weights must be non-negative")
        if self.lam > 1:
            raise GazeError("lambda must not exceed 1")
        if self.velocity_dt <= 0:
            raise GazeError("velocity_dt must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    epochs: int = 200
    patience: int = 20
    batch_size: int = 64
    window: int = 16
    hist_buffer: int = 96
    seed: int = 0
    val_fraction: float = 0.2
    sample_rate: float = 60.0
    detach_windows: bool = False

    def __post_init__(self):
        if self.patience < 1 or self.epochs < 1 or self.batch_size < 1 or self.window < 1:
            raise GazeError("epochs, patience, batch_size and window must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise GazeError("val_fraction must lie in [0, 1)")


# --- losses -------------------------------------------------------------------

def _as_batch(points: Tensor) -> Tensor:
    return points[None] if points.dim() == 2 else points


def loss_comb(pred: Tensor, truth: Tensor, lambda_c: float = 0.001,
              lambda_v: float = 0.05) -> Tensor:
    """Pointwise MSE plus centroid and per-axis-variance consistency.

    Accepts ``[n, 2]`` point sets or ``[B, n, 2]`` batches (averaged over B).
    """
    if pred.shape != truth.shape:
        raise GazeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(truth.shape)}")
    p, q = _as_batch(pred), _as_batch(truth)
    if p.shape[1] < 1:
        raise InsufficientDataError("empty point set")
    mse = ((p - q) ** 2).sum(dim=-1).mean(dim=-1)
    mu_p, mu_q = p.mean(dim=1), q.mean(dim=1)
    center = ((mu_p - mu_q) ** 2).sum(dim=-1)
    var_p = ((p - mu_p[:, None]) ** 2).mean(dim=1)
    var_q = ((q - mu_q[:, None]) ** 2).mean(dim=1)
    dispersion = (var_p - var_q).abs().sum(dim=-1)
    return (mse + lambda_c * center + lambda_v * dispersion).mean()


def loss_velocity(pred: Tensor, truth: Tensor, dt: float = 1.0) -> Tensor:
    """MSE between finite-difference velocity sequences (squared norm per step)."""
    if pred.shape != truth.shape:
        raise GazeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(truth.shape)}")
    p, q = _as_batch(pred), _as_batch(truth)
    if p.shape[1] < 2:
        raise InsufficientDataError("velocity loss needs at least 2 points")
    vp = torch.diff(p, dim=1) / dt
    vq = torch.diff(q, dim=1) / dt
    return ((vp - vq) ** 2).sum(dim=-1).mean()


def l2_penalty(model: GazeForecaster) -> Tensor:
    return sum((w ** 2).sum() for w in model.weight_tensors())


def total_loss(pred: Tensor, truth: Tensor, cfg: LossConfig = LossConfig(),
               model: GazeForecaster | None = None) -> Tensor:
    data = cfg.lam * loss_comb(pred, truth, cfg.lambda_c, cfg.lambda_v)
    if cfg.lam < 1:
        data = data + (1 - cfg.lam) * loss_velocity(pred, truth, cfg.velocity_dt)
    if model is not None and cfg.weight_decay > 0:
        data = data + cfg.weight_decay * l2_penalty(model)
    return data


# --- rollout -------------------------------------------------------------------

def sliding_rollout(model: Forecaster, history: Tensor, window: int, horizon: int,
                    times: Tensor | None = None, hist_len: int | None = None,
                    sample_rate: float = 60.0, detach: bool = False) -> Tensor:
    """Extend ``history`` by ``horizon`` steps, ``window`` self-predicted points at a time.

    ``history`` is ``[H, C]`` or ``[B, H, C]`` with ``H >= hist_len``. Each
    call sees the latest ``hist_len`` points of the working buffer; its first
    ``window`` outputs are appended to both the result and the buffer.
    """
    if window < 1:
        raise GazeError("sliding window must be >= 1")
    if horizon < 1:
        raise GazeError("horizon must be >= 1")
    if hist_len is None:
        hist_len = model.cfg.hist_len if isinstance(model, GazeForecaster) else history.shape[-2]
    single = history.dim() == 2
    buf = history[None] if single else history
    if buf.shape[1] < hist_len:
        raise InsufficientDataError(f"history has {buf.shape[1]} points, need {hist_len}")
    if times is None:
        steps = torch.arange(-buf.shape[1], 0, dtype=buf.dtype)
        tbuf = (steps / sample_rate).expand(buf.shape[0], -1)
    else:
        tbuf = times[None] if times.dim() == 1 else times
    produced = []
    count = 0
    while count < horizon:
        out = model(buf[:, -hist_len:], tbuf[:, -hist_len:])
        if out.shape[1] < window:
            raise GazeError(f"model forecast of {out.shape[1]} steps is shorter than window {window}")
        step = out[:, :window]
        produced.append(step)
        feed = step.detach() if detach else step
        buf = torch.cat([buf, feed], dim=1)
        ahead = tbuf[:, -1:] + torch.arange(1, window + 1, dtype=tbuf.dtype) / sample_rate
        tbuf = torch.cat([tbuf, ahead], dim=1)
        count += window
    result = torch.cat(produced, dim=1)[:, :horizon]
    return result[0] if single else result


# --- data ----------------------------------------------------------------------

@dataclass
class Examples:
    history: Tensor     # [N, hist_buffer, C]
    times: Tensor       # [N, hist_buffer], seconds relative to fixation onset
    target: Tensor      # [N, horizon, 2]
    groups: list[str]   # source trial id per example

    def __len__(self) -> int:
        return self.history.shape[0]

    def subset(self, idx: Sequence[int]) -> "Examples":
        idx_t = torch.as_tensor(list(idx), dtype=torch.long)
        return Examples(self.history[idx_t], self.times[idx_t], self.target[idx_t],
                        [self.groups[i] for i in idx])


def history_window(trial: Trial, length: int, sample_rate: float = 60.0) -> tuple[np.ndarray, np.ndarray]:
    """Last ``length`` pre-onset feature rows, edge-padded at the front.

    Returns (features [length, 4], times [length]) with times in seconds
    relative to the onset sample.
    """
    if trial.fixation_onset is None:
        raise GazeError(f"trial {trial.id!r} has no fixation onset")
    onset = trial.fixation_onset
    feats = trial.features()
    lo = onset - length
    idx = np.clip(np.arange(lo, onset), 0, None)
    if onset == 0:
        idx = np.zeros(length, dtype=int)
    times = np.arange(lo, onset, dtype=np.float64) - onset
    return feats[idx], times / sample_rate


def build_examples(corpus: Sequence[Trial], horizon: int, hist_buffer: int = 96,
                   sample_rate: float = 60.0) -> Examples:
    hist, times, target, groups = [], [], [], []
    for trial in corpus:
        onset = trial.fixation_onset
        if onset is None or len(trial) - onset < horizon:
            continue
        h, t = history_window(trial, hist_buffer, sample_rate)
        hist.append(h)
        times.append(t)
        target.append(trial.positions()[onset:onset + horizon])
        groups.append(source_id(trial))
    if not hist:
        raise GazeError("no trial yields a full training example")
    return Examples(torch.tensor(np.stack(hist), dtype=torch.float32),
                    torch.tensor(np.stack(times), dtype=torch.float32),
                    torch.tensor(np.stack(target), dtype=torch.float32), groups)


# --- training loop ---------------------------------------------------------------

def cosine_lr(epoch: int, lr0: float, epochs: int) -> float:
    """Learning rate for 1-based ``epoch`` of ``epochs``."""
    return lr0 / 2.0 * (1.0 + math.cos(math.pi * epoch / epochs))


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    alpha: float


@dataclass
class TrainResult:
    model: GazeForecaster
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf


def split_groups(groups: Sequence[str], val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Hold out whole source trials so synthetic twins never straddle the split."""
    unique = sorted(set(groups))
    rng = np.random.default_rng(seed)
    order = [unique[i] for i in rng.permutation(len(unique))]
    n_val = int(round(val_fraction * len(unique)))
    if val_fraction > 0:
        n_val = max(1, n_val)
    val_groups = set(order[:n_val])
    train_idx = [i for i, g in enumerate(groups) if g not in val_groups]
    val_idx = [i for i, g in enumerate(groups) if g in val_groups]
    return train_idx, val_idx


def _rollout_batch(model: GazeForecaster, ex: Examples, tcfg: TrainConfig) -> Tensor:
    pred = sliding_rollout(model, ex.history, min(tcfg.window, model.cfg.horizon),
                           ex.target.shape[1], times=ex.times, sample_rate=tcfg.sample_rate,
                           detach=tcfg.detach_windows)
    return pred[..., :2]


def evaluate_loss(model: GazeForecaster, ex: Examples, tcfg: TrainConfig,
                  lcfg: LossConfig) -> float:
    if len(ex) == 0:
        return math.nan
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(ex), tcfg.batch_size):
            part = ex.subset(range(start, min(start + tcfg.batch_size, len(ex))))
            loss = total_loss(_rollout_batch(model, part, tcfg), part.target, lcfg)
            total += float(loss) * len(part)
    return total / len(ex)


def train(corpus: Sequence[Trial], mcfg: ModelConfig = ModelConfig(),
          tcfg: TrainConfig = TrainConfig(), lcfg: LossConfig = LossConfig(),
          on_epoch: Callable[[EpochLog], None] | None = None) -> TrainResult:
    """Adam + cosine annealing with early stopping on held-out source trials.

    Returns the model restored to its best validation epoch.
    """
    examples = build_examples(corpus, mcfg.horizon, tcfg.hist_buffer, tcfg.sample_rate)
    train_idx, val_idx = split_groups(examples.groups, tcfg.val_fraction, tcfg.seed)
    if len(train_idx) < tcfg.batch_size:
        raise GazeError(f"corpus yields {len(train_idx)} training examples, "
                        f"fewer than one batch of {tcfg.batch_size}")
    tr, va = examples.subset(train_idx), examples.subset(val_idx)
    monitor = va if len(va) else tr

    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed + 1)
    model = GazeForecaster(mcfg)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr0, betas=(0.9, 0.999), eps=1e-8)
    result = TrainResult(model)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for epoch in range(1, tcfg.epochs + 1):
        lr = cosine_lr(epoch, tcfg.lr0, tcfg.epochs)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = rng.permutation(len(tr))
        running = 0.0
        for start in range(0, len(tr), tcfg.batch_size):
            batch = tr.subset(order[start:start + tcfg.batch_size].tolist())
            opt.zero_grad()
            loss = total_loss(_rollout_batch(model, batch, tcfg), batch.target, lcfg, model)
            loss.backward()
            opt.step()
            running += loss.item() * len(batch)
        model.eval()
        val = evaluate_loss(model, monitor, tcfg, lcfg)
        entry = EpochLog(epoch, running / len(tr), val, lr, model.alpha)
        result.log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.debug("epoch %d train %.6g val %.6g lr %.3g alpha %.3f",
                  epoch, entry.train_loss, val, lr, entry.alpha)
        if val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return result


def write_train_log(path: str | Path, entries: Sequence[EpochLog]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "alpha"])
        for e in entries:
            writer.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.lr), repr(e.alpha)])


# --- gradient verification -----------------------------------------------------------

@dataclass
class GradCheckReport:
    n_checked: int
    tolerance: float
    per_group: dict[str, tuple[float, float, int]]   # group -> (max err, mean err, count)
    offenders: list[tuple[str, tuple[int, ...], float, float, float]]
    max_error: float

    @property
    def passed(self) -> bool:
        return not self.offenders

    def summary(self) -> str:
        lines = [f"checked {self.n_checked} coordinates, max rel err {self.max_error:.3e} "
                 f"(tol {self.tolerance:g}): {'PASS' if self.passed else 'FAIL'}"]
        for g, (mx, mean, n) in sorted(self.per_group.items()):
            lines.append(f"  {g:<15} n={n:<4d} max={mx:.3e} mean={mean:.3e}")
        for name, idx, a, n, err in self.offenders[:20]:
            lines.append(f"  OFFENDER {name}{list(idx)} analytic={a:.6e} numeric={n:.6e} err={err:.3e}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps vanishing gradients from dividing noise by noise."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(model: GazeForecaster, history: Tensor, times: Tensor, target: Tensor,
               lcfg: LossConfig = LossConfig(), window: int | None = None,
               tolerance: float = 1e-4, n_coords: int = 240, step: float = 1e-4,
               seed: int = 0, sample_rate: float = 60.0) -> GradCheckReport:
    """Compare autograd gradients of the rollout loss with central differences.

    Runs on a float64 copy of ``model``. Coordinates are drawn evenly across
    parameter groups so every group is represented.
    """
    m = copy.deepcopy(model).double()
    m.eval()
    history, times, target = history.double(), times.double(), target.double()
    horizon = target.shape[1]
    w = window or min(16, m.cfg.horizon)

    def loss_fn() -> Tensor:
        pred = sliding_rollout(m, history, w, horizon, times=times, sample_rate=sample_rate)
        return total_loss(pred[..., :2], target, lcfg, m)

    m.zero_grad()
    loss_fn().backward()
    named = [(n, p) for n, p in m.named_parameters() if p.requires_grad]
    by_group: dict[str, list[tuple[str, Tensor]]] = {}
    for name, p in named:
        by_group.setdefault(parameter_group(name), []).append((name, p))

    rng = np.random.default_rng(seed)
    groups = sorted(by_group)
    capacity = {g: sum(p.numel() for _, p in by_group[g]) for g in groups}
    quota = {g: min(capacity[g], math.ceil(n_coords / len(groups))) for g in groups}
    # hand the unused share of tiny groups (alpha, time_proj) to larger ones
    while sum(quota.values()) < min(n_coords, sum(capacity.values())):
        for g in groups:
            if quota[g] < capacity[g] and sum(quota.values()) < n_coords:
                quota[g] += 1
    picks: list[tuple[str, str, Tensor, int]] = []
    for group in groups:
        params = by_group[group]
        sizes = np.array([p.numel() for _, p in params])
        chosen = rng.choice(capacity[group], size=quota[group], replace=False)
        bounds = np.cumsum(sizes)
        for c in sorted(chosen.tolist()):
            k = int(np.searchsorted(bounds, c, side="right"))
            offset = c - (bounds[k - 1] if k else 0)
            picks.append((group, params[k][0], params[k][1], int(offset)))

    errors: dict[str, list[float]] = {}
    offenders = []
    with torch.no_grad():
        for group, name, p, offset in picks:
            flat = p.view(-1)
            analytic = float(p.grad.view(-1)[offset]) if p.grad is not None else 0.0
            orig = float(flat[offset])
            flat[offset] = orig + step
            up = float(loss_fn())
            flat[offset] = orig - step
            down = float(loss_fn())
            flat[offset] = orig
            numeric = (up - down) / (2 * step)
            err = relative_error(analytic, numeric)
            errors.setdefault(group, []).append(err)
            if err >= tolerance:
                idx = tuple(int(i) for i in np.unravel_index(offset, tuple(p.shape))) if p.dim() else ()
                offenders.append((name, idx, analytic, numeric, err))
    per_group = {g: (max(v), float(np.mean(v)), len(v)) for g, v in errors.items()}
    max_err = max((v[0] for v in per_group.values()), default=0.0)
    return GradCheckReport(len(picks), tolerance, per_group, offenders, max_err)
