"""Sequence-to-sequence gaze forecaster.

Pipeline per call: per-instance standardization, token/position/time
embedding, a learned map that stretches the time axis from ``hist_len`` to
``hist_len + horizon``, FFT-period residual blocks, and a projection that
mixes a self-attention branch with a linear branch through a sigmoid gate.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import GazeError, InsufficientDataError

PROJECTIONS = ("fused", "attention", "linear")


@dataclass(frozen=True)
class ModelConfig:
    c_in: int = 4
    d_model: int = 16
    n_heads: int = 8
    n_blocks: int = 2
    top_k_periods: int = 2
    inception_kernels: tuple[int, ...] = (1, 3, 5)
    d_ff: int = 16
    hist_len: int = 64
    horizon: int = 64
    alpha_init: float = 0.5
    std_epsilon: float = 1e-5
    projection: str = "fused"

    def __post_init__(self):
        object.__setattr__(self, "inception_kernels", tuple(int(k) for k in self.inception_kernels))
        if self.d_model % self.n_heads:
            raise GazeError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if any(k < 1 or k % 2 == 0 for k in self.inception_kernels):
            raise GazeError("inception kernels must be odd and positive")
        if self.hist_len < 2 or self.horizon < 1 or self.c_in < 1:
            raise GazeError("hist_len must be >= 2 and horizon >= 1")
        if not 0.0 <= self.alpha_init <= 1.0:
            raise GazeError("alpha_init must lie in [0, 1]")
        if self.projection not in PROJECTIONS:
            raise GazeError(f"projection must be one of {PROJECTIONS}")
        if self.top_k_periods < 1 or self.n_blocks < 0:
            raise GazeError("top_k_periods must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inception_kernels"] = list(self.inception_kernels)
        return d


class NormStats(NamedTuple):
    mu: Tensor      # [B, C]
    sigma: Tensor   # [B, C], already floored at eps


def standardize(x: Tensor, eps: float = 1e-5) -> tuple[Tensor, NormStats]:
    """Zero-mean, unit-(population)-variance per batch row and channel over time."""
    if x.dim() != 3:
        raise GazeError("expected a [B, T, C] tensor")
    if x.shape[1] < 2:
        raise InsufficientDataError("standardization needs at least 2 time steps")
    mu = x.mean(dim=1)
    var = ((x - mu[:, None, :]) ** 2).mean(dim=1)
    sigma = torch.clamp(torch.sqrt(var), min=eps)
    return (x - mu[:, None, :]) / sigma[:, None, :], NormStats(mu, sigma)


def destandardize(x: Tensor, stats: NormStats) -> Tensor:
    return x * stats.sigma[:, None, :] + stats.mu[:, None, :]


def positional_encoding(length: int, d_model: int) -> Tensor:
    """Sinusoidal table ``[length, d_model]`` for 1-based positions."""
    t = torch.arange(1, length + 1, dtype=torch.float64)[:, None]
    i2 = torch.arange(0, d_model, 2, dtype=torch.float64)
    freq = torch.pow(10000.0, -i2 / d_model)
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(t * freq)
    pe[:, 1::2] = torch.cos(t * freq)[:, : d_model // 2]
    return pe


class Embedding(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.c_in = cfg.c_in
        self.token_conv = nn.Conv1d(cfg.c_in, cfg.d_model, kernel_size=3, padding=1, bias=False)
        self.time_proj = nn.Linear(1, cfg.d_model, bias=False)
        self.register_buffer("pe", positional_encoding(cfg.hist_len, cfg.d_model).float(),
                             persistent=False)
        nn.init.kaiming_normal_(self.token_conv.weight, mode="fan_in", nonlinearity="leaky_relu")

    def forward(self, x: Tensor, times: Tensor) -> Tensor:
        if x.shape[-1] != self.c_in:
            raise GazeError(f"expected {self.c_in} channels, got {x.shape[-1]}")
        if x.shape[1] != self.pe.shape[0]:
            raise GazeError(f"expected {self.pe.shape[0]} time steps, got {x.shape[1]}")
        tok = self.token_conv(x.transpose(1, 2)).transpose(1, 2)
        return tok + self.pe.to(x.dtype) + self.time_proj(times[..., None])


class HorizonExtension(nn.Module):
    """Linear map along time, ``T -> T + tau``.

    Initialized so the first ``T`` outputs copy the input and the forecast
    rows repeat the last input step.
    """

    def __init__(self, hist_len: int, horizon: int):
        super().__init__()
        self.linear = nn.Linear(hist_len, hist_len + horizon)
        with torch.no_grad():
            w = torch.zeros(hist_len + horizon, hist_len)
            w[:hist_len] = torch.eye(hist_len)
            w[hist_len:, -1] = 1.0
            self.linear.weight.copy_(w)
            self.linear.bias.zero_()

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[1] != self.linear.in_features:
            raise GazeError(f"expected time length {self.linear.in_features}, got {z.shape[1]}")
        return self.linear(z.transpose(1, 2)).transpose(1, 2)


class Inception(nn.Module):
    """Parallel 2-D convolutions with odd square kernels, outputs averaged.

    Each branch zero-pads by k // 2, so the average equals one convolution
    with the kernels centred in a shared largest-size kernel; the forward pass
    uses that merged kernel (one conv call instead of one per branch).
    """

    def __init__(self, c_in: int, c_out: int, kernels: tuple[int, ...]):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(c_in, c_out, k, padding=k // 2) for k in kernels)
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(conv.bias)
        self.size = max(kernels)

    def merged(self) -> tuple[Tensor, Tensor]:
        weight = sum(F.pad(c.weight, [(self.size - c.kernel_size[0]) // 2] * 4) for c in self.convs)
        bias = sum(c.bias for c in self.convs)
        n = len(self.convs)
        return weight / n, bias / n

    def forward(self, x: Tensor) -> Tensor:
        weight, bias = self.merged()
        return F.conv2d(x, weight, bias, padding=self.size // 2)

    def forward_branches(self, x: Tensor) -> Tensor:
        return torch.stack([conv(x) for conv in self.convs], dim=-1).mean(dim=-1)


def dominant_periods(x: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """Per-row top-``k`` nonzero frequencies of ``x`` [B, L, D].

    Returns (periods [B, k] as ceil(L / f), amplitudes [B, k]). Amplitudes are
    the rfft magnitudes averaged over channels.
    """
    length = x.shape[1]
    amp = torch.fft.rfft(x, dim=1).abs().mean(dim=-1)   # [B, L//2 + 1]
    sel = amp.detach().clone()
    sel[:, 0] = -1.0
    k = min(k, sel.shape[1] - 1)
    top = torch.topk(sel, k, dim=1).indices              # [B, k]
    periods = torch.div(length + top - 1, top, rounding_mode="floor")
    return periods, torch.gather(amp, 1, top)


def fold(x: Tensor, period: int) -> Tensor:
    """[B, L, D] -> [B, D, cycles, period], zero-padding the tail."""
    b, length, d = x.shape
    cycles = -(-length // period)
    pad = cycles * period - length
    if pad:
        x = torch.cat([x, x.new_zeros(b, pad, d)], dim=1)
    return x.reshape(b, cycles, period, d).permute(0, 3, 1, 2)


def unfold(x: Tensor, length: int) -> Tensor:
    """Inverse of :func:`fold`, truncated to ``length`` steps."""
    b, d, cycles, period = x.shape
    return x.permute(0, 2, 3, 1).reshape(b, cycles * period, d)[:, :length]


class PeriodBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.k = cfg.top_k_periods
        self.conv = nn.Sequential(
            Inception(cfg.d_model, cfg.d_ff, cfg.inception_kernels),
            nn.GELU(),
            Inception(cfg.d_ff, cfg.d_model, cfg.inception_kernels),
        )

    def forward(self, x: Tensor) -> Tensor:
        b, length, d = x.shape
        periods, amps = dominant_periods(x, self.k)
        columns = []
        # rows that share a period are folded and convolved together
        for j in range(periods.shape[1]):
            col = x.new_zeros(b, length, d)
            for p in torch.unique(periods[:, j]).tolist():
                rows = (periods[:, j] == p).nonzero(as_tuple=True)[0]
                col = col.index_copy(0, rows, unfold(self.conv(fold(x[rows], int(p))), length))
            columns.append(col)
        weights = torch.softmax(amps, dim=1)              # [B, k]
        return (torch.stack(columns, dim=-1) * weights[:, None, None, :]).sum(dim=-1) + x


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        # a key bias shifts every score in a row equally, so softmax ignores it
        self.k = nn.Linear(d_model, d_model, bias=False)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, x: Tensor) -> Tensor:
        b, length, d = x.shape
        h = self.n_heads
        hd = d // h

        def heads(t: Tensor) -> Tensor:
            return t.reshape(b, length, h, hd).transpose(1, 2)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        ctx = F.scaled_dot_product_attention(q, k, v)
        return self.o(ctx.transpose(1, 2).reshape(b, length, d))


class FusedProjection(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.mode = cfg.projection
        self.mha = SelfAttention(cfg.d_model, cfg.n_heads)
        self.attn_out = nn.Linear(cfg.d_model, cfg.c_in)
        self.linear = nn.Linear(cfg.d_model, cfg.c_in)
        a = min(max(cfg.alpha_init, 1e-6), 1 - 1e-6)
        self.raw_alpha = nn.Parameter(torch.tensor(math.log(a / (1 - a))))

    @property
    def alpha(self) -> Tensor:
        if self.mode == "attention":
            return torch.ones_like(self.raw_alpha)
        if self.mode == "linear":
            return torch.zeros_like(self.raw_alpha)
        return torch.sigmoid(self.raw_alpha)

    def branches(self, y: Tensor) -> tuple[Tensor, Tensor]:
        return self.attn_out(self.mha(y)), self.linear(y)

    def forward(self, y: Tensor) -> Tensor:
        if self.mode == "linear":
            return self.linear(y)
        if self.mode == "attention":
            return self.attn_out(self.mha(y))
        attn, lin = self.branches(y)
        a = self.alpha
        return a * attn + (1 - a) * lin


class GazeForecaster(nn.Module):
    """Maps ``[B, T, C]`` history (plus ``[B, T]`` relative times) to ``[B, tau, C]``."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.embedding = Embedding(cfg)
        self.extend = HorizonExtension(cfg.hist_len, cfg.horizon)
        self.blocks = nn.ModuleList(PeriodBlock(cfg) for _ in range(cfg.n_blocks))
        self.project = FusedProjection(cfg)

    @property
    def alpha(self) -> float:
        return float(self.project.alpha.detach())

    def backbone(self, z: Tensor) -> Tensor:
        for block in self.blocks:
            z = block(z)
        return z

    def forward(self, x: Tensor, times: Tensor | None = None) -> Tensor:
        if x.dim() != 3 or x.shape[1] != self.cfg.hist_len:
            raise GazeError(f"expected [B, {self.cfg.hist_len}, C] input, got {tuple(x.shape)}")
        if times is None:
            times = x.new_zeros(x.shape[:2])
        xn, stats = standardize(x, self.cfg.std_epsilon)
        z = self.embedding(xn, times)
        y = self.backbone(self.extend(z))
        out = destandardize(self.project(y), stats)
        return out[:, -self.cfg.horizon:]

    def weight_tensors(self) -> list[Tensor]:
        """Matrices and kernels that carry the L2 penalty (no biases, no gate)."""
        return [p for name, p in self.named_parameters()
                if p.dim() >= 2 and not name.endswith("bias")]


def parameter_group(name: str) -> str:
    if name.startswith("embedding.token_conv"):
        return "token_conv"
    if name.startswith("embedding.time_proj"):
        return "time_proj"
    if name.startswith("extend"):
        return "predict_linear"
    if name.startswith("blocks"):
        return "backbone"
    if name.startswith("project.mha") or name.startswith("project.attn_out"):
        return "mha"
    if name.startswith("project.linear"):
        return "linear_proj"
    if name.endswith("raw_alpha"):
        return "alpha"
    return "other"
