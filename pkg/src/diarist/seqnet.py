"""Sequence-processing blocks: selective state-space scan, Mamba, BiLSTM.

The selective scan is a diagonal linear recurrence whose step size and
input/output mixing vectors depend on the current frame, discretized with a
zero-order hold.  It runs in time linear in the sequence length.  Blocks
accept either a single sequence (T, d) or a batch (B, T, d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericalError

_SMALL_X = 1e-6


def _check_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericalError(f"{name}: non-finite values in input tensors")


def selective_scan(
    u: torch.Tensor,
    delta: torch.Tensor,
    A: torch.Tensor,
    B: torch.Tensor,
    C: torch.Tensor,
    D: torch.Tensor,
) -> torch.Tensor:
    """Run the input-dependent diagonal state-space recurrence.

    Zero-order-hold discretization with state x = delta * A:

        decay = exp(x)            drive = delta * phi(x) * B * u
        h_t = decay_t * h_{t-1} + drive_t,  h_0 = 0
        y_t = C_t . h_t + D * u_t

    where phi(x) = (exp(x) - 1) / x, evaluated by series for |x| < 1e-6 to
    avoid cancellation.

    Shapes (optionally with a leading batch dimension on u, delta, B, C):
        u, delta: (T, d_inner); A: (d_inner, d_state); B, C: (T, d_state);
        D: (d_inner,).  Returns the same shape as u.
    """
    _check_finite("selective_scan", u, delta, A, B, C, D)
    squeeze = u.dim() == 2
    if squeeze:
        u, delta, B, C = u[None], delta[None], B[None], C[None]

    x = delta.unsqueeze(-1) * A  # (batch, T, d_inner, d_state)
    decay = torch.exp(x)
    small = x.abs() < _SMALL_X
    x_safe = torch.where(small, torch.ones_like(x), x)
    phi = torch.where(small, 1 + x / 2, torch.expm1(x_safe) / x_safe)
    drive = (delta * u).unsqueeze(-1) * phi * B.unsqueeze(2)

    batch, length, d_inner, d_state = x.shape
    # The recurrence is evaluated chunkwise in closed form,
    #   h_t = P_t * (h_chunk_start + sum_{s<=t} drive_s / P_s),
    # with P the running decay product.  The chunk length is capped so the
    # cumulative exponent stays inside the representable range, including the
    # 1/P^2 factor that appears in the backward pass.
    exp_limit = 280.0 if u.dtype == torch.float64 else 25.0
    max_mag = float(x.detach().abs().max()) if x.numel() else 0.0
    chunk = 64 if max_mag * 64 <= exp_limit else max(1, int(exp_limit / max_mag))
    h = torch.zeros(batch, d_inner, d_state, dtype=u.dtype, device=u.device)
    outputs = []
    for start in range(0, length, chunk):
        a = decay[:, start:start + chunk]
        b = drive[:, start:start + chunk]
        prod = torch.cumprod(a, dim=1)
        states = prod * (h.unsqueeze(1) + torch.cumsum(b / prod, dim=1))
        outputs.append((states * C[:, start:start + chunk].unsqueeze(2)).sum(-1))
        h = states[:, -1]
    y = torch.cat(outputs, dim=1) + u * D

    return y[0] if squeeze else y


@dataclass(frozen=True)
class MambaBlockConfig:
    """Hyperparameters of one Mamba block."""

    d_model: int
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    dt_rank: int | None = None

    def __post_init__(self):
        for name in ("d_model", "d_state", "expand", "d_conv"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.dt_rank is None:
            object.__setattr__(self, "dt_rank", math.ceil(self.d_model / 16))

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


class MambaBlock(nn.Module):
    """Causal gated block around the selective scan.

    Input projection to 2 * d_inner (signal and gate), depthwise causal
    convolution of width d_conv, SiLU, input-dependent step/mixing
    projections, selective scan, SiLU-gated output projection.
    """

    def __init__(self, config: MambaBlockConfig):
        super().__init__()
        self.config = config
        d_inner, d_state, dt_rank = config.d_inner, config.d_state, config.dt_rank
        self.in_proj = nn.Linear(config.d_model, 2 * d_inner, bias=False)
        self.conv = nn.Conv1d(
            d_inner, d_inner, config.d_conv, groups=d_inner, padding=config.d_conv - 1
        )
        self.x_proj = nn.Linear(d_inner, dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(dt_rank, d_inner, bias=True)
        # Negative-real diagonal state matrix: A = -(1..d_state) per channel.
        self.A_log = nn.Parameter(
            torch.log(torch.arange(1, d_state + 1, dtype=torch.get_default_dtype()))
            .expand(d_inner, d_state)
            .contiguous()
        )
        self.D = nn.Parameter(torch.ones(d_inner))
        self.out_proj = nn.Linear(d_inner, config.d_model, bias=False)
        self._init_dt(dt_min=1e-3, dt_max=1e-1)

    def _init_dt(self, dt_min: float, dt_max: float) -> None:
        # Bias chosen so softplus(bias) lands log-uniformly in [dt_min, dt_max].
        std = self.config.dt_rank**-0.5
        nn.init.uniform_(self.dt_proj.weight, -std, std)
        dt = torch.exp(
            torch.rand(self.config.d_inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min)
        ).clamp(min=1e-4)
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        length = x.shape[1]
        signal, gate = self.in_proj(x).chunk(2, dim=-1)
        # Depthwise conv pads left only, so frame t never sees frames > t.
        signal = self.conv(signal.transpose(1, 2))[..., :length].transpose(1, 2)
        signal = F.silu(signal)
        dt_rank, d_state = self.config.dt_rank, self.config.d_state
        dt, b_in, c_out = self.x_proj(signal).split([dt_rank, d_state, d_state], dim=-1)
        delta = F.softplus(self.dt_proj(dt))
        y = selective_scan(signal, delta, -torch.exp(self.A_log), b_in, c_out, self.D)
        y = self.out_proj(y * F.silu(gate))
        return y[0] if squeeze else y


class ExternalBiMamba(nn.Module):
    """Bidirectional wrapper: independent forward and backward Mamba blocks.

    The backward block sees the time-reversed sequence and its output is
    re-reversed.  The two paths are combined by summation with a residual
    connection and per-frame layer normalization.  This fusion is one of
    several reasonable bidirectional constructions (concatenation plus
    projection is another); the sum/residual/norm form is chosen here and
    kept fixed so checkpoints stay portable.
    """

    def __init__(self, d_model: int, d_state: int = 16, expand: int = 2, d_conv: int = 4):
        super().__init__()
        config = MambaBlockConfig(d_model=d_model, d_state=d_state, expand=expand, d_conv=d_conv)
        self.forward_block = MambaBlock(config)
        self.backward_block = MambaBlock(config)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        time_dim = 0 if x.dim() == 2 else 1
        forward_out = self.forward_block(x)
        backward_out = self.backward_block(x.flip(time_dim)).flip(time_dim)
        return self.norm(x + forward_out + backward_out)


@dataclass(frozen=True)
class LstmConfig:
    """Stacked (bi)directional LSTM configuration."""

    layers: int = 4
    hidden: int = 128
    bidirectional: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")

    @property
    def output_dim(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)


class BiLstm(nn.Module):
    """Thin wrapper making nn.LSTM accept (T, F) or (B, T, F) directly."""

    def __init__(self, input_dim: int, config: LstmConfig):
        super().__init__()
        self.config = config
        self.lstm = nn.LSTM(
            input_dim,
            config.hidden,
            num_layers=config.layers,
            bidirectional=config.bidirectional,
            batch_first=True,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        out, _ = self.lstm(x)
        return out[0] if squeeze else out


def parameter_gradients(
    module: nn.Module, x: torch.Tensor, upstream: torch.Tensor
) -> dict[str, torch.Tensor]:
    """Gradients of sum(module(x) * upstream) for every parameter and for x.

    Parameters that do not influence the output get zero gradients.  Raises
    NumericalError naming the first parameter with a non-finite gradient.
    """
    x = x.detach().clone().requires_grad_(True)
    y = module(x)
    if y.shape != upstream.shape:
        raise ValueError(f"upstream shape {tuple(upstream.shape)} != output shape {tuple(y.shape)}")
    names = ["x"] + [name for name, _ in module.named_parameters()]
    params = [x] + [p for _, p in module.named_parameters()]
    grads = torch.autograd.grad(y, params, grad_outputs=upstream, allow_unused=True)
    out = {}
    for name, param, grad in zip(names, params, grads):
        if grad is None:
            grad = torch.zeros_like(param)
        if not torch.isfinite(grad).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        out[name] = grad
    return out
