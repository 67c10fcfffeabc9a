"""
Residual denoiser built from diagonal state-space (S4D-style) blocks.

Each block receives the diffusion-step embedding and the conditioning vector
and returns two tensors: a residual for the next block and a skip output.
The skip outputs of all blocks are summed and projected to the noise estimate.
"""

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config.errors import ConfigError, DivergenceError, ShapeError


@dataclass
class DenoiserConfig:
    n_blocks: int = 4
    channels: int = 64
    horizon: int = 6
    ssm_state_dim: int = 16
    diffusion_step_embed_dim: int = 64

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if value <= 0:
                raise ConfigError(f"denoiser {name} must be positive, got {value}")


class BlockOutput(NamedTuple):
    residual: torch.Tensor
    skip: torch.Tensor


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sin/cos features of the step index; an odd ``dim`` gets a zero final channel."""
    t = t.reshape(-1).to(torch.get_default_dtype())
    half = dim // 2
    if half == 0:
        return torch.zeros(t.shape[0], dim, dtype=t.dtype, device=t.device)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    angles = t[:, None] * freqs[None, :]
    embedding = torch.cat([angles.sin(), angles.cos()], dim=1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


class DiffusionStepEmbedding(nn.Module):
    """Sinusoidal step features followed by two dense layers."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.projection1 = nn.Linear(dim, dim)
        self.projection2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        x = sinusoidal_embedding(t, self.dim).to(self.projection1.weight.dtype)
        x = F.silu(self.projection1(x))
        return F.silu(self.projection2(x))


class S4DLayer(nn.Module):
    """
    Per-channel diagonal linear state-space model, applied as a causal convolution.

    The continuous system (A diagonal complex, B = 1, C complex) is discretized
    with zero-order hold; its length-L kernel is K[l] = 2 Re(sum_n C_n B̄_n Ā_n^l).
    A GELU and a gated (GLU) pointwise projection follow the convolution.
    """

    def __init__(self, channels: int, state_dim: int, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        modes = max(1, state_dim // 2)
        self.channels = channels
        self.modes = modes
        log_dt = torch.rand(channels) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min)
        self.log_dt = nn.Parameter(log_dt)
        self.log_A_real = nn.Parameter(torch.log(0.5 * torch.ones(channels, modes)))
        self.A_imag = nn.Parameter(math.pi * torch.arange(modes, dtype=torch.float32).repeat(channels, 1))
        self.C = nn.Parameter(torch.randn(channels, modes, 2) * math.sqrt(0.5))
        self.D = nn.Parameter(torch.randn(channels))
        self.output = nn.Conv1d(channels, 2 * channels, kernel_size=1)

    def _continuous(self) -> Tuple[torch.Tensor, torch.Tensor]:
        A = -self.log_A_real.exp() + 1j * self.A_imag
        return A, A * self.log_dt.exp().unsqueeze(-1)

    def discrete_parameters(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """(Ā, C·B̄), both complex C×modes."""
        A, dtA = self._continuous()
        C = torch.view_as_complex(self.C.contiguous())
        return dtA.exp(), C * (dtA.exp() - 1.0) / A

    def kernel(self, length: int) -> torch.Tensor:
        _, CB = self.discrete_parameters()
        _, dtA = self._continuous()
        powers = torch.arange(length, device=dtA.device, dtype=self.log_dt.dtype)
        vandermonde = torch.exp(dtA.unsqueeze(-1) * powers)
        K = 2.0 * torch.einsum("cn,cnl->cl", CB, vandermonde).real
        if not torch.all(torch.isfinite(K)):
            raise DivergenceError(
                "non-finite SSM kernel: "
                f"dt in [{float(self.log_dt.exp().min()):.3g}, {float(self.log_dt.exp().max()):.3g}], "
                f"max Re(A)={float(-self.log_A_real.exp().min()):.3g}"
            )
        return K

    def linear(self, u: torch.Tensor) -> torch.Tensor:
        """Convolution with the SSM kernel plus the D skip term; u is B×C×L."""
        length = u.shape[-1]
        K = self.kernel(length)
        n = 2 * length
        y = torch.fft.irfft(torch.fft.rfft(u, n=n) * torch.fft.rfft(K, n=n), n=n)[..., :length]
        return y + self.D.unsqueeze(-1) * u

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        if u.dim() != 3 or u.shape[1] != self.channels:
            raise ShapeError(f"S4D layer expects B×{self.channels}×L, got {tuple(u.shape)}")
        y = F.gelu(self.linear(u))
        return F.glu(self.output(y), dim=1)


class ResidualBlock(nn.Module):
    """Step embedding in, S4D layer, additive conditioning, tanh·sigmoid gate, (residual, skip) out."""

    def __init__(self, channels: int, state_dim: int, step_embed_dim: int):
        super().__init__()
        self.channels = channels
        self.step_projection = nn.Linear(step_embed_dim, channels)
        self.s4 = S4DLayer(channels, state_dim)
        self.mid_projection = nn.Conv1d(channels, 2 * channels, kernel_size=1)
        self.output_projection = nn.Conv1d(channels, 2 * channels, kernel_size=1)

    def forward(self, x: torch.Tensor, step_embed: torch.Tensor,
                cond: Optional[torch.Tensor] = None) -> BlockOutput:
        if x.dim() != 3 or x.shape[1] != self.channels:
            raise ShapeError(f"block expects B×{self.channels}×W input, got {tuple(x.shape)}")
        h = x + self.step_projection(step_embed).unsqueeze(-1)
        h = self.s4(h)
        if cond is not None:
            if cond.shape != (x.shape[0], self.channels):
                raise ShapeError(f"conditioning must be B×{self.channels}, got {tuple(cond.shape)}")
            h = h + cond.unsqueeze(-1)
        gate, filt = self.mid_projection(h).chunk(2, dim=1)
        h = torch.sigmoid(gate) * torch.tanh(filt)
        residual, skip = self.output_projection(h).chunk(2, dim=1)
        return BlockOutput(residual=x + residual, skip=skip)


class Denoiser(nn.Module):
    """Stack of M residual blocks predicting the injected noise of a B×W batch."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.horizon = config.horizon
        C = config.channels
        self.input_projection = nn.Conv1d(1, C, kernel_size=1)
        self.step_embedding = DiffusionStepEmbedding(config.diffusion_step_embed_dim)
        self.blocks = nn.ModuleList([
            ResidualBlock(C, config.ssm_state_dim, config.diffusion_step_embed_dim)
            for _ in range(config.n_blocks)
        ])
        self.skip_projection = nn.Conv1d(C, C, kernel_size=1)
        self.output_projection = nn.Conv1d(C, 1, kernel_size=1)

    def project(self, skip: torch.Tensor) -> torch.Tensor:
        """C×W skip tensor -> W-length noise estimate."""
        return self.output_projection(F.relu(self.skip_projection(skip))).squeeze(1)

    def forward(self, xt: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
        if xt.dim() != 2 or t.shape != (xt.shape[0],):
            raise ShapeError(f"denoiser expects x^t B×W and t B, got {tuple(xt.shape)} and {tuple(t.shape)}")
        h = self.input_projection(xt.unsqueeze(1))
        step_embed = self.step_embedding(t)
        skips = torch.zeros_like(h)
        for index, block in enumerate(self.blocks):
            out = block(h, step_embed, cond)
            if not (torch.all(torch.isfinite(out.residual)) and torch.all(torch.isfinite(out.skip))):
                raise DivergenceError(f"non-finite activations in denoiser block {index}")
            h = out.residual
            skips = skips + out.skip
        return self.project(skips / math.sqrt(len(self.blocks)))
