"""Conditional UNet noise predictor with double-conditioned normalization.

Conditioning works in two stages. First, every (imperviousness, likelihood)
pair in the stack passes through one shared 1x1 convolution and the single-
channel outputs are concatenated across timestamps into an N-channel fused
map. Second, at every normalization site inside the residual blocks, a small
conv -> ReLU -> two parallel convs head regresses spatial gamma/beta maps
from the fused conditioning, which modulate the group-normalized activation
as h * (1 + gamma) + beta. Gamma/beta heads are zero-initialized so an
untrained network behaves like its unconditional twin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeMismatchError


@dataclass(frozen=True)
class DenoiserConfig:
    """Topology knobs for the conditional UNet."""

    depth: int = 3
    base_channels: int = 8
    gn_groups: int = 4
    embed_dim: int = 32
    n_cond: int = 3
    input_side: int = 32

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels % self.gn_groups:
            raise ConfigError(
                f"base_channels {self.base_channels} not divisible by "
                f"gn_groups {self.gn_groups}"
            )
        if self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be even, got {self.embed_dim}")
        if self.n_cond < 1:
            raise ConfigError(f"n_cond must be >= 1, got {self.n_cond}")
        if self.input_side % (1 << (self.depth - 1)):
            raise ConfigError(
                f"input_side {self.input_side} not divisible by 2^(depth-1)"
            )

    def widths(self) -> list[int]:
        return [self.base_channels << level for level in range(self.depth)]


@dataclass
class ConditioningStack:
    """N aligned (imperviousness, likelihood) pairs forming the model input.

    Imperviousness layers are in latent [-1, 1]; likelihood layers stay in
    [0, 1]. Channel order interleaves the pairs timestamp by timestamp.
    """

    imperviousness: list[np.ndarray]
    likelihood: list[np.ndarray]
    years: list[int] | None = None

    def __post_init__(self) -> None:
        if len(self.imperviousness) != len(self.likelihood):
            raise ShapeMismatchError("imperviousness/likelihood pair counts differ")
        if not self.imperviousness:
            raise ValueError("conditioning stack is empty")
        shape = self.imperviousness[0].shape
        for arr in (*self.imperviousness, *self.likelihood):
            if arr.shape != shape:
                raise ShapeMismatchError("conditioning layers are not aligned")
        if self.years is not None and len(self.years) != len(self.imperviousness):
            raise ShapeMismatchError("years list does not match pair count")

    @property
    def n_cond(self) -> int:
        return len(self.imperviousness)

    @property
    def side(self) -> int:
        return self.imperviousness[0].shape[0]

    def tensor(self) -> torch.Tensor:
        """Stack as [2N, H, W] float32 with channels (I_1, L_1, I_2, L_2, ...)."""
        layers = []
        for imp, lam in zip(self.imperviousness, self.likelihood):
            layers.append(np.asarray(imp, dtype=np.float32))
            layers.append(np.asarray(lam, dtype=np.float32))
        return torch.from_numpy(np.stack(layers))


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of integer step indices, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    args = t.double().unsqueeze(1) * freqs.unsqueeze(0)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb.to(t.device)


def fuse_conditions(cond: torch.Tensor, weight: torch.Tensor,
                    bias: torch.Tensor) -> torch.Tensor:
    """Apply one shared 1x1 conv to each channel pair of the stack.

    ``cond`` is [B, 2N, H, W]; ``weight`` is the [1, 2, 1, 1] shared kernel.
    Returns the [B, N, H, W] fused map with timestamp order preserved.
    """
    b, twice_n, h, w = cond.shape
    if twice_n % 2:
        raise ShapeMismatchError(f"conditioning channels must be even, got {twice_n}")
    n = twice_n // 2
    pairs = cond.reshape(b * n, 2, h, w)
    fused = F.conv2d(pairs, weight.to(cond.dtype), bias.to(cond.dtype))
    return fused.reshape(b, n, h, w)


def cond_group_norm(h: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                    groups: int, eps: float = 1e-5) -> torch.Tensor:
    """Group-normalize then modulate: norm(h) * (1 + gamma) + beta.

    Statistics are per (sample, group) over the grouped channels and all
    spatial positions, with population variance.
    """
    b, c, height, width = h.shape
    if c % groups:
        raise ShapeMismatchError(f"channels {c} not divisible by groups {groups}")
    grouped = h.reshape(b, groups, c // groups, height, width)
    mean = grouped.mean(dim=(2, 3, 4), keepdim=True)
    var = grouped.var(dim=(2, 3, 4), keepdim=True, unbiased=False)
    normed = ((grouped - mean) / torch.sqrt(var + eps)).reshape(b, c, height, width)
    return normed * (1.0 + gamma) + beta


class SpadeSite(nn.Module):
    """Gamma/beta regression head attached to one normalization site."""

    def __init__(self, channels: int, fused_channels: int, hidden: int, groups: int):
        super().__init__()
        self.groups = groups
        self.trunk = nn.Conv2d(fused_channels, hidden, 3, padding=1)
        self.to_gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.to_beta = nn.Conv2d(hidden, channels, 3, padding=1)
        nn.init.zeros_(self.to_gamma.weight)
        nn.init.zeros_(self.to_gamma.bias)
        nn.init.zeros_(self.to_beta.weight)
        nn.init.zeros_(self.to_beta.bias)

    def modulation(self, fused: torch.Tensor,
                   size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Regress gamma/beta at input resolution, then resize to ``size``."""
        z = F.relu(self.trunk(fused))
        gamma = self.to_gamma(z)
        beta = self.to_beta(z)
        if gamma.shape[-2:] != size:
            gamma = F.interpolate(gamma, size=size, mode="nearest")
            beta = F.interpolate(beta, size=size, mode="nearest")
        return gamma, beta

    def forward(self, h: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.modulation(fused, h.shape[-2:])
        return cond_group_norm(h, gamma, beta, self.groups)


class ResBlock(nn.Module):
    """Residual block with two conditioned normalization sites.

    norm -> SiLU -> conv, add projected timestep embedding, norm -> SiLU ->
    conv, plus a 1x1 shortcut when the channel count changes.
    """

    def __init__(self, c_in: int, c_out: int, cfg: DenoiserConfig):
        super().__init__()
        hidden = cfg.base_channels
        self.site1 = SpadeSite(c_in, cfg.n_cond, hidden, cfg.gn_groups)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(cfg.embed_dim, c_out)
        self.site2 = SpadeSite(c_out, cfg.n_cond, hidden, cfg.gn_groups)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor,
                fused: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.site1(x, fused)))
        h = h + self.time_proj(emb.to(h.dtype))[:, :, None, None]
        h = self.conv2(F.silu(self.site2(h, fused)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """UNet epsilon predictor conditioned on the fused historical stack."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        widths = self.cfg.widths()
        self.fuse = nn.Conv2d(2, 1, 1)
        self.in_conv = nn.Conv2d(1, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(
            [ResBlock(w, w, self.cfg) for w in widths]
        )
        self.down_convs = nn.ModuleList(
            [nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
             for i in range(self.cfg.depth - 1)]
        )
        self.mid_block = ResBlock(widths[-1], widths[-1], self.cfg)
        self.up_convs = nn.ModuleList(
            [nn.Conv2d(widths[i + 1], widths[i], 3, padding=1)
             for i in reversed(range(self.cfg.depth - 1))]
        )
        self.up_blocks = nn.ModuleList(
            [ResBlock(2 * widths[i], widths[i], self.cfg)
             for i in reversed(range(self.cfg.depth - 1))]
        )
        self.out_norm = nn.GroupNorm(self.cfg.gn_groups, widths[0])
        self.out_conv = nn.Conv2d(widths[0], 1, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def fuse_stack(self, cond: torch.Tensor) -> torch.Tensor:
        return fuse_conditions(cond, self.fuse.weight, self.fuse.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ShapeMismatchError(f"expected [B,1,H,W] input, got {tuple(x.shape)}")
        if cond.shape[1] != 2 * self.cfg.n_cond:
            raise ShapeMismatchError(
                f"expected {2 * self.cfg.n_cond} conditioning channels, "
                f"got {cond.shape[1]}"
            )
        if cond.shape[0] != x.shape[0]:
            cond = cond.expand(x.shape[0], -1, -1, -1)
        fused = self.fuse_stack(cond)
        emb = sinusoidal_embedding(t, self.cfg.embed_dim)
        h = self.in_conv(x)
        skips = []
        for level, block in enumerate(self.down_blocks):
            h = block(h, emb, fused)
            if level < self.cfg.depth - 1:
                skips.append(h)
                h = self.down_convs[level](h)
        h = self.mid_block(h, emb, fused)
        for conv, block in zip(self.up_convs, self.up_blocks):
            h = conv(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = torch.cat([h, skips.pop()], dim=1)
            h = block(h, emb, fused)
        return self.out_conv(F.silu(self.out_norm(h)))


def loss_gradients(model: nn.Module, xt: torch.Tensor, t: torch.Tensor,
                   cond: torch.Tensor,
                   true_eps: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of the noise MSE for every parameter tensor.

    Raises DivergenceError naming the first tensor whose gradient is
    non-finite.
    """
    from .diffusion import denoise_loss
    from .errors import DivergenceError

    model.zero_grad(set_to_none=True)
    loss = denoise_loss(model(xt, t, cond), true_eps)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name}")
        grads[name] = g.detach().clone()
    return grads


def parameter_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    """Snapshot named parameters as float32 numpy arrays (checkpoint body)."""
    return {name: p.detach().numpy().astype(np.float32, copy=True)
            for name, p in model.named_parameters()}


def load_parameter_arrays(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    """Load a checkpoint snapshot back into the model, verifying coverage."""
    names = {name for name, _ in model.named_parameters()}
    missing = names - arrays.keys()
    extra = arrays.keys() - names
    if missing or extra:
        raise ShapeMismatchError(
            f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}"
        )
    with torch.no_grad():
        for name, p in model.named_parameters():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ShapeMismatchError(
                    f"{name}: checkpoint shape {arr.shape} vs model {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr).to(p.dtype))
