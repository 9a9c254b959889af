"""Pictorial branch: adapted latent denoiser with visual/temporal/FFN adapters.

A small two-level U-Net plays the frozen text-to-image backbone; three
adapter families graft onto every block:

* V-Adapter: a second cross-attention branch over the local-global hybrid
  visual condition, sharing the frozen query projection and summed with
  the frozen text cross-attention.
* T-Adapter: residual temporal mixing via a channel-reduced depth-wise
  3-D convolution stack appended after the spatial convolutions.
* F-Adapter: residual bottleneck MLP parallel to the frozen FFN.

All adapter output paths start at zero, so a freshly adapted network is
numerically the frozen base network. The training loss is noise prediction
weighted by the clipped signal-to-noise ratio of the sampled timestep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .data import load_state, save_state

_EPS = 1e-12


# ---------------------------------------------------------------------------
# Noise schedule and Min-SNR weighting
# ---------------------------------------------------------------------------

@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    snr_gamma: float = 5.0

    def __post_init__(self) -> None:
        if not (0.0 < self.beta_start < self.beta_end < 1.0):
            raise ValueError("betas must satisfy 0 < beta_start < beta_end < 1")
        if self.timesteps < 2:
            raise ValueError("timesteps must be >= 2")


class DiffusionSchedule:
    """Linear-beta schedule with cached cumulative products and SNR."""

    def __init__(self, cfg: DiffusionConfig | None = None):
        cfg = cfg or DiffusionConfig()
        self.cfg = cfg
        self.betas = np.linspace(cfg.beta_start, cfg.beta_end, cfg.timesteps,
                                 dtype=np.float64)
        self.alphas_cumprod = np.cumprod(1.0 - self.betas)
        self.snr = self.alphas_cumprod / (1.0 - self.alphas_cumprod)
        if not np.all(np.diff(self.snr) < 0):
            raise ValueError("SNR must be strictly decreasing over timesteps")

    @property
    def timesteps(self) -> int:
        return self.cfg.timesteps

    def alpha_bar(self, t: int) -> float:
        return float(self.alphas_cumprod[t])


def min_snr_weight(t: int, schedule: DiffusionSchedule, snr_gamma: float = 5.0) -> float:
    """Noise-prediction loss weight: min(SNR(t), gamma) / SNR(t)."""
    if not 0 <= t < schedule.timesteps:
        raise ValueError(f"t={t} outside [0, {schedule.timesteps})")
    snr = float(schedule.snr[t])
    return min(snr, snr_gamma) / snr


# ---------------------------------------------------------------------------
# Local-global hybrid visual condition
# ---------------------------------------------------------------------------

def frame_relevance_weights(frame_embeds: torch.Tensor,
                            text_embed: torch.Tensor) -> torch.Tensor:
    """Softmax over cosine similarities of each frame to the text anchor."""
    frame_embeds = torch.as_tensor(frame_embeds)
    text_embed = torch.as_tensor(text_embed)
    if frame_embeds.ndim != 2 or frame_embeds.shape[0] < 1:
        raise ValueError(f"frame_embeds must be (N, D), got {tuple(frame_embeds.shape)}")
    norms = torch.linalg.vector_norm(frame_embeds, dim=1)
    tnorm = torch.linalg.vector_norm(text_embed)
    if float(norms.min().detach()) < _EPS or float(tnorm.detach()) < _EPS:
        raise ValueError("zero-norm embedding in similarity computation")
    sims = (frame_embeds @ text_embed) / (norms * tnorm)
    return torch.softmax(sims, dim=0)


@dataclass(frozen=True)
class HybridVisualCondition:
    c_local: torch.Tensor    # (m, D) selected high-scoring frames
    c_global: torch.Tensor   # (1, D) relevance-weighted average
    gamma: torch.Tensor      # (N,) weights, sum to 1

    @property
    def c_v(self) -> torch.Tensor:
        return torch.cat([self.c_local, self.c_global], dim=0)


def hybrid_condition(frame_embeds: torch.Tensor, gamma: torch.Tensor,
                     m: int) -> HybridVisualCondition:
    """Select the m highest-weight frames (stable, then index order) and
    append the weighted average of all frames."""
    frame_embeds = torch.as_tensor(frame_embeds)
    gamma = torch.as_tensor(gamma)
    n = frame_embeds.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m={m} outside [1, {n}]")
    order = sorted(range(n), key=lambda i: (-float(gamma[i]), i))
    chosen = sorted(order[:m])
    c_local = frame_embeds[chosen]
    c_global = (gamma.unsqueeze(1) * frame_embeds).sum(dim=0, keepdim=True)
    return HybridVisualCondition(c_local=c_local, c_global=c_global, gamma=gamma)


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------

def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
    return weights @ v


def v_adapter(x: torch.Tensor, c_v: torch.Tensor, w_q: torch.Tensor,
              w_k: torch.Tensor, w_v: torch.Tensor) -> torch.Tensor:
    """Visual cross-attention branch: Softmax((xW^q)(c_v W^k)^T / sqrt(d_k)) c_v W^v."""
    return _attention(x @ w_q, c_v @ w_k, c_v @ w_v)


class DualCrossAttention(nn.Module):
    """Frozen text cross-attention summed with the trainable visual branch.

    The query projection is shared between branches and belongs to the
    frozen base; only w_vk / w_vv are adapter parameters (w_vv zero-init).
    """

    def __init__(self, d_model: int, d_cond: int, d_k: int):
        super().__init__()
        self.d_k = d_k
        self.w_q = nn.Parameter(torch.randn(d_model, d_k) / math.sqrt(d_model))
        self.w_tk = nn.Parameter(torch.randn(d_cond, d_k) / math.sqrt(d_cond))
        self.w_tv = nn.Parameter(torch.randn(d_cond, d_model) / math.sqrt(d_cond))
        self.w_vk = nn.Parameter(torch.randn(d_cond, d_k) / math.sqrt(d_cond))
        self.w_vv = nn.Parameter(torch.zeros(d_cond, d_model))

    def forward(self, x: torch.Tensor, c_t: torch.Tensor,
                c_v: torch.Tensor | None, enable_visual: bool = True) -> torch.Tensor:
        q = x @ self.w_q
        out = _attention(q, c_t @ self.w_tk, c_t @ self.w_tv)
        if enable_visual and c_v is not None:
            out = out + _attention(q, c_v @ self.w_vk, c_v @ self.w_vv)
        return out


def dual_cross_attention(x: torch.Tensor, c_t: torch.Tensor, c_v: torch.Tensor,
                         block: DualCrossAttention) -> torch.Tensor:
    return block(x, c_t, c_v, enable_visual=True)


class TAdapter(nn.Module):
    """Residual temporal mixing: channel-reducing projection, depth-wise
    temporal convolution in the reduced space, zero-init restoring
    projection. Replicate padding keeps single-frame inputs well-defined."""

    def __init__(self, channels: int, ratio: int = 4, temporal_kernel: int = 3):
        super().__init__()
        reduced = max(1, channels // ratio)
        pad = temporal_kernel // 2
        self.down = nn.Conv3d(channels, reduced, kernel_size=1)
        self.temporal = nn.Conv3d(reduced, reduced,
                                  kernel_size=(temporal_kernel, 1, 1),
                                  padding=(pad, 0, 0), padding_mode="replicate",
                                  groups=reduced)
        self.up = nn.Conv3d(reduced, channels, kernel_size=1)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (frames, C, H, W), temporal axis is the frame axis."""
        vol = x.permute(1, 0, 2, 3).unsqueeze(0)          # (1, C, F, H, W)
        branch = self.up(self.temporal(self.down(vol)))
        return x + branch.squeeze(0).permute(1, 0, 2, 3)


def t_adapter(x: torch.Tensor, adapter: TAdapter) -> torch.Tensor:
    return adapter(x)


class FAdapter(nn.Module):
    """Residual bottleneck MLP parallel to the frozen FFN (zero-init up)."""

    def __init__(self, d_model: int, ratio: int = 4):
        super().__init__()
        reduced = max(1, d_model // ratio)
        self.fc_down = nn.Linear(d_model, reduced)
        self.fc_up = nn.Linear(reduced, d_model)
        nn.init.zeros_(self.fc_up.weight)
        nn.init.zeros_(self.fc_up.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc_up(nn.functional.gelu(self.fc_down(x)))


def f_adapter(x: torch.Tensor, adapter: FAdapter) -> torch.Tensor:
    return adapter(x)


@dataclass(frozen=True)
class AdapterToggles:
    visual: bool = True
    temporal: bool = True
    ffn: bool = True


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------

def timestep_embedding(t: int, dim: int, dtype: torch.dtype,
                       device=None) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) *
                      torch.arange(half, dtype=torch.float64) / half)
    angles = float(t) * freqs
    emb = torch.cat([torch.cos(angles), torch.sin(angles)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, dtype=torch.float64)])
    return emb.to(dtype=dtype, device=device)


class _ResBlock(nn.Module):
    """Frozen spatial convolution pair with additive timestep embedding."""

    def __init__(self, in_ch: int, out_ch: int, t_dim: int, groups: int):
        super().__init__()
        g_in = math.gcd(groups, in_ch)
        g_out = math.gcd(groups, out_ch)
        self.norm1 = nn.GroupNorm(g_in, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1)
        self.time_proj = nn.Linear(t_dim, out_ch)
        self.norm2 = nn.GroupNorm(g_out, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, kernel_size=1) if in_ch != out_ch \
            else nn.Identity()

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(t_emb)[None, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class _SelfAttention(nn.Module):
    """Frozen single-head spatial self-attention over (B, S, C) tokens."""

    def __init__(self, channels: int):
        super().__init__()
        self.w_q = nn.Parameter(torch.randn(channels, channels) / math.sqrt(channels))
        self.w_k = nn.Parameter(torch.randn(channels, channels) / math.sqrt(channels))
        self.w_v = nn.Parameter(torch.randn(channels, channels) / math.sqrt(channels))
        self.w_o = nn.Parameter(torch.randn(channels, channels) / math.sqrt(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _attention(x @ self.w_q, x @ self.w_k, x @ self.w_v) @ self.w_o


class _FFN(nn.Module):
    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, hidden)
        self.fc2 = nn.Linear(hidden, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(nn.functional.gelu(self.fc1(x)))


class AdaptedUNetBlock(nn.Module):
    """One block: frozen conv stage -> T-Adapter -> frozen self-attention ->
    dual cross-attention -> frozen FFN with parallel F-Adapter."""

    def __init__(self, in_ch: int, out_ch: int, d_cond: int, d_k: int,
                 t_dim: int, groups: int = 8, adapter_ratio: int = 4):
        super().__init__()
        self.res = _ResBlock(in_ch, out_ch, t_dim, groups)
        self.t_adapter = TAdapter(out_ch, ratio=adapter_ratio)
        self.norm_self = nn.LayerNorm(out_ch)
        self.self_attn = _SelfAttention(out_ch)
        self.norm_cross = nn.LayerNorm(out_ch)
        self.cross = DualCrossAttention(out_ch, d_cond, d_k)
        self.norm_ffn = nn.LayerNorm(out_ch)
        self.ffn = _FFN(out_ch, 2 * out_ch)
        self.f_adapter = FAdapter(out_ch, ratio=adapter_ratio)

    def forward(self, x: torch.Tensor, c_t: torch.Tensor,
                c_v: torch.Tensor | None, t_emb: torch.Tensor,
                toggles: AdapterToggles = AdapterToggles()) -> torch.Tensor:
        frames = x.shape[0]
        h = self.res(x, t_emb)
        if toggles.temporal:
            h = self.t_adapter(h)
        c, height, width = h.shape[1], h.shape[2], h.shape[3]
        tokens = h.reshape(frames, c, height * width).permute(0, 2, 1)
        tokens = tokens + self.self_attn(self.norm_self(tokens))
        tokens = tokens + self.cross(self.norm_cross(tokens), c_t, c_v,
                                     enable_visual=toggles.visual)
        ffn_branch = self.ffn(self.norm_ffn(tokens))
        if toggles.ffn:
            tokens = ffn_branch + self.f_adapter(tokens)
        else:
            tokens = tokens + ffn_branch
        return tokens.permute(0, 2, 1).reshape(frames, c, height, width)


def unet_block_forward(x: torch.Tensor, c_t: torch.Tensor, c_v: torch.Tensor,
                       t_emb: torch.Tensor, block: AdaptedUNetBlock,
                       toggles: AdapterToggles = AdapterToggles()) -> torch.Tensor:
    return block(x, c_t, c_v, t_emb, toggles)


_ADAPTER_MARKERS = ("t_adapter.", "f_adapter.", "cross.w_vk", "cross.w_vv")


@dataclass
class UNetConfig:
    latent_channels: int = 4
    base_channels: int = 32
    channel_mult: int = 2
    d_cond: int = 64
    d_k: int = 32
    t_dim: int = 64
    groups: int = 8
    adapter_ratio: int = 4


class AdaptedUNet(nn.Module):
    """Two-resolution denoising U-Net with adapters in every block."""

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        cfg = cfg or UNetConfig()
        self.cfg = cfg
        c0 = cfg.base_channels
        c1 = cfg.base_channels * cfg.channel_mult
        block = lambda cin, cout: AdaptedUNetBlock(  # noqa: E731
            cin, cout, cfg.d_cond, cfg.d_k, cfg.t_dim, cfg.groups, cfg.adapter_ratio
        )
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.t_dim, cfg.t_dim), nn.SiLU(), nn.Linear(cfg.t_dim, cfg.t_dim)
        )
        self.stem = nn.Conv2d(cfg.latent_channels, c0, kernel_size=3, padding=1)
        self.down0 = block(c0, c0)
        self.downsample = nn.Conv2d(c0, c0, kernel_size=3, stride=2, padding=1)
        self.down1 = block(c0, c1)
        self.mid = block(c1, c1)
        self.up1 = block(c1 + c1, c1)
        self.upsample = nn.Conv2d(c1, c0, kernel_size=3, padding=1)
        self.up0 = block(c0 + c0, c0)
        self.out_norm = nn.GroupNorm(math.gcd(cfg.groups, c0), c0)
        self.out_conv = nn.Conv2d(c0, cfg.latent_channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor, t: int, c_t: torch.Tensor,
                c_v: torch.Tensor | None,
                toggles: AdapterToggles = AdapterToggles()) -> torch.Tensor:
        """x: (frames, latent_channels, H, W) noisy latents; returns noise
        prediction of the same shape."""
        param = next(self.parameters())
        t_emb = self.time_mlp(
            timestep_embedding(t, self.cfg.t_dim, param.dtype, param.device)
        )
        h = self.stem(x)
        skip0 = self.down0(h, c_t, c_v, t_emb, toggles)
        h = self.downsample(skip0)
        skip1 = self.down1(h, c_t, c_v, t_emb, toggles)
        h = self.mid(skip1, c_t, c_v, t_emb, toggles)
        h = self.up1(torch.cat([h, skip1], dim=1), c_t, c_v, t_emb, toggles)
        h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
        h = self.upsample(h)
        h = self.up0(torch.cat([h, skip0], dim=1), c_t, c_v, t_emb, toggles)
        return self.out_conv(nn.functional.silu(self.out_norm(h)))

    # -- parameter partition -------------------------------------------------
    def adapter_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters()
                if any(m in n for m in _ADAPTER_MARKERS)]

    def adapter_parameters(self) -> list[nn.Parameter]:
        names = set(self.adapter_parameter_names())
        return [p for n, p in self.named_parameters() if n in names]

    def frozen_parameter_names(self) -> list[str]:
        adapters = set(self.adapter_parameter_names())
        return [n for n, _ in self.named_parameters() if n not in adapters]

    def freeze_base(self) -> None:
        adapters = set(self.adapter_parameter_names())
        for name, param in self.named_parameters():
            param.requires_grad_(name in adapters)

    def frozen_state(self) -> dict[str, torch.Tensor]:
        adapters = set(self.adapter_parameter_names())
        return {n: p.detach().clone() for n, p in self.named_parameters()
                if n not in adapters}


# ---------------------------------------------------------------------------
# Latent mapper (fixed pixel -> latent projection)
# ---------------------------------------------------------------------------

class LatentMapper(nn.Module):
    """Untrained strided average-pool plus a fixed seeded channel mix."""

    def __init__(self, latent_channels: int = 4, latent_size: int = 32, seed: int = 0):
        super().__init__()
        self.latent_size = latent_size
        rng = np.random.default_rng(seed)
        proj = rng.standard_normal((3, latent_channels)) / math.sqrt(3.0)
        self.register_buffer("proj", torch.as_tensor(proj, dtype=torch.float32))

    def forward(self, frames) -> torch.Tensor:
        """frames: (F, H, W, 3) in [0, 1] -> (F, latent_channels, s, s)."""
        x = torch.as_tensor(np.asarray(frames, dtype=np.float32),
                            dtype=self.proj.dtype, device=self.proj.device)
        x = x.permute(0, 3, 1, 2)
        pooled = nn.functional.adaptive_avg_pool2d(
            x, (self.latent_size, self.latent_size))
        return torch.einsum("fchw,cd->fdhw", pooled, self.proj)


# ---------------------------------------------------------------------------
# Training loss
# ---------------------------------------------------------------------------

def diffusion_loss(latents: torch.Tensor, c_t: torch.Tensor,
                   c_v: torch.Tensor | None, generator: torch.Generator,
                   predictor: Callable, schedule: DiffusionSchedule,
                   snr_gamma: float = 5.0, t: int | None = None) -> torch.Tensor:
    """Min-SNR weighted noise-prediction loss on one latent clip.

    Samples a timestep and Gaussian noise from ``generator`` (pass ``t`` to
    pin the timestep), diffuses the latents, and scores the predictor's
    noise estimate with a mean squared error scaled by the clipped SNR
    weight. Differentiable through the predictor and both conditions.
    """
    if t is None:
        t = int(torch.randint(0, schedule.timesteps, (1,), generator=generator))
    noise = torch.empty_like(latents).normal_(generator=generator)
    alpha_bar = schedule.alpha_bar(t)
    x_t = math.sqrt(alpha_bar) * latents + math.sqrt(1.0 - alpha_bar) * noise
    eps_hat = predictor(x_t, t, c_t, c_v)
    weight = min_snr_weight(t, schedule, snr_gamma)
    return weight * ((noise - eps_hat) ** 2).mean()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_unet_checkpoint(directory: str | Path, unet: AdaptedUNet,
                         schedule: DiffusionSchedule,
                         extra_meta: dict[str, str] | None = None) -> None:
    tensors = {f"unet.{k}": v.detach().cpu().numpy()
               for k, v in unet.state_dict().items()}
    tensors["schedule.betas"] = schedule.betas.astype(np.float32)
    cfg = unet.cfg
    meta = {
        "latent_channels": str(cfg.latent_channels),
        "base_channels": str(cfg.base_channels),
        "channel_mult": str(cfg.channel_mult),
        "d_cond": str(cfg.d_cond),
        "d_k": str(cfg.d_k),
        "t_dim": str(cfg.t_dim),
        "groups": str(cfg.groups),
        "adapter_ratio": str(cfg.adapter_ratio),
        "timesteps": str(schedule.timesteps),
        "beta_start": repr(schedule.cfg.beta_start),
        "beta_end": repr(schedule.cfg.beta_end),
        "adapter_params": ",".join(unet.adapter_parameter_names()),
    }
    meta.update(extra_meta or {})
    save_state(directory, tensors, meta)


def load_unet_checkpoint(directory: str | Path) -> tuple[AdaptedUNet, DiffusionSchedule, dict]:
    tensors, meta = load_state(directory)
    cfg = UNetConfig(
        latent_channels=int(meta["latent_channels"]),
        base_channels=int(meta["base_channels"]),
        channel_mult=int(meta["channel_mult"]),
        d_cond=int(meta["d_cond"]),
        d_k=int(meta["d_k"]),
        t_dim=int(meta["t_dim"]),
        groups=int(meta["groups"]),
        adapter_ratio=int(meta["adapter_ratio"]),
    )
    unet = AdaptedUNet(cfg)
    unet.load_state_dict({
        k[len("unet."):]: torch.as_tensor(v)
        for k, v in tensors.items() if k.startswith("unet.")
    })
    schedule = DiffusionSchedule(DiffusionConfig(
        timesteps=int(meta["timesteps"]),
        beta_start=float(meta["beta_start"]),
        beta_end=float(meta["beta_end"]),
    ))
    return unet, schedule, meta
