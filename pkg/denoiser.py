"""Toy UNet noise predictor. Every cross-attention layer carries one adapter slot."""
from diffusion_core import sinusoidal_embedding
from errors import ConfigurationError, ShapeError
from constants import LATENT_CHANNELS, UNET_CHANNELS, TIME_EMBED_DIM, NORM_GROUPS

from typing import List, Optional
import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_scores: bool = False):
    """Softmax(Q K^T / sqrt(d)) V over the last two dims."""
    scores = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
    out = scores @ v
    return (out, scores) if return_scores else out


def base_cross_attention(f_z: torch.Tensor, context: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor,
                         w_v: torch.Tensor) -> torch.Tensor:
    """f'_z for projection weights stored as (out, in) like nn.Linear."""
    if f_z.shape[-1] != w_q.shape[1] or context.shape[-1] != w_k.shape[1] or context.shape[-1] != w_v.shape[1]:
        error_str = "Cross-attention dims do not match: f_z {}, context {}, W_q {}, W_k {}.".format(
            tuple(f_z.shape), tuple(context.shape), tuple(w_q.shape), tuple(w_k.shape))
        logging.error("DENOISER: ERROR. {}".format(error_str))
        raise ShapeError(error_str)
    return attention(f_z @ w_q.T, context @ w_k.T, context @ w_v.T)


class AdapterSlot:
    # Plain holder so an attached adapter is not registered as a denoiser submodule.
    def __init__(self):
        self.params = None


class CrossAttention(nn.Module):
    def __init__(self, d_model: int, d_ctx: int):
        super().__init__()
        self.d_model = d_model
        self.d_ctx = d_ctx
        self.to_q = nn.Linear(d_model, d_model, bias=False)
        self.to_k = nn.Linear(d_ctx, d_model, bias=False)
        self.to_v = nn.Linear(d_ctx, d_model, bias=False)
        self.slot = AdapterSlot()

    def forward(self, f_z: torch.Tensor, context: torch.Tensor, id_tokens: Optional[torch.Tensor] = None,
                lam: float = 1.) -> torch.Tensor:
        f_prime = base_cross_attention(f_z, context, self.to_q.weight, self.to_k.weight, self.to_v.weight)
        if id_tokens is None:
            return f_prime
        return self.slot.params(f_z, f_prime, id_tokens, lam)


class SelfAttention(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.to_qkv = nn.Linear(d_model, 3 * d_model, bias=False)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.to_qkv(x).chunk(3, dim=-1)
        return self.proj(attention(q, k, v))


class TransformerBlock(nn.Module):
    """Self-attention, cross-attention (with the residual identity branch), feed-forward."""

    def __init__(self, channels: int, d_ctx: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.self_attn = SelfAttention(channels)
        self.norm2 = nn.LayerNorm(channels)
        self.cross_attn = CrossAttention(channels, d_ctx)
        self.proj_out = nn.Linear(channels, channels)
        self.norm3 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels))

    def forward(self, x, context, id_tokens=None, lam=1.):
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        tokens = tokens + self.self_attn(self.norm1(tokens))
        tokens = tokens + self.proj_out(self.cross_attn(self.norm2(tokens), context, id_tokens, lam))
        tokens = tokens + self.ff(self.norm3(tokens))
        return tokens.transpose(1, 2).reshape(b, c, h, w)


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(NORM_GROUPS, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(NORM_GROUPS, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """Two-resolution UNet (channels 32/64) with cross-attention at both resolutions."""

    def __init__(self, d_ctx: int, channels=UNET_CHANNELS, time_dim: int = TIME_EMBED_DIM):
        super().__init__()
        c0, c1 = channels
        self.d_ctx = d_ctx
        self._time_freq_dim = c0
        self.time_embed = nn.Sequential(nn.Linear(c0, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, c0, 3, padding=1)
        self.down0_res = ResBlock(c0, c0, time_dim)
        self.down0_attn = TransformerBlock(c0, d_ctx)
        self.downsample = nn.Conv2d(c0, c0, 3, stride=2, padding=1)
        self.down1_res = ResBlock(c0, c1, time_dim)
        self.down1_attn = TransformerBlock(c1, d_ctx)
        self.mid_res = ResBlock(c1, c1, time_dim)
        self.mid_attn = TransformerBlock(c1, d_ctx)
        self.upsample = nn.Conv2d(c1, c1, 3, padding=1)
        self.up0_res = ResBlock(c1 + c0, c0, time_dim)
        self.up0_attn = TransformerBlock(c0, d_ctx)
        self.norm_out = nn.GroupNorm(NORM_GROUPS, c0)
        self.conv_out = nn.Conv2d(c0, LATENT_CHANNELS, 3, padding=1)

    def cross_attention_layers(self) -> List[CrossAttention]:
        return [block.cross_attn for block in (self.down0_attn, self.down1_attn, self.mid_attn, self.up0_attn)]

    @property
    def is_attached(self) -> bool:
        return any(layer.slot.params is not None for layer in self.cross_attention_layers())

    def forward(self, z_t: torch.Tensor, t, context: torch.Tensor, id_tokens: Optional[torch.Tensor] = None,
                lam: float = 1.) -> torch.Tensor:
        if id_tokens is not None and not self.is_attached:
            error_str = "Identity tokens given but no adapter is attached."
            logging.error("DENOISER: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        if context.shape[-1] != self.d_ctx:
            error_str = "Context width {} does not match d_ctx {}.".format(context.shape[-1], self.d_ctx)
            logging.error("DENOISER: ERROR. {}".format(error_str))
            raise ShapeError(error_str)
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1 and z_t.shape[0] != 1:
            t = t.expand(z_t.shape[0])
        temb = self.time_embed(sinusoidal_embedding(t, self._time_freq_dim).to(z_t.dtype))

        h0 = self.conv_in(z_t)
        h0 = self.down0_attn(self.down0_res(h0, temb), context, id_tokens, lam)
        h1 = self.down1_attn(self.down1_res(self.downsample(h0), temb), context, id_tokens, lam)
        h1 = self.mid_attn(self.mid_res(h1, temb), context, id_tokens, lam)
        up = self.upsample(F.interpolate(h1, scale_factor=2, mode='nearest'))
        h = self.up0_attn(self.up0_res(torch.cat([up, h0], dim=1), temb), context, id_tokens, lam)
        return self.conv_out(F.silu(self.norm_out(h)))


def denoise(denoiser: Denoiser, z_t: torch.Tensor, t, text: torch.Tensor, id_tokens: Optional[torch.Tensor] = None,
            lam: float = 1.) -> torch.Tensor:
    """Noise prediction eps_theta(z_t, t, text, F_w(w+))."""
    return denoiser(z_t, t, text, id_tokens, lam)
