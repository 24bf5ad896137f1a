"""Latent diffusion plumbing: exact-inverse codec, toy text encoder, noise schedule."""
from constants import *
from errors import ConfigurationError, ShapeError, TokenizationError

from typing import List, Sequence, Union
import hashlib
import logging
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def _to_tensor_images(img) -> torch.Tensor:
    """HWC / BHWC numpy or tensor in [0, 1] -> BCHW tensor."""
    x = torch.as_tensor(np.asarray(img) if not torch.is_tensor(img) else img)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return x.permute(0, 3, 1, 2)


class LatentCodec(nn.Module):
    """Two space-to-depth steps followed by a fixed seeded orthonormal channel mixing."""

    def __init__(self, seed: int = CODEC_SEED):
        super().__init__()
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((LATENT_CHANNELS, LATENT_CHANNELS)))
        self.register_buffer('mixing', torch.from_numpy(q), persistent=False)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """BCHW images -> B x 48 x H/4 x W/4 latents."""
        _, _, h, w = images.shape
        if h % CODEC_FACTOR or w % CODEC_FACTOR:
            error_str = "Image size {}x{} is not divisible by {}.".format(h, w, CODEC_FACTOR)
            logging.error("DIFFUSION: ERROR. {}".format(error_str))
            raise ShapeError(error_str)
        z = F.pixel_unshuffle(F.pixel_unshuffle(images, 2), 2)
        return torch.einsum('dc,bchw->bdhw', self.mixing.to(z.dtype), z)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.shape[1] != LATENT_CHANNELS:
            error_str = "Latent has {} channels, expected {}.".format(latents.shape[1], LATENT_CHANNELS)
            logging.error("DIFFUSION: ERROR. {}".format(error_str))
            raise ShapeError(error_str)
        z = torch.einsum('dc,bdhw->bchw', self.mixing.to(latents.dtype), latents)
        return F.pixel_shuffle(F.pixel_shuffle(z, 2), 2)

    def encode_image(self, img, dtype=torch.float64) -> torch.Tensor:
        return self.encode(_to_tensor_images(img).to(dtype))

    def decode_latent(self, z: torch.Tensor) -> np.ndarray:
        """Latents -> BHWC numpy images (not clipped)."""
        return self.decode(z).permute(0, 2, 3, 1).detach().cpu().numpy()


def build_vocabulary() -> List[str]:
    words = set()
    for template in NEUTRAL_TEMPLATES:
        words.update(template.split())
    words.update(CAPTION_FORMAT.format("", "", "").split())
    words.update(EXPRESSIONS)
    words.update(BACKGROUND_COLORS)
    words.update(POSITIONS)
    return [PAD_TOKEN] + sorted(words - set(STOP_WORDS))


def vocabulary_hash(vocabulary: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(vocabulary).encode()).hexdigest()[:16]


def sinusoidal_embedding(positions: torch.Tensor, dim: int, max_period: float = 10000.) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[:, None] * freqs[None]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = F.pad(embedding, (0, 1))
    return embedding


class TextEncoder(nn.Module):
    """Word-level tokenizer over the caption grammar, learned table plus fixed sinusoidal positions."""

    def __init__(self, d_ctx: int, length: int = TEXT_LENGTH):
        super().__init__()
        self.vocabulary = build_vocabulary()
        self._ids = {word: i for i, word in enumerate(self.vocabulary)}
        self.length = length
        self.d_ctx = d_ctx
        self.embedding = nn.Embedding(len(self.vocabulary), d_ctx)
        nn.init.normal_(self.embedding.weight, std=0.5)
        self.register_buffer('positions', sinusoidal_embedding(torch.arange(length), d_ctx).float(),
                             persistent=False)

    def tokenize(self, caption: str) -> List[int]:
        words = [word for word in caption.lower().split() if word not in STOP_WORDS]
        unknown = [word for word in words if word not in self._ids]
        if unknown:
            error_str = "Out-of-vocabulary tokens {} in '{}'.".format(unknown, caption)
            logging.error("TEXT: ERROR. {}".format(error_str))
            raise TokenizationError(error_str)
        if len(words) > self.length:
            error_str = "Caption '{}' has {} tokens, limit is {}.".format(caption, len(words), self.length)
            logging.error("DIFFUSION: ERROR. {}".format(error_str))
            raise TokenizationError(error_str)
        ids = [self._ids[word] for word in words]
        return ids + [PAD_ID] * (self.length - len(ids))

    def forward(self, captions: Union[str, Sequence[str]]) -> torch.Tensor:
        """B x L x D_ctx embeddings; the empty caption is the null condition."""
        if isinstance(captions, str):
            captions = [captions]
        device = self.embedding.weight.device
        ids = torch.tensor([self.tokenize(c) for c in captions], dtype=torch.long, device=device)
        return self.embedding(ids) + self.positions.to(self.embedding.weight.dtype)

    def null_condition(self) -> torch.Tensor:
        return self.forward("")[0]


def encode_text(encoder: TextEncoder, caption: str) -> torch.Tensor:
    return encoder(caption)[0]


class NoiseSchedule:
    """Linear beta schedule; alpha_bars kept in float64."""

    def __init__(self, num_timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if not 0. < beta_start <= beta_end < 1.:
            error_str = "Invalid beta range [{}, {}].".format(beta_start, beta_end)
            logging.error("DIFFUSION: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        self.num_timesteps = num_timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.betas = torch.linspace(beta_start, beta_end, num_timesteps, dtype=torch.float64)
        self.alpha_bars = torch.cumprod(1. - self.betas, dim=0)

    @classmethod
    def degenerate(cls, num_timesteps: int = 1000) -> 'NoiseSchedule':
        """alpha_bar == 1 everywhere: z_t == z_0. Test hook."""
        schedule = cls(num_timesteps)
        schedule.betas = torch.zeros(num_timesteps, dtype=torch.float64)
        schedule.alpha_bars = torch.ones(num_timesteps, dtype=torch.float64)
        return schedule

    def describe(self) -> str:
        return "linear {} {} {}".format(self.beta_start, self.beta_end, self.num_timesteps)

    def __str__(self):
        return self.describe()


def add_noise(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps, t per batch element."""
    if eps.shape != z0.shape:
        error_str = "Noise shape {} does not match latent shape {}.".format(tuple(eps.shape), tuple(z0.shape))
        logging.error("DIFFUSION: ERROR. {}".format(error_str))
        raise ShapeError(error_str)
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1 and z0.shape[0] != 1:
        t = t.expand(z0.shape[0])
    if torch.any(t < 0) or torch.any(t >= schedule.num_timesteps):
        error_str = "Timestep out of range [0, {}).".format(schedule.num_timesteps)
        logging.error("DIFFUSION: ERROR. {}".format(error_str))
        raise ShapeError(error_str)
    ab = schedule.alpha_bars[t].to(z0.dtype).view(-1, *([1] * (z0.dim() - 1)))
    return ab.sqrt() * z0 + (1. - ab).sqrt() * eps
