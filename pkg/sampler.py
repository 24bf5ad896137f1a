"""DDIM sampling with joint classifier-free guidance over (text, identity)."""
from pipeline import WPlusPipeline
from toyworld import WPlusEmbedding, EditDirection
from data_generators import save_png
from denoiser import denoise
from settings import SamplerParams
from errors import ConfigurationError, ShapeError
from utils import make_generator
from constants import WILD_SIZE

from dataclasses import dataclass
from typing import Dict, Optional
import logging
import math
import os

import numpy as np
import torch

SIDECAR_EXTENSION = ".txt"


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    eta: float = 0.
    lam: float = 1.
    seed: int = 0
    image_size: int = WILD_SIZE

    def __post_init__(self):
        if self.steps < 1 or not 0. <= self.eta <= 1. or self.guidance_scale < 0:
            error_str = "Invalid sampler config: steps={}, eta={}, guidance_scale={}.".format(
                self.steps, self.eta, self.guidance_scale)
            logging.error("SAMPLER: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)

    @classmethod
    def from_params(cls, params: SamplerParams, image_size: int = WILD_SIZE) -> 'SamplerConfig':
        return cls(params.steps, params.guidance_scale, params.eta, params.lam, params.seed, image_size)


@dataclass
class SampleResult:
    image: np.ndarray       # H x W x 3, clipped to [0, 1]
    latent: torch.Tensor    # final z_0


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """eps_u + s * (eps_c - eps_u)."""
    if eps_uncond.shape != eps_cond.shape:
        error_str = "Guidance branches differ in shape: {} vs {}.".format(tuple(eps_uncond.shape),
                                                                         tuple(eps_cond.shape))
        logging.error("SAMPLER: ERROR. {}".format(error_str))
        raise ShapeError(error_str)
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_timesteps(steps: int, num_timesteps: int) -> np.ndarray:
    """Evenly spaced, descending, last entry exactly 0."""
    if steps > num_timesteps:
        error_str = "{} sampling steps exceed the {} schedule timesteps.".format(steps, num_timesteps)
        logging.error("SAMPLER: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    return (np.arange(steps) * (num_timesteps // steps))[::-1].copy()


def ddim_step(z_t: torch.Tensor, eps: torch.Tensor, alpha_bar_t: float, alpha_bar_prev: float, eta: float = 0.,
              noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One DDIM update from the x0 prediction. With eta = 0 it is deterministic."""
    x0 = (z_t - math.sqrt(1. - alpha_bar_t) * eps) / math.sqrt(alpha_bar_t)
    sigma = eta * math.sqrt((1. - alpha_bar_prev) / (1. - alpha_bar_t)) * math.sqrt(1. - alpha_bar_t / alpha_bar_prev) \
        if eta > 0. else 0.
    z_prev = math.sqrt(alpha_bar_prev) * x0 + math.sqrt(max(1. - alpha_bar_prev - sigma ** 2, 0.)) * eps
    if sigma > 0. and noise is not None:
        z_prev = z_prev + sigma * noise
    return z_prev


def ddim_sample(pipe: WPlusPipeline, text, id_tokens: Optional[torch.Tensor], config: SamplerConfig) -> SampleResult:
    """Samples one image.

    `text` is a caption or an already encoded (L, D_ctx) condition. The unconditional
    branch uses the null text and, when identity tokens are given, zero tokens.
    """
    if id_tokens is not None and not pipe.is_attached:
        error_str = "Identity tokens given but no adapter is attached."
        logging.error("SAMPLER: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    timesteps = ddim_timesteps(config.steps, pipe.schedule.num_timesteps)
    alpha_bars = pipe.schedule.alpha_bars.numpy()
    generator = make_generator(config.seed)
    shape = (1,) + pipe.latent_shape(config.image_size)

    with torch.no_grad():
        cond_text = pipe.encode_text(text) if isinstance(text, str) else text.reshape(1, *text.shape[-2:])
        cond_text = cond_text.to(pipe.dtype)
        uncond_text = pipe.null_text(1)
        cond_id = None if id_tokens is None else id_tokens.reshape(1, *id_tokens.shape[-2:]).to(pipe.dtype)
        uncond_id = None if cond_id is None else torch.zeros_like(cond_id)

        z = torch.randn(shape, generator=generator, dtype=torch.float64).to(pipe.dtype)
        for i, t in enumerate(timesteps):
            t_batch = torch.full((1,), int(t), dtype=torch.long)
            eps_c = denoise(pipe.denoiser, z, t_batch, cond_text, cond_id, config.lam)
            eps_u = denoise(pipe.denoiser, z, t_batch, uncond_text, uncond_id, config.lam)
            eps = cfg_combine(eps_u, eps_c, config.guidance_scale)
            ab_t = float(alpha_bars[t])
            ab_prev = float(alpha_bars[timesteps[i + 1]]) if i + 1 < len(timesteps) else 1.
            noise = torch.randn(shape, generator=generator, dtype=torch.float64).to(pipe.dtype) \
                if config.eta > 0. else None
            z = ddim_step(z, eps, ab_t, ab_prev, config.eta, noise)
        image = pipe.codec.decode_latent(z)[0]
    return SampleResult(np.clip(image, 0., 1.).astype(np.float64), z)


def sample_identity(pipe: WPlusPipeline, text, w: WPlusEmbedding, config: SamplerConfig) -> SampleResult:
    with torch.no_grad():
        tokens = pipe.identity_tokens(w)
    return ddim_sample(pipe, text, tokens, config)


def sample_with_edit(pipe: WPlusPipeline, text, w: WPlusEmbedding, direction: EditDirection, alpha: float,
                     config: SamplerConfig) -> SampleResult:
    """Samples with identity tokens F_w(w+ + alpha * delta)."""
    return sample_identity(pipe, text, w.edited(direction, alpha), config)


def interpolate_wplus(w1: WPlusEmbedding, w2: WPlusEmbedding, kappa: float) -> WPlusEmbedding:
    """(1 - kappa) * w1 + kappa * w2."""
    if w1.profile != w2.profile or w1.vectors.shape != w2.vectors.shape:
        error_str = "Cannot interpolate a '{}' and a '{}' embedding.".format(w1.profile, w2.profile)
        logging.error("SAMPLER: ERROR. {}".format(error_str))
        raise ShapeError(error_str)
    if not 0. <= kappa <= 1.:
        error_str = "kappa {} is outside [0, 1].".format(kappa)
        logging.error("SAMPLER: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    return WPlusEmbedding((1. - kappa) * w1.vectors + kappa * w2.vectors, w1.profile)


def write_sidecar(path: str, record: Dict[str, object]) -> str:
    """`key = value` lines, readable as a config file for replay."""
    with open(path, 'w') as f:
        for key, value in record.items():
            f.write("{} = {}\n".format(key, value))
    return path


def save_sample(png_path: str, result: SampleResult, record: Dict[str, object]) -> str:
    save_png(png_path, result.image)
    write_sidecar(os.path.splitext(png_path)[0] + SIDECAR_EXTENSION, record)
    return png_path


def attention_scores(pipe: WPlusPipeline, latent: torch.Tensor, text, id_tokens: torch.Tensor,
                     layer_index: int = -1, t: int = 1, lam: float = 1.) -> np.ndarray:
    """Softmax scores (queries x identity tokens) of one residual layer for a single denoiser pass."""
    if pipe.adapter is None:
        error_str = "Attention scores need an attached adapter."
        logging.error("SAMPLER: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    pipe.adapter.record_attention(layer_index)
    try:
        with torch.no_grad():
            cond_text = pipe.encode_text(text) if isinstance(text, str) else text.reshape(1, *text.shape[-2:])
            denoise(pipe.denoiser, latent.to(pipe.dtype), torch.full((1,), t, dtype=torch.long), cond_text,
                    id_tokens.reshape(1, *id_tokens.shape[-2:]).to(pipe.dtype), lam)
        scores = pipe.adapter.layers[layer_index].last_scores
    finally:
        pipe.adapter.record_attention(None)
    return scores[0].cpu().numpy()
