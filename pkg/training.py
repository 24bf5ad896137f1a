"""Training objectives.

Stage I: plain denoising loss on aligned faces with identity tokens and a neutral prompt.
Stage II: the same loss on wild composites plus two masked terms that tie the
non-face region of the prediction to (a) the prediction with augmented identity
tokens and (b) the text-only prediction:

    total = L_rec + gamma1 * L_disen + gamma2 * L_reg
"""
from pipeline import WPlusPipeline
from diffusion_core import NoiseSchedule, add_noise
from denoiser import denoise
from errors import ConfigurationError, ValidationError
from utils import make_generator, derive_seed
from constants import NEUTRAL_TEMPLATES, RELATIVE_PERTURB_SCALE, CODEC_FACTOR

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple
import logging

import numpy as np
import torch
import torch.nn.functional as F

IDENTITY_AUG = "identity"
SHUFFLE_AUG = "batch_shuffle"
PERTURB_AUG = "gaussian_perturb"
BOTH_AUG = "both"
AUGMENTATION_MODES = (SHUFFLE_AUG, PERTURB_AUG, BOTH_AUG, IDENTITY_AUG)
BATCH_MODES = (SHUFFLE_AUG, BOTH_AUG)
# sub-streams of the per-step stage 2 seed
DROP_STREAM = 1
AUGMENT_STREAM = 2


@dataclass
class LossWeights:
    gamma1: float = 1.5
    gamma2: float = 1.

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            error_str = "Loss weights must be non-negative, got gamma1={}, gamma2={}.".format(self.gamma1, self.gamma2)
            logging.error("TRAINING: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)


@dataclass
class AugmentationOp:
    mode: str = BOTH_AUG
    sigma: Optional[float] = None   # None: RELATIVE_PERTURB_SCALE * per-token RMS

    def __post_init__(self):
        if self.mode not in AUGMENTATION_MODES:
            error_str = "Unknown augmentation '{}', expected one of {}.".format(self.mode, AUGMENTATION_MODES)
            logging.error("TRAINING: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        if self.sigma is not None and self.sigma < 0:
            error_str = "Perturbation sigma must be non-negative."
            logging.error("TRAINING: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)


class NoiseDraw(NamedTuple):
    t: torch.Tensor       # (B,) long
    eps: torch.Tensor     # latent-shaped


class Stage2Losses(NamedTuple):
    L_rec: torch.Tensor
    L_disen: torch.Tensor
    L_reg: torch.Tensor
    total: torch.Tensor


class NeutralPromptSampler:
    """Draws Stage I prompts from the neutral templates."""

    def __init__(self, seed: int, templates: Sequence[str] = NEUTRAL_TEMPLATES):
        self._rng = np.random.default_rng(seed)
        self._templates = tuple(templates)

    def sample(self, n: int) -> List[str]:
        return [self._templates[i] for i in self._rng.integers(len(self._templates), size=n)]


def draw_noise(batch: int, latent_shape: tuple, schedule: NoiseSchedule, generator: torch.Generator,
               dtype=torch.float32) -> NoiseDraw:
    t = torch.randint(0, schedule.num_timesteps, (batch,), generator=generator)
    eps = torch.randn((batch,) + tuple(latent_shape), generator=generator, dtype=torch.float64).to(dtype)
    return NoiseDraw(t, eps)


def masked_mse(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """sum((M * (a - b))^2) over the entries where M > 0, divided by their count; 0 when there are none."""
    full = mask.expand_as(a)
    count = int((full > 0).sum())
    if count == 0:
        return (a - b).sum() * 0.
    return ((full * (a - b)) ** 2).sum() / count


def latent_masks(masks, dtype) -> torch.Tensor:
    """(B, H, W) image masks -> (B, 1, H/4, W/4) by area averaging."""
    m = torch.as_tensor(np.asarray(masks) if not torch.is_tensor(masks) else masks).to(dtype)
    return F.avg_pool2d(m.unsqueeze(1), CODEC_FACTOR)


def drop_masks(batch: int, p: float, rng_seed: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """Independent per-sample Bernoulli(p) draws for (text, identity)."""
    if not 0. <= p < 1.:
        error_str = "Drop probability {} is outside [0, 1).".format(p)
        logging.error("TRAINING: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    u = torch.rand((batch, 2), generator=make_generator(rng_seed), dtype=torch.float64)
    return u[:, 0] < p, u[:, 1] < p


def drop_conditions(text: torch.Tensor, id_tokens: Optional[torch.Tensor], p: float, rng_seed: int,
                    null_text: torch.Tensor) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Replaces text by the null condition and identity tokens by zeros, each with probability p per sample."""
    drop_text, drop_id = drop_masks(text.shape[0], p, rng_seed)
    if p == 0.:
        return text, id_tokens
    null = null_text.expand_as(text) if null_text.dim() == text.dim() else null_text.unsqueeze(0).expand_as(text)
    text = torch.where(drop_text[:, None, None], null, text)
    if id_tokens is not None:
        id_tokens = torch.where(drop_id[:, None, None], torch.zeros_like(id_tokens), id_tokens)
    return text, id_tokens


def _derangement(batch: int, generator: torch.Generator) -> torch.Tensor:
    # one cycle through a random order: no element stays in place
    order = torch.randperm(batch, generator=generator)
    perm = torch.empty(batch, dtype=torch.long)
    perm[order] = torch.roll(order, -1)
    return perm


def apply_augmentation(f_w: torch.Tensor, op: AugmentationOp, rng_seed: int) -> torch.Tensor:
    """Psi(f_w) for a (B, K, D) batch of identity tokens."""
    if op.mode == IDENTITY_AUG:
        return f_w
    generator = make_generator(rng_seed)
    mode = op.mode
    if mode in BATCH_MODES and f_w.shape[0] < 2:
        logging.warning("TRAINING: WARNING. Cannot shuffle a batch of 1, using gaussian perturbation instead.")
        mode = PERTURB_AUG
    out = f_w
    if mode in BATCH_MODES:
        out = out[_derangement(out.shape[0], generator)]
    if mode in (PERTURB_AUG, BOTH_AUG):
        if op.sigma is None:
            sigma = RELATIVE_PERTURB_SCALE * out.detach().pow(2).mean(dim=-1, keepdim=True).sqrt()
        else:
            sigma = op.sigma
        noise = torch.randn(out.shape, generator=generator, dtype=torch.float64).to(out.dtype)
        out = out + sigma * noise
    return out


def _check_batch_size(images, expected: int, what: str):
    if images.ndim != 4 or images.shape[1] != expected or images.shape[2] != expected:
        error_str = "{} batch needs {}x{} images, got {}.".format(what, expected, expected, tuple(images.shape))
        logging.error("TRAINING: ERROR. {}".format(error_str))
        raise ValidationError(error_str)


def ldm_loss(pipe: WPlusPipeline, z0: torch.Tensor, text: torch.Tensor, id_tokens: Optional[torch.Tensor],
             noise: NoiseDraw, lam: float = 1.) -> torch.Tensor:
    """E || eps - eps_theta(z_t, t, text, f_w) ||^2."""
    z_t = add_noise(z0, noise.t, noise.eps, pipe.schedule)
    return F.mse_loss(denoise(pipe.denoiser, z_t, noise.t, text, id_tokens, lam), noise.eps)


def stage0_loss(pipe: WPlusPipeline, images, captions: Sequence[str], noise: NoiseDraw,
                drop_prob: float = 0., drop_seed: int = 0) -> torch.Tensor:
    """Base text-to-image objective used to pretrain the text encoder and denoiser."""
    text = pipe.encode_text(list(captions))
    if drop_prob > 0.:
        text, _ = drop_conditions(text, None, drop_prob, drop_seed, pipe.null_text()[0])
    return ldm_loss(pipe, pipe.encode_images(images), text, None, noise)


def stage1_loss(pipe: WPlusPipeline, images, wplus, prompts: Sequence[str], noise: NoiseDraw,
                drop_prob: float = 0., drop_seed: int = 0) -> torch.Tensor:
    """Denoising loss on aligned faces conditioned on a neutral prompt and F_w(w+), lambda = 1."""
    images = np.asarray(images) if not torch.is_tensor(images) else images
    _check_batch_size(images, pipe.profile.face_size, "Stage 1")
    text = pipe.encode_text(list(prompts))
    f_w = pipe.identity_tokens(wplus)
    if drop_prob > 0.:
        text, f_w = drop_conditions(text, f_w, drop_prob, drop_seed, pipe.null_text()[0])
    return ldm_loss(pipe, pipe.encode_images(images), text, f_w, noise, lam=1.)


def stage2_losses(pipe: WPlusPipeline, images, masks, wplus, captions: Sequence[str], weights: LossWeights,
                  aug: AugmentationOp, rng_seed: int, noise: NoiseDraw, drop_prob: float = 0.,
                  detach_targets: bool = False) -> Stage2Losses:
    """L_rec, L_disen, L_reg and their weighted sum on one wild batch.

    All three terms see the same (z_t, t, eps). Condition dropping touches only the
    L_rec branch. With `detach_targets` the augmented and text-only predictions are
    treated as constants.
    """
    if masks is None:
        error_str = "Stage 2 batch has no masks."
        logging.error("TRAINING: ERROR. {}".format(error_str))
        raise ValidationError(error_str)
    images = np.asarray(images) if not torch.is_tensor(images) else images
    masks = np.asarray(masks) if not torch.is_tensor(masks) else masks
    if len(masks) != len(images) or tuple(masks.shape[1:3]) != tuple(images.shape[1:3]):
        error_str = "Stage 2 masks {} do not match images {}.".format(tuple(masks.shape), tuple(images.shape))
        logging.error("TRAINING: ERROR. {}".format(error_str))
        raise ValidationError(error_str)

    z0 = pipe.encode_images(images)
    z_t = add_noise(z0, noise.t, noise.eps, pipe.schedule)
    mask = latent_masks(masks, z0.dtype)
    text = pipe.encode_text(list(captions))
    f_w = pipe.identity_tokens(wplus)

    drop_seed, augment_seed = derive_seed(rng_seed, DROP_STREAM), derive_seed(rng_seed, AUGMENT_STREAM)
    eps_id = denoise(pipe.denoiser, z_t, noise.t, text, f_w, 1.)
    if drop_prob > 0.:
        text_rec, f_w_rec = drop_conditions(text, f_w, drop_prob, drop_seed, pipe.null_text()[0])
        eps_rec = denoise(pipe.denoiser, z_t, noise.t, text_rec, f_w_rec, 1.)
    else:
        eps_rec = eps_id
    L_rec = F.mse_loss(eps_rec, noise.eps)

    if aug.mode == IDENTITY_AUG:
        eps_aug = eps_id
    else:
        eps_aug = denoise(pipe.denoiser, z_t, noise.t, text, apply_augmentation(f_w, aug, augment_seed), 1.)
    eps_txt = denoise(pipe.denoiser, z_t, noise.t, text, None)
    if detach_targets:
        eps_aug, eps_txt = eps_aug.detach(), eps_txt.detach()

    L_disen = masked_mse(eps_id, eps_aug, mask)
    L_reg = masked_mse(eps_id, eps_txt, mask)
    total = L_rec + weights.gamma1 * L_disen + weights.gamma2 * L_reg
    return Stage2Losses(L_rec, L_disen, L_reg, total)
