from diffusion_core import LatentCodec, TextEncoder, NoiseSchedule, vocabulary_hash
from denoiser import Denoiser
from wplus_adapter import WPlusAdapter, init_adapter, attach, detach, RESIDUAL_MODE
from checkpoint import save_checkpoint, load_checkpoint
from settings import ProfileParams
from errors import ConfigurationError, ShapeError
from utils import torch_seed, derive_seed
from constants import *

from typing import List, Optional, Sequence
import logging

import torch

_TEXT_PREFIX = "text_encoder."
_DENOISER_PREFIX = "denoiser."


class WPlusPipeline:
    """Codec, text encoder, denoiser, schedule and an optional attached adapter."""

    def __init__(self, profile: ProfileParams, text_encoder: TextEncoder, denoiser: Denoiser,
                 schedule: NoiseSchedule, dtype=torch.float32):
        self.profile = profile
        self.codec = LatentCodec()
        self.text_encoder = text_encoder.to(dtype)
        self.denoiser = denoiser.to(dtype)
        self.schedule = schedule
        self.adapter = None     # type: Optional[WPlusAdapter]
        self.dtype = dtype

    @classmethod
    def build(cls, profile: ProfileParams, seed: int = 0, dtype=torch.float32) -> 'WPlusPipeline':
        """Fresh base model with weights drawn from `seed`."""
        with torch_seed(derive_seed(seed, 0)):
            text_encoder = TextEncoder(profile.d_ctx)
            denoiser = Denoiser(profile.d_ctx)
        schedule = NoiseSchedule(profile.num_timesteps, profile.beta_start, profile.beta_end)
        return cls(profile, text_encoder, denoiser, schedule, dtype)

    # adapter
    # ====================================================

    def new_adapter(self, seed: int = 0, mode: str = RESIDUAL_MODE) -> WPlusAdapter:
        with torch_seed(derive_seed(seed, 1)):
            adapter = init_adapter(self.denoiser, self.profile.n_w, self.profile.d_w,
                                   self.profile.mapping_hidden_ratio, mode)
        return adapter

    def attach(self, adapter: WPlusAdapter):
        attach(self.denoiser, adapter.to(self.dtype))
        self.adapter = adapter

    def detach(self):
        detach(self.denoiser)
        self.adapter = None

    @property
    def is_attached(self) -> bool:
        return self.denoiser.is_attached

    def identity_tokens(self, w) -> torch.Tensor:
        if self.adapter is None:
            error_str = "Identity tokens requested but no adapter is attached."
            logging.error("PIPELINE: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        return self.adapter.identity_tokens(w)

    # conditioning helpers
    # ====================================================

    def encode_text(self, captions) -> torch.Tensor:
        return self.text_encoder(captions)

    def null_text(self, batch: int = 1) -> torch.Tensor:
        return self.text_encoder([""] * batch)

    def encode_images(self, images) -> torch.Tensor:
        """BHWC (or HWC) images in [0, 1] -> latents in the pipeline dtype."""
        return self.codec.encode_image(images, dtype=self.dtype)

    def latent_shape(self, image_size: int) -> tuple:
        if image_size % CODEC_FACTOR:
            error_str = "Image size {} is not divisible by {}.".format(image_size, CODEC_FACTOR)
            logging.error("PIPELINE: ERROR. {}".format(error_str))
            raise ShapeError(error_str)
        return LATENT_CHANNELS, image_size // CODEC_FACTOR, image_size // CODEC_FACTOR

    def base_modules(self) -> List[torch.nn.Module]:
        return [self.text_encoder, self.denoiser]

    def base_parameters(self) -> List[torch.nn.Parameter]:
        return list(self.text_encoder.parameters()) + list(self.denoiser.parameters())

    def freeze_base(self):
        for p in self.base_parameters():
            p.requires_grad_(False)

    # checkpoints
    # ====================================================

    def _base_header(self) -> dict:
        return dict(profile=self.profile.profile, d_ctx=self.profile.d_ctx,
                    vocab_hash=vocabulary_hash(self.text_encoder.vocabulary),
                    schedule=self.schedule.describe(),
                    layers=",".join(str(x.d_model) for x in self.denoiser.cross_attention_layers()))

    def save_base(self, path: str) -> str:
        tensors = {_TEXT_PREFIX + k: v for k, v in self.text_encoder.state_dict().items()}
        tensors.update({_DENOISER_PREFIX + k: v for k, v in self.denoiser.state_dict().items()})
        return save_checkpoint(path, BASE_KIND, tensors, self._base_header())

    def save_adapter(self, path: str, adapter: Optional[WPlusAdapter] = None) -> str:
        adapter = adapter if adapter is not None else self.adapter
        if adapter is None:
            error_str = "There is no adapter to save."
            logging.error("PIPELINE: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        header = self._base_header()
        header.update(n_w=self.profile.n_w, d_w=self.profile.d_w, mode=adapter.mode,
                      mapping_hidden_ratio=self.profile.mapping_hidden_ratio,
                      adapter_layers=",".join(str(d) for d in adapter.layer_dims()))
        return save_checkpoint(path, ADAPTER_KIND, adapter.state_dict(), header)

    @classmethod
    def from_base_checkpoint(cls, path: str, profile: ProfileParams, dtype=torch.float32) -> 'WPlusPipeline':
        header, tensors = load_checkpoint(path)
        if header.get('kind') != BASE_KIND:
            error_str = "'{}' is a '{}' checkpoint, a base checkpoint is needed.".format(path, header.get('kind'))
            logging.error("PIPELINE: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        if header.get('profile') != profile.profile or int(header.get('d_ctx', -1)) != profile.d_ctx:
            error_str = "Checkpoint '{}' was trained for profile {} (d_ctx {}), config asks for {} (d_ctx {}).".format(
                path, header.get('profile'), header.get('d_ctx'), profile.profile, profile.d_ctx)
            logging.error("PIPELINE: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        with torch_seed(0):
            text_encoder, denoiser = TextEncoder(profile.d_ctx), Denoiser(profile.d_ctx)
        pipe = cls(profile, text_encoder, denoiser,
                   NoiseSchedule(profile.num_timesteps, profile.beta_start, profile.beta_end), dtype)
        if header.get('vocab_hash') != vocabulary_hash(pipe.text_encoder.vocabulary):
            error_str = "Checkpoint '{}' was trained with another vocabulary.".format(path)
            logging.error("PIPELINE: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        if header.get('schedule') != pipe.schedule.describe():
            error_str = "Checkpoint '{}' schedule '{}' differs from config '{}'.".format(
                path, header.get('schedule'), pipe.schedule.describe())
            logging.error("PIPELINE: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        pipe.text_encoder.load_state_dict(
            {k[len(_TEXT_PREFIX):]: v for k, v in tensors.items() if k.startswith(_TEXT_PREFIX)})
        pipe.denoiser.load_state_dict(
            {k[len(_DENOISER_PREFIX):]: v for k, v in tensors.items() if k.startswith(_DENOISER_PREFIX)})
        pipe.text_encoder.to(dtype)
        pipe.denoiser.to(dtype)
        logging.info("PIPELINE: Loaded base model from {}.".format(path))
        return pipe

    def load_adapter(self, path: str) -> WPlusAdapter:
        """Reads an adapter archive, checks it against this base model and attaches it."""
        header, tensors = load_checkpoint(path)
        if header.get('kind') != ADAPTER_KIND:
            error_str = "'{}' is a '{}' checkpoint, an adapter checkpoint is needed.".format(path, header.get('kind'))
            logging.error("PIPELINE: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        base_layers = ",".join(str(x.d_model) for x in self.denoiser.cross_attention_layers())
        if header.get('adapter_layers') != base_layers or int(header.get('d_ctx', -1)) != self.profile.d_ctx:
            error_str = "Adapter '{}' (layers {}, d_ctx {}) does not fit the base model (layers {}, d_ctx {}).".format(
                path, header.get('adapter_layers'), header.get('d_ctx'), base_layers, self.profile.d_ctx)
            logging.error("PIPELINE: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        if (int(header.get('n_w', -1)), int(header.get('d_w', -1))) != (self.profile.n_w, self.profile.d_w):
            error_str = "Adapter '{}' maps {}x{} w+, profile is {}x{}.".format(
                path, header.get('n_w'), header.get('d_w'), self.profile.n_w, self.profile.d_w)
            logging.error("PIPELINE: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        with torch_seed(0):
            adapter = init_adapter(self.denoiser, self.profile.n_w, self.profile.d_w,
                                   float(header.get('mapping_hidden_ratio', self.profile.mapping_hidden_ratio)),
                                   header.get('mode', RESIDUAL_MODE))
        adapter.load_state_dict(tensors)
        if self.is_attached:
            self.detach()
        self.attach(adapter)
        logging.info("PIPELINE: Attached adapter from {}.".format(path))
        return adapter


def parameters_of(modules: Sequence[torch.nn.Module]) -> List[torch.Tensor]:
    """Parameters in a stable order, for checksums."""
    result = []
    for module in modules:
        result.extend(p for _, p in sorted(module.named_parameters(), key=lambda item: item[0]))
    return result
