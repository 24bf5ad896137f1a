"""Mapping network F_w and residual cross-attention.

F_w turns a w+ embedding into K=4 identity tokens of width D_ctx. Every
cross-attention layer of the denoiser gets one residual branch

    f''_z = f'_z + lambda * Softmax(Q K^T / sqrt(d)) V,
    Q = f'_z W_q,  K = f_w W_k,  V = f_w W_v,

whose projections start as copies of the layer's own text projections.
"""
from denoiser import Denoiser, CrossAttention, attention
from toyworld import WPlusEmbedding
from errors import AdapterStateError, ConfigurationError, ShapeError
from constants import NUM_ID_TOKENS

from typing import List, Optional, Sequence, Union
import logging

import numpy as np
import torch
import torch.nn as nn

RESIDUAL_MODE = "residual"
PARALLEL_MODE = "parallel"
ADAPTER_MODES = (RESIDUAL_MODE, PARALLEL_MODE)


def group_sizes(n_w: int, num_groups: int = NUM_ID_TOKENS) -> List[int]:
    """Contiguous groups of style vectors, remainder spread over the first groups (18 -> 5, 5, 4, 4)."""
    base, rest = divmod(n_w, num_groups)
    if base == 0:
        error_str = "Cannot split {} style vectors into {} groups.".format(n_w, num_groups)
        logging.error("ADAPTER: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    return [base + (1 if g < rest else 0) for g in range(num_groups)]


class MappingNetwork(nn.Module):
    """Four groups of linear layers; group g reads the g-th slice of w+ and emits token g."""

    def __init__(self, n_w: int, d_w: int, d_ctx: int, hidden_ratio: float = 0.75):
        super().__init__()
        self.n_w = n_w
        self.d_w = d_w
        self.d_ctx = d_ctx
        self.sizes = group_sizes(n_w)
        hidden = int(round(hidden_ratio * d_ctx))
        self.groups = nn.ModuleList([
            nn.Sequential(nn.Linear(size * d_w, hidden), nn.GELU(), nn.Linear(hidden, d_ctx))
            for size in self.sizes])

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        """(B, N_w, D_w) -> (B, K, D_ctx)."""
        if w.shape[-2:] != (self.n_w, self.d_w):
            error_str = "w+ of shape {} does not match the mapping network ({}, {}).".format(
                tuple(w.shape), self.n_w, self.d_w)
            logging.error("ADAPTER: ERROR. {}".format(error_str))
            raise ShapeError(error_str)
        chunks = torch.split(w, self.sizes, dim=-2)
        tokens = [group(chunk.flatten(-2)) for group, chunk in zip(self.groups, chunks)]
        return torch.stack(tokens, dim=-2)


def _as_wplus_tensor(w, dtype, device) -> torch.Tensor:
    if isinstance(w, WPlusEmbedding):
        w = w.vectors
    elif isinstance(w, (list, tuple)) and w and isinstance(w[0], WPlusEmbedding):
        w = np.stack([x.vectors for x in w])
    return torch.as_tensor(np.asarray(w) if not torch.is_tensor(w) else w, dtype=dtype, device=device)


def map_wplus(mapping: MappingNetwork, w: Union[WPlusEmbedding, Sequence[WPlusEmbedding], np.ndarray,
                                                torch.Tensor]) -> torch.Tensor:
    """Identity tokens f_w = F_w(w+). A single embedding gives (K, D_ctx), a batch gives (B, K, D_ctx)."""
    weight = mapping.groups[0][0].weight
    x = _as_wplus_tensor(w, weight.dtype, weight.device)
    if x.dim() == 2:
        return mapping(x.unsqueeze(0))[0]
    return mapping(x)


def residual_cross_attention(f_prime_z: torch.Tensor, f_w: torch.Tensor, lam: float, w_q: torch.Tensor,
                             w_k: torch.Tensor, w_v: torch.Tensor, query: Optional[torch.Tensor] = None,
                             return_scores: bool = False):
    """f''_z = f'_z + lam * Attention(Q, K, V); weights stored (out, in) like nn.Linear.

    `query` replaces f'_z as the query source (the parallel variant reads f_z).
    """
    if f_w.shape[-1] != w_k.shape[1] or f_w.shape[-1] != w_v.shape[1]:
        error_str = "Identity token width {} does not match W_k {}.".format(f_w.shape[-1], tuple(w_k.shape))
        logging.error("ADAPTER: ERROR. {}".format(error_str))
        raise ShapeError(error_str)
    source = f_prime_z if query is None else query
    if source.shape[-1] != w_q.shape[1]:
        error_str = "Query width {} does not match W_q {}.".format(source.shape[-1], tuple(w_q.shape))
        logging.error("ADAPTER: ERROR. {}".format(error_str))
        raise ShapeError(error_str)
    if f_w.dim() == 2:
        f_w = f_w.unsqueeze(0)
    out, scores = attention(source @ w_q.T, f_w @ w_k.T, f_w @ w_v.T, return_scores=True)
    result = f_prime_z + lam * out
    return (result, scores) if return_scores else result


class ResidualCrossAttention(nn.Module):
    """W_q, W_k, W_v of one layer's identity branch."""

    def __init__(self, d_model: int, d_ctx: int, mode: str = RESIDUAL_MODE):
        super().__init__()
        if mode not in ADAPTER_MODES:
            error_str = "Unknown adapter mode '{}'.".format(mode)
            logging.error("ADAPTER: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        self.d_model = d_model
        self.d_ctx = d_ctx
        self.mode = mode
        self.to_q = nn.Linear(d_model, d_model, bias=False)
        self.to_k = nn.Linear(d_ctx, d_model, bias=False)
        self.to_v = nn.Linear(d_ctx, d_model, bias=False)
        self.record_scores = False
        self.last_scores = None

    @classmethod
    def from_cross_attention(cls, layer: CrossAttention, mode: str = RESIDUAL_MODE) -> 'ResidualCrossAttention':
        module = cls(layer.d_model, layer.d_ctx, mode)
        with torch.no_grad():
            module.to_q.weight.copy_(layer.to_q.weight)
            module.to_k.weight.copy_(layer.to_k.weight)
            module.to_v.weight.copy_(layer.to_v.weight)
        return module.to(layer.to_q.weight.dtype)

    def forward(self, f_z: torch.Tensor, f_prime_z: torch.Tensor, f_w: torch.Tensor, lam: float) -> torch.Tensor:
        query = f_z if self.mode == PARALLEL_MODE else None
        result, scores = residual_cross_attention(f_prime_z, f_w, lam, self.to_q.weight, self.to_k.weight,
                                                  self.to_v.weight, query=query, return_scores=True)
        if self.record_scores:
            self.last_scores = scores.detach()
        return result


class WPlusAdapter(nn.Module):
    def __init__(self, mapping: MappingNetwork, layers: List[ResidualCrossAttention]):
        super().__init__()
        self.mapping = mapping
        self.layers = nn.ModuleList(layers)

    @property
    def mode(self) -> str:
        return self.layers[0].mode

    def set_mode(self, mode: str):
        if mode not in ADAPTER_MODES:
            error_str = "Unknown adapter mode '{}'.".format(mode)
            logging.error("ADAPTER: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)
        for layer in self.layers:
            layer.mode = mode

    def layer_dims(self) -> List[int]:
        return [layer.d_model for layer in self.layers]

    def identity_tokens(self, w) -> torch.Tensor:
        return map_wplus(self.mapping, w)

    def mapping_parameters(self):
        return list(self.mapping.parameters())

    def attention_parameters(self):
        return list(self.layers.parameters())

    def record_attention(self, layer_index: Optional[int]):
        """Keeps the softmax scores of one layer (None switches recording off)."""
        for i, layer in enumerate(self.layers):
            layer.record_scores = layer_index is not None and i == layer_index % len(self.layers)
            layer.last_scores = None


def init_adapter(denoiser: Denoiser, n_w: int, d_w: int, hidden_ratio: float = 0.75,
                 mode: str = RESIDUAL_MODE) -> WPlusAdapter:
    """One residual branch per cross-attention layer, initialised from that layer's W_q, W_k, W_v.

    The mapping network draws its weights from torch's global generator; wrap the call
    in utils.torch_seed for a reproducible adapter.
    """
    layers = [ResidualCrossAttention.from_cross_attention(layer, mode) for layer in denoiser.cross_attention_layers()]
    dtype = denoiser.conv_in.weight.dtype
    mapping = MappingNetwork(n_w, d_w, denoiser.d_ctx, hidden_ratio).to(dtype)
    logging.info("ADAPTER: Initialised {} residual layers and a mapping network with {} parameters.".format(
        len(layers), sum(p.numel() for p in mapping.parameters())))
    return WPlusAdapter(mapping, layers)


def check_compatible(denoiser: Denoiser, adapter: WPlusAdapter):
    base_layers = denoiser.cross_attention_layers()
    if len(base_layers) != len(adapter.layers):
        error_str = "Adapter has {} layers, denoiser has {} cross-attention layers.".format(
            len(adapter.layers), len(base_layers))
        logging.error("ADAPTER: ERROR. {}".format(error_str))
        raise ConfigurationError(error_str)
    for i, (base, layer) in enumerate(zip(base_layers, adapter.layers)):
        if (base.d_model, base.d_ctx) != (layer.d_model, layer.d_ctx):
            error_str = "Adapter layer {} is {}x{}, denoiser layer is {}x{}.".format(
                i, layer.d_model, layer.d_ctx, base.d_model, base.d_ctx)
            logging.error("ADAPTER: ERROR. {}".format(error_str))
            raise ConfigurationError(error_str)


def attach(denoiser: Denoiser, adapter: WPlusAdapter):
    if denoiser.is_attached:
        error_str = "An adapter is already attached."
        logging.error("ADAPTER: ERROR. {}".format(error_str))
        raise AdapterStateError(error_str)
    check_compatible(denoiser, adapter)
    for base, layer in zip(denoiser.cross_attention_layers(), adapter.layers):
        base.slot.params = layer


def detach(denoiser: Denoiser):
    if not denoiser.is_attached:
        error_str = "No adapter is attached."
        logging.error("ADAPTER: ERROR. {}".format(error_str))
        raise AdapterStateError(error_str)
    for base in denoiser.cross_attention_layers():
        base.slot.params = None
