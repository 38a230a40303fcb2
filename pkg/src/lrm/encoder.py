"""Patch-token vision transformer trained from scratch.

Produces a [CLS] token followed by one token per patch (row-major patch
order). Pre-LN layers, bias-free attention, final LayerNorm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import MLP, Attention, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    d_E: int = 96
    layers: int = 3
    heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.d_E % self.heads:
            raise ValueError("d_E must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2 + 1


def patchify(image, patch_size: int) -> Tensor:
    """[3, H, W] -> [n, 3*p*p]; each patch flattened in (channel, row, col) order."""
    image = as_tensor(image)
    C, H, W = image.shape
    p = patch_size
    if H % p or W % p:
        raise ValueError(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = image.reshape(C, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return x.reshape(gh * gw, C * p * p)


def unpatchify(patches, patch_size: int, height: int, width: int, channels: int = 3) -> Tensor:
    patches = as_tensor(patches)
    p = patch_size
    gh, gw = height // p, width // p
    x = patches.reshape(gh, gw, channels, p, p).transpose(2, 0, 3, 1, 4)
    return x.reshape(channels, height, width)


def upsample_positional_embedding(pe, new_g: int) -> Tensor:
    """Bilinearly resample a [g, g, d] positional grid to [new_g, new_g, d].

    Corner embeddings stay aligned with corner patches. The [CLS] entry is
    stored separately and is never resampled.
    """
    pe = as_tensor(pe)
    g = pe.shape[0]
    if new_g < 1 or g < 1:
        raise ValueError("grid sizes must be positive")
    if new_g == g:
        return pe
    coords = np.linspace(-1.0, 1.0, new_g) if new_g > 1 else np.zeros(1)
    vv, uu = np.meshgrid(coords, coords, indexing="ij")
    uv = Tensor._wrap(np.stack([uu.ravel(), vv.ravel()], axis=1).astype(pe.dtype))
    out = ops.bilinear_grid_sample(pe, uv)
    return out.reshape(new_g, new_g, pe.shape[2])


class EncoderLayer(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, 4 * d, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_E
        self.patch_embed = Linear(3 * cfg.patch_size ** 2, d, rng)
        self.cls_token = Parameter(trunc_normal(rng, (d,)), "embedding")
        self.cls_pos = Parameter(trunc_normal(rng, (d,)), "embedding")
        self.pos_embed = Parameter(trunc_normal(rng, (cfg.grid, cfg.grid, d)), "embedding")
        self.layers = [EncoderLayer(d, cfg.heads, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(d)

    def forward(self, image) -> Tensor:
        """Encode a [3, H, W] image with values in [0, 1] into [(n+1), d_E] tokens."""
        image = as_tensor(image)
        if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
            raise ValueError(f"expected a square [3, H, W] image, got {image.shape}")
        p = self.cfg.patch_size
        g = image.shape[1] // p
        d = self.cfg.d_E
        tokens = self.patch_embed(patchify(image * 2.0 - 1.0, p))
        pos = upsample_positional_embedding(self.pos_embed, g).reshape(g * g, d)
        x = ops.concat([self.cls_token.reshape(1, d), tokens], axis=0)
        x = x + ops.concat([self.cls_pos.reshape(1, d), pos], axis=0)
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)
