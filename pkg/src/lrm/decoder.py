"""Camera-modulated image-to-triplane transformer decoder.

Triplane tokens are ordered plane-major (XY, then YZ, then XZ) and row-major
within a plane: token ``k * L * L + r * L + c`` is row ``r`` (the plane's v
axis), column ``c`` (its u axis) of plane ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .field import Triplane
from .nn import MLP, Attention, LayerNorm, Linear, Module, Parameter, trunc_normal
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class DecoderConfig:
    d_D: int = 64
    layers: int = 2
    heads: int = 4
    tri_low: int = 8
    tri_res: int = 16
    d_T: int = 16

    def __post_init__(self):
        if self.tri_res != 2 * self.tri_low:
            raise ValueError("tri_res must equal 2 * tri_low (one stride-2 deconvolution)")
        if self.d_D % self.heads:
            raise ValueError("d_D must be divisible by heads")

    @property
    def num_tokens(self) -> int:
        return 3 * self.tri_low ** 2


class ModLN(Module):
    """LN(f) * (1 + gamma) + beta with (gamma, beta) predicted from the camera embedding."""

    def __init__(self, d: int, d_cond: int, rng: np.random.Generator):
        self.norm = LayerNorm(d)
        # zero output layer: training starts from plain LayerNorm
        self.mod = MLP(d_cond, d_cond, 2 * d, rng, zero_out=True)

    def modulation(self, c_tilde: Tensor) -> tuple[Tensor, Tensor]:
        gb = self.mod(c_tilde.reshape(1, c_tilde.shape[0]))
        d = gb.shape[1] // 2
        return gb[0, :d], gb[0, d:]

    def forward(self, f: Tensor, c_tilde: Tensor) -> Tensor:
        gamma, beta = self.modulation(c_tilde)
        return self.norm(f) * (gamma + 1.0) + beta


def mod_ln(f, c_tilde, params: ModLN) -> Tensor:
    return params(as_tensor(f), as_tensor(c_tilde))


class DecoderLayer(Module):
    def __init__(self, d: int, d_image: int, heads: int, rng: np.random.Generator):
        self.mod_cross = ModLN(d, d, rng)
        self.cross_attn = Attention(d, heads, rng, d_context=d_image)
        self.mod_self = ModLN(d, d, rng)
        self.self_attn = Attention(d, heads, rng)
        self.mod_mlp = ModLN(d, d, rng)
        self.mlp = MLP(d, 4 * d, d, rng)

    def forward(self, f_in: Tensor, h: Tensor, c_tilde: Tensor) -> Tensor:
        f_cross = self.cross_attn(self.mod_cross(f_in, c_tilde), h) + f_in
        g = self.mod_self(f_cross, c_tilde)
        f_self = self.self_attn(g, g) + f_cross
        return self.mlp(self.mod_mlp(f_self, c_tilde)) + f_self


class TriplaneTransformer(Module):
    """Camera embedding MLP, decoder layers, final norm and the pre-deconv channel map."""

    def __init__(self, cfg: DecoderConfig, d_image: int, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_D
        self.camera_mlp = MLP(20, d, d, rng)
        self.layers = [DecoderLayer(d, d_image, cfg.heads, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(d)
        self.plane_proj = Linear(d, d, rng)

    def embed_camera(self, c) -> Tensor:
        c = as_tensor(c)
        if c.shape != (20,):
            raise ValueError(f"camera feature must have 20 entries, got {c.shape}")
        return self.camera_mlp(c.reshape(1, 20)).reshape(self.cfg.d_D)

    def forward(self, f_init: Tensor, h: Tensor, c) -> Tensor:
        c_tilde = self.embed_camera(c)
        f = f_init
        for layer in self.layers:
            f = layer(f, h, c_tilde)
        return self.plane_proj(self.norm(f))


class Deconv(Module):
    """Stride-2 transposed convolution shared by the three planes."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 2):
        self.stride = stride
        self.weight = Parameter(trunc_normal(rng, (c_in, c_out, stride, stride)), "weight")
        self.bias = Parameter(np.zeros(c_out), "bias")

    def forward(self, x: Tensor) -> Tensor:
        """[P, L, L, c_in] channels-last planes -> [P, sL, sL, c_out]."""
        y = ops.transposed_conv2d(x.transpose(0, 3, 1, 2), self.weight, self.stride)
        return y.transpose(0, 2, 3, 1) + self.bias


def init_positional_embeddings(cfg: DecoderConfig, rng: np.random.Generator) -> Parameter:
    return Parameter(trunc_normal(rng, (cfg.num_tokens, cfg.d_D)), "embedding")


def tokens_to_planes(tokens: Tensor, tri_low: int) -> Tensor:
    """[3*L*L, d] plane-major tokens -> [3, L, L, d]."""
    return tokens.reshape(3, tri_low, tri_low, tokens.shape[-1])


def planes_to_tokens(planes: Tensor) -> Tensor:
    P, L, _, d = planes.shape
    return planes.reshape(P * L * L, d)


def decode_to_triplane(h: Tensor, c, f_init: Tensor, transformer: TriplaneTransformer,
                       deconv: Deconv) -> Triplane:
    cfg = transformer.cfg
    f = transformer(f_init, h, c)
    return Triplane(deconv(tokens_to_planes(f, cfg.tri_low)))
