"""The full image -> triplane -> radiance field model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .decoder import Deconv, DecoderConfig, TriplaneTransformer, decode_to_triplane, init_positional_embeddings
from .encoder import EncoderConfig, ViTEncoder
from .field import NerfMLP, Triplane, TriplaneField
from .nn import Module
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    nerf_hidden: int = 32
    nerf_layers: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), DecoderConfig(**d["decoder"]),
                   d.get("nerf_hidden", 32), d.get("nerf_layers", 4))


def desk_config() -> ModelConfig:
    """The small configuration used for desk-scale training runs."""
    return ModelConfig(EncoderConfig(image_size=64, patch_size=8, d_E=96, layers=1, heads=4),
                       DecoderConfig(d_D=64, layers=2, heads=4, tri_low=8, tri_res=16, d_T=16))


def full_scale_config() -> ModelConfig:
    return ModelConfig(EncoderConfig(image_size=512, patch_size=16, d_E=768, layers=12, heads=12),
                       DecoderConfig(d_D=1024, layers=16, heads=16, tri_low=32, tri_res=64, d_T=80),
                       nerf_hidden=64, nerf_layers=10)


class LRM(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = ViTEncoder(cfg.encoder, rng)
        self.decoder = TriplaneTransformer(cfg.decoder, cfg.encoder.d_E, rng)
        self.f_init = init_positional_embeddings(cfg.decoder, rng)
        self.deconv = Deconv(cfg.decoder.d_D, cfg.decoder.d_T, rng)
        self.nerf_mlp = NerfMLP(3 * cfg.decoder.d_T, cfg.nerf_hidden, cfg.nerf_layers, rng)

    def encode(self, image) -> Tensor:
        return self.encoder(image)

    def triplane(self, image, camera_feature) -> Triplane:
        """``image`` is [3, H, W] in [0, 1]; ``camera_feature`` the 20-vector of the input camera."""
        h = self.encode(image)
        c = as_tensor(np.asarray(camera_feature, dtype=h.dtype))
        return decode_to_triplane(h, c, self.f_init, self.decoder, self.deconv)

    def field(self, triplane: Triplane) -> TriplaneField:
        return TriplaneField(triplane, self.nerf_mlp)
