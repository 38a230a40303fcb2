"""Reconstruction objective and image-quality metrics.

The perceptual term is a fixed random-feature surrogate for LPIPS: three
stride-2 convolutions (kernel 2) with ReLU, generated once from a fixed seed
and never trained. Features are unit-normalized over channels and compared
with a spatially averaged squared distance per stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor

PERCEPTUAL_SEED = 1234
PERCEPTUAL_CHANNELS = (16, 32, 32)


@dataclass
class LossReport:
    total: Tensor
    mse: float
    perceptual: float
    per_view: list = field(default_factory=list)  # [(mse, perceptual), ...]

    def as_dict(self) -> dict:
        return {"total": float(self.total.data), "mse": self.mse, "perceptual": self.perceptual}


def _check_pair(pred: Tensor, gt: Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")


def mse_loss(pred, gt) -> Tensor:
    pred, gt = as_tensor(pred), as_tensor(gt)
    _check_pair(pred, gt)
    return ops.mean(ops.square(pred - gt))


class FeatureNet:
    """Frozen strided conv stack over [H, W, 3] images (sides divisible by 2 ** stages)."""

    def __init__(self, seed: int = PERCEPTUAL_SEED, channels: Sequence[int] = PERCEPTUAL_CHANNELS):
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 3
        for c_out in channels:
            fan_in = 4 * c_in
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, c_out)))
            c_in = c_out

    def features(self, image: Tensor) -> list[Tensor]:
        H, W, _ = image.shape
        k = 2 ** len(self.weights)
        if H % k or W % k:
            raise ValueError(f"perceptual features need sides divisible by {k}, got {H}x{W}")
        x = image * 2.0 - 1.0
        feats = []
        for w in self.weights:
            h, wd, c = x.shape
            x = x.reshape(h // 2, 2, wd // 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h * wd // 4, 4 * c)
            x = ops.relu(ops.matmul(x, Tensor._wrap(w.astype(x.dtype))))
            x = x.reshape(h // 2, wd // 2, w.shape[1])
            norm = ops.sqrt(ops.sum(ops.square(x), axis=2, keepdims=True) + 1e-8)
            feats.append(x / norm)
        return feats


_default_net: Optional[FeatureNet] = None


def default_feature_net() -> FeatureNet:
    global _default_net
    if _default_net is None:
        _default_net = FeatureNet()
    return _default_net


def perceptual_loss(pred, gt, net: Optional[FeatureNet] = None) -> Tensor:
    pred, gt = as_tensor(pred), as_tensor(gt)
    _check_pair(pred, gt)
    net = net or default_feature_net()
    fp, fg = net.features(pred), net.features(gt)
    terms = [ops.mean(ops.sum(ops.square(a - b), axis=2)) for a, b in zip(fp, fg)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def recon_loss(preds: Sequence, gts: Sequence, lam: float = 2.0,
               net: Optional[FeatureNet] = None) -> LossReport:
    """Mean over views of MSE + lam * perceptual."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} targets")
    if not preds:
        raise ValueError("need at least one view")
    V = len(preds)
    total = None
    per_view = []
    for p, g in zip(preds, gts):
        m = mse_loss(p, g)
        if lam != 0.0:
            perc = perceptual_loss(p, g, net)
            term = m + perc * lam
            per_view.append((float(m.data), float(perc.data)))
        else:
            term = m
            per_view.append((float(m.data), 0.0))
        total = term if total is None else total + term
    total = total * (1.0 / V)
    return LossReport(total, float(np.mean([v[0] for v in per_view])),
                      float(np.mean([v[1] for v in per_view])), per_view)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mse = float(np.mean((pred - gt) ** 2))
    if mse < 1e-10:
        return 99.0
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    H, W = img.shape
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g  # [H-k+1, W]
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shapes differ")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    C1 = (0.01 * data_range) ** 2
    C2 = (0.03 * data_range) ** 2
    g = _gaussian_window()
    if min(pred.shape[:2]) < len(g):
        raise ValueError(f"SSIM needs images of at least {len(g)}x{len(g)} pixels")
    vals = []
    for c in range(pred.shape[2]):
        x, y = pred[..., c], gt[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        num = (2 * mx * my + C1) * (2 * sxy + C2)
        den = (mx * mx + my * my + C1) * (sxx + syy + C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
