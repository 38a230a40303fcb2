"""Training: AdamW with decay exclusions, warm-up + cosine schedule, clipping,
multi-view supervision and resumable checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import checkpoint as ckpt
from .camera import CameraIntrinsic, build_camera_feature, normalize_camera
from .data import ShapeViews
from .losses import LossReport, recon_loss
from .model import LRM, ModelConfig
from .renderer import render_image
from .tensor import NonFiniteError, backward

NO_DECAY_TAGS = ("bias", "norm")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_peak: float = 4e-4
    warmup_iters: int = 100
    total_iters: int = 2000
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    lam: float = 2.0
    V: int = 4
    batch_size: int = 1           # shapes per step, gradients accumulated
    seed: int = 0
    samples_per_ray: int = 32
    render_size: int = 32
    crop: bool = False
    crop_size: int = 32
    resize_range: tuple = (32, 96)
    input_view: Optional[int] = None   # fixed input view, else drawn per step
    holdout_views: tuple = ()          # never supervised
    normalize_mode: str = "synthetic"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.resize_range = tuple(self.resize_range)
        self.holdout_views = tuple(self.holdout_views)
        if self.warmup_iters >= self.total_iters:
            raise ValueError(f"warmup_iters ({self.warmup_iters}) must be < total_iters ({self.total_iters})")
        if self.V < 2:
            raise ValueError("V must be >= 2 (input view plus at least one side view)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop and self.resize_range[0] < self.crop_size:
            raise ValueError("smallest resize side must be >= crop_size")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``lr_peak``, then cosine decay to 0 at ``total_iters``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_iters:
        return cfg.lr_peak * step / cfg.warmup_iters
    progress = min((step - cfg.warmup_iters) / (cfg.total_iters - cfg.warmup_iters), 1.0)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(param) -> bool:
    return getattr(param, "tag", "weight") not in NO_DECAY_TAGS


class AdamW:
    """AdamW with bias correction; decoupled decay skipped for bias/norm tags."""

    def __init__(self, named_params, cfg: TrainConfig):
        self.named = list(named_params)
        self.beta1, self.beta2 = cfg.betas
        self.eps = cfg.eps
        self.weight_decay = cfg.weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.named}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named}
        self.step_count = 0

    def decayed_names(self) -> list[str]:
        return [n for n, p in self.named if decays(p)]

    def update(self, lr: float) -> None:
        for name, p in self.named:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in self.named:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = (b1 * self.m[name] + (1.0 - b1) * g).astype(p.data.dtype)
            v = self.v[name] = (b2 * self.v[name] + (1.0 - b2) * g * g).astype(p.data.dtype)
            data = p.data
            if self.weight_decay and decays(p):
                data = data * (1.0 - lr * self.weight_decay)
            p.data = (data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_tensors(self) -> dict:
        out = {}
        for n, _ in self.named:
            out[f"optim.m.{n}"] = self.m[n]
            out[f"optim.v.{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors: dict, step_count: int) -> None:
        for n, p in self.named:
            for kind, store in (("m", self.m), ("v", self.v)):
                key = f"optim.{kind}.{n}"
                if key not in tensors:
                    raise ckpt.CheckpointError(f"checkpoint is missing tensor {key!r}")
                if tensors[key].shape != p.shape:
                    raise ckpt.CheckpointError(f"tensor {key!r} has shape {tensors[key].shape}, expected {p.shape}")
                store[n] = tensors[key].astype(p.data.dtype)
        self.step_count = int(step_count)


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                         for p in params if p.grad is not None))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    params = list(params)
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    """Bilinear (antialiased when shrinking) resize of [H, W, 3] to [size, size, 3]."""
    if img.shape[0] == size and img.shape[1] == size:
        return np.asarray(img, dtype=np.float64)
    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(img[..., c], dtype=np.float32), mode="F")
                        .resize((size, size), Image.BILINEAR)) for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).astype(np.float64)


def crop_intrinsic(K: CameraIntrinsic, side: int, crop: int, dx: int, dy: int) -> CameraIntrinsic:
    """Intrinsics of a ``crop``-pixel window at (dx, dy) in an image resized to ``side``.

    Values stay normalized by the crop size, which is the image the renderer sees.
    """
    s = side / crop
    return CameraIntrinsic(K.foc_x * s, K.foc_y * s, K.pp_x * s - dx / crop, K.pp_y * s - dy / crop)


def random_view_crop(gt: np.ndarray, K: CameraIntrinsic, rng: np.random.Generator, crop: int = 32,
                     resize_range: tuple = (32, 96)) -> tuple[np.ndarray, CameraIntrinsic]:
    """Resize ``gt`` to a random side, cut a random ``crop`` window, adjust intrinsics to match.

    Offsets are limited so the principal point keeps a positive normalized
    coordinate (windows entirely right of / below it are not drawn).
    """
    lo, hi = resize_range
    if crop > lo:
        raise ValueError(f"crop {crop} exceeds the smallest resize side {lo}")
    side = int(rng.integers(lo, hi + 1))
    img = resize_image(gt, side)
    max_dx = min(side - crop, math.ceil(K.pp_x * side) - 1)
    max_dy = min(side - crop, math.ceil(K.pp_y * side) - 1)
    dx = int(rng.integers(0, max_dx + 1))
    dy = int(rng.integers(0, max_dy + 1))
    return img[dy:dy + crop, dx:dx + crop], crop_intrinsic(K, side, crop, dx, dy)


@dataclass
class Batch:
    """One shape's input view plus the supervised views (input view first)."""

    shape_id: str
    input_image: np.ndarray        # [H, W, 3]
    input_E: np.ndarray
    input_K: CameraIntrinsic
    view_ids: list = field(default_factory=list)
    Es: list = field(default_factory=list)
    Ks: list = field(default_factory=list)
    targets: list = field(default_factory=list)   # [h, w, 3] at supervision resolution


def make_batch(shape: ShapeViews, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    n = len(shape.images)
    if cfg.input_view is not None:
        inp = cfg.input_view
    else:
        pool = [i for i in range(n) if i not in cfg.holdout_views]
        inp = pool[int(rng.integers(len(pool)))]
    side_pool = [i for i in range(n) if i != inp and i not in cfg.holdout_views]
    if len(side_pool) < cfg.V - 1:
        raise ValueError(f"shape {shape.shape_id} has {len(side_pool)} side views, need {cfg.V - 1}")
    sides = rng.choice(side_pool, size=cfg.V - 1, replace=False)
    batch = Batch(shape.shape_id, shape.images[inp], shape.extrinsics[inp], shape.intrinsics[inp])
    for v in [inp, *[int(s) for s in sides]]:
        if cfg.crop:
            target, K = random_view_crop(shape.images[v], shape.intrinsics[v], rng, cfg.crop_size, cfg.resize_range)
        else:
            target, K = resize_image(shape.images[v], cfg.render_size), shape.intrinsics[v]
        batch.view_ids.append(v)
        batch.Es.append(shape.extrinsics[v])
        batch.Ks.append(K)
        batch.targets.append(target)
    return batch


def forward_batch(model: LRM, batch: Batch, cfg: TrainConfig,
                  rng: Optional[np.random.Generator]) -> LossReport:
    """Encode, decode, render every supervised view in the normalized frame and score it."""
    E_norm, sim = normalize_camera(batch.input_E, cfg.normalize_mode)
    c = build_camera_feature(E_norm, batch.input_K)
    tri = model.triplane(np.transpose(batch.input_image, (2, 0, 1)), c)
    fld = model.field(tri)
    preds, gts = [], []
    for E, K, target in zip(batch.Es, batch.Ks, batch.targets):
        h, w = target.shape[:2]
        out = render_image(fld, sim.apply_extrinsic(E), K, w, h, cfg.samples_per_ray, rng)
        preds.append(out.rgb)
        gts.append(target.astype(out.rgb.dtype))
    return recon_loss(preds, gts, cfg.lam)


def train_step(batches: Sequence[Batch] | Batch, model: LRM, opt: AdamW, cfg: TrainConfig, lr: float,
               rng: Optional[np.random.Generator] = None) -> dict:
    """Forward/backward over the batches (gradients averaged), clip, update.

    Returns ``{"total", "mse", "perceptual", "grad_norm"}``.
    """
    if isinstance(batches, Batch):
        batches = [batches]
    model.zero_grad()
    reports = []
    for b in batches:
        try:
            rep = forward_batch(model, b, cfg, rng)
            backward(rep.total * (1.0 / len(batches)))
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value on shape {b.shape_id} views {b.view_ids}: {exc}") from exc
        reports.append(rep.as_dict())
    norm = clip_grad_norm(model.parameters(), cfg.clip_norm)
    opt.update(lr)
    out = {k: float(np.mean([r[k] for r in reports])) for k in ("total", "mse", "perceptual")}
    out["grad_norm"] = norm
    return out


class Trainer:
    """Owns the model, optimizer, RNG and step counter; checkpoints all of them."""

    def __init__(self, model: LRM, shapes: Sequence[ShapeViews], cfg: TrainConfig,
                 log_path=None):
        if not shapes:
            raise ValueError("training needs at least one shape")
        self.model = model
        self.shapes = list(shapes)
        self.cfg = cfg
        self.opt = AdamW(model.named_parameters(), cfg)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.log_path = Path(log_path) if log_path else None
        self.history: list[dict] = []

    def sample_batches(self) -> list[Batch]:
        out = []
        for _ in range(self.cfg.batch_size):
            shape = self.shapes[int(self.rng.integers(len(self.shapes)))]
            out.append(make_batch(shape, self.cfg, self.rng))
        return out

    def train_one(self) -> dict:
        lr = lr_schedule(self.step, self.cfg)
        batches = self.sample_batches()
        try:
            rep = train_step(batches, self.model, self.opt, self.cfg, lr, self.rng)
        except TrainingError as exc:
            self._dump(str(exc), batches)
            raise
        self.step += 1
        entry = {"step": self.step, "lr": lr, "total": rep["total"], "mse": rep["mse"],
                 "perceptual": rep["perceptual"]}
        self.history.append(entry)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
        return entry

    def run(self, n_steps: Optional[int] = None, callback=None) -> list[dict]:
        end = self.cfg.total_iters if n_steps is None else self.step + n_steps
        out = []
        while self.step < end:
            entry = self.train_one()
            out.append(entry)
            if callback is not None:
                callback(self, entry)
        return out

    def _dump(self, message: str, batches: Sequence[Batch]) -> None:
        if self.log_path is None:
            return
        dump = {"step": self.step, "error": message,
                "shapes": [b.shape_id for b in batches], "views": [b.view_ids for b in batches],
                "param_abs_max": {n: float(np.abs(p.data).max()) for n, p in self.model.named_parameters()}}
        self.log_path.with_name("divergence.json").write_text(json.dumps(dump, indent=1))

    def save(self, path) -> None:
        tensors = {n: p.data for n, p in self.model.named_parameters()}
        tensors.update(self.opt.state_tensors())
        meta = {"model": self.model.cfg.to_dict(), "train": self.cfg.to_dict(), "step": self.step,
                "optim_step": self.opt.step_count, "rng": self.rng.bit_generator.state}
        ckpt.save_tensors(path, tensors, meta)

    @classmethod
    def resume(cls, path, shapes: Sequence[ShapeViews], log_path=None,
               cfg: Optional[TrainConfig] = None) -> "Trainer":
        tensors, meta = ckpt.load_tensors(path)
        model = load_model(path, tensors=tensors, meta=meta)
        trainer = cls(model, shapes, cfg or TrainConfig.from_dict(meta["train"]), log_path)
        trainer.opt.load_state_tensors(tensors, meta["optim_step"])
        trainer.step = int(meta["step"])
        trainer.rng.bit_generator.state = meta["rng"]
        return trainer


def save_model(model: LRM, path, extra: Optional[dict] = None) -> None:
    meta = {"model": model.cfg.to_dict(), **(extra or {})}
    ckpt.save_tensors(path, {n: p.data for n, p in model.named_parameters()}, meta)


def load_model(path, tensors: Optional[dict] = None, meta: Optional[dict] = None) -> LRM:
    if tensors is None:
        tensors, meta = ckpt.load_tensors(path)
    if "model" not in meta:
        raise ckpt.CheckpointError(f"checkpoint {path} has no model config")
    model = LRM(ModelConfig.from_dict(meta["model"]), seed=0)
    ckpt.assign_parameters(model.named_parameters(), tensors)
    return model
