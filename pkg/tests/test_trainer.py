import json
import math

import numpy as np
import pytest

from lrm import ops
from lrm.camera import DEFAULT_INTRINSIC, CameraIntrinsic, look_at
from lrm.data import generate_dataset, load_shapes
from lrm.decoder import DecoderConfig
from lrm.encoder import EncoderConfig
from lrm.model import LRM, ModelConfig
from lrm.nn import Parameter
from lrm.renderer import analytic_field, render_image
from lrm.trainer import (NO_DECAY_TAGS, AdamW, TrainConfig, Trainer, TrainingError, clip_grad_norm,
                         crop_intrinsic, global_grad_norm, lr_schedule, make_batch, random_view_crop)

TINY = ModelConfig(EncoderConfig(image_size=16, patch_size=8, d_E=16, layers=1, heads=2),
                   DecoderConfig(d_D=16, layers=1, heads=2, tri_low=4, tri_res=8, d_T=4), 16, 3)


def tiny_cfg(**kw):
    base = dict(total_iters=200, warmup_iters=10, samples_per_ray=8, render_size=8, lam=0.5, lr_peak=3e-3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def shapes(tmp_path_factory):
    root = tmp_path_factory.mktemp("train")
    generate_dataset(2, 6, root, seed=5, image_size=16)
    return load_shapes(root)


# -- schedule and optimizer -------------------------------------------------------------
def test_lr_schedule_values():
    cfg = TrainConfig(warmup_iters=100, total_iters=2000)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(100, cfg) == 4e-4
    assert lr_schedule(50, cfg) == pytest.approx(2e-4)
    assert lr_schedule(1050, cfg) == pytest.approx(2e-4)
    assert lr_schedule(2000, cfg) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_recipe_constants():
    cfg = TrainConfig()
    assert cfg.lr_peak == 4e-4 and cfg.betas == (0.9, 0.95) and cfg.weight_decay == 0.05
    assert cfg.clip_norm == 1.0 and cfg.lam == 2.0 and cfg.V == 4


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_iters=10, total_iters=10)
    with pytest.raises(ValueError):
        TrainConfig(V=1)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1.0})
    cfg = TrainConfig(holdout_views=[3])
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def adamw_oracle(theta, grads, lr, b1=0.9, b2=0.95, eps=1e-8, wd=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta * (1 - lr * wd) - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adamw_first_step_is_minus_lr():
    p = Parameter(np.array([0.5]), "bias")
    p.data = p.data.astype(np.float64)
    opt = AdamW([("p", p)], TrainConfig())
    p.grad = np.array([1.0])
    opt.update(1e-3)
    assert p.data[0] == pytest.approx(0.5 - 1e-3, abs=1e-10)


def test_adamw_matches_recurrence():
    p = Parameter(np.array([0.7]), "weight")
    p.data = np.array([0.7])
    opt = AdamW([("p", p)], TrainConfig())
    grads = [0.3, -1.2, 0.5, 2.0, -0.1]
    for g in grads:
        p.grad = np.array([g])
        opt.update(2e-3)
    assert p.data[0] == pytest.approx(adamw_oracle(0.7, grads, 2e-3, wd=0.05), abs=1e-12)


def test_zero_gradient_without_decay_leaves_parameters():
    p = Parameter(np.array([1.0, -2.0]), "weight")
    opt = AdamW([("p", p)], TrainConfig(weight_decay=0.0))
    p.grad = np.zeros(2)
    opt.update(1e-2)
    assert np.array_equal(p.data, np.array([1.0, -2.0], dtype=p.data.dtype))


def test_layer_norm_weight_not_decayed():
    ln = Parameter(np.array([1.0]), "norm")
    w = Parameter(np.array([1.0]), "weight")
    opt = AdamW([("ln", ln), ("w", w)], TrainConfig(weight_decay=0.05))
    ln.grad = np.zeros(1)
    w.grad = np.zeros(1)
    opt.update(0.1)
    assert ln.data[0] == 1.0
    assert w.data[0] == pytest.approx(1.0 - 0.1 * 0.05)


def test_decay_exclusion_audit():
    model = LRM(TINY)
    opt = AdamW(model.named_parameters(), TrainConfig())
    tags = {n: p.tag for n, p in model.named_parameters()}
    assert set(tags.values()) <= {"weight", "bias", "norm", "embedding"}
    assert set(opt.decayed_names()) == {n for n, t in tags.items() if t not in NO_DECAY_TAGS}
    for n, t in tags.items():
        if n.endswith(".bias"):
            assert t in NO_DECAY_TAGS, n
        if ".norm" in n or n.startswith("norm"):
            assert t == "norm", n


def test_nan_gradient_names_parameter():
    p = Parameter(np.zeros(3), "weight")
    opt = AdamW([("decoder.layers.0.bad", p)], TrainConfig())
    p.grad = np.array([0.0, np.nan, 1.0])
    with pytest.raises(TrainingError, match="decoder.layers.0.bad"):
        opt.update(1e-3)


def test_gradient_clipping(rng):
    params = [Parameter(rng.normal(size=(4, 4))), Parameter(rng.normal(size=3))]
    for p in params:
        p.grad = rng.normal(size=p.shape) * 10
    pre = clip_grad_norm(params, 1.0)
    assert pre > 1.0
    assert global_grad_norm(params) <= 1.0 + 1e-6
    for p in params:
        p.grad = p.grad * 0.1
    small = global_grad_norm(params)
    assert clip_grad_norm(params, 1.0) == small and global_grad_norm(params) == small


# -- crops ---------------------------------------------------------------------------------
def test_crop_identity_and_focal_scaling():
    K = DEFAULT_INTRINSIC
    assert crop_intrinsic(K, 32, 32, 0, 0) == K
    K2 = crop_intrinsic(K, 64, 32, 0, 0)
    assert K2.foc_x == pytest.approx(2 * K.foc_x) and K2.foc_y == pytest.approx(2 * K.foc_y)


def test_crop_matches_full_render_window():
    fld = analytic_field(lambda p: 8.0 * np.exp(-np.sum(p ** 2, axis=1) / 0.2),
                         lambda p: np.clip(0.5 + 0.5 * p, 0, 1))
    E = look_at([1.2, -1.5, 0.6])
    side, crop, dx, dy = 48, 16, 9, 20
    full = render_image(fld, E, DEFAULT_INTRINSIC, side, side, 32).rgb.data
    K = crop_intrinsic(DEFAULT_INTRINSIC, side, crop, dx, dy)
    part = render_image(fld, E, K, crop, crop, 32).rgb.data
    assert np.abs(part - full[dy:dy + crop, dx:dx + crop]).max() < 1e-4


def test_random_view_crop(rng):
    gt = rng.uniform(size=(64, 64, 3))
    for _ in range(20):
        img, K = random_view_crop(gt, DEFAULT_INTRINSIC, rng, 32, (32, 96))
        assert img.shape == (32, 32, 3)
        assert K.pp_x > 0 and K.pp_y > 0
        assert DEFAULT_INTRINSIC.foc_x <= K.foc_x <= 3 * DEFAULT_INTRINSIC.foc_x
    with pytest.raises(ValueError):
        random_view_crop(gt, DEFAULT_INTRINSIC, rng, 48, (32, 96))


# -- batches and training ------------------------------------------------------------------
def test_batch_includes_input_view_and_respects_holdout(shapes, rng):
    cfg = tiny_cfg(holdout_views=(5,), V=4)
    for _ in range(30):
        b = make_batch(shapes[0], cfg, rng)
        assert len(b.view_ids) == 4 and len(set(b.view_ids)) == 4
        assert 5 not in b.view_ids
        assert np.array_equal(b.input_image, shapes[0].images[b.view_ids[0]])
        assert b.targets[0].shape == (8, 8, 3)
    cfg = tiny_cfg(input_view=2, holdout_views=(0, 1, 3))
    with pytest.raises(ValueError):
        make_batch(shapes[0], cfg, rng)


def test_first_loss_finite_and_positive(shapes):
    tr = Trainer(LRM(TINY, seed=0), shapes, tiny_cfg())
    e = tr.train_one()
    assert np.isfinite(e["total"]) and e["total"] > 0
    assert e["lr"] == 0.0


def test_loss_decreases_over_200_steps(shapes):
    tr = Trainer(LRM(TINY, seed=0), shapes[:1], tiny_cfg(total_iters=200, crop=False))
    losses = [e["total"] for e in tr.run()]
    avg = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert avg[-1] < avg[0]


def test_training_is_deterministic(shapes):
    runs = []
    for _ in range(2):
        tr = Trainer(LRM(TINY, seed=1), shapes, tiny_cfg(crop=True, crop_size=8, resize_range=(8, 24)))
        runs.append([e["total"] for e in tr.run(10)])
    assert runs[0] == runs[1]


def test_resume_is_bit_exact(shapes, tmp_path):
    cfg = tiny_cfg(crop=True, crop_size=8, resize_range=(8, 24))
    straight = Trainer(LRM(TINY, seed=2), shapes, cfg)
    straight.run(8)
    first = Trainer(LRM(TINY, seed=2), shapes, cfg)
    first.run(3)
    first.save(tmp_path / "ck")
    resumed = Trainer.resume(tmp_path / "ck", shapes)
    assert resumed.step == 3
    resumed.run(5)
    assert [e["total"] for e in resumed.history] == [e["total"] for e in straight.history[3:]]
    for (n, a), (_, b) in zip(straight.model.named_parameters(), resumed.model.named_parameters()):
        assert np.array_equal(a.data, b.data), n


def test_log_lines_and_divergence_dump(shapes, tmp_path, monkeypatch):
    log = tmp_path / "log.jsonl"
    tr = Trainer(LRM(TINY, seed=0), shapes, tiny_cfg(), log)
    tr.run(2)
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert [x["step"] for x in lines] == [1, 2]
    assert set(lines[0]) == {"step", "lr", "total", "mse", "perceptual"}

    real_exp = ops.exp

    def poisoned(x):
        out = real_exp(x)
        out.data[...] = np.nan
        return out

    monkeypatch.setattr(ops, "exp", poisoned)
    with pytest.raises(TrainingError):
        tr.train_one()
    dump = json.loads((tmp_path / "divergence.json").read_text())
    assert dump["step"] == 2 and "error" in dump


def test_intrinsic_keeps_positive_range():
    with pytest.raises(ValueError):
        CameraIntrinsic(1.0, 1.0, -0.1, 0.5)
