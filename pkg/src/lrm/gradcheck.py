"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


class NonDeterminismError(RuntimeError):
    pass


@dataclass
class GradReport:
    errors: dict[str, float] = field(default_factory=dict)
    rel_tol: float = 1e-4
    refined: dict[str, int] = field(default_factory=dict)  # elements re-probed with a finer step

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.rel_tol

    def table(self) -> str:
        width = max((len(k) for k in self.errors), default=4)
        lines = [f"{'tensor':<{width}}  max_rel_err  status"]
        for name, err in self.errors.items():
            lines.append(f"{name:<{width}}  {err:11.3e}  {'ok' if err < self.rel_tol else 'FAIL'}")
        return "\n".join(lines)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # normwise: elementwise ratios blow up where the true gradient is ~0
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _central(f, flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    fp = float(f().data)
    flat[i] = orig - h
    fm = float(f().data)
    flat[i] = orig
    return (fp - fm) / (2 * h)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    rel_tol: float = 1e-4,
    max_elements: Optional[int] = None,
    seed: int = 0,
    step: float = 1e-4,
) -> GradReport:
    """Compare ``backward`` gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call. The step for element ``theta`` is ``step * (1 + |theta|)``; an
    element that disagrees is re-probed once with a 16x finer step, which
    removes spurious errors from kinks (ReLU, clamps) inside the step. With
    ``max_elements`` set, a seeded random subset of each tensor is probed.
    Parameters should hold float64 data.
    """
    if not isinstance(params, dict):
        params = {getattr(p, "name", None) or f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    base = f()
    again = f()
    if not np.array_equal(base.data, again.data):
        raise NonDeterminismError("two evaluations at the same point differ")
    base.backward()
    rng = np.random.default_rng(seed)
    report = GradReport(rel_tol=rel_tol)
    for name, p in params.items():
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        idx = np.arange(p.size)
        if max_elements is not None and p.size > max_elements:
            idx = np.sort(rng.choice(p.size, size=max_elements, replace=False))
        steps = step * (1.0 + np.abs(flat[idx]))
        numeric = np.array([_central(f, flat, i, h) for i, h in zip(idx, steps)])
        a = analytic[idx]
        scale = max(np.max(np.abs(numeric)), np.max(np.abs(a)), 1e-12)
        # a ReLU/clamp kink inside the step spoils that element; retry with a finer step
        for j in np.flatnonzero(np.abs(a - numeric) > rel_tol * scale):
            fine = _central(f, flat, idx[j], steps[j] / 16.0)
            if abs(a[j] - fine) < abs(a[j] - numeric[j]):
                numeric[j] = fine
                report.refined[name] = report.refined.get(name, 0) + 1
        report.errors[name] = _relative_error(a, numeric)
    for p in params.values():
        p.grad = None
    return report


# -- suites ---------------------------------------------------------------------------
SCOPES = ("primitive", "module", "endtoend")
SCOPE_TOL = {"primitive": 1e-4, "module": 1e-4, "endtoend": 1e-3}
# the full graph holds ~1e5 ReLU units; a finer step crosses fewer kinks
SCOPE_STEP = {"primitive": 1e-4, "module": 1e-4, "endtoend": 3e-5}


def _probe(rng, shape):
    """Fixed random weights turning a tensor output into a scalar."""
    return Tensor._wrap(rng.normal(size=shape))


def _leaf(rng, shape, name, low=None, high=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True, name=name)


def _primitive_cases(rng) -> dict:
    from . import ops

    def unary(fn, low=None, high=None, shape=(3, 5)):
        x = _leaf(rng, shape, "x", low, high)
        w = _probe(rng, fn(x).shape)
        return (lambda: ops.sum(ops.mul(fn(x), w))), [x]

    cases = {
        "exp": unary(ops.exp),
        "log": unary(ops.log, 0.5, 2.0),
        "sqrt": unary(ops.sqrt, 0.5, 2.0),
        "square": unary(ops.square),
        "relu": unary(ops.relu, 0.1, 1.0),
        "sigmoid": unary(ops.sigmoid),
        "softplus": unary(ops.softplus),
        "tanh": unary(ops.tanh),
        "gelu": unary(ops.gelu),
        "softmax": unary(ops.softmax),
        "cumsum": unary(lambda t: ops.cumsum(t, axis=1)),
        "cumsum_exclusive": unary(lambda t: ops.cumsum(t, axis=1, exclusive=True)),
        "mean": unary(lambda t: ops.mean(t, axis=0)),
        "reshape_transpose": unary(lambda t: ops.transpose(t.reshape(5, 3), (1, 0)), shape=(3, 5)),
        "getitem": unary(lambda t: t[1:, ::2]),
        "permute_rows": unary(lambda t: ops.permute_rows(t, np.array([2, 0, 1]))),
    }
    a, b = _leaf(rng, (4, 3), "a"), _leaf(rng, (4, 3), "b", 0.5, 2.0)
    w = _probe(rng, (4, 3))
    cases["add_sub_mul_div"] = (lambda: ops.sum(ops.mul(ops.div(ops.add(a, b) * a - b, b), w)), [a, b])
    bias = _leaf(rng, (3,), "bias")
    cases["broadcast_add"] = (lambda: ops.sum(ops.mul(ops.add(a, bias), w)), [a, bias])
    m1, m2 = _leaf(rng, (5, 7), "a"), _leaf(rng, (7, 3), "b")
    w2 = _probe(rng, (5, 3))
    cases["matmul"] = (lambda: ops.sum(ops.mul(ops.matmul(m1, m2), w2)), [m1, m2])
    q, r = _leaf(rng, (4, 3, 5), "a"), _leaf(rng, (4, 5, 2), "b")
    w3 = _probe(rng, (4, 3, 2))
    cases["batched_matmul"] = (lambda: ops.sum(ops.mul(ops.matmul(q, r), w3)), [q, r])
    c1, c2 = _leaf(rng, (2, 3), "a"), _leaf(rng, (4, 3), "b")
    w4, w5 = _probe(rng, (6, 3)), _probe(rng, (2, 2, 3))
    cases["concat"] = (lambda: ops.sum(ops.mul(ops.concat([c1, c2]), w4)), [c1, c2])
    cases["stack"] = (lambda: ops.sum(ops.mul(ops.stack([c1, c2[:2]]), w5)), [c1, c2])
    x, g, bb = _leaf(rng, (4, 8), "x"), _leaf(rng, (8,), "weight"), _leaf(rng, (8,), "bias")
    w6 = _probe(rng, (4, 8))
    cases["layer_norm"] = (lambda: ops.sum(ops.mul(ops.layer_norm(x, g, bb), w6)), [x, g, bb])
    lw, lb = _leaf(rng, (8, 3), "weight"), _leaf(rng, (3,), "bias")
    w7 = _probe(rng, (4, 3))
    cases["linear"] = (lambda: ops.sum(ops.mul(ops.linear(x, lw, lb), w7)), [x, lw, lb])
    plane, uv = _leaf(rng, (8, 8, 3), "plane"), _leaf(rng, (32, 2), "uv", -0.95, 0.95)
    w8 = _probe(rng, (32, 3))
    cases["bilinear_grid_sample"] = (lambda: ops.sum(ops.mul(ops.bilinear_grid_sample(plane, uv), w8)),
                                     [plane, uv])
    for s in (2, 4):
        xi, k = _leaf(rng, (2, 3, 3), "x"), _leaf(rng, (2, 4, s, s), "kernel")
        w9 = _probe(rng, (4, 3 * s, 3 * s))
        cases[f"transposed_conv2d_s{s}"] = (
            lambda xi=xi, k=k, w9=w9, s=s: ops.sum(ops.mul(ops.transposed_conv2d(xi, k, s), w9)), [xi, k])
    return cases


def _module_params(module, *extra) -> dict:
    params = dict(module.named_parameters())
    for t in extra:
        params[t.name] = t
    return params


def _module_cases(rng) -> dict:
    from . import ops
    from .decoder import Deconv, DecoderLayer, ModLN
    from .encoder import EncoderConfig, EncoderLayer, ViTEncoder
    from .field import NerfMLP, Triplane, TriplaneField
    from .losses import FeatureNet, perceptual_loss, recon_loss
    from .nn import MLP, Attention, LayerNorm, Linear
    from .renderer import composite

    def nonzero(module):
        # zero-initialized layers would hide gradients of everything before them
        for p in module.parameters():
            p.data = p.data + rng.normal(0.0, 0.1, size=p.shape)
        return module.astype(np.float64)

    cases = {}
    x = _leaf(rng, (6, 8), "input")
    w = _probe(rng, (6, 8))
    for name, mod in (("Linear", Linear(8, 8, rng)), ("LayerNorm", LayerNorm(8)), ("MLP", MLP(8, 16, 8, rng)),
                      ("SelfAttention", Attention(8, 2, rng)), ("EncoderLayer", EncoderLayer(8, 2, rng))):
        mod = nonzero(mod)
        cases[name] = (lambda mod=mod: ops.sum(ops.mul(mod(x), w)), _module_params(mod, x))
    ctx = _leaf(rng, (5, 12), "context")
    cross = nonzero(Attention(8, 2, rng, d_context=12))
    cases["CrossAttention"] = (lambda: ops.sum(ops.mul(cross(x, ctx), w)), _module_params(cross, x, ctx))
    cam = _leaf(rng, (8,), "camera_embedding")
    modln = nonzero(ModLN(8, 8, rng))
    cases["ModLN"] = (lambda: ops.sum(ops.mul(modln(x, cam), w)), _module_params(modln, x, cam))
    dec = nonzero(DecoderLayer(8, 12, 2, rng))
    cases["DecoderLayer"] = (lambda: ops.sum(ops.mul(dec(x, ctx, cam), w)), _module_params(dec, x, ctx, cam))
    deconv = nonzero(Deconv(8, 4, rng))
    planes = _leaf(rng, (3, 2, 2, 8), "planes")
    wd = _probe(rng, (3, 4, 4, 4))
    cases["Deconv"] = (lambda: ops.sum(ops.mul(deconv(planes), wd)), _module_params(deconv, planes))
    enc = nonzero(ViTEncoder(EncoderConfig(image_size=8, patch_size=4, d_E=8, layers=1, heads=2), rng))
    img = _leaf(rng, (3, 8, 8), "image", 0.0, 1.0)
    we = _probe(rng, (5, 8))
    cases["ViTEncoder"] = (lambda: ops.sum(ops.mul(enc(img), we)), _module_params(enc, img))
    mlp = NerfMLP(12, 16, 3, rng).astype(np.float64)
    tri = _leaf(rng, (3, 4, 4, 4), "triplane")
    pts = Tensor._wrap(rng.uniform(-0.9, 0.9, size=(20, 3)))
    wr, ws = _probe(rng, (20, 3)), _probe(rng, (20,))

    def field_loss():
        rgb, sigma = TriplaneField(Triplane(tri), mlp)(pts)
        return ops.sum(ops.mul(rgb, wr)) + ops.sum(ops.mul(sigma, ws))

    cases["TriplaneField"] = (field_loss, _module_params(mlp, tri))
    rgb = _leaf(rng, (5, 6, 3), "rgb", 0.0, 1.0)
    sig = _leaf(rng, (5, 6), "sigma", 0.0, 3.0)
    t = np.sort(rng.uniform(0.5, 2.5, size=(5, 6)), axis=1)
    dts = np.diff(np.concatenate([t, np.full((5, 1), 3.0)], axis=1), axis=1)
    wc = _probe(rng, (5, 3))
    cases["composite"] = (lambda: ops.sum(ops.mul(composite(rgb, sig, t, dts).rgb, wc)), [rgb, sig])
    pred = _leaf(rng, (8, 8, 3), "pred", 0.0, 1.0)
    gt = Tensor._wrap(rng.uniform(0.0, 1.0, size=(8, 8, 3)))
    net = FeatureNet()
    cases["perceptual_loss"] = (lambda: perceptual_loss(pred, gt, net), [pred])
    pred2 = _leaf(rng, (8, 8, 3), "pred2", 0.0, 1.0)
    gt2 = Tensor._wrap(rng.uniform(0.0, 1.0, size=(8, 8, 3)))
    cases["recon_loss"] = (lambda: recon_loss([pred, pred2], [gt, gt2], 2.0, net).total, [pred, pred2])
    return cases


def _endtoend_cases(rng, max_elements: int) -> dict:
    from .camera import DEFAULT_INTRINSIC, build_camera_feature, normalize_camera, sample_training_pose
    from .losses import recon_loss
    from .model import LRM, desk_config
    from .renderer import render_image

    model = LRM(desk_config(), seed=int(rng.integers(2 ** 31)))
    # move to a generic point: at init, small attention weights and zero
    # output layers leave gradients near round-off, which says nothing
    for _, p in model.named_parameters():
        fan_in = p.shape[0] if p.ndim >= 2 else 16
        p.data = p.data + rng.normal(0.0, 0.5 / np.sqrt(fan_in), size=p.shape)
    model.astype(np.float64)
    image = rng.uniform(0.0, 1.0, size=(3, 64, 64))
    E_in = sample_training_pose(rng)
    E_side = sample_training_pose(rng)
    E_norm, sim = normalize_camera(E_in)
    c = build_camera_feature(E_norm, DEFAULT_INTRINSIC)
    gts = [rng.uniform(0.0, 1.0, size=(8, 8, 3)) for _ in range(2)]

    def loss():
        fld = model.field(model.triplane(image, c))
        preds = [render_image(fld, sim.apply_extrinsic(E), DEFAULT_INTRINSIC, 8, 8, 8).rgb for E in (E_in, E_side)]
        return recon_loss(preds, gts, 2.0).total

    return {"image_to_loss": (loss, dict(model.named_parameters()))}


def run_scope(scope: str, seed: int = 0, max_elements: int = 4) -> dict[str, GradReport]:
    """Finite-difference checks for one scope in 64-bit; returns one report per case."""
    from .tensor import precision

    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES}")
    rng = np.random.default_rng(seed)
    tol = SCOPE_TOL[scope]
    reports = {}
    with precision(np.float64):
        if scope == "primitive":
            cases, probe = _primitive_cases(rng), None
        elif scope == "module":
            cases, probe = _module_cases(rng), 24
        else:
            cases, probe = _endtoend_cases(rng, max_elements), max_elements
        for name, (f, params) in cases.items():
            reports[name] = finite_difference_check(f, params, rel_tol=tol, max_elements=probe, seed=seed,
                                                   step=SCOPE_STEP[scope])
    return reports


def summarize(reports: dict[str, GradReport]) -> str:
    lines = []
    for case, rep in reports.items():
        lines.append(f"{case:<28} max_rel_err {rep.max_error:.3e}  {'ok' if rep.passed else 'FAIL'}")
    return "\n".join(lines)
