"""Command-line entry point.

Exit codes: 0 success, 1 failure (including failed verification), 2 usage error.
Every command accepts ``--seed`` and ``--config``; the config is a JSON
object whose keys are flag names (dashes or underscores). For ``train`` it may
also hold a ``"train"`` object (training config fields) and a ``"model"``
object (model config).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError
from .trainer import TrainingError

COMMANDS = ("datagen", "train", "reconstruct", "render", "mesh", "eval", "gradcheck")


class UsageError(ValueError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", type=str, default=None, help="JSON file with flag defaults")


def _recon_flags(p: argparse.ArgumentParser, views: int) -> None:
    p.add_argument("--image", required=True, help="square RGB image on white background")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--views", type=int, default=views, help="number of turntable renders")
    p.add_argument("--size", type=int, default=64, help="render side length in pixels")
    p.add_argument("--samples", type=int, default=64, help="samples per ray")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrm", description="Single-image triplane reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="render a procedural multi-view dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--shapes", type=int, default=8, help="number of shapes")
    p.add_argument("--views", type=int, default=16, help="views per shape")
    p.add_argument("--size", type=int, default=64, help="image side length")
    _common(p)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--dataset", required=True, help="dataset directory with meta.json")
    p.add_argument("--out", required=True, help="run directory (checkpoint + log)")
    p.add_argument("--steps", type=int, default=None, help="total iterations (overrides config)")
    p.add_argument("--resume", type=str, default=None, help="checkpoint directory to resume from")
    p.add_argument("--save-every", type=int, default=0, help="also checkpoint every N steps")
    p.add_argument("--input-view", type=int, default=None, help="always use this view as input")
    p.add_argument("--holdout", type=int, nargs="*", default=None, help="view indices never supervised")
    _common(p)

    p = sub.add_parser("reconstruct", help="image -> renders, depth maps and mesh")
    _recon_flags(p, views=8)
    p.add_argument("--mesh-res", type=int, default=64, help="density grid resolution")
    p.add_argument("--iso", type=float, default=None, help="density iso level (default ln2 / voxel size)")
    _common(p)

    p = sub.add_parser("render", help="image -> turntable renders and depth maps")
    _recon_flags(p, views=8)
    _common(p)

    p = sub.add_parser("mesh", help="image -> OBJ mesh")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mesh-res", type=int, default=64)
    p.add_argument("--iso", type=float, default=None)
    _common(p)

    p = sub.add_parser("eval", help="PSNR/SSIM of reconstructions against dataset views")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--input-view", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--min-psnr", type=float, default=None, help="exit 1 if the mean PSNR is lower")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification (float64)")
    p.add_argument("--scope", choices=("primitive", "module", "endtoend"), default="primitive")
    _common(p)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        args.extra_config = {}
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
    if not isinstance(cfg, dict):
        parser.error("config must be a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    dests = {a.dest for a in sub._actions}  # noqa: SLF001
    flat, extra = {}, {}
    for key, value in cfg.items():
        k = key.replace("-", "_")
        if k in dests and k not in ("config", "help"):
            flat[k] = value
        elif args.command == "train" and k in ("train", "model"):
            extra[k] = value
        else:
            parser.error(f"unknown config key {key!r} for command {args.command}")
    sub.set_defaults(**flat)
    args = parser.parse_args(argv)
    args.extra_config = extra
    return args


def _load_image(path) -> np.ndarray:
    from .data import load_png

    img = load_png(path)
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"{path} is {img.shape[1]}x{img.shape[0]}; the model needs a square image "
                         "(crop or pad it, background white, object centred)")
    return img


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_datagen(args) -> int:
    from .data import generate_dataset

    m = generate_dataset(args.shapes, args.views, args.out, seed=args.seed, image_size=args.size)
    print(f"wrote {len(m['shapes'])} shapes x {args.views} views to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .data import load_shapes
    from .model import LRM, ModelConfig, desk_config
    from .trainer import TrainConfig, Trainer

    shapes = load_shapes(args.dataset)
    out = _out_dir(args.out)
    log = out / "train_log.jsonl"
    train_cfg = dict(args.extra_config.get("train", {}))
    train_cfg.setdefault("seed", args.seed)
    if args.steps is not None:
        train_cfg["total_iters"] = args.steps
    if args.input_view is not None:
        train_cfg["input_view"] = args.input_view
    if args.holdout is not None:
        train_cfg["holdout_views"] = args.holdout
    cfg = TrainConfig.from_dict(train_cfg)
    if args.resume:
        trainer = Trainer.resume(args.resume, shapes, log, cfg)
    else:
        mcfg = ModelConfig.from_dict(args.extra_config["model"]) if "model" in args.extra_config else desk_config()
        log.write_text("")
        trainer = Trainer(LRM(mcfg, seed=args.seed), shapes, cfg, log)
    t0 = time.time()

    def progress(tr, entry):
        if args.save_every and tr.step % args.save_every == 0:
            tr.save(out / f"checkpoint_{tr.step:06d}")
        if tr.step % 50 == 0 or tr.step == cfg.total_iters:
            print(f"step {entry['step']:6d} lr {entry['lr']:.2e} loss {entry['total']:.4f} "
                  f"mse {entry['mse']:.4f} ({time.time() - t0:.0f}s)", flush=True)

    trainer.run(callback=progress)
    trainer.save(out / "checkpoint")
    print(f"saved {out / 'checkpoint'}")
    return 0


def _reconstruct(args):
    from .inference import reconstruct
    from .trainer import load_model

    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} does not exist")
    model = load_model(args.checkpoint)
    tri, _ = reconstruct(model, _load_image(args.image))
    return model, tri


def _write_renders(model, tri, args, out: Path) -> None:
    from .camera import DEFAULT_INTRINSIC, generate_rays
    from .data import save_png
    from .inference import render_view, turntable_cameras

    fld = model.field(tri)
    for k, E in enumerate(turntable_cameras(args.views)):
        rgb, depth, opacity = render_view(fld, E, DEFAULT_INTRINSIC, args.size, args.samples)
        save_png(rgb, out / f"view_{k:03d}.png")
        np.save(out / f"depth_{k:03d}.npy", depth)
        save_depth_png(np.where(opacity > 0.5, depth, 0.0),
                       generate_rays(E, DEFAULT_INTRINSIC, args.size, args.size).t_far.max(),
                       out / f"depth_{k:03d}.png")


def save_depth_png(depth: np.ndarray, t_far: float, path) -> None:
    """16-bit grayscale PNG of ``depth / t_far`` (0 where nothing was hit)."""
    from PIL import Image

    q = np.round(np.clip(depth / t_far, 0.0, 1.0) * 65535.0).astype(np.uint16)
    try:
        Image.fromarray(q).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write depth map {path}: {exc}") from exc


def _write_mesh(model, tri, args, out: Path) -> None:
    from .mesh import color_vertices, marching_cubes, sample_density_grid, write_obj

    fld = model.field(tri)
    mesh = marching_cubes(sample_density_grid(fld, args.mesh_res), args.iso)
    write_obj(color_vertices(mesh, fld), out / "mesh.obj")
    print(f"mesh: {mesh.num_vertices} vertices, {mesh.num_triangles} triangles")


def cmd_reconstruct(args) -> int:
    model, tri = _reconstruct(args)
    out = _out_dir(args.out)
    _write_renders(model, tri, args, out)
    _write_mesh(model, tri, args, out)
    print(f"wrote {args.views} renders and mesh.obj to {out}")
    return 0


def cmd_render(args) -> int:
    model, tri = _reconstruct(args)
    out = _out_dir(args.out)
    _write_renders(model, tri, args, out)
    print(f"wrote {args.views} renders to {out}")
    return 0


def cmd_mesh(args) -> int:
    model, tri = _reconstruct(args)
    _write_mesh(model, tri, args, _out_dir(args.out))
    return 0


def cmd_eval(args) -> int:
    from .data import load_shapes
    from .inference import evaluate_dataset
    from .trainer import load_model

    model = load_model(args.checkpoint)
    shapes = load_shapes(args.dataset)
    report = evaluate_dataset(model, shapes, args.input_view, args.size, args.samples)
    path = Path(args.out)
    if path.parent != Path(""):
        _out_dir(path.parent)
    try:
        path.write_text(json.dumps(report, indent=1))
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    print(f"psnr {report['psnr_mean']:.2f} dB  ssim {report['ssim_mean']:.4f}  "
          f"(white baseline {report['white_psnr_mean']:.2f} dB) over {len(shapes)} shapes")
    if args.min_psnr is not None and report["psnr_mean"] < args.min_psnr:
        print(f"mean PSNR below --min-psnr {args.min_psnr}", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_scope, summarize

    t0 = time.time()
    reports = run_scope(args.scope, seed=args.seed)
    print(summarize(reports))
    ok = all(r.passed for r in reports.values())
    print(f"scope {args.scope}: {'PASS' if ok else 'FAIL'} in {time.time() - t0:.1f}s")
    return 0 if ok else 1


HANDLERS = {"datagen": cmd_datagen, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "render": cmd_render, "mesh": cmd_mesh, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, list(sys.argv[1:] if argv is None else argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return HANDLERS[args.command](args)
    except (ValueError, OSError, KeyError, CheckpointError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
