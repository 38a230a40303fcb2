"""Procedural multi-view dataset: analytic SDF scenes rendered on white.

Layout on disk::

    out_dir/meta.json
    out_dir/<shape_id>/<view:03d>.png

``meta.json`` holds the image size, and per shape its scene description and
the list of views ``{"image", "E" (16 floats, row-major camera-to-world),
"intrinsics" (foc_x, foc_y, pp_x, pp_y)}``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .camera import DEFAULT_INTRINSIC, CameraIntrinsic, generate_rays, sample_training_pose

SCENE_RADIUS = 0.65  # every scene fits in this ball, so it stays in [-0.9, 0.9]^3
KINDS = ("sphere", "box", "rounded-box", "torus")
AMBIENT = 0.35


@dataclass
class Primitive:
    kind: str
    center: list
    size: list           # sphere [r]; box [hx, hy, hz]; rounded-box [hx, hy, hz, r]; torus [R, r]
    albedo: list

    def bounding_radius(self) -> float:
        c = float(np.linalg.norm(self.center))
        if self.kind == "sphere":
            return c + self.size[0]
        if self.kind in ("box", "rounded-box"):
            return c + float(np.linalg.norm(self.size[:3]))
        if self.kind == "torus":
            return c + self.size[0] + self.size[1]
        raise ValueError(f"unknown primitive kind {self.kind!r}")


@dataclass
class SceneSpec:
    primitives: list = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls([Primitive(**p) for p in d["primitives"]], d.get("seed", 0))

    def bounding_radius(self) -> float:
        return max((p.bounding_radius() for p in self.primitives), default=0.0)


def _primitive_sdf(prim: Primitive, p: np.ndarray) -> np.ndarray:
    q = p - np.asarray(prim.center, dtype=np.float64)
    s = prim.size
    if prim.kind == "sphere":
        return np.linalg.norm(q, axis=-1) - s[0]
    if prim.kind in ("box", "rounded-box"):
        r = s[3] if prim.kind == "rounded-box" else 0.0
        d = np.abs(q) - (np.asarray(s[:3]) - r)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return outside + inside - r
    if prim.kind == "torus":
        ring = np.linalg.norm(q[..., :2], axis=-1) - s[0]
        return np.sqrt(ring ** 2 + q[..., 2] ** 2) - s[1]
    raise ValueError(f"unknown primitive kind {prim.kind!r}")


def sdf_eval(scene: SceneSpec, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Union distance and the albedo of the nearest primitive at points [..., 3]."""
    p = np.asarray(p, dtype=np.float64)
    if not scene.primitives:
        return np.full(p.shape[:-1], np.inf), np.ones(p.shape[:-1] + (3,))
    dists = np.stack([_primitive_sdf(pr, p) for pr in scene.primitives], axis=-1)
    nearest = dists.argmin(axis=-1)
    albedos = np.asarray([pr.albedo for pr in scene.primitives], dtype=np.float64)
    return dists.min(axis=-1), albedos[nearest]


def random_scene(rng: np.random.Generator, seed: int = 0, max_primitives: int = 3) -> SceneSpec:
    n = int(rng.integers(1, max_primitives + 1))
    prims = []
    for _ in range(n):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        center = rng.uniform(-0.25, 0.25, size=3) if n > 1 else rng.uniform(-0.05, 0.05, size=3)
        if kind == "sphere":
            size = [rng.uniform(0.2, 0.45)]
        elif kind == "box":
            size = list(rng.uniform(0.12, 0.32, size=3))
        elif kind == "rounded-box":
            half = rng.uniform(0.15, 0.32, size=3)
            size = list(half) + [float(rng.uniform(0.03, 0.6 * half.min()))]
        else:
            size = [rng.uniform(0.22, 0.35), rng.uniform(0.07, 0.14)]
        albedo = list(rng.uniform(0.15, 0.95, size=3))
        prim = Primitive(kind, [float(x) for x in center], [float(x) for x in size],
                         [float(x) for x in albedo])
        r = prim.bounding_radius()
        if r > SCENE_RADIUS:
            shrink = SCENE_RADIUS / r
            prim = Primitive(kind, [x * shrink for x in prim.center], [x * shrink for x in prim.size],
                             prim.albedo)
        prims.append(prim)
    return SceneSpec(prims, seed)


def sphere_trace(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray, t0: np.ndarray,
                 t1: np.ndarray, max_steps: int = 256, eps: float = 1e-4):
    """March each ray by the SDF; returns (hit mask, t). Unconverged rays miss."""
    t = t0.copy()
    hit = np.zeros(len(t), dtype=bool)
    active = t1 > t0
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        d, _ = sdf_eval(scene, origins[idx] + t[idx, None] * dirs[idx])
        done = d < eps
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, d)
        escaped = t[idx] > t1[idx]
        active[idx[done | escaped]] = False
    return hit, t


def sdf_normals(scene: SceneSpec, p: np.ndarray, h: float = 1e-4) -> np.ndarray:
    n = np.empty_like(p)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        n[:, k] = sdf_eval(scene, p + e)[0] - sdf_eval(scene, p - e)[0]
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)


def render_view(scene: SceneSpec, E: np.ndarray, K: CameraIntrinsic, width: int, height: int) -> np.ndarray:
    """Lambertian headlight render on white; returns float [H, W, 3] in [0, 1]."""
    rays = generate_rays(E, K, width, height)
    img = np.ones((len(rays), 3))
    if scene.primitives:
        hit, t = sphere_trace(scene, rays.origins, rays.directions, rays.t_near, rays.t_far)
        if hit.any():
            p = rays.origins[hit] + t[hit, None] * rays.directions[hit]
            n = sdf_normals(scene, p)
            _, albedo = sdf_eval(scene, p)
            lambert = np.clip(-(n * rays.directions[hit]).sum(axis=1), 0.0, 1.0)
            img[hit] = albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)[:, None]
    return np.clip(img, 0.0, 1.0).reshape(height, width, 3)


def silhouette(scene: SceneSpec, E: np.ndarray, K: CameraIntrinsic, width: int, height: int) -> np.ndarray:
    rays = generate_rays(E, K, width, height)
    hit, _ = sphere_trace(scene, rays.origins, rays.directions, rays.t_near, rays.t_far)
    return hit.reshape(height, width)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    try:
        Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def save_ppm(img: np.ndarray, path) -> None:
    """ASCII PPM (P3), 8-bit; lossless for the quantized values."""
    q = to_uint8(img)
    H, W, _ = q.shape
    rows = [" ".join(str(v) for v in row.reshape(-1)) for row in q]
    try:
        Path(path).write_text(f"P3\n{W} {H}\n255\n" + "\n".join(rows) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def load_ppm(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    tokens = [t for line in text.splitlines() for t in line.split("#")[0].split()]
    if not tokens or tokens[0] != "P3":
        raise ValueError(f"{path} is not an ASCII PPM (P3) file")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.asarray(tokens[4:], dtype=np.float64)
    if values.size != W * H * 3:
        raise ValueError(f"{path}: expected {W * H * 3} samples, found {values.size}")
    return values.reshape(H, W, 3) / maxval


def sdf_density(scene: SceneSpec, k: float = 50.0, eps: float = 0.001):
    """Volume-rendering field from the SDF: sigma = k * sigmoid(-d / eps), albedo as color."""
    from .renderer import analytic_field

    def density(p):
        d, _ = sdf_eval(scene, p)
        return k * 0.5 * (1.0 + np.tanh(-d / (2.0 * eps)))

    return analytic_field(density, lambda p: sdf_eval(scene, p)[1])


def generate_dataset(n_shapes: int, views_per_shape: int, out_dir, seed: int = 0,
                     image_size: int = 64, K: CameraIntrinsic = DEFAULT_INTRINSIC) -> dict:
    """Render ``n_shapes`` random scenes from ``views_per_shape`` sampled poses each."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    shapes = []
    for s in range(n_shapes):
        shape_seed = int(rng.integers(2 ** 31))
        srng = np.random.default_rng(shape_seed)
        scene = random_scene(srng, shape_seed)
        sid = f"shape_{s:04d}"
        (out / sid).mkdir(exist_ok=True)
        views = []
        for v in range(views_per_shape):
            E = sample_training_pose(srng)
            rel = f"{sid}/{v:03d}.png"
            save_png(render_view(scene, E, K, image_size, image_size), out / rel)
            views.append({"image": rel, "E": [float(x) for x in E.reshape(16)],
                          "intrinsics": [float(x) for x in K.as_array()]})
        shapes.append({"id": sid, "scene": scene.to_dict(), "views": views})
    manifest = {"image_size": image_size, "seed": seed, "shapes": shapes}
    write_manifest(manifest, out)
    return manifest


def write_manifest(manifest: dict, out_dir) -> None:
    path = Path(out_dir) / "meta.json"
    try:
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as exc:
        raise OSError(f"cannot write manifest {path}: {exc}") from exc


def load_manifest(root, min_views: int = 4) -> dict:
    """Read and validate ``meta.json``: images exist with the declared size."""
    root = Path(root)
    path = root / "meta.json"
    try:
        manifest = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    size = manifest["image_size"]
    for shape in manifest["shapes"]:
        if len(shape["views"]) < min_views:
            raise ValueError(f"shape {shape['id']} has {len(shape['views'])} views, need >= {min_views}")
        for view in shape["views"]:
            img_path = root / view["image"]
            if not img_path.exists():
                raise FileNotFoundError(f"manifest references missing image {img_path}")
            with Image.open(img_path) as im:
                if im.size != (size, size):
                    raise ValueError(f"{img_path} is {im.size}, manifest declares {size}x{size}")
            if len(view["E"]) != 16 or len(view["intrinsics"]) != 4:
                raise ValueError(f"bad camera entry for {img_path}")
    return manifest


@dataclass
class ShapeViews:
    """All views of one shape held in memory."""

    shape_id: str
    images: np.ndarray                 # [V, H, W, 3] float in [0, 1]
    extrinsics: np.ndarray             # [V, 4, 4]
    intrinsics: list                   # [V] CameraIntrinsic
    scene: Optional[SceneSpec] = None


def load_shapes(root, manifest: Optional[dict] = None) -> list[ShapeViews]:
    root = Path(root)
    manifest = manifest or load_manifest(root)
    shapes = []
    for shape in manifest["shapes"]:
        imgs = np.stack([load_png(root / v["image"]) for v in shape["views"]])
        Es = np.stack([np.asarray(v["E"], dtype=np.float64).reshape(4, 4) for v in shape["views"]])
        Ks = [CameraIntrinsic(*v["intrinsics"]) for v in shape["views"]]
        scene = SceneSpec.from_dict(shape["scene"]) if "scene" in shape else None
        shapes.append(ShapeViews(shape["id"], imgs, Es, Ks, scene))
    return shapes


def image_files(root) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in Path(root).rglob("*.png"))

