"""Synthetic multi-view scenes with analytic ground-truth depth.

Scenes are built from at most two primitives (a plane, a two-faced wedge or a
sphere in front of a backdrop plane) and rendered by ray casting.  Surfaces
carry a band-limited procedural albedo defined in scene-normalised
coordinates, so scaling a scene's geometry by ``s`` leaves every image
unchanged while all depths and baselines scale by ``s``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .geometry import Camera, CameraRig, Extrinsics, Intrinsics, look_at

KINDS = ("plane", "sphere", "wedge")
SCHEMA_VERSION = 1


class SynthError(ValueError):
    pass


# -- primitives ------------------------------------------------------------------------

@dataclass
class ConvexSolid:
    """Intersection of half-spaces ``n . (X - p) >= 0`` (normals point inward)."""

    points: np.ndarray   # (F, 3)
    normals: np.ndarray  # (F, 3), unit

    def intersect(self, o, d):
        """Entry distance along rays ``o + t d`` and the outward normal there."""
        t_in = np.full(d.shape[:-1], -np.inf)
        t_out = np.full(d.shape[:-1], np.inf)
        n_hit = np.zeros(d.shape)
        for p, n in zip(self.points, self.normals):
            nd = d @ n
            s = (p - o) @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = s / nd
            entering = nd > 0
            upd = entering & (t > t_in)
            t_in = np.where(upd, t, t_in)
            n_hit = np.where(upd[..., None], -n, n_hit)
            t_out = np.where(nd < 0, np.minimum(t_out, t), t_out)
            # parallel ray outside this half-space never enters
            t_out = np.where((nd == 0) & (s > 0), -np.inf, t_out)
        hit = (t_in > 0) & (t_in <= t_out) & np.isfinite(t_in)
        return np.where(hit, t_in, np.inf), n_hit


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def intersect(self, o, d):
        oc = o - self.center
        a = np.einsum("...i,...i->...", d, d)
        b = 2 * (d @ oc)
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        with np.errstate(invalid="ignore"):
            root = np.sqrt(disc)
            t0 = (-b - root) / (2 * a)
            t1 = (-b + root) / (2 * a)
        t = np.where(t0 > 0, t0, t1)
        t = np.where((disc >= 0) & (t > 0), t, np.inf)
        with np.errstate(invalid="ignore"):
            n = (o + np.where(np.isfinite(t), t, 0.0)[..., None] * d - self.center) / self.radius
        return t, n


def plane_solid(point, normal_toward_camera) -> ConvexSolid:
    n = -np.asarray(normal_toward_camera, dtype=np.float64)
    return ConvexSolid(np.asarray(point, dtype=np.float64)[None], (n / np.linalg.norm(n))[None])


# -- texture ---------------------------------------------------------------------------

@dataclass
class Texture:
    """Albedo ``0.5 + amp * tanh(sum_k a_k sin(w_k . X / scale + phi_k))`` or a 3-D checker."""

    freqs: np.ndarray
    phases: np.ndarray
    kind: str = "noise"
    checker_size: float = 0.05
    amp: float = 0.4

    def __call__(self, X, scale: float) -> np.ndarray:
        Xn = X / scale
        if self.kind == "checker":
            q = np.floor(Xn / self.checker_size).astype(np.int64).sum(axis=-1)
            return np.where(q % 2 == 0, 0.25, 0.75)
        arg = np.einsum("...i,ki->...k", Xn, self.freqs) + self.phases
        s = np.sin(arg).sum(axis=-1) * np.sqrt(2.0 / len(self.phases))
        return 0.5 + self.amp * np.tanh(s)


def make_texture(rng, kind="noise", n: int = 32, wavelengths=(0.015, 0.2)) -> Texture:
    lam = np.exp(rng.uniform(np.log(wavelengths[0]), np.log(wavelengths[1]), n))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return Texture(2 * np.pi * dirs / lam[:, None], rng.uniform(0, 2 * np.pi, n), kind)


# -- scene specification -----------------------------------------------------------------

@dataclass
class SceneSpec:
    """Everything needed to render one scene; geometry is in units of ``scale`` metres."""

    kind: str = "plane"
    seed: int = 0
    width: int = 160
    height: int = 128
    focal: float = 300.0
    n_sources: int = 4
    baselines: tuple = (0.1, 0.13, 0.16, 0.2)
    source_angles: tuple = (0.0, 1.57, 3.14, 4.71)
    distance: float = 1.0
    tilt: tuple = (0.0, 0.0)       # plane / backdrop rotation about x and y (radians)
    radius: float = 0.3           # sphere radius
    backdrop_gap: float = 0.25    # sphere: distance from sphere back to backdrop
    wedge_angle: float = 0.6      # wedge half opening from the view axis (radians)
    wedge_roll: float = 0.0
    offset: tuple = (0.0, 0.0)    # lateral offset of the primitive centre
    texture: str = "noise"
    light: tuple = (0.3, -0.4, -1.0)
    ambient: float = 0.3
    noise_sigma: float = 0.005
    supersample: int = 2
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SynthError(f"unknown scene kind {self.kind!r}; expected one of {KINDS}")
        if self.width < 8 or self.height < 8:
            raise SynthError("image must be at least 8x8")
        if len(self.baselines) != self.n_sources or len(self.source_angles) != self.n_sources:
            raise SynthError("need one baseline and one angle per source")
        if min(self.baselines) <= 0 or self.scale <= 0:
            raise SynthError("baselines and scale must be positive")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in fields})


def _rot(ax: float, ay: float) -> np.ndarray:
    cx, sx, cy, sy = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    return ry @ rx


def build_primitives(spec: SceneSpec):
    s = spec.scale
    centre = np.array([spec.offset[0], spec.offset[1], spec.distance]) * s
    facing = _rot(*spec.tilt) @ np.array([0.0, 0.0, -1.0])
    if spec.kind == "plane":
        return [plane_solid(centre, facing)]
    if spec.kind == "wedge":
        a, r = spec.wedge_angle, spec.wedge_roll
        roll = np.array([[np.cos(r), -np.sin(r), 0], [np.sin(r), np.cos(r), 0], [0, 0, 1]])
        n1 = roll @ np.array([np.sin(a), 0, np.cos(a)])
        n2 = roll @ np.array([-np.sin(a), 0, np.cos(a)])
        R = _rot(*spec.tilt)
        return [ConvexSolid(np.stack([centre, centre]), np.stack([R @ n1, R @ n2]))]
    sphere = Sphere(centre, spec.radius * s)
    back = centre + np.array([0, 0, spec.radius + spec.backdrop_gap]) * s
    return [sphere, plane_solid(back, facing)]


@dataclass
class Scene:
    """Rendered views; index 0 is the reference."""

    spec: SceneSpec
    rig: CameraRig
    images: list
    depths: list
    normals: np.ndarray   # reference-camera-frame analytic normals (NaN on background)
    depth_range: tuple
    primitives: list = field(default_factory=list, repr=False)

    @property
    def cameras(self):
        return [self.rig.reference, *self.rig.sources]


def make_rig(spec: SceneSpec) -> CameraRig:
    s = spec.scale
    intr = Intrinsics(spec.focal, spec.focal, spec.width / 2, spec.height / 2)
    target = np.array([spec.offset[0], spec.offset[1], spec.distance]) * s
    ref = Camera(intr, Extrinsics(np.eye(3), np.zeros(3)), spec.width, spec.height)
    sources = []
    for b, th in zip(spec.baselines, spec.source_angles):
        c = np.array([b * np.cos(th), b * np.sin(th), 0.0]) * s
        sources.append(Camera(intr, look_at(c, target), spec.width, spec.height))
    return CameraRig(ref, sources)


def cast(primitives, cam: Camera, xs, ys):
    """Closest hit for pixel-index coordinates; returns (depth, world point, normal)."""
    R = cam.extrinsics.R
    d = cam.rays(xs, ys) @ R       # world directions with unit camera-frame z
    o = cam.center
    t = np.full(d.shape[:-1], np.inf)
    n = np.zeros(d.shape)
    for prim in primitives:
        tp, np_ = prim.intersect(o, d)
        closer = tp < t
        t = np.where(closer, tp, t)
        n = np.where(closer[..., None], np_, n)
    hit = np.isfinite(t)
    depth = np.where(hit, t, np.nan)
    X = o + np.where(hit, t, 0.0)[..., None] * d
    return depth, X, np.where(hit[..., None], n, np.nan)


def _shade(spec, texture, X, n):
    light = np.asarray(spec.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lam = np.clip(np.nan_to_num(n @ light), 0.0, None)
    return texture(X, spec.scale) * (spec.ambient + (1 - spec.ambient) * lam)


def render_view(spec, primitives, texture, cam: Camera, rng=None, background: float = 0.1):
    """Supersampled intensity image and pixel-centre GT depth for one camera."""
    h, w = cam.height, cam.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    k = spec.supersample
    acc = np.zeros((h, w))
    for i in range(k):
        for j in range(k):
            dx, dy = (j + 0.5) / k - 0.5, (i + 0.5) / k - 0.5
            depth, X, n = cast(primitives, cam, xs + dx, ys + dy)
            acc += np.where(np.isfinite(depth), _shade(spec, texture, X, n), background)
    img = acc / (k * k)
    if rng is not None and spec.noise_sigma > 0:
        img = img + rng.normal(0, spec.noise_sigma, img.shape)
    depth, _, _ = cast(primitives, cam, xs, ys)
    return np.clip(img, 0.0, 1.0), depth


def render(spec: SceneSpec) -> Scene:
    """Render the reference and all source views of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    texture = make_texture(rng, spec.texture)
    prims = build_primitives(spec)
    rig = make_rig(spec)
    images, depths = [], []
    for cam in [rig.reference, *rig.sources]:
        img, depth = render_view(spec, prims, texture, cam, rng)
        images.append(img)
        depths.append(depth)
    if not np.isfinite(depths[0]).any():
        raise SynthError("the reference view does not see any surface")
    ys, xs = np.mgrid[0:spec.height, 0:spec.width]
    _, _, n_world = cast(prims, rig.reference, xs, ys)
    valid = depths[0][np.isfinite(depths[0])]
    depth_range = (0.8 * float(valid.min()), 1.25 * float(valid.max()))
    return Scene(spec, rig, images, depths, n_world @ rig.reference.extrinsics.R.T, depth_range, prims)


def sample_spec(rng, seed: int, kind: str | None = None, width: int = 160, height: int = 128,
                scale: float = 1.0) -> SceneSpec:
    """Random desk-scale scene: 1 reference + 4 sources at 0.05-0.2 m baselines."""
    kind = kind or KINDS[rng.integers(len(KINDS))]
    b0 = rng.uniform(0.06, 0.1)
    baselines = tuple(float(b) for b in np.linspace(b0, rng.uniform(0.16, 0.2), 4))
    start = rng.uniform(0, 2 * np.pi)
    angles = tuple(float(start + i * np.pi / 2 + rng.uniform(-0.3, 0.3)) for i in range(4))
    return SceneSpec(
        kind=kind, seed=seed, width=width, height=height,
        baselines=baselines, source_angles=angles,
        distance=float(rng.uniform(0.8, 1.2)),
        tilt=tuple(float(v) for v in rng.uniform(-1, 1, 2) * (0.3 if kind == "wedge" else 0.6)),
        radius=float(rng.uniform(0.2, 0.3)),
        backdrop_gap=float(rng.uniform(0.15, 0.4)),
        wedge_angle=float(rng.uniform(0.4, 0.7)),
        wedge_roll=float(rng.uniform(-0.5, 0.5)),
        offset=(float(rng.uniform(-0.05, 0.05)), float(rng.uniform(-0.05, 0.05))),
        scale=scale,
    )


# -- datasets on disk ------------------------------------------------------------------------

def write_scene(scene: Scene, root: Path, name: str, image_format: str = "pgm") -> dict:
    d = Path(root) / name
    d.mkdir(parents=True, exist_ok=True)
    views = []
    for i, (cam, img, depth) in enumerate(zip(scene.cameras, scene.images, scene.depths)):
        img_name = f"{name}/image_{i}.{image_format}"
        if image_format == "pgm":
            io.write_pgm(Path(root) / img_name, img)
        else:
            io.write_pfm(Path(root) / img_name, img)
        io.write_pfm(d / f"depth_{i}.pfm", depth)
        io.write_camera(d / f"cam_{i}.txt", cam, scene.depth_range)
        views.append({"image": img_name, "depth": f"{name}/depth_{i}.pfm", "camera": f"{name}/cam_{i}.txt"})
    return {"name": name, "kind": scene.spec.kind, "width": scene.spec.width,
            "height": scene.spec.height, "reference": 0, "views": views, "spec": scene.spec.to_dict()}


def make_dataset(out_dir, seed: int, count: int, kinds=None, image_format: str = "pgm",
                 width: int = 160, height: int = 128) -> dict:
    """Render ``count`` random scenes into ``out_dir`` with a ``manifest.json``."""
    if count < 0:
        raise SynthError("count must be non-negative")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(count):
        kind = kinds[i % len(kinds)] if kinds else None
        spec = sample_spec(rng, seed=int(rng.integers(2 ** 31)), kind=kind, width=width, height=height)
        entries.append(write_scene(render(spec), out, f"scene_{i:03d}", image_format))
    manifest = {"schema_version": SCHEMA_VERSION, "seed": seed, "scenes": entries}
    io.write_json(out / "manifest.json", manifest)
    return manifest


def load_scene(root, entry: dict) -> Scene:
    """Load one manifest entry back into a :class:`Scene` (analytic normals omitted)."""
    root = Path(root)
    w, h = entry["width"], entry["height"]
    cams, images, depths, rng_ = [], [], [], None
    for v in entry["views"]:
        cam, rng_ = io.read_camera(root / v["camera"], w, h)
        cams.append(cam)
        images.append(io.read_image(root / v["image"]))
        depths.append(io.read_pfm(root / v["depth"]).astype(np.float64))
    ref = entry.get("reference", 0)
    order = [ref] + [i for i in range(len(cams)) if i != ref]
    spec = SceneSpec.from_dict(entry["spec"]) if "spec" in entry else SceneSpec(width=w, height=h)
    return Scene(spec, CameraRig(cams[ref], [cams[i] for i in order[1:]]),
                 [images[i] for i in order], [depths[i] for i in order], None, tuple(rng_))


def load_dataset(root) -> list:
    root = Path(root)
    manifest = io.read_json(root / "manifest.json")
    return [load_scene(root, e) for e in manifest.get("scenes", [])]
