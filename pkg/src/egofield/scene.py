"""Synthetic egocentric sequences rendered by ray casting.

Ground truth is produced by analytic ray/primitive intersection so it shares
no code with the splatting renderer it is used to evaluate.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from egofield import storage
from egofield.splat.camera import Camera, look_at


class SceneError(ValueError):
    pass


@dataclass
class SceneObject:
    id: int
    name: str
    primitive: str  # "sphere" or "box"
    center: np.ndarray
    size: np.ndarray  # sphere: (radius,), box: half-extents (3,)
    category: str
    color: np.ndarray
    transient: bool = False
    path: Optional[np.ndarray] = None  # (K, 3) keyframes spread evenly over the sequence

    def __post_init__(self) -> None:
        if self.primitive not in ("sphere", "box"):
            raise SceneError(f"unknown primitive {self.primitive!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if self.path is not None:
            self.path = np.asarray(self.path, dtype=np.float64).reshape(-1, 3)

    def center_at(self, frame: int, n_frames: int) -> np.ndarray:
        if self.path is None or len(self.path) == 1:
            return self.center if self.path is None else self.path[0]
        s = frame / max(n_frames - 1, 1) * (len(self.path) - 1)
        k = min(int(np.floor(s)), len(self.path) - 2)
        f = s - k
        return (1.0 - f) * self.path[k] + f * self.path[k + 1]


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    n_frames: int = 60
    width: int = 64
    height: int = 64
    fov_deg: float = 45.0
    eye: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -5.0]))
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))
    arc_radius: float = 0.4
    arc_degrees: float = 180.0
    jitter_deg: float = 0.5
    light_dir: np.ndarray = field(default_factory=lambda: np.array([-0.4, 0.7, -0.6]))
    ambient: float = 0.35
    background: np.ndarray = field(default_factory=lambda: np.array([0.12, 0.12, 0.14]))
    holdout_every: int = 6
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("eye", "target", "light_dir", "background"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        if not any(not o.transient for o in self.objects):
            raise SceneError("scene needs at least one static object")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids) or min(ids) < 1:
            raise SceneError("object ids must be unique and >= 1")

    @property
    def static_objects(self) -> list[SceneObject]:
        return [o for o in self.objects if not o.transient]

    @property
    def transient_objects(self) -> list[SceneObject]:
        return [o for o in self.objects if o.transient]

    def object(self, instance_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == instance_id:
                return o
        raise KeyError(f"no object with id {instance_id}")

    def categories(self) -> list[str]:
        seen: list[str] = []
        for o in self.objects:
            if o.category not in seen:
                seen.append(o.category)
        return seen

    def extent(self) -> float:
        pts = np.array([o.center for o in self.static_objects])
        return float(max(np.linalg.norm(pts - pts.mean(0), axis=1).max() * 2.0, 1.0))

    def heldout_frames(self) -> list[int]:
        """Equidistant evaluation frames, disjoint from training frames."""
        k = self.holdout_every
        return list(range(k // 2, self.n_frames, k))

    def train_frames(self) -> list[int]:
        held = set(self.heldout_frames())
        return [j for j in range(self.n_frames) if j not in held]

    def cameras(self) -> list[Camera]:
        rng = np.random.default_rng(self.seed)
        jitter = np.radians(self.jitter_deg) * rng.standard_normal((self.n_frames, 2))
        view = self.target - self.eye
        dist = np.linalg.norm(view)
        view /= dist
        e1 = np.cross(view, [0.0, 1.0, 0.0])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(e1, view)
        span = np.radians(self.arc_degrees)
        cams = []
        for j in range(self.n_frames):
            theta = -span / 2 + span * j / max(self.n_frames - 1, 1)
            eye = self.eye + self.arc_radius * (np.cos(theta) * e1 + np.sin(theta) * e2)
            tgt = self.target + dist * (jitter[j, 0] * e1 + jitter[j, 1] * e2)
            cams.append(look_at(eye, tgt, self.width, self.height, self.fov_deg, up=(0.0, 1.0, 0.0)))
        return cams


@dataclass
class GroundTruthFrame:
    index: int
    rgb: np.ndarray  # (H, W, 3) float in [0, 1]
    instance_id: np.ndarray  # (H, W) uint32, 0 = background
    transient_gt: np.ndarray  # (H, W) bool
    camera: Camera


class Visibility(NamedTuple):
    fraction: float
    out_of_view: bool


def _intersect(obj: SceneObject, center: np.ndarray, origin: np.ndarray, dirs: np.ndarray):
    """Nearest positive hit distance and outward normal per ray (inf where missed)."""
    oc = origin - center
    if obj.primitive == "sphere":
        r = obj.size[0]
        if oc @ oc <= r * r:
            raise SceneError("degenerate camera placement")
        b = dirs @ oc
        c = oc @ oc - r * r
        disc = b * b - c
        hit = disc >= 0
        t = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
        t = np.where(t > 0, t, np.inf)
        pts = origin + t[..., None] * dirs
        normals = (pts - center) / r
        return t, normals
    half = np.broadcast_to(obj.size, (3,))
    if np.all(np.abs(oc) < half):
        raise SceneError("degenerate camera placement")
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-half - oc) * inv
        t2 = (half - oc) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    t = np.where(hit, t_near, np.inf)
    axis = np.argmax(tmin, axis=-1)
    normals = np.zeros(dirs.shape)
    sign = -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1))[..., 0]
    np.put_along_axis(normals, axis[..., None], sign[..., None], axis=-1)
    return t, normals


def _cast(spec: SceneSpec, cam: Camera, frame: int, objects: Sequence[SceneObject]):
    origin = cam.center
    dirs = cam.ray_directions()
    h, w = dirs.shape[:2]
    best = np.full((h, w), np.inf)
    ids = np.zeros((h, w), dtype=np.uint32)
    normals = np.zeros((h, w, 3))
    colors = np.zeros((h, w, 3))
    for obj in objects:
        t, n = _intersect(obj, obj.center_at(frame, spec.n_frames), origin, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        ids = np.where(closer, np.uint32(obj.id), ids)
        normals = np.where(closer[..., None], n, normals)
        colors = np.where(closer[..., None], obj.color, colors)
    return ids, normals, colors


def render_frame(spec: SceneSpec, cam: Camera, frame: int) -> GroundTruthFrame:
    ids, normals, colors = _cast(spec, cam, frame, spec.objects)
    light = spec.light_dir / np.linalg.norm(spec.light_dir)
    lambert = np.clip(normals @ light, 0.0, None)
    shade = spec.ambient + (1.0 - spec.ambient) * lambert
    rgb = np.where((ids > 0)[..., None], colors * shade[..., None], spec.background)
    transient_ids = [o.id for o in spec.transient_objects]
    transient = np.isin(ids, transient_ids)
    return GroundTruthFrame(frame, np.clip(rgb, 0.0, 1.0), ids, transient, cam)


def generate(spec: SceneSpec) -> list[GroundTruthFrame]:
    cams = spec.cameras()
    return [render_frame(spec, cams[j], j) for j in range(spec.n_frames)]


def solo_mask(frame: GroundTruthFrame, instance_id: int, spec: SceneSpec) -> np.ndarray:
    """Pixels the instance would cover with every other object removed."""
    ids, _, _ = _cast(spec, frame.camera, frame.index, [spec.object(instance_id)])
    return ids == instance_id


def visibility(frame: GroundTruthFrame, instance_id: int, spec: SceneSpec) -> Visibility:
    solo = solo_mask(frame, instance_id, spec)
    total = int(solo.sum())
    if total == 0:
        return Visibility(0.0, True)
    visible = int(np.count_nonzero(frame.instance_id == instance_id))
    return Visibility(visible / total, False)


def occluders(frame: GroundTruthFrame, instance_id: int, spec: SceneSpec) -> dict[int, int]:
    """Pixel counts of other instances covering this instance's unoccluded footprint."""
    solo = solo_mask(frame, instance_id, spec)
    covering = frame.instance_id[solo]
    covering = covering[(covering != instance_id) & (covering != 0)]
    ids, counts = np.unique(covering, return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}


def default_benchmark_spec(seed: int = 0) -> SceneSpec:
    """5 static + 2 transient objects, 60 frames at 64x64."""
    objects = [
        SceneObject(1, "ball", "sphere", [-1.2, 0.6, 0.3], [0.45], "ball", [0.85, 0.25, 0.2]),
        SceneObject(2, "crate", "box", [1.1, -0.55, 0.4], [0.45, 0.4, 0.4], "crate", [0.25, 0.6, 0.3]),
        SceneObject(3, "globe", "sphere", [0.2, 1.05, 0.8], [0.4], "globe", [0.2, 0.35, 0.85]),
        SceneObject(4, "book", "box", [-0.9, -0.9, 0.0], [0.5, 0.15, 0.35], "book", [0.9, 0.8, 0.3]),
        SceneObject(5, "lamp", "sphere", [0.1, 0.8, -2.5], [0.2], "lamp", [0.8, 0.5, 0.9]),
        # a hand sweeping the lower band, and a cup that rests for most of the clip before being carried off;
        # neither passes in front of a static object, so held-out static masks are what a static model can render
        SceneObject(
            6, "hand", "sphere", [0.0, -1.2, -1.2], [0.3], "hand", [0.95, 0.75, 0.6], transient=True,
            path=[[1.5, -1.2, -1.2], [-0.2, -1.2, -1.2], [-1.6, -1.2, -1.2], [0.3, -1.2, -1.2]],
        ),
        SceneObject(
            7, "cup", "box", [-0.15, 0.1, -0.6], [0.2, 0.25, 0.2], "cup", [0.1, 0.9, 0.9], transient=True,
            path=[[-0.15, 0.1, -0.6]] * 6 + [[0.2, -0.15, -0.6], [0.05, -0.45, -0.6]],
        ),
    ]
    return SceneSpec(objects=objects, seed=seed)


# ----------------------------------------------------------------- text I/O

def _vec(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split()])


def _fmt_vec(v) -> str:
    return " ".join(repr(float(x)) for x in np.atleast_1d(v))


def write_scene_spec(path: str | Path, spec: SceneSpec) -> None:
    cp = configparser.ConfigParser()
    cp["scene"] = {
        "frames": str(spec.n_frames),
        "width": str(spec.width),
        "height": str(spec.height),
        "fov_deg": repr(spec.fov_deg),
        "eye": _fmt_vec(spec.eye),
        "target": _fmt_vec(spec.target),
        "arc_radius": repr(spec.arc_radius),
        "arc_degrees": repr(spec.arc_degrees),
        "jitter_deg": repr(spec.jitter_deg),
        "light_dir": _fmt_vec(spec.light_dir),
        "ambient": repr(spec.ambient),
        "background": _fmt_vec(spec.background),
        "holdout_every": str(spec.holdout_every),
        "seed": str(spec.seed),
    }
    for o in spec.objects:
        sec = {
            "id": str(o.id),
            "primitive": o.primitive,
            "center": _fmt_vec(o.center),
            "size": _fmt_vec(o.size),
            "category": o.category,
            "color": _fmt_vec(o.color),
            "transient": "true" if o.transient else "false",
        }
        if o.path is not None:
            sec["path"] = "; ".join(_fmt_vec(p) for p in o.path)
        cp[f"object.{o.name}"] = sec
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def read_scene_spec(path: str | Path) -> SceneSpec:
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(f"scene spec not found: {path}")
    s = cp["scene"]
    objects = []
    for name in cp.sections():
        if not name.startswith("object."):
            continue
        o = cp[name]
        path_text = o.get("path")
        objects.append(
            SceneObject(
                id=o.getint("id"),
                name=name.split(".", 1)[1],
                primitive=o["primitive"],
                center=_vec(o["center"]),
                size=_vec(o["size"]),
                category=o["category"],
                color=_vec(o["color"]),
                transient=o.getboolean("transient", fallback=False),
                path=None if not path_text else np.array([_vec(p) for p in path_text.split(";")]),
            )
        )
    return SceneSpec(
        objects=objects,
        n_frames=s.getint("frames"),
        width=s.getint("width"),
        height=s.getint("height"),
        fov_deg=s.getfloat("fov_deg"),
        eye=_vec(s["eye"]),
        target=_vec(s["target"]),
        arc_radius=s.getfloat("arc_radius"),
        arc_degrees=s.getfloat("arc_degrees"),
        jitter_deg=s.getfloat("jitter_deg"),
        light_dir=_vec(s["light_dir"]),
        ambient=s.getfloat("ambient"),
        background=_vec(s["background"]),
        holdout_every=s.getint("holdout_every"),
        seed=s.getint("seed"),
    )


def write_frames(directory: str | Path, frames: Sequence[GroundTruthFrame]) -> None:
    directory = Path(directory)
    for fr in frames:
        d = directory / f"frame_{fr.index:04d}"
        d.mkdir(parents=True, exist_ok=True)
        storage.write_ppm(d / "rgb.ppm", fr.rgb)
        storage.write_tensor(d / "rgb.estf", fr.rgb)
        storage.write_tensor(d / "instance_id.estf", fr.instance_id.astype(np.uint32))
        storage.write_tensor(d / "transient_gt.estf", fr.transient_gt.astype(np.uint8))
        storage.write_tensor(d / "camera.estf", fr.camera.as_array())


def read_frames(directory: str | Path) -> list[GroundTruthFrame]:
    directory = Path(directory)
    dirs = sorted(directory.glob("frame_*"))
    if not dirs:
        raise FileNotFoundError(f"missing frames under {directory}")
    frames = []
    for d in dirs:
        frames.append(
            GroundTruthFrame(
                index=int(d.name.split("_")[1]),
                rgb=storage.read_tensor(d / "rgb.estf"),
                instance_id=storage.read_tensor(d / "instance_id.estf"),
                transient_gt=storage.read_tensor(d / "transient_gt.estf").astype(bool),
                camera=Camera.from_array(storage.read_tensor(d / "camera.estf")),
            )
        )
    return frames
