"""Procedural synthetic scenes with closed-form ground truth, plus metrics.

An AnalyticScene is a handful of constant-density primitives (oriented
boxes, spheres, half-space "ground" slabs), each carrying an albedo, a
semantic category and an instance id (0 marks stuff). Because density is
piecewise constant along any ray, transmittance has a closed form per
primitive interval and oracle_render needs no sampling: it is the exact
integral the sampled renderer converges to, which is what makes these
scenes usable as a verification oracle and a supervision source.

Channel semantics mirror the learned-scene composition rule: primitives
with instance ids >= 1 behave like things (they suppress stuff inside
their volume, raw-sum their density/albedo, and contribute density-scaled
one-hot semantic/instance vectors); id-0 primitives behave like stuff
(unit one-hot instance slot 0, unscaled one-hot class logits).

The metric suite (psnr / miou / panoptic quality) lives here too, next to
the ground truth it consumes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import renderer as rd
from .renderer import Camera, ChannelImages, RenderedPixel
from .scene import ObjectTrack

DATASET_FORMAT = "panfield-dataset/1"


# ---------------------------------------------------------------------------
# Primitives


@dataclass(eq=False)
class Primitive:
    """One constant-density region. kind: "box" | "sphere" | "plane".

    box/sphere carry an ObjectTrack for pose, extent and optional keyframed
    motion (spheres use extent[0] as diameter and ignore rotation). plane is
    the half-space sign*(x[axis]) >= sign*offset, static and always stuff.
    """
    kind: str
    density: float
    albedo: np.ndarray
    category: int
    instance_id: int = 0
    track: ObjectTrack | None = None
    axis: int = 1
    offset: float = 0.0
    positive: bool = True

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if self.density < 0:
            raise ValueError("primitive density must be >= 0")
        if self.kind in ("box", "sphere"):
            if self.track is None:
                raise ValueError(f"{self.kind} primitive needs a track")
        elif self.kind == "plane":
            if self.instance_id != 0:
                raise ValueError("plane primitives are stuff (instance 0)")
            if self.axis not in (0, 1, 2):
                raise ValueError("plane axis must be 0, 1 or 2")
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if self.kind == "sphere":
            e = self.track.extent
            if not (e[0] == e[1] == e[2]):
                raise ValueError("sphere extent must be isotropic")


def box_prim(center, size, density, albedo, category, instance_id=0,
             times=(0.0,), rotations=None, translations=None) -> Primitive:
    """Oriented box; static at `center` unless keyframes are given."""
    times = np.asarray(times, dtype=np.float64)
    if rotations is None:
        rotations = [np.eye(3)] * times.size
    if translations is None:
        translations = [center] * times.size
    track = ObjectTrack(instance_id, category, size, times, rotations, translations)
    return Primitive("box", density, albedo, category, instance_id, track)


def sphere_prim(center, radius, density, albedo, category, instance_id=0,
                times=(0.0,), translations=None) -> Primitive:
    times = np.asarray(times, dtype=np.float64)
    if translations is None:
        translations = [center] * times.size
    track = ObjectTrack(instance_id, category, (2 * radius,) * 3, times,
                        [np.eye(3)] * times.size, translations)
    return Primitive("sphere", density, albedo, category, instance_id, track)


def ground_plane(offset, density, albedo, category, axis=1, positive=True) -> Primitive:
    return Primitive("plane", density, albedo, category, 0, None, axis, offset, positive)


@dataclass(eq=False)
class AnalyticScene:
    primitives: list
    class_table: list
    background: np.ndarray
    bounds: tuple

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        lo, hi = (np.asarray(v, dtype=np.float64).reshape(3) for v in self.bounds)
        if np.any(lo >= hi):
            raise ValueError("bounds must satisfy lo < hi")
        self.bounds = (lo, hi)
        ids = [p.instance_id for p in self.primitives if p.instance_id != 0]
        if len(set(ids)) != len(ids):
            raise ValueError("thing instance ids must be unique")
        for p in self.primitives:
            if not 0 <= p.category < len(self.class_table):
                raise ValueError(f"category {p.category} outside class table")

    @property
    def instance_slots(self) -> int:
        return 1 + max((p.instance_id for p in self.primitives), default=0)

    def to_json(self) -> dict:
        prims = []
        for p in self.primitives:
            d = {"kind": p.kind, "density": p.density,
                 "albedo": p.albedo.tolist(), "category": p.category,
                 "instance_id": p.instance_id}
            if p.track is not None:
                d["track"] = {
                    "extent": p.track.extent.tolist(),
                    "times": p.track.times.tolist(),
                    "rotations": p.track.rotations.tolist(),
                    "translations": p.track.translations.tolist(),
                }
            else:
                d.update(axis=p.axis, offset=p.offset, positive=p.positive)
            prims.append(d)
        return {"primitives": prims, "class_table": list(self.class_table),
                "background": self.background.tolist(),
                "bounds": [self.bounds[0].tolist(), self.bounds[1].tolist()]}

    @classmethod
    def from_json(cls, doc: dict) -> "AnalyticScene":
        prims = []
        for d in doc["primitives"]:
            track = None
            if "track" in d:
                t = d["track"]
                track = ObjectTrack(d["instance_id"], d["category"], t["extent"],
                                    t["times"], t["rotations"], t["translations"])
            prims.append(Primitive(d["kind"], d["density"], d["albedo"],
                                   d["category"], d["instance_id"], track,
                                   d.get("axis", 1), d.get("offset", 0.0),
                                   d.get("positive", True)))
        return cls(prims, doc["class_table"], doc["background"], doc["bounds"])


# ---------------------------------------------------------------------------
# Geometry: ray intervals and point containment (two independent routes)


def primitive_interval(prim: Primitive, origins, dirs, time: float):
    """Per-ray (enter, exit) of the primitive's interior; enter >= exit
    where the ray misses. origins/dirs: (R,3)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    if prim.kind == "plane":
        po = o[:, prim.axis] - prim.offset
        pd = d[:, prim.axis]
        if not prim.positive:
            po, pd = -po, -pd
        # region po + t*pd >= 0
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = -po / pd
        enter = np.where(pd > 0, tc, -np.inf)
        exit_ = np.where(pd < 0, tc, np.inf)
        flat = pd == 0
        enter[flat] = np.where(po[flat] >= 0, -np.inf, np.inf)
        exit_[flat] = np.where(po[flat] >= 0, np.inf, -np.inf)
        return enter, exit_

    from .scene import pose_at
    r_pose, t_pose = pose_at(prim.track, time)
    if prim.kind == "sphere":
        radius = prim.track.extent[0] / 2.0
        oc = o - t_pose
        b = np.sum(oc * d, axis=1)
        disc = b * b - (np.sum(oc * oc, axis=1) - radius * radius)
        root = np.sqrt(np.maximum(disc, 0.0))
        enter = -b - root
        exit_ = np.where(disc >= 0, -b + root, enter)  # miss -> empty
        return enter, exit_

    half = prim.track.extent / 2.0
    ol = (o - t_pose) @ r_pose / half
    dl = d @ r_pose / half
    flat = dl == 0.0
    safe = np.where(flat, 1.0, dl)
    t0 = (-1.0 - ol) / safe
    t1 = (1.0 - ol) / safe
    near_ax = np.minimum(t0, t1)
    far_ax = np.maximum(t0, t1)
    inside_flat = np.abs(ol) <= 1.0
    near_ax[flat] = np.where(inside_flat[flat], -np.inf, np.inf)
    far_ax[flat] = np.where(inside_flat[flat], np.inf, -np.inf)
    return near_ax.max(axis=1), far_ax.min(axis=1)


def primitive_contains(prim: Primitive, pts, time: float):
    """Pointwise interior test, (P,3) -> bool; deliberately a separate code
    path from primitive_interval so the two can cross-check each other."""
    p = np.asarray(pts, dtype=np.float64)
    if prim.kind == "plane":
        v = p[:, prim.axis]
        return v >= prim.offset if prim.positive else v <= prim.offset
    from .scene import pose_at
    r_pose, t_pose = pose_at(prim.track, time)
    if prim.kind == "sphere":
        radius = prim.track.extent[0] / 2.0
        return np.linalg.norm(p - t_pose, axis=1) <= radius
    local = (p - t_pose) @ r_pose / (prim.track.extent / 2.0)
    return np.all(np.abs(local) <= 1.0, axis=1)


def _per_prim_tables(scene: AnalyticScene):
    """Static per-primitive channel rows used by both evaluation routes."""
    n_classes = len(scene.class_table)
    n_slots = scene.instance_slots
    k = len(scene.primitives)
    dens = np.zeros(k)
    col = np.zeros((k, 3))
    sem = np.zeros((k, n_classes))
    inst = np.zeros((k, n_slots))
    is_thing = np.zeros(k, dtype=bool)
    for i, p in enumerate(scene.primitives):
        dens[i] = p.density
        col[i] = p.albedo
        if p.instance_id >= 1:
            is_thing[i] = True
            sem[i, p.category] = p.density  # density-scaled one-hot
            inst[i, p.instance_id] = p.density
        else:
            sem[i, p.category] = 1.0  # stuff logits: plain one-hot
    return dens, col, sem, inst, is_thing


def _channels_from_active(scene, active):
    """active: (..., K) coverage -> density/color/semantic/instance values.

    Applies stuff suppression (any covering thing mutes all stuff rows) and
    the always-on stuff instance slot 0 outside things.
    """
    dens, col, sem, inst, is_thing = _per_prim_tables(scene)
    act = np.asarray(active, dtype=np.float64)
    if is_thing.any():
        thing_cover = np.asarray(active)[..., is_thing].any(axis=-1)
    else:
        thing_cover = np.zeros(act.shape[:-1], dtype=bool)
    stuff_open = ~thing_cover
    act = act * np.where(is_thing, 1.0, stuff_open[..., None])
    out = {
        "density": act @ dens,
        "color": act @ col,
        "semantic": act @ sem,
        "instance": act @ inst,
    }
    out["instance"][..., 0] += stuff_open  # unscaled slot 0 wherever stuff rules
    return out


def eval_points(scene: AnalyticScene, pts, time: float):
    """Pointwise field values; the sampled-rendering route over this scene."""
    p = np.asarray(pts, dtype=np.float64)
    active = np.stack([primitive_contains(pr, p, time)
                       for pr in scene.primitives], axis=-1) \
        if scene.primitives else np.zeros((p.shape[0], 0), dtype=bool)
    return _channels_from_active(scene, active)


# ---------------------------------------------------------------------------
# Closed-form rendering


def oracle_render_batch(scene: AnalyticScene, origins, dirs, time: float,
                        t_near: float, t_far: float):
    """Exact per-interval integration; no sampling anywhere.

    Breakpoints are every primitive entry/exit clipped to [t_near, t_far].
    Between breakpoints the total density is constant, so each interval
    contributes T(a)(1-e^(-sigma L)) of mass with closed-form depth moment
    T(a)[a(1-E) + (1-E(1+sigma L))/sigma], E = e^(-sigma L).
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    num = o.shape[0]
    k = len(scene.primitives)
    if k:
        pairs = [primitive_interval(p, o, d, time) for p in scene.primitives]
        enters = np.stack([np.clip(e, t_near, t_far) for e, _ in pairs], axis=1)
        exits = np.stack([np.clip(x, t_near, t_far) for _, x in pairs], axis=1)
        exits = np.maximum(exits, enters)
        bp = np.sort(np.concatenate([
            np.full((num, 1), t_near), enters, exits, np.full((num, 1), t_far),
        ], axis=1), axis=1)
    else:
        enters = np.zeros((num, 0))
        exits = np.zeros((num, 0))
        bp = np.stack([np.full(num, t_near), np.full(num, t_far)], axis=1)
    a = bp[:, :-1]
    length = bp[:, 1:] - a
    mid = a + 0.5 * length
    if k:
        active = (enters[:, None, :] <= mid[:, :, None]) & (mid[:, :, None] < exits[:, None, :])
    else:
        active = np.zeros(mid.shape + (0,), dtype=bool)
    ch = _channels_from_active(scene, active)
    sigma = ch["density"]
    tau = sigma * length
    t_a = np.exp(-np.concatenate([np.zeros((num, 1)), np.cumsum(tau, axis=1)[:, :-1]], axis=1))
    one_m_e = -np.expm1(-tau)
    mass = t_a * one_m_e
    opacity = -np.expm1(-tau.sum(axis=1))
    with np.errstate(invalid="ignore"):
        tail = np.where(sigma > 0,
                        (one_m_e - tau * np.exp(-tau)) / np.where(sigma > 0, sigma, 1.0),
                        0.0)
    depth = (t_a * (a * one_m_e + tail)).sum(axis=1)
    color = (mass[..., None] * ch["color"]).sum(axis=1) \
        + (1.0 - opacity)[:, None] * scene.background
    semantic = (mass[..., None] * ch["semantic"]).sum(axis=1)
    instance = (mass[..., None] * ch["instance"]).sum(axis=1)
    return {"opacity": opacity, "depth": depth, "color": color,
            "semantic": semantic, "instance": instance}


def oracle_render(scene: AnalyticScene, ray: rd.Ray, time: float) -> RenderedPixel:
    out = oracle_render_batch(scene, ray.origin[None], ray.direction[None],
                              time, ray.t_near, ray.t_far)
    return RenderedPixel(out["color"][0], float(out["depth"][0]),
                         out["semantic"][0], out["instance"][0],
                         float(out["opacity"][0]), np.zeros(0))


def render_ray_sampled(scene: AnalyticScene, ray: rd.Ray, time: float, n: int,
                       jitter: bool = False, seed: int = 0) -> RenderedPixel:
    """Stratified sampling + compositing over the analytic fields: the
    discretization the oracle's closed form is the limit of."""
    ts, deltas = rd.stratified_ts(ray.t_near, ray.t_far, 1, n, jitter,
                                  np.random.default_rng(seed))
    pts = ray.origin[None, :] + ts[0][:, None] * ray.direction[None, :]
    ch = eval_points(scene, pts, time)
    out = rd.composite_arrays(ts, deltas, ch["density"][None],
                              {"color": ch["color"][None],
                               "semantic": ch["semantic"][None],
                               "instance": ch["instance"][None]},
                              background=scene.background)
    return RenderedPixel(out["color"][0], float(out["depth"][0]),
                         out["semantic"][0], out["instance"][0],
                         float(out["opacity"][0]), out["weights"][0])


def default_t_range(scene: AnalyticScene, camera: Camera):
    lo, hi = scene.bounds
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    far = float(np.linalg.norm(corners - camera.translation, axis=1).max())
    return 0.05, max(far, 0.1)


def oracle_images(scene: AnalyticScene, camera: Camera,
                  time: float | None = None) -> ChannelImages:
    """Exact ground-truth channel images for one camera."""
    if time is None:
        time = camera.shutter_time
    t_near, t_far = default_t_range(scene, camera)
    dirs = camera.ray_directions()
    origins = np.broadcast_to(camera.translation, dirs.shape)
    out = oracle_render_batch(scene, origins, dirs, time, t_near, t_far)
    h, w = camera.height, camera.width
    sem = out["semantic"].argmax(axis=-1).astype(np.int32)
    inst = out["instance"].argmax(axis=-1).astype(np.int32)
    empty = out["opacity"] < rd.OPACITY_FLOOR
    sem[empty] = 0
    inst[empty] = 0
    return ChannelImages(color=out["color"].reshape(h, w, 3),
                         depth=out["depth"].reshape(h, w),
                         semantic=sem.reshape(h, w),
                         instance=inst.reshape(h, w),
                         opacity=out["opacity"].reshape(h, w))


# ---------------------------------------------------------------------------
# Datasets


@dataclass(eq=False)
class Frame:
    camera: Camera
    time: float
    images: ChannelImages   # clean oracle ground truth
    labels: np.ndarray      # supervision labels; corrupted when rho > 0


@dataclass(eq=False)
class Dataset:
    frames: list
    class_table: list
    background: np.ndarray
    bounds: tuple
    scene_json: dict | None = None
    corrupt_rho: float = 0.0
    seed: int = 0


def generate_dataset(scene: AnalyticScene, cameras, seed: int = 0,
                     corrupt_rho: float = 0.0) -> Dataset:
    """Oracle-render every camera at its shutter time; optionally flip each
    supervision label to a uniformly random other class with prob rho."""
    rng = np.random.default_rng(seed)
    n_classes = len(scene.class_table)
    frames = []
    for cam in cameras:
        img = oracle_images(scene, cam)
        labels = img.semantic.copy()
        if corrupt_rho > 0:
            flip = rng.random(labels.shape) < corrupt_rho
            bump = rng.integers(1, n_classes, size=labels.shape)
            labels = np.where(flip, (labels + bump) % n_classes, labels)
        frames.append(Frame(cam, cam.shutter_time, img, labels.astype(np.int32)))
    return Dataset(frames, list(scene.class_table), scene.background.copy(),
                   scene.bounds, scene.to_json(), corrupt_rho, seed)


def write_dataset(ds: Dataset, out_dir) -> None:
    frame_dir = os.path.join(out_dir, "frames")
    os.makedirs(frame_dir, exist_ok=True)
    entries = []
    for i, fr in enumerate(ds.frames):
        stem = f"frame{i:03d}"
        rd.save_channels(fr.images, frame_dir, stem, class_table=None)
        rd.write_pgm8(os.path.join(frame_dir, f"{stem}_sup.pgm"), fr.labels)
        entries.append({"camera": fr.camera.to_json(), "time": fr.time,
                        "stem": stem})
    manifest = {
        "format": DATASET_FORMAT,
        "class_table": ds.class_table,
        "background": ds.background.tolist(),
        "bounds": [ds.bounds[0].tolist(), ds.bounds[1].tolist()],
        "corrupt_rho": ds.corrupt_rho,
        "seed": ds.seed,
        "scene": ds.scene_json,
        "frames": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_dataset(path) -> Dataset:
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    frames = []
    for e in manifest["frames"]:
        stem = e["stem"]
        frame_dir = os.path.join(path, "frames")
        images = rd.load_channels(os.path.join(frame_dir, f"{stem}_channels.npz"))
        labels = rd.read_pgm8(os.path.join(frame_dir, f"{stem}_sup.pgm"))
        frames.append(Frame(Camera.from_json(e["camera"]), e["time"], images, labels))
    return Dataset(frames, manifest["class_table"],
                   np.asarray(manifest["background"]),
                   tuple(np.asarray(b) for b in manifest["bounds"]),
                   manifest.get("scene"), manifest.get("corrupt_rho", 0.0),
                   manifest.get("seed", 0))


# ---------------------------------------------------------------------------
# Canonical test scenes


KITTI_MICRO_CLASSES = ["sky", "road", "building", "pole", "car"]


def kitti_micro():
    """Street-in-a-shoebox: ground + building + pole + two moving cars,
    16 cameras strafing along x with timestamps spread over [0, 1].

    World frame: x right, y down, z forward. Cars subtend roughly 35x16
    pixels at 64x48; they pass each other near t = 0.54.
    """
    def rot_y(deg):
        a = np.deg2rad(deg)
        return np.array([[np.cos(a), 0.0, np.sin(a)],
                         [0.0, 1.0, 0.0],
                         [-np.sin(a), 0.0, np.cos(a)]])

    prims = [
        ground_plane(1.5, 12.0, (0.42, 0.40, 0.38), category=1),
        box_prim((4.0, -1.5, 15.0), (10.0, 6.0, 2.0), 12.0,
                 (0.66, 0.55, 0.45), category=2),
        box_prim((2.5, 0.6, 5.0), (0.3, 1.8, 0.3), 14.0,
                 (0.25, 0.26, 0.28), category=3),
        box_prim(None, (3.5, 1.6, 1.8), 10.0, (0.75, 0.15, 0.10),
                 category=4, instance_id=1, times=(0.0, 1.0),
                 translations=[(0.5, 0.7, 6.0), (6.5, 0.7, 6.0)]),
        box_prim(None, (3.5, 1.6, 1.8), 10.0, (0.15, 0.25, 0.70),
                 category=4, instance_id=2, times=(0.0, 1.0),
                 rotations=[rot_y(4.0), rot_y(-4.0)],
                 translations=[(7.0, 0.7, 9.5), (1.0, 0.7, 9.5)]),
    ]
    scene = AnalyticScene(prims, KITTI_MICRO_CLASSES, (0.55, 0.72, 0.92),
                          ((-3.0, -6.0, -1.0), (11.0, 2.01, 19.0)))
    cameras = [
        Camera(fx=60.0, fy=60.0, cx=32.0, cy=24.0, width=64, height=48,
               rotation=np.eye(3), translation=(0.5 * i, 0.0, 0.0),
               shutter_time=i / 15.0)
        for i in range(16)
    ]
    return scene, cameras


def look_at(eye, target, down=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world rotation with +z toward target, +y near world-down."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("view direction parallel to the down hint")
    x = x / nx
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def orbit_cameras(num, radius=3.2, elevation=-0.9, width=32, height=32,
                  fx=38.0, target=(0.0, 0.0, 0.0), times=None):
    """Ring of inward-looking cameras around the origin (y-down world)."""
    cams = []
    for i in range(num):
        ang = 2 * np.pi * i / num
        eye = np.array([radius * np.cos(ang), elevation, radius * np.sin(ang)])
        t = 0.0 if times is None else times[i]
        cams.append(Camera(fx=fx, fy=fx, cx=width / 2, cy=height / 2,
                           width=width, height=height,
                           rotation=look_at(eye, target),
                           translation=eye, shutter_time=t))
    return cams


def vehicle_scene(seed: int) -> AnalyticScene:
    """One random car-ish shape (body box + cabin + wheel blobs) in the
    canonical [-1,1]^3 frame; the meta-learning corpus unit."""
    rng = np.random.default_rng(seed)
    body = np.array([rng.uniform(1.5, 1.9), rng.uniform(0.5, 0.7),
                     rng.uniform(0.75, 0.95)])
    body_c = np.array([0.0, 0.45 - body[1] / 2, 0.0])  # wheels rest near y=0.45
    cabin = body * np.array([rng.uniform(0.45, 0.6), rng.uniform(0.7, 0.95),
                             rng.uniform(0.8, 0.95)])
    cabin_c = body_c + np.array([rng.uniform(-0.25, 0.05),
                                 -(body[1] + cabin[1]) / 2, 0.0])
    hue = rng.uniform(0.15, 0.9, 3)
    hue = hue / hue.max()
    prims = [
        box_prim(body_c, body, 25.0, hue, category=0, instance_id=1),
        box_prim(cabin_c, cabin, 25.0, hue * 0.75, category=0, instance_id=2),
    ]
    wheel_r = rng.uniform(0.14, 0.2)
    for sx in (-1, 1):
        for sz in (-1, 1):
            c = (sx * body[0] * 0.36, 0.45 + wheel_r / 2, sz * body[2] / 2)
            prims.append(sphere_prim(c, wheel_r, 25.0, (0.08, 0.08, 0.09),
                                     category=0, instance_id=len(prims) + 1))
    return AnalyticScene(prims, ["car"], (1.0, 1.0, 1.0),
                         ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)))


# ---------------------------------------------------------------------------
# Metrics


def psnr(a, b) -> float:
    """10 log10(1/MSE) for [0,1] images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))


def iou_per_class(pred, gt, num_classes: int) -> dict:
    """Intersection/union for every class present in gt."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    out = {}
    for c in range(num_classes):
        gm = gt == c
        if not gm.any():
            continue
        pm = pred == c
        union = np.logical_or(gm, pm).sum()
        out[c] = float(np.logical_and(gm, pm).sum() / union)
    return out

def miou(pred, gt, num_classes: int) -> float:
    per = iou_per_class(pred, gt, num_classes)
    return float(np.mean(list(per.values()))) if per else 0.0


@dataclass
class PQResult:
    pq: float
    sq: float
    rq: float
    per_class: dict

    def __iter__(self):
        return iter((self.pq, self.sq, self.rq))


def _segments(sem, inst, thing_classes, num_classes):
    segs = {}
    for c in range(num_classes):
        cm = sem == c
        if not cm.any():
            continue
        if c in thing_classes:
            for i in np.unique(inst[cm]):
                segs[(c, int(i))] = cm & (inst == i)
        else:
            segs[(c, 0)] = cm
    return segs


def panoptic_quality(pred_sem, pred_inst, gt_sem, gt_inst, thing_classes,
                     num_classes: int) -> PQResult:
    """Segments matched at IoU > 0.5 (provably unique); stuff classes are a
    single segment each. pq/sq/rq pooled over classes so pq = sq*rq holds
    exactly; the per-class table carries the same decomposition per class.
    """
    if np.asarray(pred_sem).shape != np.asarray(gt_sem).shape:
        raise ValueError("label image shapes differ")
    thing_classes = set(thing_classes)
    pred = _segments(np.asarray(pred_sem), np.asarray(pred_inst),
                     thing_classes, num_classes)
    gt = _segments(np.asarray(gt_sem), np.asarray(gt_inst),
                   thing_classes, num_classes)
    per_class = {}
    tot_iou, tot_tp, tot_fp, tot_fn = 0.0, 0, 0, 0
    classes = sorted({c for c, _ in pred} | {c for c, _ in gt})
    for c in classes:
        pc = {k: v for k, v in pred.items() if k[0] == c}
        gc = {k: v for k, v in gt.items() if k[0] == c}
        matched_pred = set()
        ious = []
        for gk, gmask in gc.items():
            hit = None
            for pk, pmask in pc.items():
                inter = np.logical_and(gmask, pmask).sum()
                if inter == 0:
                    continue
                iou = inter / np.logical_or(gmask, pmask).sum()
                if iou > 0.5:
                    assert hit is None, "IoU > 0.5 matches must be unique"
                    assert pk not in matched_pred, "predicted segment matched twice"
                    hit = (pk, iou)
            if hit is not None:
                matched_pred.add(hit[0])
                ious.append(hit[1])
        tp = len(ious)
        fp = len(pc) - len(matched_pred)
        fn = len(gc) - tp
        denom = tp + 0.5 * fp + 0.5 * fn
        c_pq = sum(ious) / denom if denom else 0.0
        c_sq = sum(ious) / tp if tp else 0.0
        c_rq = tp / denom if denom else 0.0
        per_class[c] = {"pq": c_pq, "sq": c_sq, "rq": c_rq,
                        "tp": tp, "fp": fp, "fn": fn}
        tot_iou += sum(ious)
        tot_tp += tp
        tot_fp += fp
        tot_fn += fn
    denom = tot_tp + 0.5 * tot_fp + 0.5 * tot_fn
    pq = tot_iou / denom if denom else 0.0
    sq = tot_iou / tot_tp if tot_tp else 0.0
    rq = tot_tp / denom if denom else 0.0
    return PQResult(pq, sq, rq, per_class)


@dataclass
class MetricReport:
    psnr: float
    miou: float
    pq: float
    sq: float
    rq: float
    per_class: dict


def evaluate_channels(pred: ChannelImages, gt: ChannelImages, thing_classes,
                      num_classes: int) -> MetricReport:
    pqr = panoptic_quality(pred.semantic, pred.instance, gt.semantic,
                           gt.instance, thing_classes, num_classes)
    return MetricReport(psnr=psnr(pred.color, gt.color),
                        miou=miou(pred.semantic, gt.semantic, num_classes),
                        pq=pqr.pq, sq=pqr.sq, rq=pqr.rq,
                        per_class={"iou": iou_per_class(pred.semantic, gt.semantic,
                                                        num_classes),
                                   "pq": pqr.per_class})
