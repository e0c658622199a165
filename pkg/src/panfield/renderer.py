"""Multi-channel volume rendering along rays.

Every channel shares one set of compositing weights: with optical depths
sigma_i * delta_i, alpha_i = 1 - exp(-sigma_i delta_i), transmittance
T_i = exp(-sum_{j<i} sigma_j delta_j) (algebraically the product of the
(1 - alpha_j), computed in sum form for a cheap exact adjoint) and
w_i = T_i alpha_i. A channel composites as C = sum_i w_i f_i where f is
color, the sample depth t_i, semantic logits or instance logits. Residual
transmittance composites a configurable background color into the color
channel; depth stays unnormalized expected termination by default.

Label images take the argmax of the composited logits; rays with opacity
below 0.01 fall back to class/instance 0 (the background slot).
"""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from . import scene as sc
from .diffmath import Var

OPACITY_FLOOR = 0.01  # below this a pixel is background-labeled


@dataclass(eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not self.t_near < self.t_far:
            raise ValueError("ray needs t_near < t_far")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")


@dataclass(eq=False)
class Camera:
    """Pinhole camera; x right, y down, looking along +z in the camera frame.

    rotation/translation are camera-to-world: x_world = R x_cam + t.
    shutter_time is the capture timestamp this camera's image belongs to;
    renders default to it when no explicit time is given.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    shutter_time: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.linalg.norm(self.rotation.T @ self.rotation - np.eye(3)) > 1e-4:
            raise ValueError("camera rotation must be orthonormal")

    def ray_directions(self, pixel_idx=None) -> np.ndarray:
        """World-frame unit directions through pixel centers.

        pixel_idx: flat row-major pixel indices; default all pixels in order.
        """
        if pixel_idx is None:
            pixel_idx = np.arange(self.width * self.height)
        pixel_idx = np.asarray(pixel_idx)
        i = pixel_idx // self.width
        j = pixel_idx % self.width
        d_cam = np.stack([
            (j + 0.5 - self.cx) / self.fx,
            (i + 0.5 - self.cy) / self.fy,
            np.ones_like(i, dtype=np.float64),
        ], axis=-1)
        d_world = d_cam @ self.rotation.T
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "shutter_time": self.shutter_time,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"],
                   d["rotation"], d["translation"], d.get("shutter_time", 0.0))


@dataclass
class RenderedPixel:
    color: np.ndarray
    depth: float
    semantic_logits: np.ndarray
    instance_logits: np.ndarray
    opacity: float
    weights: np.ndarray


@dataclass
class ChannelImages:
    color: np.ndarray       # (H,W,3) float in [0,1]
    depth: np.ndarray       # (H,W) float meters
    semantic: np.ndarray    # (H,W) int class labels
    instance: np.ndarray    # (H,W) int instance ids
    opacity: np.ndarray     # (H,W) float in [0,1]


# ---------------------------------------------------------------------------
# Sampling


def stratified_ts(t_near, t_far, num_rays, n, jitter, rng=None):
    """(num_rays, n) sample positions and (num_rays, n) deltas.

    t_i sits in the i-th of n equal bins: at the midpoint without jitter,
    uniform inside the bin with it. delta_i = t_{i+1} - t_i, and the last
    delta is the residual t_far - t_n.
    """
    if n < 2:
        raise ValueError("need n >= 2 samples per ray")
    width = (t_far - t_near) / n
    starts = t_near + width * np.arange(n)
    if jitter:
        if rng is None:
            rng = np.random.default_rng(0)
        u = rng.random((num_rays, n))
    else:
        u = np.full((num_rays, n), 0.5)
    ts = starts[None, :] + u * width
    deltas = np.empty_like(ts)
    deltas[:, :-1] = ts[:, 1:] - ts[:, :-1]
    deltas[:, -1] = t_far - ts[:, -1]
    return ts, deltas


def sample_points(ray: Ray, n: int, jitter: bool = False, seed: int = 0):
    """Per-ray (t_i, delta_i) pairs; see stratified_ts."""
    ts, deltas = stratified_ts(ray.t_near, ray.t_far, 1, n, jitter,
                               np.random.default_rng(seed))
    return list(zip(ts[0], deltas[0]))


# ---------------------------------------------------------------------------
# Compositing


def composite_arrays(ts, deltas, density, channels: dict, background=None):
    """Batched over-compositing; works on plain arrays and tape Vars alike.

    ts, deltas, density: (R,N). channels: name -> (R,N,C) sample values.
    Returns dict with weights (R,N), opacity (R,), depth (R,) and one (R,C)
    entry per channel; 'color' gets the residual background composite.
    """
    optical = dm.mul(density, deltas)
    alpha = dm.sub(1.0, dm.exp(dm.neg(optical)))
    trans = dm.exp(dm.neg(dm.cumsum_exclusive(optical, axis=-1)))
    w = dm.mul(trans, alpha)
    opacity = dm.reduce_sum(w, axis=-1)
    out = {"weights": w, "opacity": opacity,
           "depth": dm.weighted_reduce(w, ts)}
    for name, f in channels.items():
        comp = dm.weighted_reduce(w, f)
        if name == "color" and background is not None:
            resid = dm.reshape(dm.sub(1.0, opacity), (-1, 1))
            comp = dm.add(comp, dm.mul(resid, np.asarray(background)))
        out[name] = comp
    return out


def composite(samples, background=(0.0, 0.0, 0.0),
              normalize_depth: bool = False) -> RenderedPixel:
    """Single-ray compositing of (t_i, delta_i, PanopticSample) triples."""
    ts = np.array([s[0] for s in samples], dtype=np.float64)
    if np.any(np.diff(ts) < 0):
        raise ValueError("samples must be ordered by t")
    deltas = np.array([s[1] for s in samples], dtype=np.float64)
    density = np.array([s[2].density for s in samples], dtype=np.float64)
    chans = {
        "color": np.stack([s[2].color for s in samples])[None],
        "semantic": np.stack([s[2].semantic_logits for s in samples])[None],
        "instance": np.stack([s[2].instance_logits for s in samples])[None],
    }
    out = composite_arrays(ts[None], deltas[None], density[None], chans,
                           background=background)
    depth = float(out["depth"][0])
    opacity = float(out["opacity"][0])
    if normalize_depth:
        depth = depth / max(opacity, 1e-8)
    return RenderedPixel(out["color"][0], depth, out["semantic"][0],
                         out["instance"][0], opacity, out["weights"][0])


# ---------------------------------------------------------------------------
# Scene rendering


def _scene_channels(scene, pts_flat, dirs_flat, time, alphas,
                    only_instances, include_stuff):
    res = sc.compose_batch(scene, pts_flat, dirs_flat, time, alphas,
                           only_instances=only_instances,
                           include_stuff=include_stuff)
    return res


def render_ray(scene: sc.SceneModel, ray: Ray, time: float, n: int,
               alphas: sc.Alphas | None = None, seed: int = 0,
               jitter: bool = False, background=None,
               normalize_depth: bool = False) -> RenderedPixel:
    """sample_points -> compose -> composite for one ray; seeded and pure."""
    bg = scene.background if background is None else np.asarray(background, dtype=np.float64)
    ts, deltas = stratified_ts(ray.t_near, ray.t_far, 1, n, jitter,
                               np.random.default_rng(seed))
    pts = ray.origin[None, :] + ts[0][:, None] * ray.direction[None, :]
    dirs = np.broadcast_to(ray.direction, (n, 3))
    ch = _scene_channels(scene, pts, dirs, time, alphas, None, True)
    out = composite_arrays(ts, deltas, ch["density"][None],
                           {"color": ch["color"][None],
                            "semantic": ch["semantic"][None],
                            "instance": ch["instance"][None]},
                           background=bg)
    depth = float(out["depth"][0])
    opacity = float(out["opacity"][0])
    if normalize_depth:
        depth = depth / max(opacity, 1e-8)
    return RenderedPixel(out["color"][0], depth, out["semantic"][0],
                         out["instance"][0], opacity, out["weights"][0])


def default_t_range(scene: sc.SceneModel, camera: Camera):
    """Conservative near/far: just in front of the lens to past the far corner."""
    lo, hi = scene.scene_bounds
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    far = float(np.linalg.norm(corners - camera.translation, axis=1).max())
    return 0.05, max(far, 0.1)


def render_image(scene: sc.SceneModel, camera: Camera, time: float | None = None,
                 n: int = 128, alphas: sc.Alphas | None = None, seed: int = 0,
                 jitter: bool = False, t_near: float | None = None,
                 t_far: float | None = None, background=None,
                 only_instances=None, include_stuff: bool = True,
                 normalize_depth: bool = False, threads: int = 1,
                 dtype=np.float64) -> ChannelImages:
    """One ray per pixel center; argmax label grids with the opacity floor.

    Rays are evaluated in chunks written to disjoint output slots, so the
    result is independent of chunk scheduling (threads > 1 included).
    dtype=float32 runs the field math in single precision, roughly halving
    preview latency; quality metrics should stay on the float64 default.
    """
    if time is None:
        time = camera.shutter_time
    h, w = camera.height, camera.width
    bg = scene.background if background is None else np.asarray(background, dtype=np.float64)
    if t_near is None or t_far is None:
        near_d, far_d = default_t_range(scene, camera)
        t_near = near_d if t_near is None else t_near
        t_far = far_d if t_far is None else t_far
    num = h * w
    dirs = camera.ray_directions()
    # all stratified positions drawn up front in pixel order: thread-invariant
    ts, deltas = stratified_ts(t_near, t_far, num, n, jitter,
                               np.random.default_rng(seed))
    origin = camera.translation
    if dtype is not np.float64:
        ts = ts.astype(dtype)
        deltas = deltas.astype(dtype)
        dirs = dirs.astype(dtype)
        origin = origin.astype(dtype)
    n_classes = len(scene.class_table)
    n_slots = scene.instance_slots
    color = np.zeros((num, 3))
    depth = np.zeros(num)
    sem = np.zeros((num, n_classes))
    inst = np.zeros((num, n_slots))
    opac = np.zeros(num)

    chunk = max(1, 65536 // n)

    def run(start):
        stop = min(start + chunk, num)
        m = stop - start
        pts = origin[None, None, :] + ts[start:stop, :, None] * dirs[start:stop, None, :]
        dirs_rep = np.repeat(dirs[start:stop], n, axis=0)
        ch = _scene_channels(scene, pts.reshape(m * n, 3), dirs_rep, time, alphas,
                             only_instances, include_stuff)
        out = composite_arrays(
            ts[start:stop], deltas[start:stop],
            np.asarray(ch["density"]).reshape(m, n),
            {"color": np.asarray(ch["color"]).reshape(m, n, 3),
             "semantic": np.asarray(ch["semantic"]).reshape(m, n, n_classes),
             "instance": np.asarray(ch["instance"]).reshape(m, n, n_slots)},
            background=bg)
        color[start:stop] = out["color"]
        depth[start:stop] = out["depth"]
        sem[start:stop] = out["semantic"]
        inst[start:stop] = out["instance"]
        opac[start:stop] = out["opacity"]

    starts = range(0, num, chunk)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for s in starts:
            run(s)

    if normalize_depth:
        depth = depth / np.maximum(opac, 1e-8)
    sem_label = sem.argmax(axis=-1).astype(np.int32)
    inst_label = inst.argmax(axis=-1).astype(np.int32)
    empty = opac < OPACITY_FLOOR
    sem_label[empty] = 0
    inst_label[empty] = 0
    return ChannelImages(
        color=color.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        semantic=sem_label.reshape(h, w),
        instance=inst_label.reshape(h, w),
        opacity=opac.reshape(h, w),
    )


# ---------------------------------------------------------------------------
# Image files: 8-bit PPM (color), 16-bit PGM (depth, millimeters), 8-bit PGM
# (labels), plus a raw float32 .npz dump for metric computation.


def write_ppm(path, img) -> None:
    img = np.asarray(img)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if not m:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(m.group(i)) for i in (1, 2, 3))
    raw = np.frombuffer(data[m.end():], dtype=np.uint8, count=w * h * 3)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def write_pgm16(path, depth_m) -> None:
    """Depth in meters quantized to millimeters (16-bit big-endian PGM)."""
    mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(mm.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+65535\s", data)
    if not m:
        raise ValueError(f"{path}: not a 16-bit PGM")
    w, h = int(m.group(1)), int(m.group(2))
    raw = np.frombuffer(data[m.end():], dtype=">u2", count=w * h)
    return raw.reshape(h, w).astype(np.float64) / 1000.0


def write_pgm8(path, labels) -> None:
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() > 255:
        raise ValueError("8-bit PGM labels must lie in [0,255]")
    data = lab.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_pgm8(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", data)
    if not m:
        raise ValueError(f"{path}: not an 8-bit PGM")
    w, h = int(m.group(1)), int(m.group(2))
    raw = np.frombuffer(data[m.end():], dtype=np.uint8, count=w * h)
    return raw.reshape(h, w).astype(np.int32)


def save_channels(ci: ChannelImages, out_dir, stem: str, class_table=None) -> dict:
    """Write all channel files for one render; returns the path map."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "color": os.path.join(out_dir, f"{stem}_color.ppm"),
        "depth": os.path.join(out_dir, f"{stem}_depth.pgm"),
        "semantic": os.path.join(out_dir, f"{stem}_semantic.pgm"),
        "instance": os.path.join(out_dir, f"{stem}_instance.pgm"),
        "raw": os.path.join(out_dir, f"{stem}_channels.npz"),
    }
    write_ppm(paths["color"], ci.color)
    write_pgm16(paths["depth"], ci.depth)
    write_pgm8(paths["semantic"], ci.semantic)
    write_pgm8(paths["instance"], ci.instance)
    np.savez(paths["raw"],
             color=ci.color.astype(np.float32),
             depth=ci.depth.astype(np.float32),
             opacity=ci.opacity.astype(np.float32),
             semantic=ci.semantic.astype(np.int32),
             instance=ci.instance.astype(np.int32))
    if class_table is not None:
        paths["labels"] = os.path.join(out_dir, f"{stem}_labels.json")
        with open(paths["labels"], "w") as f:
            json.dump({"class_table": list(class_table)}, f, indent=2)
            f.write("\n")
    return paths


def load_channels(npz_path) -> ChannelImages:
    z = np.load(npz_path)
    return ChannelImages(color=z["color"].astype(np.float64),
                         depth=z["depth"].astype(np.float64),
                         semantic=z["semantic"].astype(np.int32),
                         instance=z["instance"].astype(np.int32),
                         opacity=z["opacity"].astype(np.float64))
