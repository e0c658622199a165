"""Joint recovery of field weights and object poses from posed images.

Training is analysis by synthesis: stratified samples along supervised rays
are composed through the scene, volume rendered, and compared against the
captured color and label images. The scalar objective is the mean squared
color error plus a down-scaled softmax cross-entropy on the composited
semantic logits. Gradients of everything (field weights and, optionally, the
per-keyframe box poses) come off one tape, Adam applies the update, and every
touched keyframe rotation is projected back onto SO(3) so poses never drift
off the manifold.

Poses learn at a tenth of the field learning rate: meters and rotation
entries live on different scales than network weights. Rotations are
optimized directly as raw 3x3 entries; the post-step projection keeps them
orthonormal. Box extents and keyframe timestamps are held fixed.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import diffmath as dm
from . import fields as fl
from . import renderer as rd
from . import scene as sc
from .diffmath import NonFiniteError, ParamVector
from .fields import EncodingSchedule
from .renderer import Camera, Ray

__all__ = [
    "TrainConfig", "SupervisionView", "SupervisionSet", "Batch", "LossReport",
    "TrainState", "sample_batch", "batch_loss", "build_param_vector",
    "apply_params", "init_train_state", "train_step", "train",
    "schedule_alphas", "resolve_t_ranges", "supervision_from_dataset",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters.

    schedule None derives a coarse-to-fine encoding warmup over the first
    half of `steps`. checkpoint_every 0 writes only the final checkpoint.
    """
    steps: int
    rays_per_batch: int = 1024
    learning_rate: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    semantic_loss_scale: float = 0.05
    optimize_tracks: bool = False
    schedule: EncodingSchedule | None = None
    seed: int = 0
    samples_per_ray: int = 128
    track_lr_scale: float = 0.1
    report_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.semantic_loss_scale < 0:
            raise ValueError("semantic_loss_scale must be >= 0")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            raise ValueError("adam_epsilon must be > 0")
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if self.track_lr_scale <= 0:
            raise ValueError("track_lr_scale must be > 0")
        if self.report_every < 1:
            raise ValueError("report_every must be >= 1")

    def resolved_schedule(self) -> EncodingSchedule:
        return self.schedule or EncodingSchedule(total_steps=max(self.steps, 1))


@dataclass(eq=False)
class SupervisionView:
    """One posed training image: color plus per-pixel class labels.

    ignore marks pixels excluded from the semantic loss (True = excluded).
    t_near/t_far bound the rays cast through this view; leave None and call
    resolve_t_ranges to fill them from a scene's bounds.
    """
    camera: Camera
    time: float
    color: np.ndarray
    labels: np.ndarray
    ignore: np.ndarray | None = None
    t_near: float | None = None
    t_far: float | None = None

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        h, w = self.camera.height, self.camera.width
        if self.color.shape != (h, w, 3):
            raise ValueError(f"color image shape {self.color.shape} does not match "
                             f"the {h}x{w} camera")
        if self.labels.shape != (h, w):
            raise ValueError(f"label image shape {self.labels.shape} does not match "
                             f"the {h}x{w} camera")
        if self.ignore is not None:
            self.ignore = np.asarray(self.ignore, dtype=bool)
            if self.ignore.shape != (h, w):
                raise ValueError("ignore mask shape does not match the camera")


class SupervisionSet:
    """Non-empty collection of supervision views over one class table."""

    def __init__(self, views, num_classes: int):
        views = list(views)
        if not views:
            raise ValueError("supervision set must contain at least one view")
        for v in views:
            live = v.labels if v.ignore is None else v.labels[~v.ignore]
            if live.size and (live.min() < 0 or live.max() >= num_classes):
                raise ValueError(f"labels must index the {num_classes}-class table")
        self.views = views
        self.num_classes = int(num_classes)

    def __len__(self) -> int:
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    @property
    def total_pixels(self) -> int:
        return int(sum(v.labels.size for v in self.views))


def resolve_t_ranges(sup: SupervisionSet, scene: sc.SceneModel) -> SupervisionSet:
    """Copy of the set with missing ray bounds filled from the scene bounds."""
    views = []
    for v in sup.views:
        if v.t_near is None or v.t_far is None:
            near, far = rd.default_t_range(scene, v.camera)
            v = replace(v, t_near=near if v.t_near is None else v.t_near,
                        t_far=far if v.t_far is None else v.t_far)
        views.append(v)
    return SupervisionSet(views, sup.num_classes)


def supervision_from_dataset(ds) -> SupervisionSet:
    """Supervision views from a synthetic dataset.

    Uses the per-frame supervision labels (corrupted when the dataset was
    generated with label noise), not the clean ground truth; ray bounds come
    from the dataset's scene bounds.
    """
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in ds.bounds)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    views = []
    for f in ds.frames:
        far = float(np.linalg.norm(corners - f.camera.translation, axis=1).max())
        views.append(SupervisionView(f.camera, f.time, f.images.color, f.labels,
                                     t_near=0.05, t_far=max(far, 0.1)))
    return SupervisionSet(views, num_classes=len(ds.class_table))


# ---------------------------------------------------------------------------
# Ray batches


@dataclass(eq=False)
class Batch:
    """A minibatch of supervised rays in draw order.

    Behaves like a list of (ray, time, target color, target label) tuples;
    label is None for ignore-masked pixels. The parallel arrays are what the
    loss actually consumes.
    """
    origins: np.ndarray      # (B,3)
    dirs: np.ndarray         # (B,3) unit
    t_near: np.ndarray       # (B,)
    t_far: np.ndarray        # (B,)
    times: np.ndarray        # (B,)
    colors: np.ndarray       # (B,3)
    labels: np.ndarray       # (B,) int
    sem_mask: np.ndarray     # (B,) bool; False = no semantic target
    view_idx: np.ndarray     # (B,) provenance for diagnostics
    pixel_idx: np.ndarray    # (B,)

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, i):
        ray = Ray(origin=self.origins[i], direction=self.dirs[i],
                  t_near=float(self.t_near[i]), t_far=float(self.t_far[i]))
        label = int(self.labels[i]) if self.sem_mask[i] else None
        return ray, float(self.times[i]), self.colors[i], label


def sample_batch(sup: SupervisionSet, n: int, seed=0) -> Batch:
    """n rays drawn uniformly over all (image, pixel) pairs.

    seed: an int, or a numpy Generator to draw from an ongoing stream (the
    train loop passes its own so batches advance deterministically).
    """
    if n < 1:
        raise ValueError("batch size must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sizes = np.array([v.labels.size for v in sup.views])
    ends = np.cumsum(sizes)
    flat = rng.integers(0, int(ends[-1]), size=n)
    view_idx = np.searchsorted(ends, flat, side="right")
    pixel_idx = flat - (ends[view_idx] - sizes[view_idx])

    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    t_near = np.empty(n)
    t_far = np.empty(n)
    times = np.empty(n)
    colors = np.empty((n, 3))
    labels = np.zeros(n, dtype=np.int64)
    sem_mask = np.ones(n, dtype=bool)
    for vi in np.unique(view_idx):
        v = sup.views[vi]
        if v.t_near is None or v.t_far is None:
            raise ValueError("view is missing ray bounds; resolve_t_ranges first")
        rows = np.nonzero(view_idx == vi)[0]
        p = pixel_idx[rows]
        origins[rows] = v.camera.translation
        dirs[rows] = v.camera.ray_directions(p)
        t_near[rows] = v.t_near
        t_far[rows] = v.t_far
        times[rows] = v.time
        colors[rows] = v.color.reshape(-1, 3)[p]
        labels[rows] = np.asarray(v.labels).reshape(-1)[p]
        if v.ignore is not None:
            sem_mask[rows] = ~v.ignore.reshape(-1)[p]
    return Batch(origins, dirs, t_near, t_far, times, colors, labels, sem_mask,
                 view_idx.astype(np.int64), pixel_idx.astype(np.int64))


def _stratified(t_near, t_far, n: int, rng=None):
    """Stratified sample positions for per-ray (t_near, t_far) arrays.

    Same binning contract as the renderer's stratified_ts, vectorized over
    rays with differing bounds; rng None takes bin midpoints.
    """
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    width = ((t_far - t_near) / n)[:, None]
    u = rng.random((t_near.size, n)) if rng is not None else 0.5
    ts = t_near[:, None] + (np.arange(n) + u) * width
    deltas = np.empty_like(ts)
    deltas[:, :-1] = ts[:, 1:] - ts[:, :-1]
    deltas[:, -1] = t_far - ts[:, -1]
    return ts, deltas


# ---------------------------------------------------------------------------
# Loss


@dataclass(frozen=True)
class LossReport:
    rgb_loss: float
    sem_loss: float
    total: float
    step: int


def _report(rgb, sem, lam: float, step: int) -> LossReport:
    rgb = float(rgb)
    sem = float(sem)
    total = rgb + lam * sem
    if not (np.isfinite(rgb) and np.isfinite(sem) and np.isfinite(total)):
        raise NonFiniteError(
            f"non-finite loss at step {step}: rgb={rgb} sem={sem} total={total}")
    return LossReport(rgb_loss=rgb, sem_loss=sem, total=total, step=int(step))


def _loss_terms(scene: sc.SceneModel, batch: Batch, alphas, params, ts, deltas):
    """(rgb, sem) loss terms; tape Vars when a params accessor is given."""
    r, n = ts.shape
    x = (batch.origins[:, None, :] + ts[:, :, None] * batch.dirs[:, None, :])
    d = np.repeat(batch.dirs, n, axis=0)
    t = np.repeat(batch.times, n)
    out = sc.compose_batch(scene, x.reshape(-1, 3), d, t, alphas, params=params)
    chans = {
        "color": dm.reshape(out["color"], (r, n, 3)),
        "semantic": dm.reshape(out["semantic"], (r, n, len(scene.class_table))),
    }
    # ts/deltas are float64, so the composited comparisons run in float64
    # regardless of the model dtype; targets stay un-cast for the same reason
    comp = rd.composite_arrays(ts, deltas, dm.reshape(out["density"], (r, n)),
                               chans, background=scene.background)
    rgb = dm.mse(comp["color"], batch.colors)
    sem = dm.cross_entropy_mean(comp["semantic"], batch.labels, mask=batch.sem_mask)
    return rgb, sem


def batch_loss(scene: sc.SceneModel, batch: Batch, semantic_loss_scale: float = 0.05,
               alphas: sc.Alphas | None = None, samples_per_ray: int = 128,
               ts=None, deltas=None, step: int = 0) -> LossReport:
    """Forward loss of the scene against one ray batch (no gradients).

    rgb_loss is the mean squared color error over all batch entries and
    channels; sem_loss the mean cross-entropy of composited semantic logits
    over unmasked rays; total = rgb + scale*sem. Explicit ts/deltas override
    the default midpoint sampling (the train loop passes its jittered grid).
    """
    if semantic_loss_scale < 0:
        raise ValueError("semantic_loss_scale must be >= 0")
    if ts is None or deltas is None:
        ts, deltas = _stratified(batch.t_near, batch.t_far, samples_per_ray)
    rgb, sem = _loss_terms(scene, batch, alphas, None, ts, deltas)
    return _report(dm._data(rgb), dm._data(sem), semantic_loss_scale, step)


# ---------------------------------------------------------------------------
# Parameter vector over the whole scene


def build_param_vector(scene: sc.SceneModel, optimize_tracks: bool = False) -> ParamVector:
    """One flat vector over every trainable quantity in the scene.

    Segment names ("stuff/<seg>", "thing<k>/<seg>", "track<k>/R",
    "track<k>/t") are exactly what compose_batch's params accessor resolves,
    so the tape's leaf dict plugs in directly as that accessor.
    """
    dtype = scene.stuff.params.values.dtype
    entries = []
    for name, shape in fl.param_layout(scene.stuff.config, fl.STUFF):
        entries.append((f"stuff/{name}", shape, scene.stuff.params.view(name)))
    for th in scene.things:
        k = th.track.instance_id
        for name, shape in fl.param_layout(th.field.config, fl.THING):
            entries.append((f"thing{k}/{name}", shape, th.field.params.view(name)))
        if optimize_tracks:
            m = th.track.num_keyframes
            entries.append((f"track{k}/R", (m, 3, 3), th.track.rotations))
            entries.append((f"track{k}/t", (m, 3), th.track.translations))
    pv = ParamVector.build([(n, s) for n, s, _ in entries], dtype=dtype)
    for n, _, arr in entries:
        pv.set(n, np.asarray(arr, dtype=dtype))
    return pv


def apply_params(scene: sc.SceneModel, pv: ParamVector) -> sc.SceneModel:
    """Write a combined parameter vector back into the scene, in place."""
    for name, _ in fl.param_layout(scene.stuff.config, fl.STUFF):
        scene.stuff.params.set(name, pv.view(f"stuff/{name}"))
    names = set(pv.names)
    for th in scene.things:
        k = th.track.instance_id
        for name, _ in fl.param_layout(th.field.config, fl.THING):
            th.field.params.set(name, pv.view(f"thing{k}/{name}"))
        if f"track{k}/R" in names:
            th.track = sc.ObjectTrack(
                k, th.track.category, th.track.extent, th.track.times,
                pv.view(f"track{k}/R").astype(np.float64),
                pv.view(f"track{k}/t").astype(np.float64))
    return scene


# ---------------------------------------------------------------------------
# Optimizer


@dataclass(eq=False)
class TrainState:
    """Parameters plus Adam moments; lr_scale carries the per-entry
    learning-rate multiplier (1 for weights, track_lr_scale for poses)."""
    params: ParamVector
    m: np.ndarray
    v: np.ndarray
    t: int
    lr_scale: np.ndarray
    rot_segments: list


def init_train_state(scene: sc.SceneModel, config: TrainConfig) -> TrainState:
    pv = build_param_vector(scene, config.optimize_tracks)
    dtype = pv.values.dtype
    lr_scale = np.ones(pv.size, dtype=dtype)
    rot_segments = []
    for seg in pv.segments:
        if seg.name.startswith("track"):
            lr_scale[seg.offset:seg.offset + seg.size] = config.track_lr_scale
            if seg.name.endswith("/R"):
                rot_segments.append(seg.name)
    return TrainState(pv, np.zeros(pv.size, dtype=dtype),
                      np.zeros(pv.size, dtype=dtype), 0, lr_scale, rot_segments)


def train_step(scene: sc.SceneModel, batch: Batch, config: TrainConfig,
               state: TrainState, alphas: sc.Alphas | None = None,
               ts=None, deltas=None, step: int = 0,
               project_rotations: bool = True) -> LossReport:
    """One gradient step on state.params; scene supplies structure only.

    Raises NonFiniteError (training must halt) on a non-finite loss or
    gradient. After the Adam update every keyframe rotation block is
    projected back onto SO(3); project_rotations=False skips that (ablation
    and instrumentation only, never during real training).
    """
    if ts is None or deltas is None:
        ts, deltas = _stratified(batch.t_near, batch.t_far, config.samples_per_ray)
    lam = config.semantic_loss_scale
    box = {}

    def loss_fn(leaves):
        rgb, sem = _loss_terms(scene, batch, alphas, leaves.get, ts, deltas)
        box["report"] = _report(dm._data(rgb), dm._data(sem), lam, step)
        return dm.add(rgb, dm.mul(sem, lam))

    _, grad = dm.forward_backward(loss_fn, state.params)
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NonFiniteError(f"{bad} non-finite gradient entries at step {step}")

    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.m += (1.0 - b1) * (grad - state.m)
    state.v += (1.0 - b2) * (grad * grad - state.v)
    m_hat = state.m / (1.0 - b1 ** state.t)
    v_hat = state.v / (1.0 - b2 ** state.t)
    state.params.values -= (config.learning_rate * state.lr_scale) * m_hat \
        / (np.sqrt(v_hat) + config.adam_epsilon)
    if project_rotations:
        for name in state.rot_segments:
            rots = state.params.view(name)
            rots[...] = np.stack([dm.project_so3(r.astype(np.float64)) for r in rots])
    return box["report"]


def schedule_alphas(scene: sc.SceneModel, schedule: EncodingSchedule, step: int) -> sc.Alphas:
    """Coarse-to-fine position encoding alphas; direction bands stay full."""
    thing_x = None
    if scene.things:
        thing_x = fl.alpha_at(schedule, step, scene.things[0].field.config.pos_freqs)
    return sc.Alphas(stuff_x=fl.alpha_at(schedule, step, scene.stuff.config.pos_freqs),
                     thing_x=thing_x)


def train(scene: sc.SceneModel, sup: SupervisionSet, config: TrainConfig,
          log_path=None, checkpoint_dir=None):
    """Optimize a copy of the scene against the supervision set.

    Returns (trained scene, list of per-step LossReports). The input scene
    is left untouched. log_path gets one JSON line per report interval
    (step, rgb_loss, sem_loss, total, alpha, wall_ms since the previous
    record); checkpoint_dir gets step-numbered scene snapshots every
    checkpoint_every steps plus a final one. Single-threaded runs with the
    same seed reproduce the loss curve bit-exactly.
    """
    if sup.num_classes != len(scene.class_table):
        raise ValueError("supervision class count does not match the scene class table")
    work = scene.copy()
    if config.steps == 0:
        return work, []
    sup = resolve_t_ranges(sup, work)
    state = init_train_state(work, config)
    schedule = config.resolved_schedule()
    rng = np.random.default_rng(config.seed)
    reports = []
    log_f = open(log_path, "w") if log_path else None
    last_wall = time.perf_counter()
    try:
        for step in range(config.steps):
            alphas = schedule_alphas(work, schedule, step)
            batch = sample_batch(sup, config.rays_per_batch, rng)
            ts, deltas = _stratified(batch.t_near, batch.t_far,
                                     config.samples_per_ray, rng)
            rep = train_step(work, batch, config, state, alphas, ts, deltas, step)
            reports.append(rep)
            if log_f and (step % config.report_every == 0 or step == config.steps - 1):
                now = time.perf_counter()
                log_f.write(json.dumps({
                    "step": rep.step, "rgb_loss": rep.rgb_loss,
                    "sem_loss": rep.sem_loss, "total": rep.total,
                    "alpha": alphas.stuff_x, "wall_ms": (now - last_wall) * 1e3,
                }) + "\n")
                log_f.flush()
                last_wall = now
            if (checkpoint_dir and config.checkpoint_every
                    and (step + 1) % config.checkpoint_every == 0
                    and step + 1 < config.steps):
                apply_params(work, state.params)
                sc.save_scene(work, os.path.join(checkpoint_dir, f"step{step + 1:06d}"))
    finally:
        if log_f:
            log_f.close()
    apply_params(work, state.params)
    if checkpoint_dir:
        sc.save_scene(work, os.path.join(checkpoint_dir, "final"))
    return work, reports
