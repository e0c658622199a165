"""Category-level learned initialization for object fields.

A federated-averaging outer loop: K clients each fit a copy of the shared
parameters to posed images of their own object instance with plain SGD, and
the server averages the returned weights. The fixed point is a category
prior that fine-tunes to new instances in far fewer steps than a biased
init, including from a single view.

Clients see objects in the canonical box frame ([-1,1]^3, identity pose),
so no scene composition or pose machinery is involved here: one field, its
own rays, RGB loss only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from . import fields as fl
from . import renderer as rd
from . import synth
from .diffmath import NonFiniteError, ParamVector
from .trainer import _stratified


@dataclass(frozen=True)
class MetaConfig:
    """Outer-loop shape: K clients x E inner epochs of B-ray SGD batches."""

    outer_epochs: int
    clients: int
    inner_epochs: int
    inner_batch: int
    inner_lr: float
    field_config: fl.FieldConfig
    seed: int = 0
    samples_per_ray: int = 32

    def __post_init__(self):
        for name in ("outer_epochs", "clients", "inner_epochs", "inner_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.inner_lr > 0:
            raise ValueError("inner_lr must be > 0")
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")


def _box_interval(origins, dirs, eps=1e-12):
    """Slab intersection of rays with the canonical box; enter >= exit on
    a miss."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    safe = np.where(np.abs(d) < eps, eps, d)
    t_lo = (-1.0 - o) / safe
    t_hi = (1.0 - o) / safe
    enter = np.minimum(t_lo, t_hi).max(axis=1)
    exit_ = np.maximum(t_lo, t_hi).min(axis=1)
    return enter, exit_


class ClientDataset:
    """Posed color images of one object instance in its canonical frame.

    Flattens every observed pixel into one ray bundle up front; rays that
    miss the canonical box keep a stub interval (their samples land outside
    the box, composite to pure background, and contribute zero gradient).
    """

    def __init__(self, instance_id: int, cameras, images,
                 background=(1.0, 1.0, 1.0)):
        if len(cameras) == 0:
            raise ValueError("client dataset needs at least one image")
        if len(cameras) != len(images):
            raise ValueError("one image per camera")
        self.instance_id = int(instance_id)
        self.cameras = list(cameras)
        self.images = [np.asarray(img, dtype=np.float64) for img in images]
        for cam, img in zip(self.cameras, self.images):
            if img.shape != (cam.height, cam.width, 3):
                raise ValueError(f"image shape {img.shape} does not match camera")
        self.background = np.asarray(background, dtype=np.float64).reshape(3)

        origins, dirs, colors = [], [], []
        for cam, img in zip(self.cameras, self.images):
            d = cam.ray_directions()
            origins.append(np.broadcast_to(
                np.asarray(cam.translation, dtype=np.float64), d.shape))
            dirs.append(d)
            colors.append(img.reshape(-1, 3))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.colors = np.concatenate(colors)
        enter, exit_ = _box_interval(self.origins, self.dirs)
        hit = exit_ > np.maximum(enter, 0.0)
        self.t_near = np.where(hit, np.maximum(enter, 1e-3), 0.05)
        self.t_far = np.where(hit, exit_, 1.0)

    @property
    def num_rays(self) -> int:
        return self.origins.shape[0]


@dataclass
class MetaCheckpoint:
    """Averaged field weights for one category plus provenance counters."""

    category: str
    config: fl.FieldConfig
    params: ParamVector
    outer_epochs: int

    def __post_init__(self):
        # Field() re-validates that the layout matches the config
        fl.Field(self.config, fl.THING, self.params)

    def field(self) -> fl.Field:
        return fl.Field(self.config, fl.THING, self.params.copy())

    def save(self, path) -> None:
        fl.save_field(fl.Field(self.config, fl.THING, self.params), path,
                      extra={"category": self.category,
                             "outer_epochs": self.outer_epochs})


def load_checkpoint(path) -> MetaCheckpoint:
    field, extra = fl.load_field(path)
    return MetaCheckpoint(extra["category"], field.config, field.params,
                          int(extra["outer_epochs"]))


def _render_colors(config: fl.FieldConfig, get, origins, dirs, ts, deltas,
                   background):
    """Composite one field over ray samples; points outside the canonical
    box contribute zero density (no MLP evaluation)."""
    r, n = ts.shape
    x = origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]
    flat = x.reshape(-1, 3)
    rows = np.nonzero(np.all(np.abs(flat) <= 1.0, axis=1))[0]
    total = r * n
    if rows.size:
        dtype = np.asarray(dm._data(get("density/b"))).dtype
        pts = flat[rows].astype(dtype)
        drep = np.repeat(dirs, n, axis=0)[rows].astype(dtype)
        x_enc = fl.encode(pts, config.pos_freqs)
        d_enc = fl.encode(drep, config.dir_freqs)
        den, rgb, _ = fl.field_forward(config, get, x_enc, d_enc,
                                       want_semantic=False)
        sigma = dm.reshape(dm.scatter_rows(den, rows, total), (r, n))
        color = dm.reshape(dm.scatter_rows(rgb, rows, total), (r, n, 3))
    else:
        sigma = np.zeros((r, n))
        color = np.zeros((r, n, 3))
    comp = rd.composite_arrays(ts, deltas, sigma, {"color": color},
                               background=background)
    return comp["color"]


def _sgd(theta: ParamVector, config: fl.FieldConfig, data: ClientDataset,
         eta: float, batch: int, rng, samples_per_ray: int,
         epochs: int | None = None, steps: int | None = None,
         where: str = "client"):
    """In-place SGD on theta over shuffled B-ray batches of data.

    Runs `epochs` full passes, or exactly `steps` batches (re-shuffling at
    each pass), whichever is given.
    """
    if (epochs is None) == (steps is None):
        raise ValueError("pass exactly one of epochs/steps")
    done = 0
    epoch = 0
    while True:
        if epochs is not None and epoch >= epochs:
            return theta
        order = rng.permutation(data.num_rays)
        for lo in range(0, data.num_rays, batch):
            if steps is not None and done >= steps:
                return theta
            idx = order[lo:lo + batch]
            ts, deltas = _stratified(data.t_near[idx], data.t_far[idx],
                                     samples_per_ray, rng)
            origins, dirs = data.origins[idx], data.dirs[idx]
            target = data.colors[idx]

            def loss_fn(leaves):
                pred = _render_colors(config, leaves.get, origins, dirs,
                                      ts, deltas, data.background)
                return dm.mse(pred, target)

            loss, grad = dm.forward_backward(loss_fn, theta)
            if not np.isfinite(dm._data(loss)) or not np.all(np.isfinite(grad)):
                raise NonFiniteError(
                    f"non-finite {where} update at batch {done}")
            theta.values -= (eta * grad).astype(theta.values.dtype)
            done += 1
        epoch += 1


def client_update(k: int, theta: ParamVector, data: ClientDataset,
                  inner_epochs: int, inner_batch: int, eta: float,
                  seed=0, samples_per_ray: int = 32) -> ParamVector:
    """E epochs of plain SGD over all B-ray batches of one client's rays,
    starting from a private copy of theta. RGB loss only."""
    out = theta.copy()
    config = _config_for(theta)
    rng = np.random.default_rng(seed)
    return _sgd(out, config, data, eta, inner_batch, rng, samples_per_ray,
                epochs=inner_epochs, where=f"client {k}")


def _config_for(theta: ParamVector) -> fl.FieldConfig:
    """Recover the FieldConfig a thing-role parameter vector belongs to."""
    names = set(theta.names)
    layers = sum(1 for n in names if n.startswith("layer") and n.endswith("/W"))
    w0 = theta.segment("layer0/W")
    width = w0.shape[1]
    pos_dim = w0.shape[0]
    pos_freqs = (pos_dim - 3) // 6
    dir_dim = theta.segment("color0/W").shape[0] - theta.segment("feature/W").shape[1]
    dir_freqs = (dir_dim - 3) // 6
    has_sem = "semantic/W" in names
    num_classes = theta.segment("semantic/W").shape[1] if has_sem else 0
    return fl.FieldConfig(layers, width, pos_freqs, dir_freqs, has_sem,
                          num_classes)


def client_seed(config: MetaConfig, outer_epoch: int, k: int):
    """Deterministic per-(epoch, client) seed stream."""
    return np.random.SeedSequence((config.seed, outer_epoch, k))


def server_update(config: MetaConfig, clients, category: str = "car",
                  log=None, workers: int = 1) -> MetaCheckpoint:
    """FedAvg outer loop: every epoch, all K clients start from the same
    theta_t and the server takes the elementwise mean of their results.

    Clients are independent; workers > 1 runs them on a thread pool (the
    averaging barrier itself stays single-threaded). Results are ordered by
    client index either way, so the outcome is worker-count invariant.
    """
    if len(clients) != config.clients:
        raise ValueError(
            f"expected {config.clients} client datasets, got {len(clients)}")
    theta = fl.init_biased(config.field_config, fl.THING, config.seed).params
    for t in range(config.outer_epochs):
        def one(k, theta=theta, t=t):
            return client_update(k, theta, clients[k], config.inner_epochs,
                                 config.inner_batch, config.inner_lr,
                                 seed=client_seed(config, t, k),
                                 samples_per_ray=config.samples_per_ray)

        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outs = list(pool.map(one, range(config.clients)))
        else:
            outs = [one(k) for k in range(config.clients)]
        # float64 accumulation so the mean is exact to ~1e-12; K=1 stays
        # bit-identical (f32 -> f64 -> f32 round-trips exactly)
        mean = np.mean([o.values.astype(np.float64) for o in outs], axis=0)
        theta = ParamVector(theta.segments, mean.astype(theta.values.dtype))
        if log is not None:
            log(t, theta)
    return MetaCheckpoint(category, config.field_config, theta,
                          config.outer_epochs)


def sparse_view_fit(checkpoint: MetaCheckpoint, views: ClientDataset,
                    steps: int, eta: float = 5e-3, batch: int = 512,
                    seed=0, samples_per_ray: int = 32) -> fl.Field:
    """Fine-tune the meta prior on 1..n posed views of a new instance.

    steps counts SGD batches; 0 returns the prior itself for direct
    rendering.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    theta = checkpoint.params.copy()
    if steps > 0:
        rng = np.random.default_rng(seed)
        _sgd(theta, checkpoint.config, views, eta, batch, rng,
             samples_per_ray, steps=steps, where="sparse fit")
    return fl.Field(checkpoint.config, fl.THING, theta)


def vehicle_client(seed: int, views: int = 12, width: int = 24,
                   height: int = 24, fx: float = 26.0,
                   radius: float = 2.6) -> ClientDataset:
    """Canonical-frame client dataset for one procedurally varied vehicle.

    Stand-in corpus for category-level meta training: each seed draws a
    different body/cabin/wheel geometry and palette from the synthetic
    vehicle generator, rendered analytically from an orbit.
    """
    scene = synth.vehicle_scene(seed)
    cams = synth.orbit_cameras(views, radius=radius, elevation=-0.9,
                               width=width, height=height, fx=fx,
                               target=(0.0, 0.0, 0.0))
    images = [synth.oracle_images(scene, cam).color for cam in cams]
    return ClientDataset(seed, cams, images, background=scene.background)


def render_view(field: fl.Field, camera, background=(1.0, 1.0, 1.0),
                n: int = 64) -> np.ndarray:
    """Deterministic (midpoint-sampled) canonical-frame render of a client
    field, for held-out PSNR evaluation."""
    dirs = camera.ray_directions()
    origins = np.broadcast_to(
        np.asarray(camera.translation, dtype=np.float64), dirs.shape)
    enter, exit_ = _box_interval(origins, dirs)
    hit = exit_ > np.maximum(enter, 0.0)
    t_near = np.where(hit, np.maximum(enter, 1e-3), 0.05)
    t_far = np.where(hit, exit_, 1.0)
    ts, deltas = _stratified(t_near, t_far, n, None)
    colors = _render_colors(field.config, field.params.view, origins, dirs,
                            ts, deltas, np.asarray(background, dtype=np.float64))
    h, w = camera.height, camera.width
    return np.asarray(colors, dtype=np.float64).reshape(h, w, 3)


def dataset_psnr(field: fl.Field, data: ClientDataset, n: int = 32) -> float:
    """PSNR of the field's renders against all of the dataset's views
    (single MSE pooled over every pixel)."""
    renders = np.stack([render_view(field, cam, data.background, n=n)
                        for cam in data.cameras])
    return synth.psnr(renders, np.stack(data.images))


def steps_to_psnr(theta0: ParamVector, config: fl.FieldConfig,
                  data: ClientDataset, threshold: float, eta: float,
                  max_steps: int, check_every: int = 50, batch: int = 256,
                  samples_per_ray: int = 24, seed=0, render_n: int = 32):
    """SGD batches needed before reconstruction PSNR on the fit views
    reaches threshold; None if max_steps was not enough."""
    theta = theta0.copy()
    rng = np.random.default_rng(seed)

    def current():
        return dataset_psnr(fl.Field(config, fl.THING, theta), data, n=render_n)

    if current() >= threshold:
        return 0
    steps = 0
    while steps < max_steps:
        _sgd(theta, config, data, eta, batch, rng, samples_per_ray,
             steps=check_every, where="benchmark fit")
        steps += check_every
        if current() >= threshold:
            return steps
    return None


def convergence_benchmark(checkpoint: MetaCheckpoint, heldout_seeds,
                          threshold: float = 25.0, fit_eta: float = 5.0,
                          max_steps: int = 1500, check_every: int = 50,
                          views: int = 8, width: int = 24, height: int = 24,
                          fx: float = 26.0, seed=0):
    """Head-to-head fits of held-out shapes from the meta prior vs a biased
    init: one record per shape with the step counts to reach the PSNR
    threshold and their ratio."""
    records = []
    for hs in heldout_seeds:
        data = vehicle_client(hs, views=views, width=width, height=height,
                              fx=fx)
        meta = steps_to_psnr(checkpoint.params, checkpoint.config, data,
                             threshold, fit_eta, max_steps,
                             check_every=check_every, seed=seed)
        biased = steps_to_psnr(
            fl.init_biased(checkpoint.config, fl.THING, hs).params,
            checkpoint.config, data, threshold, fit_eta, max_steps,
            check_every=check_every, seed=seed)
        ratio = None if (meta is None or biased is None or biased == 0) \
            else meta / biased
        records.append({"heldout_seed": hs, "threshold": threshold,
                        "steps_meta": meta, "steps_biased": biased,
                        "ratio": ratio})
    return records
