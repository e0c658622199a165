"""Object tracks, world/box transforms, and the panoptic field composition.

A scene is one stuff field plus K things, each thing being a rigid track (an
oriented box extent with keyframed pose) and its own small field. A query
point inside no box is pure stuff with instance one-hot(0); a point inside
boxes takes the raw sum of all containing things' density/color while the
stuff contribution is suppressed by the indicator. Things contribute
density-scaled one-hot semantic and instance vectors, so empty box regions
stay semantically inert.

Box-local coordinates are normalized to [-1,1]^3 by the half extent; that
shared canonical domain is what lets one meta-learned initialization transfer
across instances of different sizes.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from . import fields as fl
from .diffmath import Var, project_so3  # re-exported: projection is a scene-level op
from .fields import Field

__all__ = [
    "ObjectTrack", "Thing", "SceneModel", "PanopticSample", "Alphas",
    "project_so3", "pose_at", "world_to_box", "compose", "compose_batch",
    "clone_thing", "remove_thing", "set_pose", "add_thing",
    "save_scene", "load_scene", "scene_hash",
]


class ObjectTrack:
    """Rigid track of one object: extent plus keyframed (R, t).

    Keyframe timestamps are strictly increasing; every stored rotation is
    SVD-projected on construction so drift can never accumulate on disk.
    """

    def __init__(self, instance_id: int, category: int, extent,
                 times, rotations, translations):
        self.instance_id = int(instance_id)
        self.category = int(category)
        self.extent = np.asarray(extent, dtype=np.float64).reshape(3)
        if np.any(self.extent <= 0):
            raise ValueError("box extent components must be > 0")
        self.times = np.asarray(times, dtype=np.float64).reshape(-1)
        if self.times.size == 0:
            raise ValueError("track needs at least one keyframe")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("keyframe timestamps must be strictly increasing")
        rot = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
        tra = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
        if not (len(rot) == len(tra) == self.times.size):
            raise ValueError("keyframe arrays disagree in length")
        # project drifted matrices; keep already-orthonormal ones bitwise so
        # save/load round-trips (and hashes) are stable
        self.rotations = np.stack([
            r if (np.linalg.norm(r.T @ r - np.eye(3)) < 1e-9 and np.linalg.det(r) > 0)
            else dm.project_so3(r)
            for r in rot
        ])
        self.translations = tra.copy()

    @property
    def num_keyframes(self) -> int:
        return self.times.size

    def copy(self) -> "ObjectTrack":
        return ObjectTrack(self.instance_id, self.category, self.extent,
                           self.times, self.rotations, self.translations)


def _bracket(times: np.ndarray, time: float):
    """(i0, i1, blend a); a is 0 at an exact keyframe or outside the range."""
    if time <= times[0]:
        return 0, 0, 0.0
    if time >= times[-1]:
        i = times.size - 1
        return i, i, 0.0
    i1 = int(np.searchsorted(times, time, side="right"))
    i0 = i1 - 1
    if times[i0] == time:
        return i0, i0, 0.0
    a = (time - times[i0]) / (times[i1] - times[i0])
    return i0, i1, float(a)


def pose_at(track: ObjectTrack, time: float, rot_var=None, trans_var=None):
    """(R, t) at a query time.

    Translation interpolates linearly; rotation blends elementwise and is
    projected back to SO(3). Exact keyframe queries return the stored pose
    without projection; outside the keyframe range the boundary pose holds.
    Passing tape Vars for the full (M,3,3)/(M,3) keyframe stacks makes the
    returned pose differentiable w.r.t. them.
    """
    i0, i1, a = _bracket(track.times, time)
    if rot_var is None:
        if i0 == i1:
            return track.rotations[i0], track.translations[i0]
        r = (1.0 - a) * track.rotations[i0] + a * track.rotations[i1]
        t = (1.0 - a) * track.translations[i0] + a * track.translations[i1]
        return dm.project_so3(r), t
    row = lambda v, i, shape: dm.reshape(dm.gather_rows(v, np.array([i])), shape)
    r0 = row(rot_var, i0, (3, 3))
    t0 = row(trans_var, i0, (3,))
    if i0 == i1:
        return r0, t0
    r1 = row(rot_var, i1, (3, 3))
    t1 = row(trans_var, i1, (3,))
    r = dm.add(dm.mul(r0, 1.0 - a), dm.mul(r1, a))
    t = dm.add(dm.mul(t0, 1.0 - a), dm.mul(t1, a))
    return dm.project_so3(r), t


def world_to_box(track: ObjectTrack, time: float, x_world, d_world):
    """(x_local, d_local, inside): box frame normalized to [-1,1]^3.

    x_local = R^T (x - t) / (s/2); d_local = R^T d renormalized; inside is
    true when every |x_local| component is <= 1.
    """
    r, t = pose_at(track, time)
    half = track.extent / 2.0
    x_local = ((np.asarray(x_world, dtype=np.float64) - t) @ r) / half
    d_local = np.asarray(d_world, dtype=np.float64) @ r
    n = np.linalg.norm(d_local)
    if n > 0:
        d_local = d_local / n
    inside = bool(np.all(np.abs(x_local) <= 1.0))
    return x_local, d_local, inside


# ---------------------------------------------------------------------------
# Scene


class Thing:
    __slots__ = ("track", "field")

    def __init__(self, track: ObjectTrack, field: Field):
        if field.role != fl.THING:
            raise ValueError("thing entry needs a thing-role field")
        self.track = track
        self.field = field


@dataclass
class PanopticSample:
    density: float
    color: np.ndarray
    semantic_logits: np.ndarray
    instance_logits: np.ndarray


@dataclass(frozen=True)
class Alphas:
    """Active encoding band counts per role (position / direction)."""
    stuff_x: float | None = None
    stuff_d: float | None = None
    thing_x: float | None = None
    thing_d: float | None = None


class SceneModel:
    """Stuff field + things + class table: the full panoptic-radiance field."""

    def __init__(self, stuff: Field, things, class_table, scene_bounds,
                 background=(0.0, 0.0, 0.0)):
        if stuff.role != fl.STUFF:
            raise ValueError("scene stuff entry needs a stuff-role field")
        if not stuff.config.has_semantic_head:
            raise ValueError("stuff field must carry the semantic head")
        if stuff.config.num_classes != len(class_table):
            raise ValueError("stuff semantic head width must match the class table")
        ids = [th.track.instance_id for th in things]
        if len(set(ids)) != len(ids):
            raise ValueError("instance ids must be unique")
        if any(i < 1 for i in ids):
            raise ValueError("instance ids start at 1 (0 is the stuff slot)")
        for th in things:
            if not 0 <= th.track.category < len(class_table):
                raise ValueError(f"thing category {th.track.category} outside class table")
        lo, hi = (np.asarray(v, dtype=np.float64).reshape(3) for v in scene_bounds)
        if np.any(lo >= hi):
            raise ValueError("scene bounds must satisfy lo < hi")
        self.stuff = stuff
        self.things = list(things)
        self.class_table = list(class_table)
        self.scene_bounds = (lo, hi)
        self.background = np.asarray(background, dtype=np.float64).reshape(3)

    @property
    def num_things(self) -> int:
        return len(self.things)

    @property
    def instance_slots(self) -> int:
        """Length of the instance-logit vector: slot 0 (stuff) + highest id."""
        return 1 + max((th.track.instance_id for th in self.things), default=0)

    def thing_by_id(self, instance_id: int) -> Thing:
        for th in self.things:
            if th.track.instance_id == instance_id:
                return th
        raise KeyError(f"unknown instance id {instance_id}")

    def copy(self) -> "SceneModel":
        return SceneModel(self.stuff.copy(),
                          [Thing(th.track.copy(), th.field.copy()) for th in self.things],
                          self.class_table, self.scene_bounds, self.background)

    def astype(self, dtype) -> "SceneModel":
        stuff = Field(self.stuff.config, self.stuff.role, self.stuff.params.astype(dtype))
        things = [Thing(th.track.copy(),
                        Field(th.field.config, th.field.role, th.field.params.astype(dtype)))
                  for th in self.things]
        return SceneModel(stuff, things, self.class_table, self.scene_bounds,
                          self.background)


def _acc(total, term):
    return term if total is None else dm.add(total, term)


def compose_batch(scene: SceneModel, x, d, times, alphas: Alphas | None = None,
                  params=None, only_instances=None, include_stuff=True):
    """Panoptic field values at a batch of points.

    x, d: (P,3) world positions / unit view directions. times: scalar or
    (P,) per-point timestamps (points sharing a timestamp share object
    poses). Returns a dict with density (P,), color (P,3), semantic (P,C),
    instance (P,S). With `params` (a name -> Var accessor covering
    "stuff/...", "thing{id}/..." and optionally "track{id}/R", "track{id}/t")
    the outputs are tape Vars; otherwise plain arrays.

    only_instances/include_stuff carve out per-object renders: excluded
    things neither contribute nor suppress stuff.
    """
    alphas = alphas or Alphas()
    x = np.asarray(x)
    d = np.asarray(d)
    p_total = x.shape[0]
    tvals = np.broadcast_to(np.asarray(times, dtype=np.float64), (p_total,))
    uniq_times = np.unique(tvals)
    n_classes = len(scene.class_table)
    n_slots = scene.instance_slots
    dtype = scene.stuff.params.values.dtype

    sigma = color = sem = inst = None
    stuff_mask = np.ones(p_total, dtype=bool)

    for th in scene.things:
        k = th.track.instance_id
        if only_instances is not None and k not in only_instances:
            continue
        cfg = th.field.config
        if params is None:
            get = th.field.params.view
            rv = tv = None
        else:
            get = lambda name, _k=k: params(f"thing{_k}/{name}")
            rv, tv = params(f"track{k}/R"), params(f"track{k}/t")
        inv_half = (2.0 / th.track.extent).astype(np.float64)
        rows_parts, xl_parts, dl_parts = [], [], []
        for tq in uniq_times:
            sel = np.nonzero(tvals == tq)[0]
            r_pose, t_pose = pose_at(th.track, float(tq), rv, tv)
            r_data = np.asarray(dm._data(r_pose), dtype=np.float64)
            t_data = np.asarray(dm._data(t_pose), dtype=np.float64)
            xl_probe = ((x[sel].astype(np.float64) - t_data) @ r_data) * inv_half
            hit = np.all(np.abs(xl_probe) <= 1.0, axis=1)
            rows = sel[hit]
            if rows.size == 0:
                continue
            stuff_mask[rows] = False
            if params is None:
                xl = xl_probe[hit].astype(dtype)
                dl = d[rows].astype(np.float64) @ r_data
                dl = (dl / np.linalg.norm(dl, axis=1, keepdims=True)).astype(dtype)
            else:
                # same transform through tape ops so pose gradients flow
                r_term = r_pose if isinstance(r_pose, Var) else r_data.astype(dtype)
                t_term = dm.reshape(t_pose, (1, 3)) if isinstance(t_pose, Var) \
                    else t_data.astype(dtype).reshape(1, 3)
                rel = dm.sub(x[rows].astype(dtype), t_term)
                xl = dm.mul(dm.matmul(rel, r_term), inv_half.astype(dtype))
                dl = dm.normalize_rows(dm.matmul(d[rows].astype(dtype), r_term))
            rows_parts.append(rows)
            xl_parts.append(xl)
            dl_parts.append(dl)
        if not rows_parts:
            continue
        rows_cat = np.concatenate(rows_parts)
        xl_cat = dm.concat(xl_parts, axis=0) if len(xl_parts) > 1 else xl_parts[0]
        dl_cat = dm.concat(dl_parts, axis=0) if len(dl_parts) > 1 else dl_parts[0]
        x_enc = fl.encode(xl_cat, cfg.pos_freqs, alphas.thing_x)
        d_enc = fl.encode(dl_cat, cfg.dir_freqs, alphas.thing_d)
        den_k, rgb_k, _ = fl.field_forward(cfg, get, x_enc, d_enc, want_semantic=False)
        sigma = _acc(sigma, dm.scatter_rows(den_k, rows_cat, p_total))
        color = _acc(color, dm.scatter_rows(rgb_k, rows_cat, p_total))
        onehot_c = np.zeros(n_classes, dtype=dtype)
        onehot_c[th.track.category] = 1.0
        onehot_i = np.zeros(n_slots, dtype=dtype)
        onehot_i[k] = 1.0
        den_col = dm.reshape(den_k, (-1, 1))
        sem = _acc(sem, dm.scatter_rows(dm.mul(den_col, onehot_c), rows_cat, p_total))
        inst = _acc(inst, dm.scatter_rows(dm.mul(den_col, onehot_i), rows_cat, p_total))

    if include_stuff:
        srows = np.nonzero(stuff_mask)[0]
        if srows.size:
            cfg = scene.stuff.config
            get = scene.stuff.params.view if params is None \
                else (lambda name: params(f"stuff/{name}"))
            # normalize to [-1,1]^3 over the scene bounds; keeps the high
            # encoding bands well-conditioned for desk-scale coordinates
            lo, hi = scene.scene_bounds
            xn = 2.0 * (x[srows].astype(np.float64) - lo) / (hi - lo) - 1.0
            x_enc = fl.encode(xn.astype(dtype), cfg.pos_freqs, alphas.stuff_x)
            d_enc = fl.encode(d[srows].astype(dtype), cfg.dir_freqs, alphas.stuff_d)
            den_s, rgb_s, sem_s = fl.field_forward(cfg, get, x_enc, d_enc,
                                                   want_semantic=True)
            sigma = _acc(sigma, dm.scatter_rows(den_s, srows, p_total))
            color = _acc(color, dm.scatter_rows(rgb_s, srows, p_total))
            sem = _acc(sem, dm.scatter_rows(sem_s, srows, p_total))
            stuff_inst = np.zeros((p_total, n_slots), dtype=dtype)
            stuff_inst[srows, 0] = 1.0  # unscaled one-hot(0) per the indicator case
            inst = _acc(inst, stuff_inst)

    zeros = lambda *shape: np.zeros(shape, dtype=dtype)
    return {
        "density": sigma if sigma is not None else zeros(p_total),
        "color": color if color is not None else zeros(p_total, 3),
        "semantic": sem if sem is not None else zeros(p_total, n_classes),
        "instance": inst if inst is not None else zeros(p_total, n_slots),
    }


def compose(scene: SceneModel, x, d, time: float, alphas: Alphas | None = None) -> PanopticSample:
    """Single-point composition (batch of one); see compose_batch."""
    out = compose_batch(scene, np.asarray(x, dtype=np.float64)[None],
                        np.asarray(d, dtype=np.float64)[None], float(time), alphas)
    return PanopticSample(float(out["density"][0]), out["color"][0],
                          out["semantic"][0], out["instance"][0])


# ---------------------------------------------------------------------------
# Edit primitives (shared by the CLI edit command and the HTTP service)


def clone_thing(scene: SceneModel, src_id: int, dst_id: int) -> SceneModel:
    """New thing with a copied track and bit-identical field parameters."""
    src = scene.thing_by_id(src_id)
    if any(th.track.instance_id == dst_id for th in scene.things) or dst_id < 1:
        raise ValueError(f"destination id {dst_id} already in use or invalid")
    track = src.track.copy()
    track.instance_id = int(dst_id)
    return SceneModel(scene.stuff, scene.things + [Thing(track, src.field.copy())],
                      scene.class_table, scene.scene_bounds, scene.background)


def remove_thing(scene: SceneModel, instance_id: int) -> SceneModel:
    scene.thing_by_id(instance_id)  # raises KeyError when unknown
    kept = [th for th in scene.things if th.track.instance_id != instance_id]
    return SceneModel(scene.stuff, kept, scene.class_table, scene.scene_bounds,
                      scene.background)


def set_pose(scene: SceneModel, instance_id: int, time: float, rotation, translation) -> SceneModel:
    """Replace (exact timestamp match) or insert a keyframe; R is projected."""
    th = scene.thing_by_id(instance_id)
    r = dm.project_so3(np.asarray(rotation, dtype=np.float64).reshape(3, 3))
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    times = th.track.times
    hit = np.nonzero(times == float(time))[0]
    if hit.size:
        i = hit[0]
        new_times = times.copy()
        new_rot = th.track.rotations.copy()
        new_tra = th.track.translations.copy()
        new_rot[i] = r
        new_tra[i] = t
    else:
        i = int(np.searchsorted(times, float(time)))
        new_times = np.insert(times, i, float(time))
        new_rot = np.insert(th.track.rotations, i, r, axis=0)
        new_tra = np.insert(th.track.translations, i, t, axis=0)
    track = ObjectTrack(th.track.instance_id, th.track.category, th.track.extent,
                        new_times, new_rot, new_tra)
    things = [Thing(track, th.field) if t2.track.instance_id == instance_id else t2
              for t2 in scene.things]
    return SceneModel(scene.stuff, things, scene.class_table, scene.scene_bounds,
                      scene.background)


def add_thing(scene: SceneModel, track: ObjectTrack, field: Field) -> SceneModel:
    return SceneModel(scene.stuff, scene.things + [Thing(track, field)],
                      scene.class_table, scene.scene_bounds, scene.background)


# ---------------------------------------------------------------------------
# Scene description file
#
# scene.json: class table, bounds, background, stuff/things with relative
# checkpoint paths. Floats serialize via python repr and round-trip exactly.


def save_scene(scene: SceneModel, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    fl.save_field(scene.stuff, os.path.join(out_dir, "stuff.pfck"))
    things = []
    for th in scene.things:
        k = th.track.instance_id
        ckpt = f"thing_{k}.pfck"
        fl.save_field(th.field, os.path.join(out_dir, ckpt))
        things.append({
            "instance_id": k,
            "category": th.track.category,
            "extent": th.track.extent.tolist(),
            "keyframes": [
                {"time": float(t), "rotation": r.tolist(), "translation": tr.tolist()}
                for t, r, tr in zip(th.track.times, th.track.rotations,
                                    th.track.translations)
            ],
            "checkpoint": ckpt,
        })
    doc = {
        "format": "panfield-scene/1",
        "class_table": scene.class_table,
        "bounds": {"lo": scene.scene_bounds[0].tolist(),
                   "hi": scene.scene_bounds[1].tolist()},
        "background": scene.background.tolist(),
        "stuff": {"checkpoint": "stuff.pfck"},
        "things": things,
    }
    path = os.path.join(out_dir, "scene.json")
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    return path


def load_scene(path) -> SceneModel:
    """Load from a scene.json path or a directory containing one."""
    if os.path.isdir(path):
        path = os.path.join(path, "scene.json")
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "panfield-scene/1":
        raise ValueError("not a scene description file")
    base = os.path.dirname(path)
    stuff, _ = fl.load_field(os.path.join(base, doc["stuff"]["checkpoint"]))
    things = []
    for td in doc["things"]:
        field, _ = fl.load_field(os.path.join(base, td["checkpoint"]))
        kf = td["keyframes"]
        track = ObjectTrack(td["instance_id"], td["category"], td["extent"],
                            [k["time"] for k in kf],
                            [k["rotation"] for k in kf],
                            [k["translation"] for k in kf])
        things.append(Thing(track, field))
    return SceneModel(stuff, things, doc["class_table"],
                      (doc["bounds"]["lo"], doc["bounds"]["hi"]),
                      doc.get("background", (0.0, 0.0, 0.0)))


def scene_hash(scene: SceneModel) -> str:
    """sha256 over the canonical structure plus raw parameter bytes."""
    h = hashlib.sha256()
    struct_doc = {
        "class_table": scene.class_table,
        "bounds": [scene.scene_bounds[0].tolist(), scene.scene_bounds[1].tolist()],
        "background": scene.background.tolist(),
        "things": [
            {
                "instance_id": th.track.instance_id,
                "category": th.track.category,
                "extent": th.track.extent.tolist(),
                "times": th.track.times.tolist(),
                "rotations": th.track.rotations.tolist(),
                "translations": th.track.translations.tolist(),
            }
            for th in sorted(scene.things, key=lambda t: t.track.instance_id)
        ],
    }
    h.update(json.dumps(struct_doc, sort_keys=True).encode())
    h.update(scene.stuff.params.values.astype("<f4").tobytes())
    for th in sorted(scene.things, key=lambda t: t.track.instance_id):
        h.update(th.field.params.values.astype("<f4").tobytes())
    return h.hexdigest()
