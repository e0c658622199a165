"""Interactive scene editing: pure edit operations, an HTTP service over a
trained scene, and the offline script/replay tooling the CLI uses.

Concurrency follows a snapshot-swap discipline: renders read an immutable
(scene, cache) pair, edits build a new scene copy under a single writer
lock and swap the pair atomically. A render that raced an edit therefore
sees entirely pre-edit or entirely post-edit state, never a mixture, and
cache entries can never leak across scene states.
"""

from __future__ import annotations

import base64
import colorsys
import hashlib
import io
import json
import os
import threading

import numpy as np

from . import fields as fl
from . import renderer as rd
from . import scene as sc
from . import synth

EDIT_OPS = ("clone", "set-pose", "remove", "add")
RENDER_CHANNELS = ("color", "depth", "semantic", "instance")


class EmptyLog(Exception):
    """Undo requested with nothing to undo."""


# ---------------------------------------------------------------------------
# Pure edit operations (thin op-dict layer over the scene edit primitives)


def _track_from_json(doc: dict) -> sc.ObjectTrack:
    kf = doc["keyframes"]
    if not kf:
        raise ValueError("track needs at least one keyframe")
    return sc.ObjectTrack(int(doc["instance_id"]), int(doc["category"]),
                          doc["extent"],
                          [k["time"] for k in kf],
                          [k["rotation"] for k in kf],
                          [k["translation"] for k in kf])


def _track_json(track: sc.ObjectTrack) -> dict:
    return {
        "instance_id": track.instance_id,
        "category": track.category,
        "extent": track.extent.tolist(),
        "keyframes": [
            {"time": float(t), "rotation": r.tolist(),
             "translation": tr.tolist()}
            for t, r, tr in zip(track.times, track.rotations,
                                track.translations)
        ],
    }


def apply_edit(model: sc.SceneModel, op: dict) -> sc.SceneModel:
    """One op dict applied through the scene edit primitives.

    Returns a new model sharing untouched components with the input; the
    input itself is never mutated. Raises KeyError("unknown instance id N")
    for a missing target and ValueError for anything malformed.
    """
    kind = op.get("op")
    try:
        if kind == "clone":
            return sc.clone_thing(model, int(op["src"]), int(op["dst"]))
        if kind == "set-pose":
            rotation = np.asarray(op["rotation"], dtype=np.float64)
            translation = np.asarray(op["translation"], dtype=np.float64)
            if rotation.shape != (3, 3) or translation.shape != (3,):
                raise ValueError("set-pose expects a 3x3 rotation and a "
                                 "3-vector translation")
            return sc.set_pose(model, int(op["id"]), float(op["time"]),
                               rotation, translation)
        if kind == "remove":
            return sc.remove_thing(model, int(op["id"]))
        if kind == "add":
            track = _track_from_json(op["track"])
            if any(th.track.instance_id == track.instance_id
                   for th in model.things) or track.instance_id < 1:
                raise ValueError(f"instance id {track.instance_id} "
                                 "already in use or invalid")
            if not 0 <= track.category < len(model.class_table):
                raise ValueError(f"category {track.category} outside "
                                 "class table")
            blob = op.get("field_bytes")
            if blob is None:
                blob = base64.b64decode(op["field_b64"])
            field, _ = fl.load_field_bytes(blob)
            if field.role != fl.THING:
                raise ValueError("add expects a thing field checkpoint")
            return sc.add_thing(model, track, field)
    except KeyError as e:
        # a missing op field is a malformed request, not an unknown target
        if e.args and isinstance(e.args[0], str) and "instance id" in e.args[0]:
            raise
        raise ValueError(f"edit op missing field {e}")
    raise ValueError(f"unknown edit op {kind!r}")


def replay_log(base: sc.SceneModel, ops) -> sc.SceneModel:
    """Fold a list of edit ops over the base scene."""
    model = base
    for op in ops:
        model = apply_edit(model, op)
    return model


def parse_edit_script(text: str, base_dir: str = "") -> list:
    """Edit ops from script text, one per line, # comments allowed:

        clone SRC_ID DST_ID
        set-pose ID TIME r11,r12,r13,r21,...,r33,tx,ty,tz
        remove ID
        add TRACK_JSON_FILE FIELD_CHECKPOINT_FILE

    File arguments resolve relative to base_dir; the checkpoint is inlined
    base64 so the resulting ops are self-contained and JSON-serializable.
    """
    ops = []
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "clone" and len(parts) == 3:
                op = {"op": "clone", "src": int(parts[1]), "dst": int(parts[2])}
            elif parts[0] == "set-pose" and len(parts) == 4:
                vals = [float(v) for v in parts[3].split(",")]
                if len(vals) != 12:
                    raise ValueError("set-pose takes 12 comma-separated "
                                     "numbers: row-major R, then t")
                op = {"op": "set-pose", "id": int(parts[1]),
                      "time": float(parts[2]),
                      "rotation": [vals[0:3], vals[3:6], vals[6:9]],
                      "translation": vals[9:12]}
            elif parts[0] == "remove" and len(parts) == 2:
                op = {"op": "remove", "id": int(parts[1])}
            elif parts[0] == "add" and len(parts) == 3:
                with open(os.path.join(base_dir, parts[1])) as f:
                    track = json.load(f)
                with open(os.path.join(base_dir, parts[2]), "rb") as f:
                    blob = f.read()
                op = {"op": "add", "track": track,
                      "field_b64": base64.b64encode(blob).decode("ascii")}
            else:
                raise ValueError(f"unrecognized edit op {line!r}")
        except ValueError as e:
            raise ValueError(f"script line {ln}: {e}")
        op["line"] = ln
        ops.append(op)
    return ops


# ---------------------------------------------------------------------------
# Render channel encoding


def _label_palette() -> bytes:
    """256-entry RGB palette: 0 black, then well-separated hues."""
    flat = [0, 0, 0]
    for i in range(1, 256):
        r, g, b = colorsys.hsv_to_rgb((i * 0.61803398875) % 1.0, 0.65, 0.95)
        flat += [int(r * 255), int(g * 255), int(b * 255)]
    return bytes(flat)


_PALETTE = _label_palette()


def _far_plane(model: sc.SceneModel, camera: rd.Camera) -> float:
    lo, hi = model.scene_bounds
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    return max(float(np.linalg.norm(corners - camera.translation,
                                    axis=1).max()), 0.1)


def channel_png(images: rd.ChannelImages, channel: str,
                far: float) -> bytes:
    """One channel as deterministic 8-bit PNG bytes; labels are paletted,
    depth is normalized by the far plane."""
    from PIL import Image

    if channel == "color":
        u8 = np.clip(np.round(images.color * 255.0), 0, 255).astype(np.uint8)
        img = Image.fromarray(u8, mode="RGB")
    elif channel == "depth":
        u8 = np.clip(np.round(images.depth / far * 255.0), 0,
                     255).astype(np.uint8)
        img = Image.fromarray(u8, mode="L")
    elif channel in ("semantic", "instance"):
        labels = getattr(images, channel)
        u8 = np.clip(labels, 0, 255).astype(np.uint8)
        img = Image.fromarray(u8, mode="P")
        img.putpalette(_PALETTE)
    else:
        raise ValueError(f"unknown channel {channel!r}; "
                         f"expected one of {', '.join(RENDER_CHANNELS)}")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _query_camera(cam: str | None, w: int, h: int, bounds) -> rd.Camera:
    """Orbit camera from an 'azimuth,elevation,distance' query string
    (degrees, degrees, scene units), aimed at the bounds center."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    target = (lo + hi) / 2.0
    if cam is None or cam == "":
        cam = f"0,20,{1.0 * float(np.linalg.norm(hi - lo)):.6g}"
    try:
        az_deg, el_deg, dist = (float(v) for v in cam.split(","))
    except ValueError:
        raise ValueError("cam expects 'azimuth,elevation,distance'")
    if dist <= 0:
        raise ValueError("camera distance must be positive")
    az = np.deg2rad(az_deg)
    el = np.deg2rad(np.clip(el_deg, -85.0, 85.0))
    eye = target + dist * np.array([np.cos(el) * np.cos(az), -np.sin(el),
                                    np.cos(el) * np.sin(az)])
    f = 0.5 * w / np.tan(np.deg2rad(55.0) / 2.0)
    return rd.Camera(fx=f, fy=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h,
                     rotation=synth.look_at(eye, target), translation=eye)


# ---------------------------------------------------------------------------
# Session: snapshot-swap state


class _Snapshot:
    __slots__ = ("model", "cache")

    def __init__(self, model: sc.SceneModel):
        self.model = model
        self.cache: dict = {}


def _field_sha256(field: fl.Field) -> str:
    return hashlib.sha256(
        field.params.values.astype("<f4").tobytes()).hexdigest()


class Session:
    """One served scene: base checkpoint, applied edit log, live snapshot."""

    def __init__(self, base: sc.SceneModel, scene_dir=None,
                 max_width: int = 320, max_height: int = 240,
                 interactive_n: int = 128, workers: int = 1):
        self.base = base.copy()
        self.scene_dir = scene_dir
        self.log: list = []
        self.max_width = max_width
        self.max_height = max_height
        self.interactive_n = interactive_n
        self._snap = _Snapshot(base.copy())
        self._wlock = threading.Lock()
        self._render_slots = threading.BoundedSemaphore(max(1, workers))

    @property
    def model(self) -> sc.SceneModel:
        return self._snap.model

    def summary(self) -> dict:
        model = self._snap.model
        things = [{
            "id": th.track.instance_id,
            "category": th.track.category,
            "category_name": model.class_table[th.track.category],
            "extent": th.track.extent.tolist(),
            "keyframes": _track_json(th.track)["keyframes"],
            "field_sha256": _field_sha256(th.field),
        } for th in model.things]
        return {
            "class_table": list(model.class_table),
            "bounds": {"lo": model.scene_bounds[0].tolist(),
                       "hi": model.scene_bounds[1].tolist()},
            "background": model.background.tolist(),
            "things": things,
            "hash": sc.scene_hash(model),
            "log_length": len(self.log),
        }

    def edit(self, op: dict) -> dict:
        with self._wlock:
            new_model = apply_edit(self._snap.model, op)
            self.log.append(op)
            self._snap = _Snapshot(new_model)
        return self.summary()

    def undo(self) -> dict:
        with self._wlock:
            if not self.log:
                raise EmptyLog()
            ops = self.log[:-1]
            model = replay_log(self.base.copy(), ops)
            self.log = ops
            self._snap = _Snapshot(model)
        return self.summary()

    def save(self, out_dir=None) -> dict:
        out_dir = out_dir or self.scene_dir
        if not out_dir:
            raise ValueError("no save path: session was not loaded from a "
                             "directory and the request named none")
        with self._wlock:
            model = self._snap.model
            sc.save_scene(model, out_dir)
        return {"path": str(out_dir), "hash": sc.scene_hash(model)}

    def render(self, cam: str | None, time: float, w: int, h: int,
               channel: str, refine: bool) -> bytes:
        if channel not in RENDER_CHANNELS:
            raise ValueError(f"unknown channel {channel!r}; "
                             f"expected one of {', '.join(RENDER_CHANNELS)}")
        if not (1 <= w <= self.max_width and 1 <= h <= self.max_height):
            raise ValueError(f"render size {w}x{h} exceeds the "
                             f"{self.max_width}x{self.max_height} limit")
        snap = self._snap
        key = (cam or "", float(time), int(w), int(h), channel, bool(refine))
        hit = snap.cache.get(key)
        if hit is not None:
            return hit
        camera = _query_camera(cam, w, h, snap.model.scene_bounds)
        n = self.interactive_n * (4 if refine else 1)
        with self._render_slots:
            # previews feed 8-bit PNGs; single precision is plenty and about
            # twice as fast on this all-numpy path
            images = rd.render_image(snap.model, camera, time=float(time), n=n,
                                     dtype=np.float32)
        data = channel_png(images, channel, _far_plane(snap.model, camera))
        snap.cache[key] = data
        return data


# ---------------------------------------------------------------------------
# HTTP app


def build_app(session: Session, static_dir=None):
    from fastapi import FastAPI, HTTPException
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import Response

    app = FastAPI(title="panfield edit service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    @app.get("/scene")
    def get_scene():
        return session.summary()

    @app.get("/log")
    def get_log():
        return {"ops": session.log}

    @app.post("/edit")
    def post_edit(op: dict):
        try:
            summary = session.edit(op)
        except KeyError as e:
            raise HTTPException(status_code=404,
                                detail=str(e.args[0]) if e.args else str(e))
        except (ValueError, np.linalg.LinAlgError) as e:
            raise HTTPException(status_code=400, detail=str(e))
        return {"scene": summary, "log_index": len(session.log) - 1}

    @app.post("/undo")
    def post_undo():
        try:
            return session.undo()
        except EmptyLog:
            raise HTTPException(status_code=409, detail="edit log is empty")

    @app.post("/save")
    def post_save(body: dict | None = None):
        try:
            return session.save((body or {}).get("path"))
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))

    @app.get("/render")
    def get_render(cam: str | None = None, time: float = 0.0, w: int = 320,
                   h: int = 240, channel: str = "color", refine: int = 0):
        try:
            data = session.render(cam, time, w, h, channel, bool(refine))
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        return Response(content=data, media_type="image/png")

    if static_dir and os.path.isdir(static_dir):
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="ui")
    return app


def _default_static_dir():
    env = os.environ.get("PANFIELD_UI")
    if env:
        return env
    here = os.path.dirname(os.path.abspath(__file__))
    for cand in (os.path.join(here, "webui"),
                 os.path.join(here, "..", "..", "frontend", "dist")):
        if os.path.isdir(cand):
            return cand
    return None


def serve(ckpt_path, host: str = "127.0.0.1", port: int = 8321,
          workers: int = 1, static_dir=None) -> None:
    import uvicorn

    model = sc.load_scene(ckpt_path)
    scene_dir = ckpt_path if os.path.isdir(ckpt_path) \
        else os.path.dirname(ckpt_path)
    session = Session(model, scene_dir=scene_dir, workers=workers)
    app = build_app(session, static_dir=static_dir or _default_static_dir())
    uvicorn.run(app, host=host, port=port, log_level="info")
