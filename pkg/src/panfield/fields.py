"""Coordinate networks: the background (stuff) MLP and per-object (thing) MLPs.

Both roles share one architecture: a ReLU trunk over the positionally encoded
point with a single skip concatenation at the midpoint layer, a scalar density
head (softplus), an optional direction-invariant semantic head, and a color
branch conditioned on the encoded view direction (sigmoid output). Density and
semantics branch off before any direction enters, so they cannot depend on d.

Encoding frequencies activate coarse-to-fine: band j is scaled by a cosine
eased window w_j(alpha) = (1 - cos(pi clamp(alpha - j, 0, 1))) / 2, with alpha
ramping from 0 to the band count over a warmup fraction of training.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import diffmath as dm
from .diffmath import ParamVector, Var

STUFF = "stuff"
THING = "thing"

_CKPT_MAGIC = b"PFCK"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    hidden_layers: int
    width: int
    pos_freqs: int
    dir_freqs: int
    has_semantic_head: bool = False
    num_classes: int = 0

    def __post_init__(self):
        if self.hidden_layers < 1 or self.width < 1 or self.pos_freqs < 1 or self.dir_freqs < 0:
            raise ValueError(f"invalid field config {self}")
        if self.has_semantic_head and self.num_classes < 2:
            raise ValueError("semantic head requires num_classes >= 2")

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.pos_freqs

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.dir_freqs

    @property
    def skip_at(self):
        # one skip concat of the encoded position at the midpoint hidden layer
        mid = self.hidden_layers // 2
        return mid if 1 <= mid < self.hidden_layers else None


@dataclass(frozen=True)
class EncodingSchedule:
    total_steps: int
    warmup_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0,1]")


def alpha_at(schedule: EncodingSchedule, step: int, num_freqs: int) -> float:
    """Linear ramp 0 -> num_freqs over warmup_fraction*total_steps, then flat."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = schedule.warmup_fraction * schedule.total_steps
    if warm <= 0:
        return float(num_freqs)
    return float(num_freqs) * min(step / warm, 1.0)


def frequency_window(num_freqs: int, alpha: float, dtype=np.float64) -> np.ndarray:
    """Per-band weights w_j(alpha), cosine-eased; w_j is non-increasing in j."""
    j = np.arange(num_freqs, dtype=np.float64)
    x = np.clip(alpha - j, 0.0, 1.0)
    return ((1.0 - np.cos(np.pi * x)) / 2.0).astype(dtype)


def encode(x, num_freqs: int, alpha: float | None = None):
    """Positional encoding [x, sin(2^j pi x), cos(2^j pi x)]_{j<num_freqs}.

    Accepts a single 3-vector or an (M,3) batch, plain or as a Var; output is
    (M, 3 + 6 num_freqs) (or a flat vector for a single plain point). alpha
    defaults to num_freqs (all bands fully active).
    """
    if alpha is None:
        alpha = float(num_freqs)
    if not 0.0 <= alpha <= num_freqs:
        raise ValueError(f"alpha {alpha} outside [0, {num_freqs}]")
    single = not isinstance(x, Var) and np.ndim(x) == 1
    xd = x if isinstance(x, Var) else np.atleast_2d(np.asarray(x))
    dtype = xd.data.dtype if isinstance(xd, Var) else xd.dtype
    win = frequency_window(num_freqs, alpha, dtype=dtype)
    parts = [xd]
    for j in range(num_freqs):
        arg = dm.mul(xd, dtype.type((2.0 ** j) * np.pi))
        parts.append(dm.mul(dm.sin(arg), win[j]))
        parts.append(dm.mul(dm.cos(arg), win[j]))
    out = dm.concat(parts, axis=-1)
    if single:
        return np.asarray(out)[0]
    return out


def param_layout(config: FieldConfig, role: str) -> list[tuple[str, tuple]]:
    if role not in (STUFF, THING):
        raise ValueError(f"unknown field role {role!r}")
    w = config.width
    layout = []
    fan_in = config.pos_dim
    for i in range(config.hidden_layers):
        if config.skip_at is not None and i == config.skip_at:
            fan_in += config.pos_dim
        layout.append((f"layer{i}/W", (fan_in, w)))
        layout.append((f"layer{i}/b", (w,)))
        fan_in = w
    layout.append(("density/W", (w, 1)))
    layout.append(("density/b", (1,)))
    if config.has_semantic_head:
        layout.append(("semantic/W", (w, config.num_classes)))
        layout.append(("semantic/b", (config.num_classes,)))
    layout.append(("feature/W", (w, w)))
    layout.append(("feature/b", (w,)))
    half = max(w // 2, 1)
    layout.append(("color0/W", (w + config.dir_dim, half)))
    layout.append(("color0/b", (half,)))
    layout.append(("rgb/W", (half, 3)))
    layout.append(("rgb/b", (3,)))
    return layout


class Field:
    """A coordinate network: config + role + parameter vector."""

    def __init__(self, config: FieldConfig, role: str, params: ParamVector):
        expected = param_layout(config, role)
        got = [(s.name, s.shape) for s in params.segments]
        if got != [(n, tuple(s)) for n, s in expected]:
            raise ValueError("parameter layout does not match field config")
        self.config = config
        self.role = role
        self.params = params

    def copy(self) -> "Field":
        return Field(self.config, self.role, self.params.copy())


def init_biased(config: FieldConfig, role: str, seed: int) -> Field:
    """Glorot-uniform weights; density bias -5.0 (stuff) or +0.1 (thing).

    The density bias controls initial opacity: stuff starts almost empty
    (softplus(-5) ~ 0.0067 per meter) while things start dense enough to
    catch gradient (softplus(0.1) ~ 0.744).
    """
    layout = param_layout(config, role)
    pv = ParamVector.build(layout, dtype=np.float32)
    rng = np.random.default_rng(seed)
    for name, shape in layout:
        if name.endswith("/W"):
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            pv.set(name, rng.uniform(-limit, limit, size=shape).astype(np.float32))
    pv.set("density/b", np.full(1, -5.0 if role == STUFF else 0.1, dtype=np.float32))
    return Field(config, role, pv)


def field_forward(config: FieldConfig, get, x_enc, d_enc, want_semantic: bool):
    """Shared forward pass. `get` maps segment name to array or Var.

    Returns (density (M,), rgb (M,3), semantic (M,C) or None). Works on plain
    arrays (inference) and tape Vars (training) identically.
    """
    h = dm.relu(dm.add(dm.matmul(x_enc, get("layer0/W")), get("layer0/b")))
    for i in range(1, config.hidden_layers):
        inp = dm.concat([h, x_enc], axis=-1) if i == config.skip_at else h
        h = dm.relu(dm.add(dm.matmul(inp, get(f"layer{i}/W")), get(f"layer{i}/b")))
    sigma_pre = dm.add(dm.matmul(h, get("density/W")), get("density/b"))
    density = dm.reshape(dm.softplus(sigma_pre), (-1,))
    semantic = None
    if want_semantic:
        semantic = dm.add(dm.matmul(h, get("semantic/W")), get("semantic/b"))
    feat = dm.add(dm.matmul(h, get("feature/W")), get("feature/b"))
    g = dm.relu(dm.add(dm.matmul(dm.concat([feat, d_enc], axis=-1), get("color0/W")),
                       get("color0/b")))
    rgb = dm.sigmoid(dm.add(dm.matmul(g, get("rgb/W")), get("rgb/b")))
    return density, rgb, semantic


def _check_unit(d) -> None:
    n = np.linalg.norm(np.atleast_2d(np.asarray(d)), axis=-1)
    if np.any(np.abs(n - 1.0) > 1e-5):
        raise ValueError("direction vectors must be unit length")


def _eval(field: Field, x, d, alpha_x, alpha_d):
    single = np.ndim(x) == 1
    x2 = np.atleast_2d(np.asarray(x))
    d2 = np.atleast_2d(np.asarray(d))
    if d2.shape[0] == 1 and x2.shape[0] > 1:
        d2 = np.broadcast_to(d2, x2.shape)
    x_enc = encode(x2, field.config.pos_freqs, alpha_x)
    d_enc = encode(d2, field.config.dir_freqs, alpha_d)
    out = field_forward(field.config, field.params.view, x_enc, d_enc,
                        field.config.has_semantic_head)
    if single:
        out = tuple(None if o is None else np.asarray(o)[0] for o in out)
    return out


def eval_stuff(field: Field, x, d, alpha_x: float | None = None, alpha_d: float | None = None):
    """(density, color, semantic_logits) of the background field at world x."""
    if field.role != STUFF:
        raise ValueError(f"eval_stuff called on a {field.role} field")
    _check_unit(d)
    density, rgb, sem = _eval(field, x, d, alpha_x, alpha_d)
    return density, rgb, sem


def eval_thing(field: Field, x_local, d_local, alpha_x: float | None = None,
               alpha_d: float | None = None):
    """(density, color) of an object field at box-frame coordinates."""
    if field.role != THING:
        raise ValueError(f"eval_thing called on a {field.role} field")
    _check_unit(d_local)
    density, rgb, _ = _eval(field, x_local, d_local, alpha_x, alpha_d)
    return density, rgb


# ---------------------------------------------------------------------------
# Profiles


def stuff_config(profile: str, num_classes: int) -> FieldConfig:
    if profile == "paper":
        return FieldConfig(8, 256, 10, 2, True, num_classes)
    if profile == "toy":
        return FieldConfig(4, 64, 10, 2, True, num_classes)
    raise ValueError(f"unknown profile {profile!r}")


def thing_config(profile: str) -> FieldConfig:
    if profile == "paper":
        return FieldConfig(4, 128, 6, 2)
    if profile == "toy":
        return FieldConfig(3, 32, 6, 2)
    raise ValueError(f"unknown profile {profile!r}")


def samples_per_ray(profile: str) -> int:
    return {"paper": 1024, "toy": 128}[profile]


# ---------------------------------------------------------------------------
# Checkpoint container
#
# Layout: b"PFCK" | u32 version | u32 header_len | header JSON (utf-8) |
# raw little-endian float32 parameter values in segment order. The header
# stores config, role and extra caller metadata; the segment layout is
# re-derived from the config on load and length-checked.


def save_field(field: Field, path, extra: dict | None = None) -> None:
    header = {
        "config": asdict(field.config),
        "role": field.role,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(field.params.values.astype("<f4").tobytes())


def field_bytes(field: Field) -> bytes:
    """Checkpoint blob in memory (same layout as save_field)."""
    buf = io.BytesIO()
    header = {"config": asdict(field.config), "role": field.role, "extra": {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(field.params.values.astype("<f4").tobytes())
    return buf.getvalue()


def load_field(path) -> tuple[Field, dict]:
    with open(path, "rb") as f:
        data = f.read()
    return load_field_bytes(data)


def load_field_bytes(data: bytes) -> tuple[Field, dict]:
    if data[:4] != _CKPT_MAGIC:
        raise ValueError("not a field checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    config = FieldConfig(**header["config"])
    role = header["role"]
    raw = np.frombuffer(data[12 + hlen:], dtype="<f4").astype(np.float32)
    layout = param_layout(config, role)
    pv = ParamVector.build(layout, dtype=np.float32)
    if raw.size != pv.size:
        raise ValueError(f"checkpoint length {raw.size} does not match config ({pv.size})")
    pv.values[:] = raw
    return Field(config, role, pv), header.get("extra", {})
