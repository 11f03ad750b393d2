"""Patch encoder, projection heads, momentum copies and their file formats.

The encoder maps a set of positioned patches to one feature vector::

    h = patch @ patch_proj + pos_table[index]
    h = relu(h @ w1 + b1) @ w2 + b2          (per patch)
    feature = mean over patches

Heads are two-layer MLPs ``relu(f @ w1 + b1) @ w2 + b2``.

EVCK checkpoint layout (little-endian)::

    "EVCK" | version u32 | P u32 | L u32 | D u32 | E u32 | step u64
    | online params | momentum params | first moments | second moments

each block a concatenation of fp64 arrays in ``ONLINE_NAMES`` /
``MOMENTUM_NAMES`` order; shapes follow from (P, L, D, E).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .errors import BadMagic, GeometryMismatch, MissingFile, NotUnitNorm, TeacherDimMismatch, Truncated
from .viewgen import CHANNELS, PatchSet

HIDDEN_RATIO = 4
ENCODER_KEYS = ("patch_proj", "pos_table", "w1", "b1", "w2", "b2")
HEAD_KEYS = ("w1", "b1", "w2", "b2")
ONLINE_NAMES = (
    tuple(f"encoder.{k}" for k in ENCODER_KEYS)
    + tuple(f"evt_head.{k}" for k in HEAD_KEYS)
    + tuple(f"img_head.{k}" for k in HEAD_KEYS)
)
MOMENTUM_NAMES = ONLINE_NAMES[: len(ENCODER_KEYS) + len(HEAD_KEYS)]

EVCK_MAGIC = b"EVCK"
EVCK_VERSION = 1
EVCK_HEADER = struct.Struct("<4sIIIIIQ")
TVEC_MAGIC = b"TVEC"
TVEC_HEADER = struct.Struct("<4sI")


@dataclass(frozen=True)
class ModelDims:
    patch_size: int  # P
    num_patches: int  # L
    embed_dim: int = 64  # D
    proj_dim: int = 32  # E

    def __post_init__(self):
        if min(self.patch_size, self.num_patches, self.embed_dim, self.proj_dim) < 1:
            raise ValueError(f"dimensions must be positive: {self}")

    @property
    def patch_dim(self) -> int:
        return CHANNELS * self.patch_size**2

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, e, h = self.embed_dim, self.proj_dim, HIDDEN_RATIO * self.embed_dim
        head = {"w1": (d, d), "b1": (d,), "w2": (d, e), "b2": (e,)}
        enc = {
            "patch_proj": (self.patch_dim, d),
            "pos_table": (self.num_patches, d),
            "w1": (d, h),
            "b1": (h,),
            "w2": (h, d),
            "b2": (d,),
        }
        out = {f"encoder.{k}": v for k, v in enc.items()}
        out.update({f"evt_head.{k}": v for k, v in head.items()})
        out.update({f"img_head.{k}": v for k, v in head.items()})
        return out


@dataclass
class ModelState:
    dims: ModelDims
    online: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    m1: dict[str, np.ndarray]
    m2: dict[str, np.ndarray]
    step: int = 0

    def copy(self) -> ModelState:
        cp = lambda d: {k: v.copy() for k, v in d.items()}  # noqa: E731
        return ModelState(self.dims, cp(self.online), cp(self.momentum), cp(self.m1), cp(self.m2), self.step)

    def encoder(self, branch: str = "online") -> dict[str, np.ndarray]:
        src = self.online if branch == "online" else self.momentum
        return {k: src[f"encoder.{k}"] for k in ENCODER_KEYS}

    def head(self, which: str, branch: str = "online") -> dict[str, np.ndarray]:
        src = self.online if branch == "online" else self.momentum
        return {k: src[f"{which}_head.{k}"] for k in HEAD_KEYS}


def init_model(seed: int, dims: ModelDims) -> ModelState:
    """Scaled-uniform weights, zero biases, momentum an exact copy, zero moments."""
    rng = np.random.default_rng(seed)
    online = {}
    for name, shape in dims.shapes().items():
        if len(shape) == 1:
            online[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            online[name] = rng.uniform(-bound, bound, size=shape)
    momentum = {k: online[k].copy() for k in MOMENTUM_NAMES}
    zeros = lambda: {k: np.zeros_like(v) for k, v in online.items()}  # noqa: E731
    return ModelState(dims, online, momentum, zeros(), zeros(), 0)


def ema_update(state: ModelState, m: float) -> ModelState:
    """theta_m <- m * theta_m + (1 - m) * theta_e, evaluated in exactly that order."""
    momentum = {k: m * state.momentum[k] + (1.0 - m) * state.online[k] for k in MOMENTUM_NAMES}
    return replace(state, momentum=momentum)


# forward passes -------------------------------------------------------------


def _t(a) -> gc.Tensor:
    return a if isinstance(a, gc.Tensor) else gc.constant(a)


def encode_batch(enc, views: Sequence[PatchSet], dims: ModelDims) -> gc.Tensor:
    """Encode B patch sets into a (B, D) feature tensor.

    ``enc`` maps encoder keys to arrays (constants) or Tensors (recorded).
    """
    counts = []
    for v in views:
        w, h, p = v.source_geometry
        if p != dims.patch_size or v.num_patches_total != dims.num_patches or v.values.shape[1] != dims.patch_dim:
            raise GeometryMismatch(f"view geometry {v.source_geometry} does not match {dims}")
        if len(v) == 0:
            raise GeometryMismatch("empty patch set")
        counts.append(len(v))
    x = gc.constant(np.concatenate([v.values for v in views]))
    idx = np.concatenate([v.indices for v in views])
    pool = np.zeros((len(views), idx.size))
    start = 0
    for i, n in enumerate(counts):
        pool[i, start : start + n] = 1.0 / n
        start += n

    h = gc.add(gc.matmul(x, _t(enc["patch_proj"])), gc.gather_rows(_t(enc["pos_table"]), idx))
    h = gc.relu(gc.broadcast_add_row(gc.matmul(h, _t(enc["w1"])), _t(enc["b1"])))
    h = gc.broadcast_add_row(gc.matmul(h, _t(enc["w2"])), _t(enc["b2"]))
    return gc.matmul(gc.constant(pool), h)


def project_batch(head, feats: gc.Tensor) -> gc.Tensor:
    h = gc.relu(gc.broadcast_add_row(gc.matmul(feats, _t(head["w1"])), _t(head["b1"])))
    return gc.broadcast_add_row(gc.matmul(h, _t(head["w2"])), _t(head["b2"]))


def encode(enc, x: PatchSet, dims: ModelDims) -> np.ndarray:
    return encode_batch(enc, [x], dims).value[0].copy()


def project(head, feat: np.ndarray) -> np.ndarray:
    return project_batch(head, gc.constant(np.atleast_2d(feat))).value[0].copy()


# teacher embeddings ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TeacherEmbedding:
    vector: np.ndarray = field(repr=False)

    def __post_init__(self):
        if abs(np.linalg.norm(self.vector) - 1.0) >= 1e-9:
            raise NotUnitNorm("teacher embedding must have unit norm")

    @property
    def dim(self) -> int:
        return self.vector.size


def encode_tvec(vec: np.ndarray) -> bytes:
    vec = np.asarray(vec, dtype="<f8").reshape(-1)
    return TVEC_HEADER.pack(TVEC_MAGIC, vec.size) + vec.tobytes()


def decode_tvec(data: bytes) -> np.ndarray:
    if data[:4] != TVEC_MAGIC:
        raise BadMagic(f"expected {TVEC_MAGIC!r}, got {data[:4]!r}")
    if len(data) < TVEC_HEADER.size:
        raise Truncated("TVEC header truncated")
    _, dim = TVEC_HEADER.unpack_from(data)
    if len(data) != TVEC_HEADER.size + 8 * dim:
        raise Truncated(f"TVEC of dim {dim} has {len(data)} bytes")
    return np.frombuffer(data, dtype="<f8", offset=TVEC_HEADER.size).astype(np.float64)


def load_teacher(path, dim: int | None = None) -> TeacherEmbedding:
    """Load a TVEC file; vectors within 1e-6 of unit norm are re-normalized, others rejected."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    vec = decode_tvec(path.read_bytes())
    if dim is not None and vec.size != dim:
        raise TeacherDimMismatch(f"{path}: dim {vec.size}, expected {dim}")
    norm = np.linalg.norm(vec)
    if abs(norm - 1.0) > 1e-6:
        raise NotUnitNorm(f"{path}: norm {norm}")
    return TeacherEmbedding(vec / norm)


def write_teacher(path, vec: np.ndarray) -> None:
    Path(path).write_bytes(encode_tvec(vec))


# checkpoints ----------------------------------------------------------------


def encode_checkpoint(state: ModelState) -> bytes:
    d = state.dims
    parts = [EVCK_HEADER.pack(EVCK_MAGIC, EVCK_VERSION, d.patch_size, d.num_patches, d.embed_dim, d.proj_dim, state.step)]
    shapes = d.shapes()
    blocks = (
        (state.online, ONLINE_NAMES),
        (state.momentum, MOMENTUM_NAMES),
        (state.m1, ONLINE_NAMES),
        (state.m2, ONLINE_NAMES),
    )
    for src, names in blocks:
        for name in names:
            arr = src[name]
            if arr.shape != shapes[name]:
                raise GeometryMismatch(f"{name}: {arr.shape} != {shapes[name]}")
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> ModelState:
    if data[:4] != EVCK_MAGIC:
        raise BadMagic(f"expected {EVCK_MAGIC!r}, got {data[:4]!r}")
    if len(data) < EVCK_HEADER.size:
        raise Truncated("EVCK header truncated")
    _, version, p, l_, dd, e, step = EVCK_HEADER.unpack_from(data)
    if version != EVCK_VERSION:
        raise BadMagic(f"unsupported EVCK version {version}")
    dims = ModelDims(p, l_, dd, e)
    shapes = dims.shapes()
    layout = [ONLINE_NAMES, MOMENTUM_NAMES, ONLINE_NAMES, ONLINE_NAMES]
    need = EVCK_HEADER.size + 8 * sum(int(np.prod(shapes[n])) for names in layout for n in names)
    if len(data) != need:
        raise Truncated(f"EVCK needs {need} bytes, got {len(data)}")
    off = EVCK_HEADER.size
    blocks = []
    for names in layout:
        block = {}
        for name in names:
            size = int(np.prod(shapes[name]))
            block[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shapes[name]).astype(np.float64)
            off += 8 * size
        blocks.append(block)
    return ModelState(dims, blocks[0], blocks[1], blocks[2], blocks[3], step)


def save_checkpoint(path, state: ModelState) -> Path:
    """Write via a temporary file and rename, so a crash never leaves a torn checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    return decode_checkpoint(path.read_bytes())
