"""Frozen-feature extraction, linear probing and collapse diagnostics.

ETAB layout (little-endian)::

    "ETAB" | N u64 | D u32 | has_labels u8 | N*D fp64 row-major | N u32 labels (if has_labels)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .augment import AugmentConfig, augment_view
from .errors import BadMagic, DegenerateRow, GeometryMismatch, MissingFile, Truncated, UnlabeledData
from .events import DatasetManifest, load_manifest, read_evt1
from .model import ModelState, encode_batch, load_checkpoint, project_batch
from .viewgen import ViewConfig, full_patch_set

ETAB_MAGIC = b"ETAB"
ETAB_HEADER = struct.Struct("<4sQIB")


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    rows: np.ndarray  # (N, D)
    labels: np.ndarray | None = None
    provenance: str = ""

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ValueError("rows must be a matrix")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("embedding rows must be finite")
        if self.labels is not None and len(self.labels) != len(self.rows):
            raise ValueError("labels length must match rows")

    def __len__(self) -> int:
        return self.rows.shape[0]


def encode_etab(tab: EmbeddingTable) -> bytes:
    n, d = tab.rows.shape
    has = tab.labels is not None
    parts = [ETAB_HEADER.pack(ETAB_MAGIC, n, d, int(has)), np.ascontiguousarray(tab.rows, dtype="<f8").tobytes()]
    if has:
        parts.append(np.asarray(tab.labels, dtype="<u4").tobytes())
    return b"".join(parts)


def decode_etab(data: bytes) -> EmbeddingTable:
    if data[:4] != ETAB_MAGIC:
        raise BadMagic(f"expected {ETAB_MAGIC!r}, got {data[:4]!r}")
    if len(data) < ETAB_HEADER.size:
        raise Truncated("ETAB header truncated")
    _, n, d, has = ETAB_HEADER.unpack_from(data)
    if has not in (0, 1):
        raise BadMagic(f"bad has_labels flag {has}")
    need = ETAB_HEADER.size + 8 * n * d + (4 * n if has else 0)
    if len(data) != need:
        raise Truncated(f"ETAB needs {need} bytes, got {len(data)}")
    off = ETAB_HEADER.size
    rows = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    labels = None
    if has:
        labels = np.frombuffer(data, dtype="<u4", count=n, offset=off + 8 * n * d).astype(np.int64)
    return EmbeddingTable(rows, labels)


def save_etab(path, tab: EmbeddingTable) -> None:
    Path(path).write_bytes(encode_etab(tab))


def load_etab(path) -> EmbeddingTable:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    tab = decode_etab(path.read_bytes())
    return EmbeddingTable(tab.rows, tab.labels, str(path))


def embed_streams(state: ModelState, streams, view: ViewConfig, out_width: int, out_height: int, head: str | None = None, chunk: int = 128) -> np.ndarray:
    """Frozen online features (or ``head`` outputs) for full-frame, all-patch views."""
    dims = state.dims
    if view.patch_size != dims.patch_size:
        raise GeometryMismatch(f"patch size {view.patch_size} != checkpoint {dims.patch_size}")
    rows = []
    rng = np.random.default_rng(0)  # identity augmentation draws but ignores it
    for start in range(0, len(streams), chunk):
        views = []
        for s in streams[start : start + chunk]:
            acfg = AugmentConfig.identity(s.width, s.height)
            if (s.width, s.height) != (out_width, out_height):
                acfg = replace(acfg, out_width=out_width, out_height=out_height)
            views.append(full_patch_set(augment_view(s, acfg, rng), view))
        feats = encode_batch(state.encoder("online"), views, dims)
        if head is not None:
            feats = project_batch(state.head(head, "online"), feats)
        rows.append(feats.value)
    width = dims.embed_dim if head is None else dims.proj_dim
    return np.concatenate(rows) if rows else np.zeros((0, width))


def embed_dataset(
    checkpoint,
    manifest,
    view: ViewConfig,
    out_width: int,
    out_height: int,
    seed: int = 0,
    head: str | None = None,
) -> EmbeddingTable:
    """Embed every manifest entry with the frozen online encoder.

    Views are deterministic (identity augmentation, all L patches), so ``seed``
    has no effect on the result; it is accepted for interface symmetry.
    """
    state = checkpoint if isinstance(checkpoint, ModelState) else load_checkpoint(checkpoint)
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    streams = [read_evt1(e.event_path) for e in manifest.entries]
    rows = embed_streams(state, streams, view, out_width, out_height, head)
    return EmbeddingTable(rows, manifest.labels, f"{checkpoint if not isinstance(checkpoint, ModelState) else '<state>'} | {manifest.path}")


def linear_probe(
    train: EmbeddingTable,
    test: EmbeddingTable,
    epochs: int = 500,
    lr: float = 0.1,
    num_classes: int | None = None,
) -> float:
    """Top-1 test accuracy of softmax regression fitted by full-batch gradient descent.

    Features are standardized with the training mean and std (an affine map a
    single linear layer could absorb); weights start at zero, so the result is
    deterministic.
    """
    if train.labels is None or test.labels is None:
        raise UnlabeledData("linear probing needs labels on both tables")
    if train.rows.shape[1] != test.rows.shape[1]:
        raise GeometryMismatch("train and test feature widths differ")
    k = num_classes or int(max(train.labels.max(), test.labels.max())) + 1
    mu = train.rows.mean(axis=0)
    sd = train.rows.std(axis=0)
    sd[sd < 1e-12] = 1.0
    x = (train.rows - mu) / sd
    xt = (test.rows - mu) / sd
    n, d = x.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), train.labels] = 1.0
    w = np.zeros((d, k))
    b = np.zeros(k)
    for _ in range(epochs):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (x.T @ g)
        b -= lr * g.sum(axis=0)
    pred = np.argmax(xt @ w + b, axis=1)
    return float(np.mean(pred == test.labels))


def collapse_metrics(tab: EmbeddingTable | np.ndarray) -> dict[str, float]:
    rows = tab.rows if isinstance(tab, EmbeddingTable) else np.asarray(tab, dtype=np.float64)
    n = rows.shape[0]
    if n < 2:
        raise ValueError("collapse metrics need at least two rows")
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms < gc.EPS):
        raise DegenerateRow("zero-norm embedding row")
    unit = rows / norms[:, None]
    gram = unit @ unit.T
    mean_cos = (gram.sum() - np.trace(gram)) / (n * (n - 1))
    s = np.linalg.svd(rows, compute_uv=False)
    p = s / s.sum()
    p = p[p > 0]
    erank = float(np.exp(-(p * np.log(p)).sum()))
    return {
        "mean_pairwise_cos": float(np.clip(mean_cos, -1.0, 1.0)),
        "per_dim_std_min": float(rows.std(axis=0).min()),
        "effective_rank": erank,
    }
