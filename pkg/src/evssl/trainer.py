"""Deterministic pre-training loop.

All randomness is derived from the run seed:

* epoch ``e`` visits the manifest in ``permutation(SeedSequence([seed, EPOCH_TAG, e]))`` order;
  global sample position ``step * B + b`` maps to (epoch, offset) in that sequence;
* the two views of batch slot ``b`` at step ``s`` use
  ``SeedSequence([seed, s, b, manifest_index]).spawn(2)``.

So a run resumed from the checkpoint at step K replays the uninterrupted
trajectory exactly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .augment import AugmentConfig
from .config import OptimConfig, RunConfig, dump_config
from .errors import GeometryMismatch, NonFiniteLoss, TeacherDimMismatch
from .events import DatasetManifest, EventStream, load_manifest, read_evt1
from .losses import BatchEmbeddings, LossConfig, total_loss
from .model import (
    ENCODER_KEYS,
    HEAD_KEYS,
    ONLINE_NAMES,
    ModelDims,
    ModelState,
    encode_batch,
    ema_update,
    init_model,
    load_checkpoint,
    load_teacher,
    project_batch,
    save_checkpoint,
)
from .viewgen import PatchSet, ViewConfig, make_view_batch

log = logging.getLogger(__name__)

EPOCH_TAG = 0xE90C
METRICS_HEADER = "step,l_evt,l_rgb,l_kl,l_total,grad_norm,ema_m,wall_ms"


@dataclass(frozen=True)
class TrainMetrics:
    step: int
    l_evt: float
    l_rgb: float
    l_kl: float
    l_total: float
    grad_norm: float
    ema_m: float
    wall_ms: float

    def csv_line(self) -> str:
        vals = [self.l_evt, self.l_rgb, self.l_kl, self.l_total, self.grad_norm, self.ema_m]
        return ",".join([str(self.step)] + [repr(float(v)) for v in vals] + [f"{self.wall_ms:.3f}"])


@dataclass
class Dataset:
    """A manifest with every stream and teacher embedding loaded into memory."""

    streams: list[EventStream]
    teachers: np.ndarray  # (N, E)
    labels: np.ndarray | None
    manifest: DatasetManifest

    @classmethod
    def load(cls, manifest: DatasetManifest | str | Path, dim: int | None = None) -> Dataset:
        if not isinstance(manifest, DatasetManifest):
            manifest = load_manifest(manifest)
        streams = [read_evt1(e.event_path) for e in manifest.entries]
        teachers = [load_teacher(e.teacher_path, dim).vector for e in manifest.entries]
        y = np.stack(teachers) if teachers else np.zeros((0, dim or 0))
        return cls(streams, y, manifest.labels, manifest)

    def __len__(self) -> int:
        return len(self.streams)


@dataclass(frozen=True, eq=False)
class Batch:
    x_q: list[PatchSet]
    x_k: list[PatchSet]
    y: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.x_q)


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, EPOCH_TAG, epoch])).permutation(n)


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> np.ndarray:
    """Manifest indices of the samples visited at ``step``."""
    out = np.empty(batch_size, dtype=np.int64)
    perm_cache: dict[int, np.ndarray] = {}
    for b in range(batch_size):
        epoch, offset = divmod(step * batch_size + b, n)
        if epoch not in perm_cache:
            perm_cache[epoch] = epoch_permutation(seed, epoch, n)
        out[b] = perm_cache[epoch][offset]
    return out


def sample_rngs(seed: int, step: int, slot: int, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    rq, rk = np.random.default_rng(np.random.SeedSequence([seed, step, slot, int(index)])).spawn(2)
    return rq, rk


def make_batch(
    data: Dataset | DatasetManifest,
    indices: Sequence[int],
    acfg: AugmentConfig,
    vcfg: ViewConfig,
    seed: int,
    step: int = 0,
    dim: int | None = None,
) -> Batch:
    if not isinstance(data, Dataset):
        data = Dataset.load(data, dim)
    elif dim is not None and data.teachers.shape[1] != dim:
        raise TeacherDimMismatch(f"teacher dim {data.teachers.shape[1]}, expected {dim}")
    indices = np.asarray(indices, dtype=np.int64)
    streams, rngs_q, rngs_k = [], [], []
    for slot, idx in enumerate(indices):
        rq, rk = sample_rngs(seed, step, slot, idx)
        streams.append(data.streams[idx])
        rngs_q.append(rq)
        rngs_k.append(rk)
    views = make_view_batch(streams + streams, rngs_q + rngs_k, acfg, vcfg)
    b = len(indices)
    return Batch(views[:b], views[b:], data.teachers[indices], indices)


def learning_rate(cfg: OptimConfig, step: int) -> float:
    """Linear warmup over ``warmup_steps`` updates, then constant."""
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


def optimizer_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    m1: dict[str, np.ndarray],
    m2: dict[str, np.ndarray],
    cfg: OptimConfig,
    step: int,
):
    """Adaptive-moment update with decoupled weight decay. ``step`` counts prior updates."""
    lr = learning_rate(cfg, step)
    t = step + 1
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    new_p, new_m1, new_m2 = {}, {}, {}
    for name in params:
        g = grads[name]
        a = cfg.beta1 * m1[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * m2[name] + (1.0 - cfg.beta2) * g * g
        theta = params[name]
        step_dir = (a / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_p[name] = theta - lr * step_dir - lr * cfg.weight_decay * theta
        new_m1[name], new_m2[name] = a, v
    return new_p, new_m1, new_m2


def forward(state: ModelState, batch: Batch, loss_cfg: LossConfig, tape: gc.Tape | None = None):
    """Loss tensor, per-term values and the online parameter leaves (if taped)."""
    dims = state.dims
    if tape is not None:
        leaves = {name: tape.param(state.online[name]) for name in ONLINE_NAMES}
    else:
        leaves = dict(state.online)
    enc = {k: leaves[f"encoder.{k}"] for k in ENCODER_KEYS}
    feats = encode_batch(enc, batch.x_q, dims)
    q_evt = project_batch({k: leaves[f"evt_head.{k}"] for k in HEAD_KEYS}, feats)
    q_img = project_batch({k: leaves[f"img_head.{k}"] for k in HEAD_KEYS}, feats)
    k_feats = encode_batch(state.encoder("momentum"), batch.x_k, dims)
    k_evt = project_batch(state.head("evt", "momentum"), k_feats)
    emb = BatchEmbeddings(q_evt, k_evt, q_img, gc.constant(batch.y))
    total, parts = total_loss(emb, loss_cfg)
    return total, parts, leaves


def train_step(state: ModelState, batch: Batch, cfg: RunConfig) -> tuple[ModelState, TrainMetrics]:
    t0 = time.perf_counter()
    tape = gc.Tape()
    total, parts, leaves = forward(state, batch, cfg.loss, tape)
    if not all(math.isfinite(v) for v in parts.values()):
        raise NonFiniteLoss(f"step {state.step}: {parts}")
    by_id = tape.backward(total)
    grads = {name: by_id[leaves[name].id] for name in ONLINE_NAMES}
    grad_norm = math.sqrt(sum(float(np.sum(grads[n] * grads[n])) for n in ONLINE_NAMES))
    online, m1, m2 = optimizer_update(state.online, grads, state.m1, state.m2, cfg.optim, state.step)
    new = ModelState(state.dims, online, state.momentum, m1, m2, state.step + 1)
    new = ema_update(new, cfg.optim.ema_m)
    wall = (time.perf_counter() - t0) * 1000.0
    metrics = TrainMetrics(new.step, parts["l_evt"], parts["l_rgb"], parts["l_kl"], parts["l_total"], grad_norm, cfg.optim.ema_m, wall)
    return new, metrics


def model_dims(cfg: RunConfig) -> ModelDims:
    return ModelDims(cfg.dims.patch_size, cfg.num_patches, cfg.dims.embed_dim, cfg.dims.proj_dim)


def checkpoint_name(step: int) -> str:
    return f"ckpt_{step:06d}.evck"


def pretrain(
    cfg: RunConfig,
    resume: str | Path | None = None,
    dataset: Dataset | None = None,
    progress_every: int = 100,
) -> tuple[Path, Path]:
    """Run ``cfg.optim.steps`` updates; returns (final checkpoint, metrics CSV)."""
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = model_dims(cfg)
    if dataset is None:
        dataset = Dataset.load(cfg.manifest_path, dims.proj_dim)
    if len(dataset) == 0:
        raise ValueError("empty training manifest")

    metrics_path = out_dir / "metrics.csv"
    if resume is not None:
        state = load_checkpoint(resume)
        if state.dims != dims:
            raise GeometryMismatch(f"checkpoint dims {state.dims} != config dims {dims}")
        kept = []
        if metrics_path.is_file():
            lines = metrics_path.read_text().splitlines()[1:]
            kept = [ln for ln in lines if int(ln.split(",", 1)[0]) <= state.step]
        metrics_path.write_text("\n".join([METRICS_HEADER] + kept) + "\n")
    else:
        state = init_model(cfg.seed, dims)
        metrics_path.write_text(METRICS_HEADER + "\n")
    (out_dir / "config.cfg").write_text(dump_config(cfg))

    o = cfg.optim
    with metrics_path.open("a") as fh:
        while state.step < o.steps:
            idx = batch_indices(cfg.seed, state.step, o.batch_size, len(dataset))
            batch = make_batch(dataset, idx, cfg.augment, cfg.dims.view, cfg.seed, state.step)
            state, m = train_step(state, batch, cfg)
            fh.write(m.csv_line() + "\n")
            if cfg.run.checkpoint_every > 0 and state.step % cfg.run.checkpoint_every == 0:
                save_checkpoint(out_dir / checkpoint_name(state.step), state)
            if progress_every and state.step % progress_every == 0:
                log.info("step %d  total %.4f  evt %.4f  rgb %.4f  kl %.4f", m.step, m.l_total, m.l_evt, m.l_rgb, m.l_kl)
    final = save_checkpoint(out_dir / "final.evck", state)
    return final, metrics_path
