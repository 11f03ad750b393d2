"""Synthetic paired data: moving-bar event streams with surrogate teacher embeddings.

Class ``k`` of ``K`` is a bar at orientation ``k * pi / K`` sweeping across the
sensor. Its leading edge fires positive events and its trailing edge negative
ones. The teacher embedding of a class-``k`` sample is ``normalize(e_k + sigma * g)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import EventStream, write_evt1, write_manifest
from .model import write_teacher

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 4
    samples_per_class: int = 128
    val_samples_per_class: int = 32
    width: int = 64
    height: int = 64
    events_per_sample: int = 4000
    duration_us: int = 100_000
    teacher_noise_sigma: float = 0.3
    teacher_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if min(self.samples_per_class, self.width, self.height, self.events_per_sample, self.duration_us) < 1:
            raise ValueError("counts and geometry must be positive")
        if self.val_samples_per_class < 0:
            raise ValueError("val_samples_per_class must be >= 0")
        if not (self.teacher_noise_sigma >= 0 and math.isfinite(self.teacher_noise_sigma)):
            raise ValueError("teacher_noise_sigma must be finite and >= 0")
        if self.teacher_dim < self.classes:
            raise ValueError("teacher_dim must be >= classes")


def sample_rng(cfg: SynthConfig, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, SPLIT_CODES[split], index]))


def gen_stream(k: int, cfg: SynthConfig, rng: np.random.Generator) -> EventStream:
    if not 0 <= k < cfg.classes:
        raise ValueError(f"class {k} outside [0, {cfg.classes})")
    w, h, n = cfg.width, cfg.height, cfg.events_per_sample
    theta = k * math.pi / cfg.classes
    along = np.array([math.cos(theta), math.sin(theta)])
    normal = np.array([-math.sin(theta), math.cos(theta)])
    center = np.array([(w - 1) / 2, (h - 1) / 2]) + rng.uniform(-0.05, 0.05, size=2) * np.array([w, h])
    # centre shift + sweep + bar width stay below half the frame, so every edge crosses it
    sweep = 0.3 * min(w, h)
    direction = rng.choice([-1.0, 1.0])
    bar_width = rng.uniform(0.05, 0.1) * min(w, h)
    reach = 0.75 * math.hypot(w, h)

    t = np.sort(rng.integers(0, cfg.duration_us, size=n))
    leading = rng.random(n) < 0.5
    offset = direction * (-sweep + 2 * sweep * t / cfg.duration_us)
    offset = np.where(leading, offset, offset - direction * bar_width)
    polarity = np.where(leading, 1, -1)

    xy = np.empty((n, 2), dtype=np.int64)
    todo = np.arange(n)
    while todo.size:
        u = rng.uniform(-reach, reach, size=todo.size)
        jitter = rng.normal(0.0, 0.5, size=todo.size)
        pos = center + u[:, None] * along + (offset[todo] + jitter)[:, None] * normal
        pix = np.floor(pos + 0.5).astype(np.int64)
        ok = (pix[:, 0] >= 0) & (pix[:, 0] < w) & (pix[:, 1] >= 0) & (pix[:, 1] < h)
        xy[todo[ok]] = pix[ok]
        todo = todo[~ok]
    return EventStream(w, h, xy[:, 0], xy[:, 1], t, polarity)


def gen_teacher(k: int, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    e = np.zeros(cfg.teacher_dim)
    e[k] = 1.0
    v = e + cfg.teacher_noise_sigma * rng.standard_normal(cfg.teacher_dim)
    return v / np.linalg.norm(v)


def gen_dataset(cfg: SynthConfig, out_dir, split: str = "train") -> Path:
    """Write EVT1/TVEC files and a labeled manifest ``<out_dir>/<split>.tsv``."""
    out_dir = Path(out_dir)
    per_class = cfg.samples_per_class if split == "train" else cfg.val_samples_per_class
    (out_dir / split).mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(per_class * cfg.classes):
        k = i % cfg.classes
        rng = sample_rng(cfg, split, i)
        stream = gen_stream(k, cfg, rng)
        teacher = gen_teacher(k, cfg, rng)
        ev, tv = f"{split}/{i:05d}.evt1", f"{split}/{i:05d}.tvec"
        write_evt1(out_dir / ev, stream)
        write_teacher(out_dir / tv, teacher)
        rows.append((ev, tv, k))
    manifest = out_dir / f"{split}.tsv"
    write_manifest(manifest, rows)
    return manifest
