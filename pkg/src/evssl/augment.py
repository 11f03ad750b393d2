"""Augmentations applied to raw event streams, before any rasterization.

Every function takes a ``numpy.random.Generator`` and draws from it in a fixed
order, so the output is a pure function of (stream, parameters, rng state).
Draw order inside :func:`augment_view`:

1. temporal window start (one uniform)
2. crop box (area, log-aspect, then left/top offsets; repeated on rejection)
3. horizontal flip decision (one uniform)
4. polarity flip decision (one uniform)
5. drop ratio (one uniform), then one uniform per surviving event
6. noise count (Poisson), then x, y, t, polarity columns
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .events import EventStream

MAX_CROP_ATTEMPTS = 8


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_min: float = 0.2
    crop_scale_max: float = 1.0
    crop_aspect_min: float = 3 / 4
    crop_aspect_max: float = 4 / 3
    hflip_prob: float = 0.5
    polarity_flip_prob: float = 0.1
    drop_ratio_max: float = 0.3
    noise_rate: float = 0.05
    window_fraction: float = 0.5
    out_width: int = 224
    out_height: int = 224

    def __post_init__(self):
        if not (0 < self.crop_scale_min <= self.crop_scale_max <= 1):
            raise ConfigError("need 0 < crop_scale_min <= crop_scale_max <= 1")
        if not (0 < self.crop_aspect_min <= self.crop_aspect_max):
            raise ConfigError("need 0 < crop_aspect_min <= crop_aspect_max")
        for name in ("hflip_prob", "polarity_flip_prob"):
            if not (0 <= getattr(self, name) <= 1):
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not (0 <= self.drop_ratio_max < 1):
            raise ConfigError("drop_ratio_max must lie in [0, 1)")
        if not (self.noise_rate >= 0 and math.isfinite(self.noise_rate)):
            raise ConfigError("noise_rate must be finite and >= 0")
        if not (0 < self.window_fraction <= 1):
            raise ConfigError("window_fraction must lie in (0, 1]")
        if self.out_width < 1 or self.out_height < 1:
            raise ConfigError("output geometry must be positive")

    @classmethod
    def identity(cls, width: int, height: int) -> AugmentConfig:
        """Configuration under which :func:`augment_view` only re-bases timestamps."""
        aspect = width / height
        return cls(
            crop_scale_min=1.0,
            crop_scale_max=1.0,
            crop_aspect_min=aspect,
            crop_aspect_max=aspect,
            hflip_prob=0.0,
            polarity_flip_prob=0.0,
            drop_ratio_max=0.0,
            noise_rate=0.0,
            window_fraction=1.0,
            out_width=width,
            out_height=height,
        )


def window_events(stream: EventStream, t0: float, length: float) -> EventStream:
    """Keep events with ``t0 <= t <= t0 + length`` and re-base time to the first kept one."""
    keep = (stream.t >= t0) & (stream.t <= t0 + length)
    out = stream.take(keep)
    if len(out):
        out = EventStream.unchecked(out.width, out.height, out.x, out.y, out.t - out.t[0], out.p)
    return out


def temporal_window(stream: EventStream, fraction: float, rng: np.random.Generator) -> EventStream:
    u = rng.random()
    if len(stream) == 0:
        return stream
    t_first = int(stream.t[0])
    span = stream.duration
    length = fraction * span
    t0 = t_first + u * (span - length)
    return window_events(stream, t0, length)


def sample_crop_box(width: int, height: int, cfg: AugmentConfig, rng: np.random.Generator):
    """Return ``(left, top, box_w, box_h)`` in integer pixels.

    Area fraction is uniform, aspect is log-uniform. Boxes that do not fit the
    sensor or collapse below one pixel are redrawn; after the last attempt the
    full frame is used.
    """
    area = width * height
    log_lo, log_hi = math.log(cfg.crop_aspect_min), math.log(cfg.crop_aspect_max)
    for _ in range(MAX_CROP_ATTEMPTS):
        scale = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        bw = int(round(math.sqrt(scale * area * aspect)))
        bh = int(round(math.sqrt(scale * area / aspect)))
        if 1 <= bw <= width and 1 <= bh <= height:
            left = int(rng.integers(0, width - bw + 1))
            top = int(rng.integers(0, height - bh + 1))
            return left, top, bw, bh
    return 0, 0, width, height


def apply_crop(stream: EventStream, box, out_width: int, out_height: int) -> EventStream:
    """Discard events outside ``box`` and map the rest affinely onto the output grid."""
    left, top, bw, bh = box
    inside = (stream.x >= left) & (stream.x < left + bw) & (stream.y >= top) & (stream.y < top + bh)
    kept = stream.take(inside)
    x = np.floor((kept.x - left) * (out_width / bw) + 0.5).astype(np.int64)
    y = np.floor((kept.y - top) * (out_height / bh) + 0.5).astype(np.int64)
    np.clip(x, 0, out_width - 1, out=x)
    np.clip(y, 0, out_height - 1, out=y)
    return EventStream.unchecked(out_width, out_height, x, y, kept.t, kept.p)


def random_resized_crop(stream: EventStream, cfg: AugmentConfig, rng: np.random.Generator) -> EventStream:
    box = sample_crop_box(stream.width, stream.height, cfg, rng)
    return apply_crop(stream, box, cfg.out_width, cfg.out_height)


def horizontal_flip(stream: EventStream, prob: float, rng: np.random.Generator) -> EventStream:
    if rng.random() < prob:
        s = stream
        return EventStream.unchecked(s.width, s.height, s.width - 1 - s.x, s.y, s.t, s.p)
    return stream


def polarity_flip(stream: EventStream, prob: float, rng: np.random.Generator) -> EventStream:
    if rng.random() < prob:
        s = stream
        return EventStream.unchecked(s.width, s.height, s.x, s.y, s.t, -s.p)
    return stream


def event_drop(stream: EventStream, ratio: float, rng: np.random.Generator) -> EventStream:
    if not 0 <= ratio < 1:
        raise ValueError(f"drop ratio {ratio} outside [0, 1)")
    survive = rng.random(len(stream)) >= ratio
    return stream.take(survive)


def noise_inject(stream: EventStream, rate: float, rng: np.random.Generator) -> EventStream:
    """Add Poisson(rate * W * H) uniformly placed events over ``[0, T]``."""
    if rate < 0:
        raise ValueError("noise rate must be >= 0")
    w, h = stream.width, stream.height
    k = int(rng.poisson(rate * w * h))
    if k == 0:
        return stream
    t_end = int(stream.t[-1]) if len(stream) else 0
    nx = rng.integers(0, w, size=k)
    ny = rng.integers(0, h, size=k)
    nt = rng.integers(0, t_end + 1, size=k)
    np_ = rng.integers(0, 2, size=k) * 2 - 1
    t = np.concatenate([stream.t, nt])
    order = np.argsort(t, kind="stable")
    return EventStream.unchecked(
        w,
        h,
        np.concatenate([stream.x, nx])[order],
        np.concatenate([stream.y, ny])[order],
        t[order],
        np.concatenate([stream.p, np_])[order],
    )


def augment_view(stream: EventStream, cfg: AugmentConfig, rng: np.random.Generator) -> EventStream:
    s = temporal_window(stream, cfg.window_fraction, rng)
    s = random_resized_crop(s, cfg, rng)
    s = horizontal_flip(s, cfg.hflip_prob, rng)
    s = polarity_flip(s, cfg.polarity_flip_prob, rng)
    s = event_drop(s, rng.uniform(0.0, cfg.drop_ratio_max), rng)
    s = noise_inject(s, cfg.noise_rate, rng)
    s.validate()
    return s
