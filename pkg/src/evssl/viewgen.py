"""Event images, patches and information-weighted patch sampling.

Patch vectors are laid out channel-major, then row-major inside the P x P
block, and patch indices run row-major over the patch grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .augment import AugmentConfig, augment_view
from .errors import GeometryMismatch, InsufficientSupport, NonDivisibleGeometry
from .events import EventStream

CHANNELS = 2


@dataclass(frozen=True)
class ViewConfig:
    patch_size: int = 16
    patches_per_view: int = 49
    clip: int = 10


@dataclass(frozen=True, eq=False)
class EventImage:
    """Two-plane raster: plane 0 counts positive events, plane 1 negative ones."""

    values: np.ndarray  # (2, height, width)

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def height(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class Patch:
    index: int
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class PatchSet:
    """``n`` sampled patches of one image, stored as an (n, 2*P*P) matrix."""

    indices: np.ndarray
    values: np.ndarray
    grid: tuple[int, int]
    source_geometry: tuple[int, int, int]  # (width, height, P)

    def __post_init__(self):
        idx = self.indices
        if idx.ndim != 1 or self.values.shape[0] != idx.size:
            raise GeometryMismatch("indices and values disagree on patch count")
        n_total = self.grid[0] * self.grid[1]
        if idx.size and (idx[0] < 0 or idx[-1] >= n_total or np.any(np.diff(idx) <= 0)):
            raise GeometryMismatch("patch indices must be strictly increasing inside [0, L)")

    def __len__(self) -> int:
        return int(self.indices.size)

    @property
    def num_patches_total(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patches(self) -> list[Patch]:
        return [Patch(int(i), v) for i, v in zip(self.indices, self.values)]


def event_histogram(stream: EventStream) -> EventImage:
    w, h = stream.width, stream.height
    plane = (stream.p < 0).astype(np.int64)
    flat = (plane * h + stream.y) * w + stream.x
    counts = np.bincount(flat, minlength=CHANNELS * h * w).reshape(CHANNELS, h, w)
    return EventImage(counts)


def normalize_image(img: EventImage, clip: int) -> EventImage:
    if clip < 1:
        raise ValueError("clip must be >= 1")
    return EventImage(np.minimum(img.values, clip) / float(clip))


def patch_matrix(values: np.ndarray, patch_size: int) -> np.ndarray:
    """(C, H, W) raster -> (L, C*P*P) matrix of vectorized patches."""
    c, h, w = values.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise NonDivisibleGeometry(f"patch size {p} does not divide {w}x{h}")
    gh, gw = h // p, w // p
    blocks = values.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(blocks.reshape(gh * gw, c * p * p), dtype=np.float64)


def patchify(img: EventImage, patch_size: int) -> list[Patch]:
    mat = patch_matrix(img.values, patch_size)
    return [Patch(i, row) for i, row in enumerate(mat)]


def info_quantities(patches) -> np.ndarray:
    """Information quantity of each patch: the L1 norm of its vector."""
    if isinstance(patches, np.ndarray):
        mat = patches
    else:
        if not patches:
            raise ValueError("need at least one patch")
        mat = np.stack([p.values for p in patches])
    return np.abs(mat).sum(axis=1)


def patch_distribution(d: np.ndarray) -> np.ndarray:
    """L1-normalize information quantities; an all-zero vector gives the uniform distribution."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("information quantities must be non-negative")
    total = d.sum()
    if total > 0:
        return d / total
    return np.full(d.size, 1.0 / d.size)


def masks_from_uniforms(prob: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Draw-remove-renormalize sampling driven by pre-drawn uniforms.

    ``prob`` is (V, L) with one distribution per row, ``u`` is (V, n). Draw k of
    row v picks the index whose cumulative remaining mass first exceeds
    ``u[v, k]`` times the total remaining mass, then zeroes that entry.
    Rows of the result are sorted.
    """
    mass = np.array(prob, dtype=np.float64, copy=True)
    views, size = mass.shape
    rows = np.arange(views)
    out = np.empty(u.shape, dtype=np.int64)
    for k in range(u.shape[1]):
        cdf = np.cumsum(mass, axis=1)
        v = u[:, k] * cdf[:, -1]
        idx = (cdf <= v[:, None]).sum(axis=1)
        # v rounding onto the total would run past the end; take the last live entry
        over = idx >= size
        if np.any(over):
            idx[over] = size - 1 - np.argmax(mass[over, ::-1] > 0, axis=1)
        out[:, k] = idx
        mass[rows, idx] = 0.0
    out.sort(axis=1)
    return out


def _check_support(prob: np.ndarray, n: int) -> None:
    support = int(np.count_nonzero(prob > 0))
    if n < 1 or n > support:
        raise InsufficientSupport(f"cannot draw {n} distinct patches from {support} with positive probability")


def sample_masks(prob: np.ndarray, n: int, rng: np.random.Generator, trials: int = 1) -> np.ndarray:
    """``trials`` independent sorted index sets of size ``n``, drawn without replacement."""
    prob = np.asarray(prob, dtype=np.float64)
    _check_support(prob, n)
    u = rng.random((trials, n))
    return masks_from_uniforms(np.broadcast_to(prob, (trials, prob.size)), u)


def conditional_mask_sample(prob: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    return sample_masks(prob, n, rng, trials=1)[0]


def _fill_sparse(prob: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    # fewer than n informative patches: keep all of them, pad uniformly from the empty ones
    live = np.flatnonzero(prob > 0)
    dead = np.flatnonzero(prob == 0)
    fill = rng.choice(dead, size=n - live.size, replace=False)
    return np.sort(np.concatenate([live, fill]))


def select_patches(d: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Information-weighted choice of ``n`` patch indices for one view.

    When fewer than ``n`` patches carry information, all of them are kept and
    the remainder is filled uniformly from the empty patches.
    """
    prob = patch_distribution(d)
    if n <= np.count_nonzero(prob > 0):
        return conditional_mask_sample(prob, n, rng)
    if n > prob.size:
        raise InsufficientSupport(f"{n} patches requested from a grid of {prob.size}")
    return _fill_sparse(prob, n, rng)


def image_patches(stream: EventStream, cfg: ViewConfig) -> tuple[np.ndarray, tuple[int, int]]:
    """Histogram, normalize and patchify a stream: returns the (L, 2*P*P) matrix and grid."""
    img = normalize_image(event_histogram(stream), cfg.clip)
    mat = patch_matrix(img.values, cfg.patch_size)
    grid = (img.height // cfg.patch_size, img.width // cfg.patch_size)
    return mat, grid


def full_patch_set(stream: EventStream, cfg: ViewConfig) -> PatchSet:
    mat, grid = image_patches(stream, cfg)
    return PatchSet(
        np.arange(mat.shape[0]), mat, grid, (stream.width, stream.height, cfg.patch_size)
    )


def make_view_batch(
    streams: Sequence[EventStream],
    rngs: Sequence[np.random.Generator],
    acfg: AugmentConfig,
    cfg: ViewConfig,
) -> list[PatchSet]:
    """One augmented, masked view per (stream, rng) pair.

    Per view the rng is consumed as: augmentation draws, then ``n`` uniforms
    for the mask, then (only for overly sparse views) the padding choice. The
    mask loop itself is vectorized over all views.
    """
    n = cfg.patches_per_view
    mats, probs, uniforms, geoms, fixed = [], [], [], [], {}
    for i, (stream, rng) in enumerate(zip(streams, rngs)):
        aug = augment_view(stream, acfg, rng)
        mat, grid = image_patches(aug, cfg)
        if n > mat.shape[0]:
            raise InsufficientSupport(f"{n} patches requested from a grid of {mat.shape[0]}")
        prob = patch_distribution(info_quantities(mat))
        uniforms.append(rng.random(n))
        if np.count_nonzero(prob > 0) < n:
            fixed[i] = _fill_sparse(prob, n, rng)
        mats.append(mat)
        probs.append(prob)
        geoms.append((grid, (aug.width, aug.height, cfg.patch_size)))
    live = [i for i in range(len(mats)) if i not in fixed]
    chosen = dict(fixed)
    if live:
        masks = masks_from_uniforms(np.stack([probs[i] for i in live]), np.stack([uniforms[i] for i in live]))
        chosen.update(zip(live, masks))
    out = []
    for i, mat in enumerate(mats):
        idx = chosen[i]
        grid, geom = geoms[i]
        out.append(PatchSet(idx, mat[idx], grid, geom))
    return out


def make_view(stream: EventStream, acfg: AugmentConfig, cfg: ViewConfig, rng: np.random.Generator) -> PatchSet:
    return make_view_batch([stream], [rng], acfg, cfg)[0]


def make_views(
    stream: EventStream,
    acfg: AugmentConfig,
    cfg: ViewConfig,
    rng: np.random.Generator,
) -> tuple[PatchSet, PatchSet]:
    """Two independently augmented and masked views ``(x_q, x_k)`` of one stream."""
    rq, rk = rng.spawn(2)
    return make_view(stream, acfg, cfg, rq), make_view(stream, acfg, cfg, rk)
