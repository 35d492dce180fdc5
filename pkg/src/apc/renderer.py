"""Per-rank raymarching passes.

All passes place samples on the same per-ray grid ``t_k = (k + 1/2) * step``
measured from the camera, so the depth of a sample never depends on which
brick or rank it falls in.  A sample belongs to the brick that contains its
position under half-open containment, which makes the sample sets of a
partitioned scene an exact partition of the single-node sample set.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .moments import (
    NUM_MOMENTS,
    DepthBounds,
    MomentDegeneracyError,
    ReconstructionParams,
    moment_contributions,
    reconstruct_transmittance_array,
    sample_absorbance,
    warp_depth_array,
)
from .scene import Camera, TransferFunction, VolumeBrick, voxel_coordinates

# Pixels processed per chunk; bounds the size of the per-sample arrays.
CHUNK_PIXELS = 16384


@dataclass(frozen=True)
class RaySample:
    """One sample along a ray (the batched passes use :class:`SampleBatch`)."""

    depth: float
    scalar: float
    color: tuple[float, float, float, float]
    transmittance: float


@dataclass
class SampleBatch:
    """All samples one brick contributes to a range of pixels, sorted by (pixel, k)."""

    pixel: np.ndarray  # index relative to the chunk start
    k: np.ndarray
    depth: np.ndarray
    scalar: np.ndarray
    color: np.ndarray  # straight RGBA from the transfer function
    alpha: np.ndarray  # step-corrected opacity
    transmittance: np.ndarray

    def __len__(self):
        return len(self.pixel)

    def sample(self, i: int) -> RaySample:
        return RaySample(float(self.depth[i]), float(self.scalar[i]),
                         tuple(float(c) for c in self.color[i]), float(self.transmittance[i]))


@dataclass
class MomentImage:
    width: int
    height: int
    data: np.ndarray = None  # (height, width, 5)
    sample_count: np.ndarray = None  # (height, width)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if self.data is None:
            self.data = np.zeros((self.height, self.width, NUM_MOMENTS))
        if self.sample_count is None:
            self.sample_count = np.zeros((self.height, self.width), dtype=np.int64)
        if self.data.shape != (self.height, self.width, NUM_MOMENTS):
            raise ValueError(f"moment data has shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def copy(self) -> "MomentImage":
        return MomentImage(self.width, self.height, self.data.copy(), self.sample_count.copy())


@dataclass
class ColorImage:
    """Premultiplied RGBA accumulator."""

    width: int
    height: int
    data: np.ndarray = None  # (height, width, 4)
    sample_count: np.ndarray = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        if self.data is None:
            self.data = np.zeros((self.height, self.width, 4))
        if self.sample_count is None:
            self.sample_count = np.zeros((self.height, self.width), dtype=np.int64)
        if self.data.shape != (self.height, self.width, 4):
            raise ValueError(f"color data has shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def copy(self) -> "ColorImage":
        return ColorImage(self.width, self.height, self.data.copy(), self.sample_count.copy())

    def composite(self, background=(1.0, 1.0, 1.0)) -> np.ndarray:
        """Opaque RGB after blending over a constant background."""
        rgb = self.data[..., :3]
        alpha = np.clip(self.data[..., 3:], 0.0, 1.0)
        return np.clip(rgb + (1.0 - alpha) * np.asarray(background, dtype=np.float64), 0.0, 1.0)


@dataclass
class SegmentList:
    """Depth-bounded premultiplied segments, stored as flat per-segment arrays."""

    width: int
    height: int
    pixel: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # flat pixel index
    z_start: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z_end: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rgba: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    rank: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.pixel)

    def counts(self) -> np.ndarray:
        return np.bincount(self.pixel, minlength=self.width * self.height).reshape(self.height, self.width)

    def with_rank(self, rank: int) -> "SegmentList":
        return SegmentList(self.width, self.height, self.pixel, self.z_start, self.z_end, self.rgba,
                           np.full(len(self.pixel), rank, dtype=np.int64))

    @staticmethod
    def concatenate(lists: Sequence["SegmentList"]) -> "SegmentList":
        first = lists[0]
        return SegmentList(
            first.width,
            first.height,
            np.concatenate([s.pixel for s in lists]),
            np.concatenate([s.z_start for s in lists]),
            np.concatenate([s.z_end for s in lists]),
            np.concatenate([s.rgba for s in lists]),
            np.concatenate([s.rank for s in lists]),
        )


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def ray_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab test. Returns entry and exit distances (clamped to ``t >= 0``) and a hit mask."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    parallel = dirs == 0.0
    if parallel.any():
        within = (origin >= lo) & (origin <= hi)
        tmin = np.where(parallel, np.where(within, -np.inf, np.inf), tmin)
        tmax = np.where(parallel, np.where(within, np.inf, -np.inf), tmax)
    t_in = np.maximum(tmin.max(axis=-1), 0.0)
    t_out = tmax.min(axis=-1)
    return t_in, t_out, t_out > t_in


def depth_bounds(bricks: Iterable[VolumeBrick], camera: Camera) -> DepthBounds:
    """Near/far distances of the union of the bricks' bounding boxes from the camera."""
    bricks = list(bricks)
    if not bricks:
        raise ValueError("cannot derive depth bounds without data")
    lo = np.min([b.lo for b in bricks], axis=0)
    hi = np.max([b.hi for b in bricks], axis=0)
    pos = np.array(camera.position)
    nearest = np.clip(pos, lo, hi)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    far = float(np.max(np.linalg.norm(corners - pos, axis=1)))
    near = float(np.linalg.norm(nearest - pos))
    # camera inside the data: keep near positive
    near = max(near, 1e-3 * far)
    return DepthBounds(near, far)


def march_brick(brick: VolumeBrick, origin: np.ndarray, dirs: np.ndarray, step: float,
                tf: TransferFunction) -> tuple[SampleBatch, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Samples of ``brick`` along rays ``dirs`` (shape ``(m, 3)``).

    Also returns the per-ray entry/exit distances and hit mask of the brick.
    """
    t_in, t_out, hit = ray_box(origin, dirs, brick.lo, brick.hi)
    rays = np.nonzero(hit)[0]
    # one extra candidate on each side; exact membership is decided on the point
    k_first = np.maximum(np.ceil(t_in[rays] / step - 0.5).astype(np.int64) - 1, 0)
    k_last = np.floor(t_out[rays] / step - 0.5).astype(np.int64) + 1
    counts = np.maximum(k_last - k_first + 1, 0)
    total = int(counts.sum())

    pixel = np.repeat(rays, counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    k = np.repeat(k_first, counts) + (np.arange(total) - starts)
    depth = (k + 0.5) * step
    points = origin + depth[:, None] * dirs[pixel]
    inside = brick.contains(points)
    pixel, k, depth, points = pixel[inside], k[inside], depth[inside], points[inside]

    if len(pixel):
        scalar = map_coordinates(brick.scalars, voxel_coordinates(brick, points).T, order=1, mode="nearest")
    else:
        scalar = np.zeros(0)
    color = tf(scalar)
    transmittance = (1.0 - color[:, 3]) ** (step / tf.reference_step)
    alpha = 1.0 - transmittance
    batch = SampleBatch(pixel, k, depth, scalar, color, alpha, transmittance)
    return batch, (t_in, t_out, hit)


def _chunks(n_pixels: int):
    for start in range(0, n_pixels, CHUNK_PIXELS):
        yield start, min(start + CHUNK_PIXELS, n_pixels)


def _check_step(step: float):
    if not step > 0:
        raise ValueError(f"step size must be positive, got {step}")


# ---------------------------------------------------------------------------
# Passes
# ---------------------------------------------------------------------------


def render_moment_pass(bricks: Sequence[VolumeBrick], camera: Camera, tf: TransferFunction, step: float,
                       bounds: DepthBounds, width: int, height: int,
                       absorbance_max: float = ReconstructionParams.absorbance_max) -> MomentImage:
    """Accumulate per-pixel power moments over every sample of ``bricks``."""
    _check_step(step)
    image = MomentImage(width, height)
    if not bricks:
        return image
    origin, dirs = camera.rays(width, height)
    dirs = dirs.reshape(-1, 3)
    data = image.data.reshape(-1, NUM_MOMENTS)
    count = image.sample_count.reshape(-1)
    for start, stop in _chunks(width * height):
        size = stop - start
        for brick in bricks:
            s, _ = march_brick(brick, origin, dirs[start:stop], step, tf)
            if not len(s):
                continue
            z = warp_depth_array(s.depth, bounds)
            contrib = moment_contributions(z, sample_absorbance(s.transmittance, absorbance_max))
            for i in range(NUM_MOMENTS):
                data[start:stop, i] += np.bincount(s.pixel, contrib[:, i], minlength=size)
            count[start:stop] += np.bincount(s.pixel, minlength=size)
    return image


def render_resolve_pass(bricks: Sequence[VolumeBrick], camera: Camera, tf: TransferFunction, step: float,
                        global_moments: MomentImage, params: ReconstructionParams,
                        bounds: DepthBounds) -> ColorImage:
    """Shade every sample with the transmittance reconstructed from ``global_moments``.

    Contributions are summed, never blended, so the result does not depend
    on traversal order and partial images of different ranks simply add up.
    """
    _check_step(step)
    width, height = global_moments.width, global_moments.height
    image = ColorImage(width, height)
    if not bricks:
        return image
    origin, dirs = camera.rays(width, height)
    dirs = dirs.reshape(-1, 3)
    moments = global_moments.data.reshape(-1, NUM_MOMENTS)
    data = image.data.reshape(-1, 4)
    count = image.sample_count.reshape(-1)
    for start, stop in _chunks(width * height):
        size = stop - start
        for brick in bricks:
            s, _ = march_brick(brick, origin, dirs[start:stop], step, tf)
            if not len(s):
                continue
            z = warp_depth_array(s.depth, bounds)
            try:
                t = reconstruct_transmittance_array(moments[start + s.pixel], z, params)
            except MomentDegeneracyError as err:
                flat = start + int(s.pixel[err.pixel[0]]) if err.pixel else start
                raise err.with_pixel((flat // width, flat % width)) from None
            weight = t * s.alpha
            for c in range(3):
                data[start:stop, c] += np.bincount(s.pixel, weight * s.color[:, c], minlength=size)
            data[start:stop, 3] += np.bincount(s.pixel, weight, minlength=size)
            count[start:stop] += np.bincount(s.pixel, minlength=size)
    return image


def render_segment_pass(bricks: Sequence[VolumeBrick], camera: Camera, tf: TransferFunction, step: float,
                        width: int, height: int) -> SegmentList:
    """One front-to-back composited segment per (pixel, brick) interval holding samples."""
    _check_step(step)
    out = [SegmentList(width, height)]
    if not bricks:
        return out[0]
    origin, dirs = camera.rays(width, height)
    dirs = dirs.reshape(-1, 3)
    for start, stop in _chunks(width * height):
        for brick in bricks:
            s, (t_in, t_out, _) = march_brick(brick, origin, dirs[start:stop], step, tf)
            if not len(s):
                continue
            seg_pixel, first, group = np.unique(s.pixel, return_index=True, return_inverse=True)
            position = np.arange(len(s)) - first[group]
            rgb = np.zeros((len(seg_pixel), 3))
            acc_alpha = np.zeros(len(seg_pixel))
            for j in range(int(position.max()) + 1):
                sel = position == j
                g = group[sel]
                remaining = 1.0 - acc_alpha[g]
                a = s.alpha[sel]
                rgb[g] += (remaining * a)[:, None] * s.color[sel, :3]
                acc_alpha[g] += remaining * a
            out.append(SegmentList(
                width, height,
                pixel=seg_pixel + start,
                z_start=t_in[seg_pixel],
                z_end=t_out[seg_pixel],
                rgba=np.column_stack([rgb, acc_alpha]),
                rank=np.zeros(len(seg_pixel), dtype=np.int64),
            ))
    return SegmentList.concatenate(out)


def render_single_node_mboit(bricks: Sequence[VolumeBrick], camera: Camera, tf: TransferFunction, step: float,
                             params: ReconstructionParams, width: int, height: int,
                             bounds: DepthBounds | None = None) -> ColorImage:
    """Both passes over the whole scene in one address space."""
    bricks = list(bricks)
    if not bricks:
        return ColorImage(width, height)
    if bounds is None:
        bounds = depth_bounds(bricks, camera)
    moments = render_moment_pass(bricks, camera, tf, step, bounds, width, height, params.absorbance_max)
    return render_resolve_pass(bricks, camera, tf, step, moments, params, bounds)


def render_front_to_back(bricks: Sequence[VolumeBrick], camera: Camera, tf: TransferFunction, step: float,
                         width: int, height: int) -> ColorImage:
    """Reference raymarcher: global sample loop with the over operator.

    Deliberately shares no sampling code with the passes above: it walks the
    global sample index, tests containment and interpolates by hand.
    """
    _check_step(step)
    image = ColorImage(width, height)
    bricks = list(bricks)
    if not bricks:
        return image
    origin, dirs = camera.rays(width, height)
    dirs = dirs.reshape(-1, 3)
    bounds = depth_bounds(bricks, camera)
    acc = np.zeros((width * height, 4))
    count = np.zeros(width * height, dtype=np.int64)
    exponent = step / tf.reference_step
    for k in range(max(int(bounds.near / step) - 1, 0), int(bounds.far / step) + 1):
        points = origin + ((k + 0.5) * step) * dirs
        for brick in bricks:
            lo, hi = brick.lo, brick.hi
            inside = np.all((points >= lo) & (points < hi), axis=1)
            if not inside.any():
                continue
            value = _trilinear(brick, points[inside])
            rgba = tf(value)
            a = 1.0 - (1.0 - rgba[:, 3]) ** exponent
            remaining = 1.0 - acc[inside, 3]
            acc[inside, :3] += (remaining * a)[:, None] * rgba[:, :3]
            acc[inside, 3] += remaining * a
            count[inside] += 1
    image.data[...] = acc.reshape(height, width, 4)
    image.sample_count[...] = count.reshape(height, width)
    return image


def _trilinear(brick: VolumeBrick, points: np.ndarray) -> np.ndarray:
    grid = brick.scalars
    coords = (points - brick.lo) / brick.spacing - 0.5 + np.array(brick.ghost_lo)
    shape = np.array(grid.shape)
    coords = np.clip(coords, 0.0, shape - 1)
    base = np.minimum(np.floor(coords).astype(np.int64), shape - 2).clip(min=0)
    frac = coords - base
    out = np.zeros(len(points))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx = np.minimum(base + np.array([dx, dy, dz]), shape - 1)
                w = (np.where(dx, frac[:, 0], 1 - frac[:, 0])
                     * np.where(dy, frac[:, 1], 1 - frac[:, 1])
                     * np.where(dz, frac[:, 2], 1 - frac[:, 2]))
                out += w * grid[idx[:, 0], idx[:, 1], idx[:, 2]]
    return out
