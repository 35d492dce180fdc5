"""Simulated multi-rank compositing.

Ranks run as threads sharing one :class:`RankGroup`.  Collectives gather one
contribution per rank behind a barrier and fold them in ascending rank
order, so results are bit-identical no matter which worker arrives first.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .moments import NUM_MOMENTS, ReconstructionParams
from .renderer import (
    ColorImage,
    MomentImage,
    SegmentList,
    depth_bounds,
    render_moment_pass,
    render_resolve_pass,
    render_segment_pass,
)
from .scene import Camera, ScenePartition, TransferFunction

SCALAR_BYTES = 4  # single precision on the wire
COLOR_SCALARS = 4
SEGMENT_COLOR_BYTES = 16
SEGMENT_DEPTH_BYTES = 8
TILE = 64


class CompositingError(RuntimeError):
    pass


class RankError(RuntimeError):
    """A rank worker failed; ``rank`` identifies which."""

    def __init__(self, rank: int, cause: BaseException):
        super().__init__(f"rank {rank}: {cause}")
        self.rank = rank
        self.cause = cause


class OrderingError(CompositingError):
    """Segments of one pixel overlap in depth, so no front-to-back order exists."""


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


@dataclass
class CommStats:
    bytes_moments_allreduce: int = 0
    bytes_color_reduce: int = 0
    segments_exchanged: int = 0
    bytes_segments: int = 0
    bytes_segments_color_only: int = 0
    messages: int = 0
    segment_counts: np.ndarray | None = None
    moment_scalars: int = NUM_MOMENTS
    nonempty_tiles_only: bool = False
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.moment_scalars not in (4, NUM_MOMENTS):
            raise ValueError("moments are counted as 4 or 5 scalars")

    @property
    def total_bytes(self) -> int:
        return self.bytes_moments_allreduce + self.bytes_color_reduce + self.bytes_segments

    def merge(self, other: "CommStats") -> "CommStats":
        self.bytes_moments_allreduce += other.bytes_moments_allreduce
        self.bytes_color_reduce += other.bytes_color_reduce
        self.segments_exchanged += other.segments_exchanged
        self.bytes_segments += other.bytes_segments
        self.bytes_segments_color_only += other.bytes_segments_color_only
        self.messages += other.messages
        if other.segment_counts is not None:
            if self.segment_counts is None:
                self.segment_counts = other.segment_counts.copy()
            else:
                self.segment_counts = self.segment_counts + other.segment_counts
        for k, v in other.timings.items():
            self.timings[k] = self.timings.get(k, 0.0) + v
        return self


def _tile_mask(nonempty: np.ndarray, tile: int = TILE) -> np.ndarray:
    """Expand a per-pixel mask to whole tiles: a pixel counts if its tile holds any content."""
    h, w = nonempty.shape
    th, tw = -(-h // tile), -(-w // tile)
    padded = np.zeros((th * tile, tw * tile), dtype=bool)
    padded[:h, :w] = nonempty
    tiles = padded.reshape(th, tile, tw, tile).any(axis=(1, 3))
    return np.repeat(np.repeat(tiles, tile, axis=0), tile, axis=1)[:h, :w]


def _payload_pixels(images: Sequence, nonempty_tiles_only: bool) -> int:
    if not nonempty_tiles_only:
        return sum(img.width * img.height for img in images)
    return sum(int(_tile_mask(np.any(img.data != 0, axis=-1)).sum()) for img in images)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _ordered(images) -> list:
    """Contributions in ascending rank order; accepts a rank->image mapping or a rank-ordered list."""
    if isinstance(images, Mapping):
        return [images[r] for r in sorted(images)]
    return list(images)


def _fold(arrays: list[np.ndarray]) -> np.ndarray:
    out = arrays[0].copy()
    for a in arrays[1:]:
        out += a
    return out


def allreduce_add_moments(images, moment_scalars: int = NUM_MOMENTS,
                          nonempty_tiles_only: bool = False) -> tuple[MomentImage, CommStats]:
    """Elementwise sum of per-rank moment images, left fold in ascending rank order."""
    images = _ordered(images)
    if not images:
        raise ValueError("no contributions")
    shape = images[0].shape
    if any(img.shape != shape for img in images):
        raise ValueError("moment images differ in size")
    total = MomentImage(images[0].width, images[0].height,
                        _fold([img.data for img in images]), _fold([img.sample_count for img in images]))
    stats = CommStats(
        bytes_moments_allreduce=_payload_pixels(images, nonempty_tiles_only) * moment_scalars * SCALAR_BYTES,
        messages=1,
        moment_scalars=moment_scalars,
        nonempty_tiles_only=nonempty_tiles_only,
    )
    return total, stats


def reduce_add_color(images, root: int = 0, nonempty_tiles_only: bool = False) -> tuple[ColorImage, CommStats]:
    """Elementwise sum of per-rank colour images delivered to ``root``."""
    images = _ordered(images)
    if not images:
        raise ValueError("no contributions")
    if not 0 <= root < len(images):
        raise ValueError(f"root {root} is not a rank")
    shape = images[0].shape
    if any(img.shape != shape for img in images):
        raise ValueError("colour images differ in size")
    total = ColorImage(images[0].width, images[0].height,
                       _fold([img.data for img in images]), _fold([img.sample_count for img in images]))
    stats = CommStats(
        bytes_color_reduce=_payload_pixels(images, nonempty_tiles_only) * COLOR_SCALARS * SCALAR_BYTES,
        messages=1,
        nonempty_tiles_only=nonempty_tiles_only,
    )
    return total, stats


class RankGroup:
    """In-process communicator for ``n`` simulated ranks.

    ``run(worker)`` calls ``worker(comm)`` once per rank on its own thread.
    ``comm`` exposes ``rank``, ``size`` and the collectives below; every rank
    must call the same collectives in the same order.
    """

    def __init__(self, n: int, moment_scalars: int = NUM_MOMENTS, nonempty_tiles_only: bool = False,
                 timeout: float | None = 600.0):
        if n < 1:
            raise ValueError("a rank group needs at least one rank")
        self.n = n
        self.stats = CommStats(moment_scalars=moment_scalars, nonempty_tiles_only=nonempty_tiles_only)
        self._timeout = timeout
        self._slots: list = [None] * n
        self._result = None
        self._barrier = threading.Barrier(n)
        self._lock = threading.Lock()

    def _collective(self, rank: int, value, combine: Callable[[list], tuple]):
        self._slots[rank] = value
        if self._barrier.wait(self._timeout) == 0:
            # exactly one thread combines, always from the rank-ordered slots
            result, stats = combine(list(self._slots))
            with self._lock:
                self.stats.merge(stats)
            self._result = result
        self._barrier.wait(self._timeout)
        result = self._result
        self._barrier.wait(self._timeout)
        return result

    def run(self, worker: Callable[["Communicator"], object]) -> list:
        results: list = [None] * self.n
        errors: list = [None] * self.n

        def target(rank):
            try:
                results[rank] = worker(Communicator(self, rank))
            except BaseException as exc:  # noqa: BLE001 - re-raised on the caller's thread
                errors[rank] = exc
                self._barrier.abort()

        if self.n == 1:
            target(0)
        else:
            threads = [threading.Thread(target=target, args=(r,), name=f"rank-{r}") for r in range(self.n)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        for rank, exc in enumerate(errors):
            if exc is not None and not isinstance(exc, threading.BrokenBarrierError):
                raise RankError(rank, exc) from exc
        for rank, exc in enumerate(errors):
            if exc is not None:
                raise RankError(rank, exc) from exc
        return results


@dataclass
class Communicator:
    group: RankGroup
    rank: int

    @property
    def size(self) -> int:
        return self.group.n

    def allreduce_add_moments(self, image: MomentImage) -> MomentImage:
        g = self.group
        return g._collective(self.rank, image, lambda imgs: allreduce_add_moments(
            imgs, g.stats.moment_scalars, g.stats.nonempty_tiles_only))

    def reduce_add_color(self, image: ColorImage, root: int = 0) -> ColorImage | None:
        g = self.group
        total = g._collective(self.rank, image, lambda imgs: reduce_add_color(
            imgs, root, g.stats.nonempty_tiles_only))
        return total if self.rank == root else None

    def gather(self, value, root: int = 0):
        total = self.group._collective(self.rank, value, lambda vals: (vals, CommStats(messages=1)))
        return total if self.rank == root else None


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    image: ColorImage
    stats: CommStats
    partials: list = field(default_factory=list)

    def __iter__(self):
        # unpacks as (image, stats)
        yield self.image
        yield self.stats


def _stage(timings: dict, name: str, start: float):
    timings[name] = max(timings.get(name, 0.0), time.perf_counter() - start)


def run_apc(scene: ScenePartition, camera: Camera, tf: TransferFunction | None, step: float,
            params: ReconstructionParams, width: int, height: int, root: int = 0,
            moment_scalars: int = NUM_MOMENTS, nonempty_tiles_only: bool = False) -> PipelineResult:
    """Moment pass, moment all-reduce, resolve pass, colour reduce.

    Returns the premultiplied image on ``root`` (background compositing is a
    display concern, see :meth:`ColorImage.composite`) plus accumulated stats
    and each rank's partial image.
    """
    tf = tf or scene.transfer_function
    group = RankGroup(scene.ranks, moment_scalars, nonempty_tiles_only)
    if not scene.assignment:
        return PipelineResult(ColorImage(width, height), group.stats)
    bounds = depth_bounds(scene.bricks, camera)
    timings: dict = {}
    lock = threading.Lock()

    def worker(comm: Communicator):
        bricks = scene.bricks_of(comm.rank)
        t0 = time.perf_counter()
        local = render_moment_pass(bricks, camera, tf, step, bounds, width, height, params.absorbance_max)
        t1 = time.perf_counter()
        global_moments = comm.allreduce_add_moments(local)
        t2 = time.perf_counter()
        partial = render_resolve_pass(bricks, camera, tf, step, global_moments, params, bounds)
        t3 = time.perf_counter()
        final = comm.reduce_add_color(partial, root)
        t4 = time.perf_counter()
        with lock:
            for name, a, b in (("render_moments", t0, t1), ("moments_allreduce", t1, t2),
                               ("render_resolve", t2, t3), ("color_reduce", t3, t4)):
                timings[name] = max(timings.get(name, 0.0), b - a)
        return final, partial

    results = group.run(worker)
    stats = group.stats
    stats.timings.update(timings)
    return PipelineResult(results[root][0], stats, [partial for _, partial in results])


@dataclass
class PixelFragmentSet:
    """All ranks' segments merged and sorted by (pixel, z_start, rank)."""

    segments: SegmentList
    offsets: np.ndarray  # segments of pixel p are segments[offsets[p]:offsets[p + 1]]

    @classmethod
    def merge(cls, per_rank: Sequence[SegmentList], tolerance: float = 1e-9) -> "PixelFragmentSet":
        merged = SegmentList.concatenate([s.with_rank(r) for r, s in enumerate(per_rank)])
        order = np.lexsort((merged.rank, merged.z_start, merged.pixel))
        seg = SegmentList(merged.width, merged.height, merged.pixel[order], merged.z_start[order],
                          merged.z_end[order], merged.rgba[order], merged.rank[order])
        if np.any(seg.z_end < seg.z_start):
            raise OrderingError("segment ends before it starts")
        counts = np.bincount(seg.pixel, minlength=seg.width * seg.height)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        same_pixel = seg.pixel[1:] == seg.pixel[:-1]
        scale = np.maximum(1.0, np.abs(seg.z_end[:-1]))
        overlap = same_pixel & (seg.z_end[:-1] - seg.z_start[1:] > tolerance * scale)
        if overlap.any():
            i = int(np.nonzero(overlap)[0][0])
            p = int(seg.pixel[i])
            same_rank = seg.rank[i] == seg.rank[i + 1]
            kind = "within rank" if same_rank else "across ranks"
            raise OrderingError(
                f"segments overlap {kind} at pixel {(p // seg.width, p % seg.width)}: "
                f"[{seg.z_start[i]}, {seg.z_end[i]}] vs [{seg.z_start[i + 1]}, {seg.z_end[i + 1]}]")
        return cls(seg, offsets)

    def counts(self) -> np.ndarray:
        return self.segments.counts()


def over(front: np.ndarray, back: np.ndarray) -> np.ndarray:
    """Porter-Duff over on premultiplied RGBA (last axis)."""
    front = np.asarray(front, dtype=np.float64)
    back = np.asarray(back, dtype=np.float64)
    return front + (1.0 - front[..., 3:4]) * back


def blend_fragments(fragments: PixelFragmentSet, early_termination: float | None = None) -> ColorImage:
    """Front-to-back over-composite each pixel's sorted segments."""
    seg = fragments.segments
    n_pixels = seg.width * seg.height
    acc = np.zeros((n_pixels, 4))
    position = np.arange(len(seg)) - fragments.offsets[seg.pixel]
    depth = int(position.max()) + 1 if len(seg) else 0
    for j in range(depth):
        sel = position == j
        p = seg.pixel[sel]
        contrib = seg.rgba[sel]
        if early_termination is not None:
            live = acc[p, 3] < early_termination
            p, contrib = p[live], contrib[live]
        acc[p] = over(acc[p], contrib)
    image = ColorImage(seg.width, seg.height, acc.reshape(seg.height, seg.width, 4))
    return image


def run_sort_last(scene: ScenePartition, camera: Camera, tf: TransferFunction | None, step: float,
                  width: int, height: int, root: int = 0,
                  early_termination: float | None = None) -> PipelineResult:
    """Segment pass per rank, gather, per-pixel depth sort, front-to-back blend."""
    tf = tf or scene.transfer_function
    group = RankGroup(scene.ranks)
    timings: dict = {}
    lock = threading.Lock()

    def worker(comm: Communicator):
        t0 = time.perf_counter()
        segments = render_segment_pass(scene.bricks_of(comm.rank), camera, tf, step, width, height)
        t1 = time.perf_counter()
        gathered = comm.gather(segments, root)
        t2 = time.perf_counter()
        image = None
        if gathered is not None:
            fragments = PixelFragmentSet.merge(gathered)
            image = blend_fragments(fragments, early_termination)
            image.sample_count = fragments.counts()
        t3 = time.perf_counter()
        with lock:
            for name, a, b in (("render_segments", t0, t1), ("segment_exchange", t1, t2), ("blend", t2, t3)):
                timings[name] = max(timings.get(name, 0.0), b - a)
        return image, segments

    results = group.run(worker)
    per_rank = [segments for _, segments in results]
    m = sum(len(s) for s in per_rank)
    stats = group.stats
    stats.segments_exchanged = m
    stats.bytes_segments = m * (SEGMENT_COLOR_BYTES + SEGMENT_DEPTH_BYTES)
    stats.bytes_segments_color_only = m * SEGMENT_COLOR_BYTES
    stats.segment_counts = results[root][0].sample_count.copy()
    stats.timings.update(timings)
    return PipelineResult(results[root][0], stats, per_rank)


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    algorithm: str
    n: int
    scalars: int  # payload scalars (APC) or 0
    bytes: int  # payload bytes, including what stays on the originating rank
    inter_rank_bytes: int  # bytes that actually leave their rank
    segments_transferred: float  # segments, or segment-equivalents for APC
    nonempty_pixels: int
    avg_segments_per_nonempty_pixel: float
    upper_bound_per_pixel: float  # inf when unbounded


def block_owner(n_pixels: int, n: int) -> np.ndarray:
    """Owner rank of every flat pixel index under recursive halving of the image.

    Level ``l`` of the halving decides bit ``l`` of the owner, which is how
    binary swap hands out image regions; direct send reuses the same map.
    """
    owner = np.zeros(n_pixels, dtype=np.int64)
    lo = np.zeros(n_pixels, dtype=np.int64)
    hi = np.full(n_pixels, n_pixels, dtype=np.int64)
    idx = np.arange(n_pixels)
    level = 0
    while (1 << level) < n:
        mid = (lo + hi) // 2
        upper = idx >= mid
        owner |= upper.astype(np.int64) << level
        lo = np.where(upper, mid, lo)
        hi = np.where(upper, hi, mid)
        level += 1
    return owner


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def cost_model(algorithm: str, n: int, width: int, height: int, segments: SegmentList | None = None,
               rank_coverage: Sequence[np.ndarray] | None = None, moment_scalars: int = NUM_MOMENTS,
               nonempty_tiles_only: bool = False) -> CostReport:
    """Communication volume of one frame under ``apc``, ``direct_send`` or ``binary_swap``.

    ``segments`` (with per-segment source ranks) is needed for the segment
    based models and to know which pixels are non-empty.  ``rank_coverage``
    holds each rank's per-pixel content mask and only matters for APC with
    ``nonempty_tiles_only``.  One APC segment-equivalent is one per-pixel
    contribution to a reduction, so each rank costs two per pixel.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    n_pixels = width * height
    if segments is not None:
        counts = np.bincount(segments.pixel, minlength=n_pixels)
        nonempty = counts > 0
    elif rank_coverage is not None:
        nonempty = np.any([np.asarray(c).reshape(-1) for c in rank_coverage], axis=0)
    else:
        nonempty = np.ones(n_pixels, dtype=bool)
    n_nonempty = int(nonempty.sum())

    if algorithm == "apc":
        per_scalar = moment_scalars + COLOR_SCALARS
        if nonempty_tiles_only:
            if rank_coverage is None:
                raise ValueError("tile-aware APC accounting needs per-rank coverage")
            masks = [_tile_mask(np.asarray(c).reshape(height, width)).reshape(-1) for c in rank_coverage]
            contributors = np.sum(masks, axis=0)
        else:
            contributors = np.full(n_pixels, n)
        total_contrib = int(contributors.sum())
        scalars = total_contrib * per_scalar
        inter = 0 if n == 1 else int(scalars * (n - 1) // n) * SCALAR_BYTES
        equivalents = 2.0 * contributors[nonempty].sum()
        avg = equivalents / n_nonempty if n_nonempty else 0.0
        return CostReport("apc", n, scalars, scalars * SCALAR_BYTES, inter, float(equivalents),
                          n_nonempty, float(avg), 2.0 * n)

    if segments is None:
        raise ValueError(f"{algorithm} accounting needs the segment lists")
    seg_bytes = SEGMENT_COLOR_BYTES + SEGMENT_DEPTH_BYTES
    m = len(segments)
    owner = block_owner(n_pixels, n)[segments.pixel]
    if algorithm == "direct_send":
        transferred = m
        moved = int(np.sum(segments.rank != owner))
    elif algorithm == "binary_swap":
        if not _is_power_of_two(n):
            raise ValueError(f"binary swap needs a power-of-two rank count, got {n}")
        # a segment is forwarded at every level where its holder's bit differs from the owner's
        hops = np.zeros(m, dtype=np.int64)
        diff = segments.rank ^ owner
        while np.any(diff):
            hops += diff & 1
            diff >>= 1
        transferred = int(hops.sum())
        moved = transferred
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    avg = transferred / n_nonempty if n_nonempty else 0.0
    return CostReport(algorithm, n, 0, transferred * seg_bytes, moved * seg_bytes, float(transferred),
                      n_nonempty, float(avg), float("inf"))
