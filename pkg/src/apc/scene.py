"""Synthetic volumes, transfer functions, cameras and rank partitions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.ndimage import map_coordinates

SCENE_FORMAT = "apc-scene"
SCENE_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Volume bricks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VolumeBrick:
    """A regular block of cell-centred voxels.

    ``scalars`` may carry extra ghost layers copied from neighbouring bricks
    (``ghost_lo`` / ``ghost_hi`` voxels per axis).  Ghost voxels are used for
    interpolation only; the brick owns exactly ``dims`` voxels starting at
    ``origin``.  With one ghost layer on every cut face, a split brick samples
    identically to the brick it was cut from.
    """

    origin: tuple[float, float, float]
    spacing: float
    scalars: np.ndarray
    ghost_lo: tuple[int, int, int] = (0, 0, 0)
    ghost_hi: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        scalars = np.array(self.scalars, dtype=np.float64)
        if scalars.ndim != 3:
            raise ValueError(f"scalars must be 3D, got shape {scalars.shape}")
        if not np.all(np.isfinite(scalars)):
            raise ValueError("scalar values must be finite")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        scalars.setflags(write=False)
        object.__setattr__(self, "scalars", scalars)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "ghost_lo", tuple(int(v) for v in self.ghost_lo))
        object.__setattr__(self, "ghost_hi", tuple(int(v) for v in self.ghost_hi))
        if any(d < 1 for d in self.dims):
            raise ValueError(f"brick must own at least one voxel per axis, got dims {self.dims}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(
            int(s - lo - hi) for s, lo, hi in zip(self.scalars.shape, self.ghost_lo, self.ghost_hi)
        )

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.origin)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.origin) + np.array(self.dims) * self.spacing

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def owned_scalars(self) -> np.ndarray:
        sl = tuple(slice(lo, s - hi) for s, lo, hi in zip(self.scalars.shape, self.ghost_lo, self.ghost_hi))
        return self.scalars[sl]

    def contains(self, points) -> np.ndarray:
        """Half-open containment ``lo <= p < hi`` so shared faces belong to one brick."""
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.lo) & (p < self.hi), axis=-1)


def sample_scalar(brick: VolumeBrick, p) -> float | None:
    """Trilinear sample at world point ``p``, or ``None`` outside the brick."""
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    values, inside = sample_scalar_array(brick, p)
    return float(values[0]) if inside[0] else None


def sample_scalar_array(brick: VolumeBrick, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised trilinear sampling. Returns values (0 outside) and an inside mask."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = brick.contains(points)
    values = np.zeros(len(points), dtype=np.float64)
    if inside.any():
        coords = voxel_coordinates(brick, points[inside])
        values[inside] = map_coordinates(brick.scalars, coords.T, order=1, mode="nearest")
    return values, inside


def voxel_coordinates(brick: VolumeBrick, points: np.ndarray) -> np.ndarray:
    """Continuous index coordinates into ``brick.scalars`` (voxel centres at integers)."""
    return (points - brick.lo) / brick.spacing - 0.5 + np.array(brick.ghost_lo)


def split_brick(brick: VolumeBrick, axis: int, index: int) -> tuple[VolumeBrick, VolumeBrick]:
    """Cut ``brick`` after owned voxel ``index - 1`` along ``axis``, adding one ghost layer."""
    dims = brick.dims
    if not 0 < index < dims[axis]:
        raise ValueError(f"cut index {index} outside 1..{dims[axis] - 1}")
    glo, ghi = list(brick.ghost_lo), list(brick.ghost_hi)
    cut = glo[axis] + index  # first scalar index of the upper piece

    lower_sl = [slice(None)] * 3
    lower_sl[axis] = slice(0, cut + 1)
    lower_ghi = list(ghi)
    lower_ghi[axis] = 1
    lower = VolumeBrick(brick.origin, brick.spacing, brick.scalars[tuple(lower_sl)], tuple(glo), tuple(lower_ghi))

    upper_sl = [slice(None)] * 3
    upper_sl[axis] = slice(cut - 1, None)
    upper_glo = list(glo)
    upper_glo[axis] = 1
    upper_origin = list(brick.origin)
    upper_origin[axis] = brick.origin[axis] + index * brick.spacing
    upper = VolumeBrick(tuple(upper_origin), brick.spacing, brick.scalars[tuple(upper_sl)], tuple(upper_glo), tuple(ghi))
    return lower, upper


# ---------------------------------------------------------------------------
# Transfer functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransferFunction:
    """Piecewise-linear map from scalar to straight (non-premultiplied) RGBA.

    Opacity is specified per ``reference_step`` world units of travel; the
    renderer corrects it for the actual step size.
    """

    points: tuple[tuple[float, tuple[float, float, float, float]], ...]
    reference_step: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        pts = tuple((float(v), tuple(float(c) for c in rgba)) for v, rgba in self.points)
        if not pts:
            raise ValueError("transfer function needs at least one control point")
        values = [v for v, _ in pts]
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("control points must be sorted by scalar value")
        for _, rgba in pts:
            if len(rgba) != 4 or not all(0.0 <= c <= 1.0 for c in rgba):
                raise ValueError(f"RGBA channels must lie in [0, 1], got {rgba}")
        if not self.reference_step > 0:
            raise ValueError("reference_step must be positive")
        object.__setattr__(self, "points", pts)

    @property
    def domain(self) -> tuple[float, float]:
        return self.points[0][0], self.points[-1][0]

    def __call__(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        xs = np.array([v for v, _ in self.points])
        table = np.array([rgba for _, rgba in self.points])
        out = np.empty(values.shape + (4,), dtype=np.float64)
        for c in range(4):
            out[..., c] = np.interp(values, xs, table[:, c])
        return out


def cold_warm(opacity: float = 0.05) -> TransferFunction:
    """Diverging blue-white-red ramp over ``[0, 1]`` with constant opacity."""
    return TransferFunction(
        (
            (0.0, (0.23, 0.30, 0.75, opacity)),
            (0.5, (0.87, 0.87, 0.87, opacity)),
            (1.0, (0.71, 0.02, 0.15, opacity)),
        ),
        name="cold_warm",
    )


def opaque_rainbow(opacity: float = 0.3) -> TransferFunction:
    """Rainbow ramp over ``[0, 1]`` with opacity rising toward the top."""
    return TransferFunction(
        (
            (0.0, (0.0, 0.0, 1.0, 0.0)),
            (0.25, (0.0, 1.0, 1.0, opacity * 0.5)),
            (0.5, (0.0, 1.0, 0.0, opacity * 0.75)),
            (0.75, (1.0, 1.0, 0.0, opacity)),
            (1.0, (1.0, 0.0, 0.0, opacity)),
        ),
        name="opaque_rainbow",
    )


TRANSFER_FUNCTIONS = {"cold_warm": cold_warm, "opaque_rainbow": opaque_rainbow}


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


def _normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Camera:
    position: tuple[float, float, float]
    look_at: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov_deg: float = 40.0
    aspect: float = 1.0

    def __post_init__(self):
        for name in ("position", "look_at", "up"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        view = np.subtract(self.look_at, self.position)
        if np.linalg.norm(view) == 0:
            raise ValueError("look_at must differ from position")
        if np.linalg.norm(np.cross(view, self.up)) <= 1e-12 * np.linalg.norm(view) * np.linalg.norm(self.up):
            raise ValueError("up must not be parallel to the view direction")
        if not 0 < self.fov_deg < 180:
            raise ValueError("fov_deg must lie in (0, 180)")
        if not self.aspect > 0:
            raise ValueError("aspect must be positive")

    def rays(self, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
        """Ray origin and unit directions of shape ``(height, width, 3)``; row 0 is the top."""
        forward = _normalize(np.subtract(self.look_at, self.position))
        right = _normalize(np.cross(forward, self.up))
        true_up = np.cross(right, forward)
        half = math.tan(math.radians(self.fov_deg) / 2.0)
        xs = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) * half * self.aspect
        ys = (1.0 - (np.arange(height) + 0.5) / height * 2.0) * half
        dirs = forward + xs[None, :, None] * right + ys[:, None, None] * true_up
        return np.array(self.position), _normalize(dirs)


def orbit_cameras(
    center,
    radius: float,
    count: int,
    elevation_deg: float = 0.0,
    fov_deg: float = 40.0,
    aspect: float = 1.0,
) -> list[Camera]:
    """``count`` cameras evenly spaced in azimuth around the vertical axis.

    Camera 0 sits on the +z side looking down -z.
    """
    if count < 1:
        raise ValueError("orbit needs at least one camera")
    center = np.asarray(center, dtype=np.float64)
    elev = math.radians(elevation_deg)
    cams = []
    for k in range(count):
        phi = 2.0 * math.pi * k / count
        offset = radius * np.array([math.sin(phi) * math.cos(elev), math.sin(elev), math.cos(phi) * math.cos(elev)])
        cams.append(Camera(tuple(center + offset), tuple(center), fov_deg=fov_deg, aspect=aspect))
    return cams


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScenePartition:
    ranks: int
    assignment: tuple[tuple[VolumeBrick, int], ...]
    transfer_function: TransferFunction = field(default_factory=cold_warm)
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple((b, int(r)) for b, r in self.assignment))
        if self.ranks < 1:
            raise ValueError("a scene needs at least one rank")
        for _, r in self.assignment:
            if not 0 <= r < self.ranks:
                raise ValueError(f"rank id {r} outside 0..{self.ranks - 1}")
        overlaps = self.overlapping_pairs()
        if overlaps:
            raise ValueError(f"bricks overlap in world space: {overlaps[:3]}")

    @property
    def bricks(self) -> list[VolumeBrick]:
        return [b for b, _ in self.assignment]

    def bricks_of(self, rank: int) -> list[VolumeBrick]:
        return [b for b, r in self.assignment if r == rank]

    def overlapping_pairs(self) -> list[tuple[int, int]]:
        pairs = []
        for (i, (a, _)), (j, (b, _)) in combinations(enumerate(self.assignment), 2):
            if intersection_volume(a, b) > 0:
                pairs.append((i, j))
        return pairs

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.assignment:
            raise ValueError("empty scene has no bounds")
        lo = np.min([b.lo for b in self.bricks], axis=0)
        hi = np.max([b.hi for b in self.bricks], axis=0)
        return lo, hi

    def default_cameras(self, count: int = 1, elevation_deg: float = 0.0, fov_deg: float = 40.0,
                        aspect: float = 1.0, distance: float = 3.0) -> list[Camera]:
        """Orbit around the scene centre far enough to keep the bounding sphere in view."""
        lo, hi = self.bounds()
        center = 0.5 * (lo + hi)
        radius = 0.5 * float(np.linalg.norm(hi - lo))
        return orbit_cameras(center, distance * radius, count, elevation_deg, fov_deg, aspect)

    def with_assignment(self, ranks: list[int], n: int | None = None) -> "ScenePartition":
        """Same bricks, new brick-to-rank map."""
        if len(ranks) != len(self.assignment):
            raise ValueError("need one rank id per brick")
        return ScenePartition(
            self.ranks if n is None else n,
            tuple((b, r) for b, r in zip(self.bricks, ranks)),
            self.transfer_function,
            self.name,
            dict(self.params),
        )

    def permuted(self, permutation) -> "ScenePartition":
        """Relabel ranks: brick owned by ``r`` moves to ``permutation[r]``."""
        permutation = list(permutation)
        if sorted(permutation) != list(range(self.ranks)):
            raise ValueError("not a permutation of the rank ids")
        return self.with_assignment([permutation[r] for _, r in self.assignment])


def intersection_volume(a: VolumeBrick, b: VolumeBrick) -> float:
    extent = np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo)
    return float(np.prod(np.clip(extent, 0.0, None)))


# ---------------------------------------------------------------------------
# Scene generators
# ---------------------------------------------------------------------------


def make_sandwich_scene(n: int = 2, slab_resolution: int = 32, slab_thickness: int = 2,
                        opacity: float = 0.05) -> ScenePartition:
    """``4n`` slabs stacked along z; slab ``k`` belongs to rank ``k mod n``.

    Every rank's data interleaves with every other rank's in depth, the worst
    case for sort-last compositing.  Each slab is homogeneous with a scalar
    encoding its owner so ranks are distinguishable in the image.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if slab_resolution < 1 or slab_thickness < 1:
        raise ValueError("slab dimensions must be positive")
    assignment = []
    for k in range(4 * n):
        rank = k % n
        value = (rank + 0.5) / n
        data = np.full((slab_resolution, slab_resolution, slab_thickness), value)
        brick = VolumeBrick((0.0, 0.0, float(k * slab_thickness)), 1.0, data)
        assignment.append((brick, rank))
    return ScenePartition(
        n,
        tuple(assignment),
        cold_warm(opacity),
        "sandwich",
        {"n": n, "slab_resolution": slab_resolution, "slab_thickness": slab_thickness, "opacity": opacity},
    )


def concentric_transfer_function(red_opacity: float = 0.06, blue_opacity: float = 0.04) -> TransferFunction:
    return TransferFunction(
        (
            (0.0, (0.0, 0.0, 0.0, 0.0)),
            (0.5, (1.0, 0.0, 0.0, red_opacity)),
            (1.0, (0.0, 0.0, 1.0, blue_opacity)),
        ),
        name="red_blue_shells",
    )


def grid_split(brick: VolumeBrick, splits: tuple[int, int, int]) -> list[VolumeBrick]:
    """Cut ``brick`` into ``splits[axis]`` near-equal pieces along each axis."""
    pieces = [brick]
    for axis, count in enumerate(splits):
        if count < 1:
            raise ValueError("split counts must be positive")
        new_pieces = []
        for piece in pieces:
            size = piece.dims[axis]
            cuts = sorted({round(size * i / count) for i in range(1, count)} - {0, size})
            rest = piece
            consumed = 0
            for cut in cuts:
                lower, rest = split_brick(rest, axis, cut - consumed)
                consumed = cut
                new_pieces.append(lower)
            new_pieces.append(rest)
        pieces = new_pieces
    return pieces


RANK_SPLITS = {1: (1, 1, 1), 2: (2, 1, 1), 4: (2, 2, 1), 8: (2, 2, 2)}


def make_concentric_scene(shells: int = 4, rank_split: int = 2, resolution: int = 64,
                          red_opacity: float = 0.06, blue_opacity: float = 0.04) -> ScenePartition:
    """Nested spherical shells alternating red (innermost) and blue.

    Scalars are 0.5 inside red shells, 1.0 inside blue shells and 0 outside
    the outer sphere.  ``rank_split`` of 2, 4 or 8 cuts the cube into halves,
    quarters or octants, each owned by its own rank.
    """
    if shells < 2:
        raise ValueError("need at least two shells")
    if rank_split not in RANK_SPLITS:
        raise ValueError(f"rank_split must be one of {sorted(RANK_SPLITS)}")
    idx = np.arange(resolution) + 0.5
    c = resolution / 2.0
    x, y, z = np.meshgrid(idx - c, idx - c, idx - c, indexing="ij")
    dist = np.sqrt(x * x + y * y + z * z)
    outer = 0.95 * c
    shell = np.floor(dist / (outer / shells)).astype(int)
    scalars = np.where(shell % 2 == 0, 0.5, 1.0)
    scalars[dist >= outer] = 0.0
    cube = VolumeBrick((0.0, 0.0, 0.0), 1.0, scalars)
    pieces = grid_split(cube, RANK_SPLITS[rank_split])
    return ScenePartition(
        rank_split,
        tuple((p, r) for r, p in enumerate(pieces)),
        concentric_transfer_function(red_opacity, blue_opacity),
        "concentric",
        {"shells": shells, "rank_split": rank_split, "resolution": resolution,
         "red_opacity": red_opacity, "blue_opacity": blue_opacity},
    )


def spikes_transfer_function(background_opacity: float = 0.01, sheet_opacity: float = 0.97) -> TransferFunction:
    return TransferFunction(
        (
            (0.25, (0.1, 0.2, 1.0, background_opacity)),
            (0.9, (1.0, 0.0, 0.0, sheet_opacity)),
            (1.0, (1.0, 0.0, 0.0, sheet_opacity)),
        ),
        name="blue_red_spikes",
    )


def make_spikes_scene(resolution: int = 64, sheet_thickness: int = 2, ranks: int = 2) -> ScenePartition:
    """Low-opacity blue cube with two thin near-opaque red star-shaped sheets.

    The sheets lie perpendicular to z at 3/8 and 5/8 depth, so a camera on
    the default orbit looks straight through abrupt transmittance changes.
    """
    if ranks not in RANK_SPLITS:
        raise ValueError(f"ranks must be one of {sorted(RANK_SPLITS)}")
    if not 1 <= sheet_thickness <= 2:
        raise ValueError("sheets are one or two voxels thick")
    idx = np.arange(resolution) + 0.5
    c = resolution / 2.0
    x, y = np.meshgrid(idx - c, idx - c, indexing="ij")
    r = np.hypot(x, y)
    theta = np.arctan2(y, x)
    scalars = np.full((resolution, resolution, resolution), 0.25)
    for depth_fraction, rotation in ((0.375, 0.0), (0.625, math.pi / 6)):
        star = r < 0.42 * resolution * np.abs(np.cos(3.0 * (theta + rotation))) ** 3 + 0.04 * resolution
        z0 = int(round(depth_fraction * resolution)) - sheet_thickness // 2
        for dz in range(sheet_thickness):
            scalars[:, :, z0 + dz][star] = 1.0
    cube = VolumeBrick((0.0, 0.0, 0.0), 1.0, scalars)
    pieces = grid_split(cube, RANK_SPLITS[ranks])
    return ScenePartition(
        ranks,
        tuple((p, k) for k, p in enumerate(pieces)),
        spikes_transfer_function(),
        "spikes",
        {"resolution": resolution, "sheet_thickness": sheet_thickness, "ranks": ranks},
    )


def slab_field(resolution: int, thickness: int) -> np.ndarray:
    """Smooth, non-constant scalar pattern used by the slab scenes."""
    i, j, k = np.meshgrid(np.arange(resolution), np.arange(resolution), np.arange(thickness), indexing="ij")
    return 0.5 + 0.4 * np.sin(0.37 * i) * np.cos(0.23 * j) + 0.05 * k / max(thickness, 1)


def make_slab_scene(resolution: int = 32, thickness: int = 8, opacity: float = 0.1,
                    homogeneous: bool = False) -> ScenePartition:
    """One slab owned by a single rank."""
    data = np.full((resolution, resolution, thickness), 0.5) if homogeneous else slab_field(resolution, thickness)
    brick = VolumeBrick((0.0, 0.0, 0.0), 1.0, data)
    return ScenePartition(1, ((brick, 0),), cold_warm(opacity), "slab",
                          {"resolution": resolution, "thickness": thickness, "opacity": opacity,
                           "homogeneous": homogeneous})


def random_partition(scene: ScenePartition, pieces: int, ranks: int, seed: int = 0) -> ScenePartition:
    """Recursively cut a scene's bricks at random voxel planes and scatter them over ranks.

    Ranks end up owning arbitrary, usually non-convex, unions of pieces.
    """
    rng = np.random.default_rng(seed)
    bricks = list(scene.bricks)
    while len(bricks) < pieces:
        splittable = [i for i, b in enumerate(bricks) if max(b.dims) > 1]
        if not splittable:
            break
        i = splittable[rng.integers(len(splittable))]
        brick = bricks.pop(i)
        axes = [a for a in range(3) if brick.dims[a] > 1]
        axis = axes[rng.integers(len(axes))]
        cut = int(rng.integers(1, brick.dims[axis]))
        bricks.extend(split_brick(brick, axis, cut))
    owners = rng.integers(0, ranks, size=len(bricks))
    params = dict(scene.params, pieces=pieces, ranks=ranks, seed=seed)
    params.pop("homogeneous", None)
    return ScenePartition(ranks, tuple(zip(bricks, owners.tolist())), scene.transfer_function,
                          "random_" + scene.name, params)


# ---------------------------------------------------------------------------
# Scene descriptions
# ---------------------------------------------------------------------------

def make_random_slab_scene(pieces: int = 8, ranks: int = 3, seed: int = 0, resolution: int = 32,
                           thickness: int = 8, opacity: float = 0.1) -> ScenePartition:
    base = make_slab_scene(resolution, thickness, opacity)
    return random_partition(base, pieces, ranks, seed)


SCENE_BUILDERS = {
    "sandwich": make_sandwich_scene,
    "concentric": make_concentric_scene,
    "spikes": make_spikes_scene,
    "slab": make_slab_scene,
    "random_slab": make_random_slab_scene,
}


def build_scene(name: str, **params) -> ScenePartition:
    try:
        builder = SCENE_BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(SCENE_BUILDERS)}") from None
    return builder(**params)


def scene_to_text(scene: ScenePartition) -> str:
    lines = [f"{SCENE_FORMAT} {SCENE_FORMAT_VERSION}", f"name={scene.name}"]
    lines += [f"{k}={v}" for k, v in sorted(scene.params.items())]
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> ScenePartition:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0].split() != [SCENE_FORMAT, str(SCENE_FORMAT_VERSION)]:
        raise ValueError(f"expected header '{SCENE_FORMAT} {SCENE_FORMAT_VERSION}'")
    entries = dict(ln.split("=", 1) for ln in lines[1:])
    name = entries.pop("name")
    return build_scene(name, **{k: _parse_scalar(v) for k, v in entries.items()})


def _parse_scalar(text: str):
    if text in ("True", "False"):
        return text == "True"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text
