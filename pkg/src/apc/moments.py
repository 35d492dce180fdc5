"""Power-moment transmittance encoding and reconstruction.

Each pixel carries five numbers ``b = (b0, b1, b2, b3, b4)``: the total
absorbance ``b0`` and the absorbance-weighted sums of the warped depth to the
powers one through four.  Accumulation is pure addition, which is what makes
the encoding order independent.  Reconstruction recovers an estimate of the
transmittance in front of an arbitrary query depth by solving a small Hankel
system.

Every function that touches pixels has a vectorised ``*_array`` twin that
operates on numpy arrays with the moment axis last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NUM_MOMENTS = 5

# Relative threshold below which a Cholesky pivot of the normalised Hankel
# matrix is treated as an exact zero (atomic measure with fewer support points).
DEGENERATE_PIVOT = 1e-12
# Pivots more negative than this are not rounding noise.
NEGATIVE_PIVOT = -1e-9
TIE_TOLERANCE = 1e-12


class MomentDegeneracyError(ArithmeticError):
    """The biased Hankel matrix is not positive semi-definite."""

    def __init__(self, message: str, pixel: tuple[int, int] | None = None):
        super().__init__(message)
        self.pixel = pixel

    def with_pixel(self, pixel: tuple[int, int]) -> "MomentDegeneracyError":
        return MomentDegeneracyError(f"{self.args[0]} at pixel {pixel}", pixel)


@dataclass(frozen=True)
class MomentVector:
    """Five accumulated power moments of a single pixel."""

    b0: float = 0.0
    b1: float = 0.0
    b2: float = 0.0
    b3: float = 0.0
    b4: float = 0.0

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            raise ValueError(f"moments must be finite, got {values}")
        if self.b0 < 0:
            raise ValueError(f"b0 must be non-negative, got {self.b0}")

    @classmethod
    def from_array(cls, values) -> "MomentVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (NUM_MOMENTS,):
            raise ValueError(f"expected {NUM_MOMENTS} moments, got shape {values.shape}")
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([self.b0, self.b1, self.b2, self.b3, self.b4], dtype=np.float64)

    def __add__(self, other: "MomentVector") -> "MomentVector":
        return MomentVector.from_array(self.as_array() + other.as_array())


@dataclass(frozen=True)
class DepthBounds:
    """World-space depth range mapped onto ``[-1, 1]`` by :func:`warp_depth`."""

    near: float
    far: float

    def __post_init__(self):
        if not (math.isfinite(self.near) and math.isfinite(self.far)):
            raise ValueError("depth bounds must be finite")
        if self.near <= 0:
            raise ValueError(f"near must be positive, got {self.near}")
        if self.far <= self.near:
            raise ValueError(f"far ({self.far}) must exceed near ({self.near})")


DEFAULT_BIAS_VECTOR = (0.0, 0.375, 0.0, 0.375)


@dataclass(frozen=True)
class ReconstructionParams:
    moment_bias: float = 6e-4
    bias_vector: tuple[float, float, float, float] = field(default=DEFAULT_BIAS_VECTOR)
    overestimation: float = 0.3
    absorbance_max: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.moment_bias < 1.0:
            raise ValueError(f"moment_bias must lie in [0, 1), got {self.moment_bias}")
        if not 0.0 <= self.overestimation <= 1.0:
            raise ValueError(f"overestimation must lie in [0, 1], got {self.overestimation}")
        if not self.absorbance_max > 0:
            raise ValueError(f"absorbance_max must be positive, got {self.absorbance_max}")
        if len(self.bias_vector) != NUM_MOMENTS - 1:
            raise ValueError("bias_vector needs four entries")
        object.__setattr__(self, "bias_vector", tuple(float(v) for v in self.bias_vector))

    def with_bias(self, moment_bias: float) -> "ReconstructionParams":
        return ReconstructionParams(
            moment_bias=moment_bias,
            bias_vector=self.bias_vector,
            overestimation=self.overestimation,
            absorbance_max=self.absorbance_max,
        )


# ---------------------------------------------------------------------------
# Depth warping
# ---------------------------------------------------------------------------


def warp_depth(d: float, bounds: DepthBounds) -> float:
    """Map a world distance logarithmically onto ``[-1, 1]``."""
    return float(warp_depth_array(np.float64(d), bounds))


def warp_depth_array(d, bounds: DepthBounds) -> np.ndarray:
    d = np.clip(np.asarray(d, dtype=np.float64), bounds.near, bounds.far)
    log_near = math.log(bounds.near)
    log_span = math.log(bounds.far) - log_near
    z = 2.0 * (np.log(d) - log_near) / log_span - 1.0
    # log() of the clamped endpoints is exact only up to rounding
    return np.clip(z, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Accumulation
# ---------------------------------------------------------------------------


def sample_absorbance(transmittance, absorbance_max: float) -> np.ndarray:
    """``min(-ln t, absorbance_max)``; a zero transmittance saturates the clamp."""
    t = np.asarray(transmittance, dtype=np.float64)
    with np.errstate(divide="ignore"):
        absorbance = -np.log(t)
    return np.minimum(absorbance, absorbance_max)


def moment_contributions(z, absorbance) -> np.ndarray:
    """Per-sample moment increments ``z**i * A`` stacked along a trailing axis."""
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(absorbance, dtype=np.float64)
    out = np.empty(np.broadcast(z, a).shape + (NUM_MOMENTS,), dtype=np.float64)
    power = np.ones_like(out[..., 0])
    for i in range(NUM_MOMENTS):
        out[..., i] = power * a
        power = power * z
    return out


def generate_moments(
    b: MomentVector,
    z: float,
    transmittance: float,
    absorbance_max: float = ReconstructionParams.absorbance_max,
) -> MomentVector:
    """Add one sample at warped depth ``z`` to the moment vector ``b``."""
    if not -1.0 <= z <= 1.0:
        raise ValueError(f"warped depth must lie in [-1, 1], got {z}")
    if not 0.0 <= transmittance <= 1.0:
        raise ValueError(f"transmittance must lie in [0, 1], got {transmittance}")
    absorbance = sample_absorbance(transmittance, absorbance_max)
    return MomentVector.from_array(b.as_array() + moment_contributions(z, absorbance))


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------


def bias_moments(b: MomentVector, params: ReconstructionParams) -> np.ndarray:
    """Normalised ``(b1..b4)/b0`` mixed toward the bias vector."""
    if b.b0 <= 0:
        raise ValueError("cannot normalise moments with b0 = 0")
    return bias_moments_array(b.as_array(), params)


def bias_moments_array(b, params: ReconstructionParams) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    normalised = b[..., 1:] / b[..., :1]
    beta = params.moment_bias
    if beta == 0.0:
        return normalised
    return (1.0 - beta) * normalised + beta * np.asarray(params.bias_vector)


def reconstruct_transmittance(b: MomentVector, z: float, params: ReconstructionParams) -> float:
    """Transmittance in front of warped depth ``z`` estimated from ``b``."""
    values = b.as_array()
    if not np.all(np.isfinite(values)):
        raise ValueError("NaN or infinite moments")
    return float(reconstruct_transmittance_array(values, np.float64(z), params))


def reconstruct_transmittance_array(b, z, params: ReconstructionParams) -> np.ndarray:
    """Vectorised reconstruction; ``b`` has shape ``(..., 5)`` and broadcasts with ``z``.

    If the biased Hankel matrix of some entry is not positive semi-definite
    the whole batch is retried once with four times the moment bias before
    :class:`MomentDegeneracyError` is raised.
    """
    b = np.asarray(b, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.isnan(b).any() or np.isnan(z).any():
        raise ValueError("NaN moments or query depth")
    b, z = np.broadcast_arrays(b, z[..., None])
    z = z[..., 0]

    fraction, bad = _absorbance_fraction(b, z, params)
    if bad.any():
        retry = params.with_bias(min(params.moment_bias * 4.0, np.nextafter(1.0, 0.0)))
        fraction_retry, bad_retry = _absorbance_fraction(b[bad], z[bad], retry)
        if bad_retry.any() or params.moment_bias == 0.0:
            index = np.argwhere(bad)[0]
            raise MomentDegeneracyError(
                f"biased Hankel matrix is not positive semi-definite (moment_bias={params.moment_bias})",
                tuple(int(i) for i in index) or None,
            )
        fraction[bad] = fraction_retry

    with np.errstate(over="ignore"):
        transmittance = np.exp(-b[..., 0] * fraction)
    return np.clip(transmittance, 0.0, 1.0)


def _absorbance_fraction(b, z, params):
    """Fraction of the total absorbance located in front of ``z``.

    Returns the fraction and a mask of entries whose Hankel matrix failed the
    semi-definiteness check.
    """
    fraction = np.zeros(z.shape, dtype=np.float64)
    bad = np.zeros(z.shape, dtype=bool)
    active = b[..., 0] > 0
    if not active.any():
        return fraction, bad

    m = bias_moments_array(b[active], params)
    zq = z[active]
    beta = params.overestimation
    m1, m2, m3, m4 = m[:, 0], m[:, 1], m[:, 2], m[:, 3]

    # LDL^T factorisation of [[1, m1, m2], [m1, m2, m3], [m2, m3, m4]]
    d11 = m2 - m1 * m1
    l21d11 = m3 - m1 * m2
    with np.errstate(divide="ignore", invalid="ignore"):
        l21 = l21d11 / d11
    d22 = (m4 - m2 * m2) - l21d11 * l21

    rank1 = d11 <= DEGENERATE_PIVOT
    rank2 = ~rank1 & (d22 <= DEGENERATE_PIVOT)
    full = ~rank1 & ~rank2
    failed = (d11 < NEGATIVE_PIVOT) | (~rank1 & (d22 < NEGATIVE_PIVOT))

    out = np.empty(zq.shape, dtype=np.float64)

    # Single support point at the mean.
    if rank1.any():
        out[rank1] = _step_weight(m1[rank1], zq[rank1], beta)

    # Two support points: roots of the monic quadratic in the Hankel kernel.
    if rank2.any():
        a1, a2, a3 = m1[rank2], m2[rank2], m3[rank2]
        dd = d11[rank2]
        c0 = (a1 * a3 - a2 * a2) / dd  # x^2 + c1 x + c0 vanishes on the support
        c1 = (a1 * a2 - a3) / dd
        disc = np.sqrt(np.maximum(0.25 * c1 * c1 - c0, 0.0))
        r1 = -0.5 * c1 - disc
        r2 = -0.5 * c1 + disc
        with np.errstate(divide="ignore", invalid="ignore"):
            w2 = np.where(r2 > r1, (a1 - r1) / (r2 - r1), 0.5)
        w2 = np.clip(w2, 0.0, 1.0)
        zz = zq[rank2]
        out[rank2] = (1.0 - w2) * _step_weight(r1, zz, beta) + w2 * _step_weight(r2, zz, beta)

    if full.any():
        out[full] = _canonical_fraction(
            m1[full], m2[full], l21[full], d11[full], d22[full], zq[full], beta
        )

    # Nothing lies behind the far plane; the anchored representation would
    # otherwise park part of the mass on the anchor node at z = 1.
    out[zq >= 1.0] = 1.0

    fraction[active] = out
    bad[active] = failed
    return fraction, bad


def _step_weight(support, z, beta):
    """1 in front of the query, ``beta`` at the query, 0 behind it."""
    tie = np.abs(support - z) <= TIE_TOLERANCE
    return np.where(tie, beta, (support < z).astype(np.float64))


def _canonical_fraction(m1, m2, l21, d11, d22, z0, beta):
    # Solve B c = (1, z0, z0^2) with the LDL^T factors; the quadratic with
    # coefficients c has the two remaining nodes of the representation
    # anchored at z0 as its roots.
    c0 = np.ones_like(z0)
    c1 = z0 - m1
    c2 = z0 * z0 - m2 - l21 * c1
    c1 = c1 / d11
    c2 = c2 / d22
    c1 = c1 - l21 * c2
    c0 = c0 - (c1 * m1 + c2 * m2)

    p = c1 / c2
    q = c0 / c2
    disc = np.sqrt(np.maximum(0.25 * p * p - q, 0.0))
    z1 = -0.5 * p - disc
    z2 = -0.5 * p + disc

    f0 = np.full_like(z0, beta)
    f1 = (z1 < z0).astype(np.float64)
    f2 = (z2 < z0).astype(np.float64)

    # Newton form of the quadratic through (z0, f0), (z1, f1), (z2, f2)
    with np.errstate(divide="ignore", invalid="ignore"):
        f01 = (f1 - f0) / (z1 - z0)
        f12 = (f2 - f1) / (z2 - z1)
        f012 = (f12 - f01) / (z2 - z0)
    coef2 = f012
    coef1 = f01 - f012 * (z0 + z1)
    coef0 = f0 - f01 * z0 + f012 * z0 * z1

    # Expected value of the interpolant under the (normalised) measure
    fraction = coef0 + coef1 * m1 + coef2 * m2
    # Coincident roots make the divided differences undefined; the weight at
    # a double node is then split by the step rule directly.
    fallback = ~np.isfinite(fraction)
    if fallback.any():
        fraction[fallback] = _step_weight(m1[fallback], z0[fallback], beta)
    return fraction
