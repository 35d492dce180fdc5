"""Independent reference computations used by the tests.

Nothing here calls the reconstruction or the raymarching passes; each
oracle recomputes its quantity from first principles.
"""

import math

import numpy as np

ORACLE_BINS = 10_000


def brute_force_transmittance(depths, absorbances, query, bins=ORACLE_BINS):
    """exp(-absorbance located in front of ``query``) on a discretized depth axis.

    Warped depth [-1, 1] is cut into ``bins`` equal bins; every sample drops its
    absorbance into its bin and the mass of bins whose centre lies before the
    query is summed.
    """
    depths = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    absorbances = np.atleast_1d(np.asarray(absorbances, dtype=np.float64))
    edges = np.linspace(-1.0, 1.0, bins + 1)
    centres = 0.5 * (edges[:-1] + edges[1:])
    index = np.clip(np.searchsorted(edges, depths, side="right") - 1, 0, bins - 1)
    mass = np.bincount(index, absorbances, minlength=bins)
    cumulative = np.concatenate([[0.0], np.cumsum(mass)])
    query = np.asarray(query, dtype=np.float64)
    before = np.searchsorted(centres, query, side="left")
    return np.exp(-cumulative[before])


def raw_moments(depths, absorbances):
    """Power moments of a weighted point set, summed term by term."""
    out = [0.0] * 5
    for z, a in zip(depths, absorbances):
        for i in range(5):
            out[i] += a * z ** i
    return np.array(out)


def opacity_corrected(opacity, step, reference_step=1.0):
    return 1.0 - (1.0 - opacity) ** (step / reference_step)


def homogeneous_front_to_back(color, alpha, steps):
    """Closed-form front-to-back accumulation of ``steps`` identical samples.

    Over-compositing identical samples of opacity ``alpha`` leaves
    ``1 - (1 - alpha)**steps`` accumulated alpha, a geometric series.
    """
    acc_alpha = 1.0 - (1.0 - alpha) ** steps
    return np.array([c * acc_alpha for c in color[:3]] + [acc_alpha])


def homogeneous_absorbance(alpha, steps):
    return -steps * math.log(1.0 - alpha)
