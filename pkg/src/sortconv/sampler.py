"""Neighbourhood sampling geometry for sorted convolution.

A :class:`SamplePlan` lists the ``(2n+1)**2`` points read around every pixel.
Square sampling reads the integer grid directly. Polar sampling reads the
centre pixel plus ``8r`` points spaced evenly on the circle of radius ``r``
for ``r = 1..n``; off-grid points are bilinearly interpolated from their four
surrounding pixels.

Angles run counterclockwise from the +x axis in a frame where +y is the row
index, so the point at angle ``a`` on ring ``r`` sits at
``(r*sin(a), r*cos(a))`` in (row, column) offsets.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError

SQUARE = "square"
POLAR = "polar"

_SAMPLING_ALIASES = {"square": SQUARE, "s": SQUARE, "polar": POLAR, "p": POLAR}
_SNAP = 1e-12


def sampling_mode(mode):
    """Normalise ``'square'``/``'S'``/``'polar'``/``'P'`` to a canonical name."""
    try:
        return _SAMPLING_ALIASES[str(mode).lower()]
    except KeyError:
        raise ConfigurationError(
            f"unknown sampling mode {mode!r}; use 'square' or 'polar'") from None


def pad_margin(n):
    """Zero margin that keeps every bilinear corner of a radius-n ring in bounds."""
    return n + 1


@dataclass(frozen=True)
class SamplePoint:
    offset_y: float
    offset_x: float
    ring_index: int
    within_ring_order: int
    corners: tuple  # four (dy, dx) integer offsets
    weights: tuple  # four non-negative floats summing to 1


def bilinear_corners(y, x):
    """Integer corners and weights ``(1-|dy|)(1-|dx|)`` around a real offset."""
    y0, x0 = math.floor(y), math.floor(x)
    fy, fx = y - y0, x - x0
    corners = ((y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1))
    weights = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
    return corners, weights


def _snap(v):
    r = round(v)
    return float(r) if abs(v - r) < _SNAP else v


class SamplePlan:
    """Immutable sampling geometry for half-width ``n``.

    Besides ``points`` the plan exposes dense arrays used by the batched
    kernels: ``offsets`` (P, 2), ``corner_offsets`` (P, 4, 2) int and
    ``corner_weights`` (P, 4), plus ``ring_index`` (P,).
    """

    def __init__(self, n, mode, points, phase=0.0):
        self.n = n
        self.mode = mode
        self.phase = phase
        self.points = tuple(points)
        self.size = 2 * n + 1
        self.offsets = np.array([(p.offset_y, p.offset_x) for p in self.points])
        self.corner_offsets = np.array([p.corners for p in self.points], dtype=np.int64)
        self.corner_weights = np.array([p.weights for p in self.points])
        self.ring_index = np.array([p.ring_index for p in self.points], dtype=np.int64)
        for arr in (self.offsets, self.corner_offsets, self.corner_weights, self.ring_index):
            arr.setflags(write=False)

    def __len__(self):
        return len(self.points)

    def __repr__(self):
        return f"SamplePlan(n={self.n}, mode={self.mode!r}, phase={self.phase})"


def _square_points(n):
    pts = []
    seen_in_ring = {}
    for dy in range(-n, n + 1):
        for dx in range(-n, n + 1):
            r = max(abs(dy), abs(dx))
            order = seen_in_ring.get(r, 0)
            seen_in_ring[r] = order + 1
            corners, weights = bilinear_corners(float(dy), float(dx))
            pts.append(SamplePoint(float(dy), float(dx), r, order, corners, weights))
    return pts


def _polar_points(n, phase):
    center_corners, center_weights = bilinear_corners(0.0, 0.0)
    pts = [SamplePoint(0.0, 0.0, 0, 0, center_corners, center_weights)]
    for r in range(1, n + 1):
        count = 8 * r
        for k in range(count):
            angle = phase + 2.0 * math.pi * k / count
            y = _snap(r * math.sin(angle))
            x = _snap(r * math.cos(angle))
            corners, weights = bilinear_corners(y, x)
            pts.append(SamplePoint(y, x, r, k, corners, weights))
    return pts


def build_sample_plan(n, mode="polar", phase=0.0):
    """Precompute the sampling geometry of a ``(2n+1) x (2n+1)`` neighbourhood.

    Square points come in row-major order. Polar points are the centre,
    then ring 1, ring 2, ... each in ascending angle starting at ``phase``.
    """
    if int(n) != n or n < 1:
        raise ConfigurationError(f"sampling half-width must be a positive integer, got {n}")
    n = int(n)
    mode = sampling_mode(mode)
    points = _square_points(n) if mode == SQUARE else _polar_points(n, float(phase))
    assert len(points) == (2 * n + 1) ** 2, "ring sizes 1 + sum(8r) must tile the grid"
    return SamplePlan(n, mode, points, float(phase) if mode == POLAR else 0.0)


def sample_neighborhood(padded_channel, center_y, center_x, plan):
    """Interpolated values of all plan points around one pixel.

    ``center_y``/``center_x`` index ``padded_channel`` directly, so callers
    add the padding margin themselves.
    """
    img = np.asarray(padded_channel)
    h, w = img.shape
    cy = center_y + plan.corner_offsets[..., 0]
    cx = center_x + plan.corner_offsets[..., 1]
    if cy.min() < 0 or cx.min() < 0 or cy.max() >= h or cx.max() >= w:
        raise ContractError(
            f"neighbourhood of ({center_y}, {center_x}) leaves the {h}x{w} padded "
            f"channel; pad by at least {pad_margin(plan.n)}")
    return (img[cy, cx] * plan.corner_weights).sum(axis=1)
