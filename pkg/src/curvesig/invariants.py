"""Axiomatic invariant signatures of planar curves.

Differential invariants are computed with Gaussian-derivative filters applied
along the sample index; the integral area invariant is computed exactly for the
polygon interior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .curve import CurveError, PlanarCurve

METHODS = ("curvature", "curvature_s", "integral_area", "network")


@dataclass(frozen=True, eq=False)
class Signature:
    """Per-point scalar function over a curve.

    ``reliable`` marks points whose value is not affected by boundary padding
    (all True for closed curves).
    """

    values: np.ndarray
    method: str
    scale: float
    reliable: np.ndarray | None = field(default=None)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError("signature values must be one-dimensional")
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"{self.method} signature has non-finite values")
        if self.method not in METHODS:
            raise ValueError(f"unknown signature method {self.method!r}")
        object.__setattr__(self, "values", vals)
        if self.reliable is None:
            object.__setattr__(self, "reliable", np.ones(len(vals), dtype=bool))

    def __len__(self):
        return len(self.values)


class DegenerateCurveError(CurveError):
    pass


@dataclass(frozen=True)
class GaussianKernelSet:
    """Smoothing and derivative taps for cross-correlation.

    ``dg`` and ``ddg`` are laid out so that ``sum(taps[k] * f[i + k - radius])``
    estimates the first and second derivative of ``f`` at ``i``.
    """

    sigma: float
    g: np.ndarray
    dg: np.ndarray
    ddg: np.ndarray

    @property
    def radius(self) -> int:
        return len(self.g) // 2


def gaussian_derivative_kernels(sigma: float) -> GaussianKernelSet:
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    radius = int(math.ceil(4.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(k**2) / (2.0 * sigma**2)) / (math.sqrt(2.0 * math.pi) * sigma)
    # g'(x) = -x/s^2 g(x); reversed for cross-correlation this is +k/s^2 g(k)
    dg = k / sigma**2 * g
    ddg = (k**2 / sigma**4 - 1.0 / sigma**2) * g
    g = g / g.sum()
    dg = dg - dg.mean()
    ddg = ddg - ddg.mean()
    # Truncation and sampling bias the moments; pin them so that ramps and
    # parabolas are differentiated exactly.
    dg = dg / np.sum(k * dg)
    ddg = ddg / (0.5 * np.sum(k**2 * ddg))
    return GaussianKernelSet(float(sigma), g, dg, ddg)


def _pad(values: np.ndarray, radius: int, closed: bool) -> np.ndarray:
    """Pad along axis 0: wrap for closed curves, odd reflection for open ones."""
    if closed:
        return np.pad(values, [(radius, radius)] + [(0, 0)] * (values.ndim - 1), mode="wrap")
    if radius >= len(values):
        raise CurveError(f"open curve of {len(values)} points is shorter than kernel radius {radius}")
    return np.pad(
        values, [(radius, radius)] + [(0, 0)] * (values.ndim - 1), mode="reflect", reflect_type="odd"
    )


def filter_along(values: np.ndarray, taps: np.ndarray, closed: bool) -> np.ndarray:
    """Same-length cross-correlation of ``values`` (axis 0) with ``taps``."""
    radius = len(taps) // 2
    if closed and len(values) <= 2 * radius:
        raise CurveError(f"curve of {len(values)} points is too short for a kernel of width {len(taps)}")
    padded = _pad(np.asarray(values, dtype=np.float64), radius, closed)
    windows = np.lib.stride_tricks.sliding_window_view(padded, len(taps), axis=0)
    return windows @ taps


def _reliable_mask(n: int, radius: int, closed: bool) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    if not closed:
        mask[:radius] = False
        mask[n - radius :] = False
    return mask


def _speed(curve: PlanarCurve, kernels: GaussianKernelSet) -> tuple[np.ndarray, np.ndarray]:
    d1 = filter_along(curve.points, kernels.dg, curve.closed)
    speed = np.hypot(d1[:, 0], d1[:, 1])
    if np.min(speed) < 1e-12:
        raise DegenerateCurveError("curve derivative vanishes; parameterization is degenerate")
    return d1, speed


def euclidean_curvature(curve: PlanarCurve, sigma: float = 2.0) -> Signature:
    """Signed curvature (positive on counterclockwise convex arcs)."""
    kernels = gaussian_derivative_kernels(sigma)
    d1, speed = _speed(curve, kernels)
    d2 = filter_along(curve.points, kernels.ddg, curve.closed)
    kappa = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / speed**3
    return Signature(kappa, "curvature", float(sigma), _reliable_mask(len(curve), kernels.radius, curve.closed))


def differentiate_wrt_arclength(sig: Signature, curve: PlanarCurve, sigma: float = 2.0) -> Signature:
    """d(sig)/ds, using the same Gaussian derivative for numerator and speed."""
    if len(sig) != len(curve):
        raise ValueError(f"signature length {len(sig)} does not match curve length {len(curve)}")
    kernels = gaussian_derivative_kernels(sigma)
    _, speed = _speed(curve, kernels)
    deriv = filter_along(sig.values, kernels.dg, curve.closed) / speed
    reliable = sig.reliable & _reliable_mask(len(curve), 2 * kernels.radius, curve.closed)
    return Signature(deriv, "curvature_s", sig.scale, reliable)


def curvature_scale_space(curve: PlanarCurve, sigmas) -> list[Signature]:
    sigmas = [float(s) for s in sigmas]
    if not sigmas:
        raise ValueError("need at least one scale")
    if any(b < a for a, b in zip(sigmas, sigmas[1:])):
        raise ValueError("scales must be ascending")
    return [euclidean_curvature(curve, s) for s in sigmas]


def _sector_angle(ux, uy, vx, vy):
    return np.arctan2(ux * vy - uy * vx, ux * vx + uy * vy)


def disk_polygon_areas(centers: np.ndarray, polygon: np.ndarray, r: float) -> np.ndarray:
    """Area of Disk(c, r) intersected with a polygon, for every centre ``c``.

    The boundary integral is split per polygon edge into circular-arc pieces
    (outside the disk) and straight pieces (inside), each contributing its
    signed area as seen from the centre.  The result is signed by polygon
    orientation.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    polygon = np.asarray(polygon, dtype=np.float64)
    start, end = polygon, np.roll(polygon, -1, axis=0)
    r2 = r * r
    out = np.empty(len(centers))
    chunk = max(1, 200_000 // len(polygon))
    for lo in range(0, len(centers), chunk):
        c = centers[lo : lo + chunk, None, :]
        ax, ay = (start - c)[..., 0], (start - c)[..., 1]
        bx, by = (end - c)[..., 0], (end - c)[..., 1]
        dx, dy = bx - ax, by - ay
        qa = dx * dx + dy * dy
        qb = ax * dx + ay * dy
        qc = ax * ax + ay * ay - r2
        disc = qb * qb - qa * qc
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        safe = np.where(qa > 0, qa, 1.0)
        t1 = np.where(hit, np.clip((-qb - root) / safe, 0.0, 1.0), 0.0)
        t2 = np.where(hit, np.clip((-qb + root) / safe, 0.0, 1.0), 0.0)
        p1x, p1y = ax + t1 * dx, ay + t1 * dy
        p2x, p2y = ax + t2 * dx, ay + t2 * dy
        area = (
            0.5 * r2 * _sector_angle(ax, ay, p1x, p1y)
            + 0.5 * (p1x * p2y - p1y * p2x)
            + 0.5 * r2 * _sector_angle(p2x, p2y, bx, by)
        )
        out[lo : lo + chunk] = area.sum(axis=1)
    return out


def is_simple_polygon(points: np.ndarray) -> bool:
    from shapely.geometry import LinearRing

    return bool(LinearRing(points).is_simple)


def integral_area_invariant(curve: PlanarCurve, r: float, check_simple: bool = True) -> Signature:
    """Area of the radius-``r`` disk at each point that lies inside the contour.

    With ``check_simple=False`` self-intersecting contours are accepted and the
    interior is taken in the winding-number sense (best effort).
    """
    if not curve.closed:
        raise CurveError("integral area invariant needs a closed curve")
    if not r > 0:
        raise ValueError(f"radius must be > 0, got {r}")
    if check_simple and not is_simple_polygon(curve.points):
        raise CurveError("contour is self-intersecting")
    orientation = 1.0 if curve.signed_area() >= 0 else -1.0
    areas = orientation * disk_polygon_areas(curve.points, curve.points, r)
    areas = np.clip(areas, 0.0, math.pi * r * r)
    return Signature(areas, "integral_area", float(r))
