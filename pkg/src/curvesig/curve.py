"""Planar curve representation and geometric preprocessing.

Curves are polylines: an ``(N, 2)`` float array plus a closed flag.  For a
closed curve the segment from the last point back to the first is implied and
never stored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class CurveError(ValueError):
    """Raised for invalid or degenerate curves and bad curve-operation arguments."""


@dataclass(frozen=True, eq=False)
class PlanarCurve:
    points: np.ndarray
    closed: bool = True

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise CurveError(f"points must have shape (N, 2), got {pts.shape}")
        if len(pts) < 2:
            raise CurveError("a curve needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise CurveError("curve coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "closed", bool(self.closed))

    def __len__(self):
        return len(self.points)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    def with_points(self, points) -> "PlanarCurve":
        return PlanarCurve(points, self.closed)

    def segments(self) -> np.ndarray:
        """Segment vectors, including the closing segment when closed."""
        nxt = np.roll(self.points, -1, axis=0) if self.closed else self.points[1:]
        cur = self.points if self.closed else self.points[:-1]
        return nxt - cur

    def signed_area(self) -> float:
        """Shoelace area; positive for counterclockwise traversal."""
        x, y = self.x, self.y
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def validate(self) -> "PlanarCurve":
        """Check the strict invariants (no repeated consecutive points, N >= 3)."""
        if len(self) < 3:
            raise CurveError("a curve needs at least 3 points")
        if np.min(np.hypot(*self.segments().T)) <= 0.0:
            raise CurveError("curve has repeated consecutive points")
        return self

    def allclose(self, other: "PlanarCurve", atol: float = 1e-9) -> bool:
        return (
            self.closed == other.closed
            and self.points.shape == other.points.shape
            and bool(np.allclose(self.points, other.points, rtol=0.0, atol=atol))
        )


@dataclass(frozen=True)
class ArcLengthProfile:
    values: np.ndarray
    total: float


def cumulative_arclength(curve: PlanarCurve) -> ArcLengthProfile:
    """Piecewise-linear arc length at every vertex.

    ``values[i]`` is the length travelled from point 0 to point ``i``; for a
    closed curve ``total`` also includes the closing segment.
    """
    if len(curve) < 2:
        raise CurveError("arc length needs at least 2 points")
    seg = np.hypot(*curve.segments().T)
    values = np.concatenate([[0.0], np.cumsum(seg[: len(curve) - 1])])
    total = float(values[-1] + (seg[-1] if curve.closed else 0.0))
    return ArcLengthProfile(values, total)


def ensure_ccw(curve: PlanarCurve) -> PlanarCurve:
    """Reverse a closed curve traversed clockwise, keeping its first point."""
    if not curve.closed or curve.signed_area() >= 0:
        return curve
    pts = curve.points
    return curve.with_points(np.concatenate([pts[:1], pts[:0:-1]]))


def _interp_polyline(pts: np.ndarray, knots: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Linear interpolation of polyline vertices ``pts`` at parameters ``s``.

    ``knots`` is the (strictly increasing) arc parameter at each vertex.
    """
    idx = np.clip(np.searchsorted(knots, s, side="right") - 1, 0, len(knots) - 2)
    t = (s - knots[idx]) / (knots[idx + 1] - knots[idx])
    return pts[idx] + t[:, None] * (pts[idx + 1] - pts[idx])


def resample_uniform(curve: PlanarCurve, n: int, tol: float = 1e-11, max_iter: int = 30) -> PlanarCurve:
    """Resample to ``n`` points with equal spacing along the polyline.

    Points are first placed at equal arc length along the input polyline, then
    their arc positions are refined until the chords of the *output* polyline
    are all equal. That makes the result a fixed point of this function.
    The first output point is the first input point.
    """
    if n < 3:
        raise CurveError("resample_uniform needs n >= 3")
    pts = curve.points
    if curve.closed:
        pts = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(pts, axis=0).T)
    keep = np.concatenate([[True], seg > 0])
    pts, seg = pts[keep], seg[seg > 0]
    if len(seg) == 0:
        raise CurveError("cannot resample a zero-length curve")
    knots = np.concatenate([[0.0], np.cumsum(seg)])
    total = knots[-1]

    gaps = n if curve.closed else n - 1
    s = np.linspace(0.0, total, gaps + 1)
    for _ in range(max_iter):
        out = _interp_polyline(pts, knots, s)
        chords = np.hypot(*np.diff(out, axis=0).T)
        c = np.concatenate([[0.0], np.cumsum(chords)])
        if np.ptp(chords) <= tol * chords.mean():
            break
        # c(s) is monotone; invert it at equally spaced chord positions
        s = np.interp(np.linspace(0.0, c[-1], gaps + 1), c, s)
        s[0], s[-1] = 0.0, total
    out = _interp_polyline(pts, knots, s)
    return PlanarCurve(out[:n], curve.closed)


def normalize_curve(curve: PlanarCurve) -> PlanarCurve:
    """Remove the centroid and divide by the standard deviation of all 2N coordinates."""
    centered = curve.points - curve.points.mean(axis=0)
    std = float(np.std(centered))
    if std == 0.0:
        raise CurveError("cannot normalize a curve with zero variance")
    out = centered / std
    # second pass removes the residual rounding in the centroid
    out = out - out.mean(axis=0)
    return curve.with_points(out / np.std(out))


@dataclass(frozen=True)
class EuclideanParams:
    reflect: bool
    theta: float
    translation: tuple[float, float]


def random_euclidean_params(seed) -> EuclideanParams:
    rng = np.random.default_rng(seed)
    reflect = bool(rng.random() < 0.5)
    theta = float(rng.uniform(-np.pi, np.pi))
    tx, ty = rng.uniform(-1.0, 1.0, size=2)
    return EuclideanParams(reflect, theta, (float(tx), float(ty)))


def apply_euclidean(curve: PlanarCurve, params: EuclideanParams) -> PlanarCurve:
    """Reflect about the x-axis (optionally), rotate, then translate."""
    pts = curve.points
    if params.reflect:
        pts = pts * np.array([1.0, -1.0])
    c, s = np.cos(params.theta), np.sin(params.theta)
    rot = np.array([[c, -s], [s, c]])
    return curve.with_points(pts @ rot.T + np.asarray(params.translation))


def random_euclidean_transform(curve: PlanarCurve, seed) -> PlanarCurve:
    return apply_euclidean(curve, random_euclidean_params(seed))


def rotate(curve: PlanarCurve, theta: float) -> PlanarCurve:
    return apply_euclidean(curve, EuclideanParams(False, theta, (0.0, 0.0)))


def add_gaussian_noise(curve: PlanarCurve, sigma: float, seed) -> PlanarCurve:
    if sigma < 0:
        raise CurveError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return curve
    rng = np.random.default_rng(seed)
    return curve.with_points(curve.points + rng.normal(0.0, sigma, size=curve.points.shape))


def decimate(curve: PlanarCurve, keep_fraction: float, anchor_indices, seed) -> PlanarCurve:
    """Keep all anchors plus a random subset of the other points.

    The output has ``round(keep_fraction * N)`` points in the original order.
    """
    n = len(curve)
    anchors = np.unique(np.asarray(anchor_indices, dtype=int))
    if not 0.0 < keep_fraction <= 1.0:
        raise CurveError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if anchors.size and (anchors.min() < 0 or anchors.max() >= n):
        raise CurveError("anchor index out of range")
    target = int(round(keep_fraction * n))
    if target < anchors.size + 3:
        raise CurveError(
            f"keep_fraction {keep_fraction} leaves {target} points; need at least {anchors.size + 3}"
        )
    if target == n:
        return curve
    rng = np.random.default_rng(seed)
    others = np.setdiff1d(np.arange(n), anchors)
    chosen = rng.choice(others, size=target - anchors.size, replace=False)
    idx = np.sort(np.concatenate([anchors, chosen]))
    return curve.with_points(curve.points[idx])


def _loess_weights(offsets: np.ndarray, degree: int = 2) -> np.ndarray:
    """Linear weights that evaluate a tricube-weighted polynomial fit at offset 0."""
    h = np.max(np.abs(offsets)) + 1.0
    w = (1.0 - np.abs(offsets / h) ** 3) ** 3
    V = np.vander(offsets.astype(np.float64), degree + 1, increasing=True)
    WV = V * w[:, None]
    # first row of (V^T W V)^{-1} V^T W, i.e. the fitted intercept
    return np.linalg.solve(V.T @ WV, WV.T)[0]


def smooth_loess(curve: PlanarCurve, span_fraction: float) -> PlanarCurve:
    """Local quadratic regression of x and y against the point index.

    The window holds ``round(span_fraction * N)`` points (bumped to the next
    odd count) and wraps around for closed curves; open curves use the nearest
    in-range window at their ends.
    """
    n = len(curve)
    if not 0.0 < span_fraction < 1.0:
        raise CurveError(f"span_fraction must lie in (0, 1), got {span_fraction}")
    w = int(round(span_fraction * n))
    if w < 5:
        raise CurveError(f"LOESS window of {w} points is too small (need >= 5)")
    w += 1 - w % 2
    if w > n:
        raise CurveError(f"LOESS window of {w} points exceeds curve length {n}")
    half = w // 2
    pts = curve.points
    centered = _loess_weights(np.arange(-half, half + 1))
    if curve.closed:
        idx = (np.arange(n)[:, None] + np.arange(-half, half + 1)) % n
        return curve.with_points(np.einsum("k,nkd->nd", centered, pts[idx]))

    out = np.empty_like(pts)
    if n > 2 * half:
        idx = np.arange(half, n - half)[:, None] + np.arange(-half, half + 1)
        out[half : n - half] = np.einsum("k,nkd->nd", centered, pts[idx])
    for i in list(range(min(half, n))) + list(range(max(n - half, half), n)):
        start = min(max(i - half, 0), n - w)
        window = np.arange(start, start + w)
        out[i] = _loess_weights(window - i) @ pts[window]
    return curve.with_points(out)
