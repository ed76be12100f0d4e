"""Signature comparison and the robustness / retrieval experiments."""

from __future__ import annotations

import csv
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .curve import (
    PlanarCurve,
    add_gaussian_noise,
    decimate,
    normalize_curve,
    resample_uniform,
    rotate,
)
from .invariants import Signature, euclidean_curvature, integral_area_invariant
from .net import Model, forward_batch
from .siamese import N_POINTS, build_pairs, prepare_curve, rms_distance, _stack

METHODS = ("curvature", "integral", "network")
# integral-invariant radii as fractions of the curve diameter, one per scale
RADIUS_LADDER = (0.05, 0.1, 0.2, 0.35, 0.5)
KEEP_FRACTIONS = (0.7, 0.5, 0.3, 0.1, 0.05)


def z_normalize(values) -> np.ndarray:
    v = np.asarray(getattr(values, "values", values), dtype=np.float64)
    std = v.std()
    if std == 0.0 or not np.isfinite(std):
        return np.zeros_like(v)
    return (v - v.mean()) / std


def signature_distance(a, b, closed: bool = True) -> float:
    """RMS difference of z-normalized signatures, minimised over cyclic shifts when closed."""
    za, zb = z_normalize(a), z_normalize(b)
    if za.shape != zb.shape:
        raise ValueError(f"signature lengths differ: {len(za)} vs {len(zb)}; resample first")
    if not closed:
        return float(np.sqrt(np.mean((za - zb) ** 2)))
    # FFT picks the best shift; the distance itself is evaluated directly
    corr = np.fft.irfft(np.conj(np.fft.rfft(za)) * np.fft.rfft(zb), n=len(za))
    best = np.argsort(-corr)[:3]
    return min(float(np.sqrt(np.mean((za - np.roll(zb, -s)) ** 2))) for s in best)


@dataclass(frozen=True, eq=False)
class SignatureSet:
    shape_id: str
    signatures: tuple
    closed: bool = True

    def __post_init__(self):
        sigs = tuple(self.signatures)
        if not sigs:
            raise ValueError("a signature set needs at least one signature")
        if len({len(s) for s in sigs}) != 1:
            raise ValueError("signatures in a set must share a common length")
        object.__setattr__(self, "signatures", sigs)


def _directed_hausdorff(A, B, closed) -> float:
    return max(min(signature_distance(a, b, closed) for b in B) for a in A)


def hausdorff_set_distance(A: SignatureSet, B: SignatureSet) -> float:
    closed = A.closed and B.closed
    return max(
        _directed_hausdorff(A.signatures, B.signatures, closed),
        _directed_hausdorff(B.signatures, A.signatures, closed),
    )


# --------------------------------------------------------------------------
# signature helpers


def diameter(curve: PlanarCurve) -> float:
    """Largest distance between two points of the curve (searched on the convex hull)."""
    from scipy.spatial import ConvexHull, QhullError

    pts = curve.points
    try:
        pts = pts[ConvexHull(pts).vertices]
    except QhullError:
        pass  # collinear or degenerate input: fall back to all points
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    return float(np.sqrt(d2.max()))


def network_signatures(model: Model, curves) -> list[Signature]:
    curves = list(curves)
    x = np.stack([c.points for c in curves])
    out = forward_batch(model, x, curves[0].closed)
    return [Signature(v, "network", 0.0) for v in out]


def integral_signature(curve: PlanarCurve, radius_fraction: float) -> Signature:
    return integral_area_invariant(curve, radius_fraction * diameter(curve), check_simple=False)


def _corruption_seed(curve: PlanarCurve, seed, sigma: float) -> list[int]:
    # identical geometry receives identical noise
    return [zlib.crc32(curve.points.tobytes()), int(seed) & 0xFFFFFFFF, int(round(sigma * 1e9))]


def _ordered_models(models):
    if isinstance(models, Model):
        return [models]
    if isinstance(models, dict):
        return [models[k] for k in sorted(models)]
    return list(models)


# --------------------------------------------------------------------------
# noise robustness


@dataclass
class Report:
    columns: tuple
    rows: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([format(v, ".10g") if isinstance(v, float) else v for v in row])

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def noise_experiment(
    shapes,
    model: Model | None,
    sigmas=(0.0, 0.01, 0.02, 0.05),
    seed=0,
    curvature_sigma: float = 2.0,
    radius_fraction: float = 0.1,
    methods=METHODS,
) -> tuple[Report, Report]:
    """Stability of each signature under noise plus a random rotation.

    Returns ``(detail, summary)``: one detail row per method, sigma and shape
    and a summary with the mean and standard deviation over shapes.  The
    sigma = 0 rows measure pure rotation error on identical sampling.
    """
    if "network" in methods and model is None:
        raise ValueError("the network method needs a model")
    rng = np.random.default_rng(seed)
    detail = Report(("method", "sigma", "shape_id", "stability"))
    for rec in shapes:
        clean = prepare_curve(getattr(rec, "curve", rec))
        shape_id = getattr(rec, "id", "")
        for sigma in sigmas:
            theta = rng.uniform(-np.pi, np.pi)
            noisy = add_gaussian_noise(clean, sigma, rng.integers(2**63))
            corrupted = normalize_curve(rotate(noisy, theta))
            for method in methods:
                if method == "curvature":
                    s0 = euclidean_curvature(clean, curvature_sigma)
                    s1 = euclidean_curvature(corrupted, curvature_sigma)
                elif method == "integral":
                    s0 = integral_signature(clean, radius_fraction)
                    s1 = integral_signature(corrupted, radius_fraction)
                elif method == "network":
                    s0, s1 = network_signatures(model, [clean, corrupted])
                else:
                    raise ValueError(f"unknown method {method!r}")
                detail.rows.append((method, float(sigma), shape_id, signature_distance(s0, s1, clean.closed)))
    summary = Report(("method", "sigma", "mean", "std"))
    for method in methods:
        for sigma in sigmas:
            vals = [r[3] for r in detail.rows if r[0] == method and r[1] == float(sigma)]
            summary.rows.append((method, float(sigma), float(np.mean(vals)), float(np.std(vals))))
    return detail, summary


# --------------------------------------------------------------------------
# sampling resilience


def sampling_experiment(
    shape,
    model: Model | None,
    keep_fractions=KEEP_FRACTIONS,
    anchor_count: int = 8,
    seed=0,
    curvature_sigma: float = 2.0,
    radius_fraction: float = 0.1,
    methods=METHODS,
) -> Report:
    """Signature values at fixed anchor points while the rest of the curve is decimated.

    One row per method and anchor: the z-normalized signature value at each
    density level, then the standard deviation across levels.
    """
    curve = getattr(shape, "curve", shape)
    n = len(curve)
    if n < 1000:
        raise ValueError(f"sampling experiment needs a high-resolution curve (>= 1000 points), got {n}")
    anchors = np.linspace(0, n, anchor_count, endpoint=False).astype(int)
    rng = np.random.default_rng(seed)
    level_seeds = rng.integers(2**63, size=len(keep_fractions))
    values = {m: np.empty((len(keep_fractions), anchor_count)) for m in methods}
    for li, (kf, s) in enumerate(zip(keep_fractions, level_seeds)):
        resampled = resample_uniform(decimate(curve, kf, anchors, s), N_POINTS)
        d2 = np.sum((resampled.points[None, :, :] - curve.points[anchors][:, None, :]) ** 2, axis=-1)
        nearest = np.argmin(d2, axis=1)
        prepared = normalize_curve(resampled)
        for method in methods:
            if method == "curvature":
                sig = euclidean_curvature(prepared, curvature_sigma)
            elif method == "integral":
                sig = integral_signature(prepared, radius_fraction)
            elif method == "network":
                if model is None:
                    raise ValueError("the network method needs a model")
                sig = network_signatures(model, [prepared])[0]
            else:
                raise ValueError(f"unknown method {method!r}")
            values[method][li] = z_normalize(sig)[nearest]
    columns = ("method", "anchor_index") + tuple(f"keep_{kf:g}" for kf in keep_fractions) + ("std",)
    report = Report(columns)
    for method in methods:
        for ai, anchor in enumerate(anchors):
            col = values[method][:, ai]
            report.rows.append((method, int(anchor), *map(float, col), float(np.std(col))))
    return report


# --------------------------------------------------------------------------
# retrieval


def signature_set(
    curve: PlanarCurve, method: str, models=None, radius_fractions=RADIUS_LADDER, shape_id: str = ""
) -> SignatureSet:
    """Multi-scale representation of a prepared curve."""
    if method == "integral":
        sigs = [integral_signature(curve, f) for f in radius_fractions]
    elif method == "network":
        ms = _ordered_models(models)
        if not ms:
            raise ValueError("network signature sets need trained models")
        sigs = [network_signatures(m, [curve])[0] for m in ms]
    elif method == "curvature":
        sigs = [euclidean_curvature(curve, s) for s in (1.0, 2.0, 4.0, 8.0, 16.0)]
    else:
        raise ValueError(f"unknown method {method!r}")
    return SignatureSet(shape_id, tuple(sigs), curve.closed)


def pairwise_signature_distances(sigs, closed: bool = True, chunk: int = 64) -> np.ndarray:
    """All-pairs :func:`signature_distance` for equal-length signatures, vectorised."""
    z = np.stack([z_normalize(s) for s in sigs])
    m, n = z.shape
    out = np.zeros((m, m))
    if not closed:
        for lo in range(0, m, chunk):
            out[lo : lo + chunk] = np.sqrt(np.mean((z[lo : lo + chunk, None, :] - z[None]) ** 2, axis=2))
        return out
    spectra = np.fft.rfft(z, axis=1)
    shifts = np.arange(n)
    for lo in range(0, m, chunk):
        rows = np.arange(lo, min(lo + chunk, m))
        corr = np.fft.irfft(np.conj(spectra[rows, None, :]) * spectra[None, :, :], n=n, axis=2)
        best = np.argsort(-corr, axis=2, kind="stable")[..., :3]
        # evaluate the candidate shifts exactly, as signature_distance does
        for c in range(3):
            idx = (shifts[None, None, :] + best[..., c : c + 1]) % n
            rolled = np.take_along_axis(np.broadcast_to(z[None], (len(rows), m, n)), idx, axis=2)
            d = np.sqrt(np.mean((z[rows, None, :] - rolled) ** 2, axis=2))
            out[rows] = d if c == 0 else np.minimum(out[rows], d)
    return out


def rank_by_distance(sets: list[SignatureSet]) -> np.ndarray:
    """Pairwise Hausdorff distances between signature sets."""
    n = len(sets)
    sizes = [len(s.signatures) for s in sets]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    closed = all(s.closed for s in sets)
    d = pairwise_signature_distances([sig for s in sets for sig in s.signatures], closed)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            block = d[offsets[i] : offsets[i + 1], offsets[j] : offsets[j + 1]]
            dist[i, j] = dist[j, i] = max(block.min(axis=1).max(), block.min(axis=0).max())
    return dist


def precision_at_k(dist: np.ndarray, categories, k: int = 4) -> np.ndarray:
    categories = np.asarray(categories)
    out = np.empty(len(categories))
    for q in range(len(categories)):
        others = np.array([j for j in range(len(categories)) if j != q])
        order = others[np.argsort(dist[q, others], kind="stable")]
        out[q] = np.mean(categories[order[:k]] == categories[q])
    return out


@dataclass
class RetrievalResult:
    report: Report
    distances: dict = field(default_factory=dict)


def retrieval_experiment(
    shapes,
    methods=("integral", "network"),
    sigmas=(0.0, 0.02),
    seed=0,
    models=None,
    radius_fractions=RADIUS_LADDER,
    k: int = 4,
    workers: int = 1,
) -> RetrievalResult:
    """Rank every shape against all others by Hausdorff distance between signature sets.

    Noise is seeded from each curve's geometry, so identical shapes are
    corrupted identically. Signatures are computed on ``workers`` threads;
    each one is independent, so the result does not depend on the count.
    """
    shapes = list(shapes)
    prepared = [prepare_curve(getattr(s, "curve", s)) for s in shapes]
    ids = [getattr(s, "id", str(i)) for i, s in enumerate(shapes)]
    cats = [getattr(s, "category", "") for s in shapes]
    report = Report(("method", "sigma", "precision_at_k", "k", "queries"))
    result = RetrievalResult(report)
    for method in methods:
        for sigma in sigmas:

            def one(item, method=method, sigma=sigma):
                curve, shape_id = item
                noisy = add_gaussian_noise(curve, sigma, _corruption_seed(curve, seed, sigma))
                return signature_set(normalize_curve(noisy), method, models, radius_fractions, shape_id)

            with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
                sets = list(pool.map(one, zip(prepared, ids)))
            dist = rank_by_distance(sets)
            result.distances[(method, float(sigma))] = dist
            prec = precision_at_k(dist, cats, k)
            report.rows.append((method, float(sigma), float(prec.mean()), k, len(shapes)))
    return result


# --------------------------------------------------------------------------
# learned invariance


@dataclass(frozen=True)
class InvarianceSummary:
    d_pos: float
    d_neg: float

    @property
    def ratio(self) -> float:
        return self.d_pos / self.d_neg if self.d_neg > 0 else math.inf


def invariance_report(
    model: Model, shapes, seed=0, scale_index: int = 5, pair_count: int = 100, distance=rms_distance
) -> InvarianceSummary:
    """Mean distance of network signatures on positive vs smoothed-negative pairs.

    ``distance`` defaults to the RMS distance the loss sees; pass
    ``signature_distance`` for the normalised, shift-minimised one.
    """
    curves = [getattr(s, "curve", s) for s in shapes]
    rng = np.random.default_rng(seed)
    pos = build_pairs(curves, pair_count, 1.0, scale_index, rng.integers(2**63))
    neg = build_pairs(curves, pair_count, 0.0, scale_index, rng.integers(2**63), cross_shape_prob=0.0)

    def mean_distance(pairs):
        a, b, _, closed = _stack(pairs)
        oa, ob = forward_batch(model, a, closed), forward_batch(model, b, closed)
        return float(np.mean([distance(x, y) for x, y in zip(oa, ob)]))

    return InvarianceSummary(mean_distance(pos), mean_distance(neg))
