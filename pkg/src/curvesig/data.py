"""Shape sources and on-disk formats.

Shapes come from binary rasters (Moore boundary tracing), from a synthetic
star-convex generator with known categories, or from curve CSV files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .curve import CurveError, PlanarCurve, ensure_ccw
from .siamese import N_POINTS, TrainingPair, build_pairs

N_FAMILIES = 6
SYNTH_POINTS = 1000


@dataclass(frozen=True, eq=False)
class ShapeRecord:
    id: str
    category: str
    curve: PlanarCurve
    source: str = "synthetic"


# --------------------------------------------------------------------------
# curve files


class CurveFormatError(ValueError):
    pass


def write_curve(curve: PlanarCurve, path) -> None:
    lines = [f"# closed={'true' if curve.closed else 'false'}"]
    lines += [f"{x:.17g},{y:.17g}" for x, y in curve.points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_curve(path, reorient: bool = True) -> PlanarCurve:
    """Read a curve CSV.  Closed curves are re-oriented counterclockwise unless ``reorient`` is off."""
    closed = True
    points = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                key, _, value = text[1:].strip().partition("=")
                if lineno == 1 and key.strip() == "closed":
                    if value.strip() not in ("true", "false"):
                        raise CurveFormatError(f"{path}:{lineno}: closed flag must be true or false")
                    closed = value.strip() == "true"
                    continue
                raise CurveFormatError(f"{path}:{lineno}: unexpected comment line")
            parts = text.split(",")
            if len(parts) != 2:
                raise CurveFormatError(f"{path}:{lineno}: expected 'x,y', got {text!r}")
            try:
                x, y = float(parts[0]), float(parts[1])
            except ValueError:
                raise CurveFormatError(f"{path}:{lineno}: non-numeric value in {text!r}") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise CurveFormatError(f"{path}:{lineno}: non-finite coordinate")
            points.append((x, y))
    if len(points) < 2:
        raise CurveFormatError(f"{path}: need at least 2 points, found {len(points)}")
    curve = PlanarCurve(np.array(points), closed)
    return ensure_ccw(curve) if reorient else curve


# --------------------------------------------------------------------------
# raster tracing

# Moore neighbourhood in (drow, dcol), clockwise on screen starting west
_MOORE = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]


def trace_contour(raster) -> PlanarCurve:
    """Outer boundary of the single foreground component of a binary raster.

    Points are pixel centres with ``x = column`` and ``y = (height - 1 - row)``
    so the y axis points up; the result is counterclockwise.
    """
    from scipy import ndimage

    mask = np.asarray(raster).astype(bool)
    if mask.ndim != 2:
        raise CurveError("raster must be two-dimensional")
    count = int(mask.sum())
    if count == 0:
        raise CurveError("raster has no foreground pixels")
    _, n_comp = ndimage.label(mask)  # default structure is 4-connectivity
    if n_comp > 1:
        raise CurveError(f"raster has {n_comp} foreground components; expected one")
    if count < 10:
        raise CurveError(f"foreground has {count} pixels; need at least 10")

    img = np.pad(mask, 1)
    rows, cols = np.nonzero(img)
    start = (int(rows[0]), int(cols[0]))  # topmost, then leftmost
    # we entered start from its west neighbour, which is background
    boundary = [start]
    current, back = start, (start[0], start[1] - 1)
    first_move = None
    for _ in range(4 * img.size):
        k = _MOORE.index((back[0] - current[0], back[1] - current[1]))
        for step in range(1, 9):
            dr, dc = _MOORE[(k + step) % 8]
            cand = (current[0] + dr, current[1] + dc)
            if img[cand]:
                pr, pc = _MOORE[(k + step - 1) % 8]
                back = (current[0] + pr, current[1] + pc)
                break
        else:
            break  # isolated pixel
        move = (current, cand)
        if first_move is None:
            first_move = move
        elif move == first_move:
            break  # Jacob's stopping criterion: same pixel entered the same way
        current = cand
        boundary.append(current)
    boundary = boundary[:-1] if len(boundary) > 1 and boundary[-1] == start else boundary

    pts = np.array(boundary, dtype=np.float64) - 1.0
    height = mask.shape[0]
    xy = np.column_stack([pts[:, 1], height - 1 - pts[:, 0]])
    # drop immediate repeats (thin spurs can revisit a pixel)
    keep = np.any(xy != np.roll(xy, 1, axis=0), axis=1)
    return ensure_ccw(PlanarCurve(xy[keep], closed=True))


def read_pgm(path) -> np.ndarray:
    """Binary mask from a PGM raster: foreground is pixel value > 127."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def ingest_directory(root) -> list[ShapeRecord]:
    """Trace every ``<root>/<category>/<id>.pgm``, in sorted order."""
    records = []
    for path in sorted(Path(root).glob("*/*.pgm")):
        curve = trace_contour(read_pgm(path))
        records.append(ShapeRecord(f"{path.parent.name}/{path.stem}", path.parent.name, curve, "raster"))
    if not records:
        raise FileNotFoundError(f"no <category>/<id>.pgm files under {root}")
    return records


# --------------------------------------------------------------------------
# synthetic shapes


def _family_template(family: int, harmonics: int, amplitude: float):
    rng = np.random.default_rng([7919, family, harmonics])
    k = np.arange(1, harmonics + 1)
    coef = rng.uniform(0.4, 1.0, size=harmonics) * amplitude / k
    phase = rng.uniform(-np.pi, np.pi, size=harmonics)
    return coef, phase


def synth_shape(
    seed,
    harmonics: int = 6,
    amplitude: float = 0.4,
    family: int | None = None,
    n_points: int = SYNTH_POINTS,
    jitter: float = 0.1,
) -> ShapeRecord:
    """Star-convex contour ``r(t) = 1 + sum_k a_k cos(k t + phi_k)``.

    Coefficients follow the family template (``|a_k| <= amplitude / k``) with
    per-shape relative jitter and a random rotation; they are rescaled if needed
    so that ``sum |a_k| <= amplitude``, which keeps the radius above
    ``1 - amplitude``.
    """
    if harmonics < 1:
        raise ValueError("need at least one harmonic")
    if not 0.0 <= amplitude < 1.0:
        raise ValueError(f"amplitude must lie in [0, 1), got {amplitude}")
    rng = np.random.default_rng(seed)
    if family is None:
        family = int(rng.integers(N_FAMILIES))
    k = np.arange(1, harmonics + 1)
    coef, phase = _family_template(family, harmonics, amplitude)
    coef = np.clip(coef * (1.0 + jitter * rng.standard_normal(harmonics)), 0.0, amplitude / k)
    phase = phase + jitter * rng.standard_normal(harmonics)
    if coef.sum() > amplitude:
        coef *= amplitude / coef.sum()
    rotation = rng.uniform(-np.pi, np.pi)

    t = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
    r = 1.0 + np.cos(np.outer(t, k) + phase) @ coef
    theta = t + rotation
    curve = PlanarCurve(np.column_stack([r * np.cos(theta), r * np.sin(theta)]), closed=True)
    return ShapeRecord(f"synth-{family}-{seed}", f"family{family}", curve, "synthetic")


def synth_collection(count: int, seed=0, families: int = N_FAMILIES, **kwargs) -> list[ShapeRecord]:
    """``count`` synthetic shapes, assigned to families round-robin."""
    seeds = np.random.default_rng(seed).integers(2**63, size=count)
    out = []
    for i, s in enumerate(seeds):
        rec = synth_shape(int(s), family=i % families, **kwargs)
        out.append(ShapeRecord(f"synth-{i:04d}", rec.category, rec.curve, "synthetic"))
    return out


# --------------------------------------------------------------------------
# splitting and pair datasets


def split_shapes(shapes, ratios=(0.5, 0.25, 0.25), seed=0):
    """Category-stratified random split into (train, validation, test)."""
    shapes = list(shapes)
    if not shapes:
        raise ValueError("nothing to split")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    by_cat: dict[str, list[ShapeRecord]] = {}
    for s in shapes:
        by_cat.setdefault(s.category, []).append(s)
    splits = ([], [], [])
    for cat in sorted(by_cat):
        members = by_cat[cat]
        order = rng.permutation(len(members))
        n_train = int(round(ratios[0] * len(members)))
        n_val = min(int(round(ratios[1] * len(members))), len(members) - n_train)
        for rank, i in enumerate(order):
            which = 0 if rank < n_train else 1 if rank < n_train + n_val else 2
            splits[which].append(members[i])
    return splits


def build_pair_dataset(
    shapes,
    pair_count: int,
    positive_fraction: float = 0.5,
    scale_index: int = 1,
    seed=0,
    out_dir=None,
    cross_shape_prob: float = 0.2,
    n_points: int = N_POINTS,
) -> list[TrainingPair]:
    """Build training pairs and, with ``out_dir``, write their curves and ``manifest.json``."""
    curves = [getattr(s, "curve", s) for s in shapes]
    pairs = build_pairs(curves, pair_count, positive_fraction, scale_index, seed, cross_shape_prob, n_points)
    if out_dir is not None:
        write_manifest(pairs, out_dir)
    return pairs


def write_manifest(pairs, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "curves").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, p in enumerate(pairs):
        a, b = f"curves/pair{i:05d}_a.csv", f"curves/pair{i:05d}_b.csv"
        write_curve(p.curve_a, out_dir / a)
        write_curve(p.curve_b, out_dir / b)
        entries.append({"curve_a_path": a, "curve_b_path": b, "label": p.label, "scale_index": p.scale_index})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(entries, indent=1) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> list[TrainingPair]:
    """Load pairs from a manifest; curve paths are relative to the manifest's directory."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed manifest: {exc}") from None
    pairs = []
    for e in entries:
        a = read_curve(path.parent / e["curve_a_path"], reorient=False)
        b = read_curve(path.parent / e["curve_b_path"], reorient=False)
        pairs.append(TrainingPair(a, b, int(e["label"]), int(e["scale_index"])))
    return pairs


# --------------------------------------------------------------------------
# shape collections and signatures on disk


def write_shape_index(records, out_dir) -> Path:
    """Write each shape as ``curves/<n>.csv`` plus an ``index.json`` listing id, category and source."""
    out_dir = Path(out_dir)
    (out_dir / "curves").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, rec in enumerate(records):
        rel = f"curves/shape{i:05d}.csv"
        write_curve(rec.curve, out_dir / rel)
        entries.append({"id": rec.id, "category": rec.category, "source": rec.source, "path": rel})
    path = out_dir / "index.json"
    path.write_text(json.dumps(entries, indent=1) + "\n", encoding="utf-8")
    return path


def read_shape_index(path) -> list[ShapeRecord]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
        return [
            ShapeRecord(e["id"], e["category"], read_curve(path.parent / e["path"]), e.get("source", "file"))
            for e in entries
        ]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed shape index: {exc}") from None


def write_signature(sig, path) -> None:
    """CSV with header ``index,value,method,scale``."""
    lines = ["index,value,method,scale"]
    lines += [f"{i},{v:.17g},{sig.method},{sig.scale:g}" for i, v in enumerate(sig.values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
