"""Contrastive training of the signature network in a Siamese configuration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .curve import (
    EuclideanParams,
    PlanarCurve,
    apply_euclidean,
    normalize_curve,
    random_euclidean_params,
    resample_uniform,
    smooth_loess,
)
from .invariants import Signature
from .net import Architecture, Model, adagrad_step, backward_batch, forward_batch, init_model, init_optimizer

log = logging.getLogger(__name__)

N_POINTS = 500
# LOESS span for negative partners, scale index 1 (fine) .. 5 (coarse)
SPAN_LADDER = (0.05, 0.10, 0.20, 0.35, 0.50)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    margin: float = 1.0
    learning_rate: float = 5e-4
    batch_size: int = 10
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0 or self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("hyperparameters must be positive")


@dataclass(frozen=True, eq=False)
class TrainingPair:
    curve_a: PlanarCurve
    curve_b: PlanarCurve
    label: int
    scale_index: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if len(self.curve_a) != len(self.curve_b):
            raise ValueError("pair members must have the same number of points")


def _values(sig) -> np.ndarray:
    return sig.values if isinstance(sig, Signature) else np.asarray(sig, dtype=np.float64)


def rms_distance(a, b) -> float:
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"signature lengths differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def contrastive_loss(sig_a, sig_b, label: int, margin: float = 1.0) -> float:
    """``label * d + (1 - label) * max(0, margin - d)`` with ``d`` the RMS difference."""
    d = rms_distance(sig_a, sig_b)
    return label * d + (1 - label) * max(0.0, margin - d)


def contrastive_loss_grad(sig_a, sig_b, label: int, margin: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    a, b = _values(sig_a), _values(sig_b)
    d = rms_distance(a, b)
    if d == 0.0 or (label == 0 and d >= margin):
        g = np.zeros_like(a)
    else:
        sign = 1.0 if label == 1 else -1.0
        g = sign * (a - b) / (len(a) * d)
    return g, -g


def _batch_loss_and_grad(out_a, out_b, labels, margin):
    """Mean contrastive loss over a batch and its gradient wrt both arms' outputs."""
    diff = out_a - out_b
    n = diff.shape[1]
    d = np.sqrt(np.mean(diff**2, axis=1))
    losses = labels * d + (1 - labels) * np.maximum(0.0, margin - d)
    coef = np.where(labels == 1, 1.0, np.where(d < margin, -1.0, 0.0))
    coef = np.divide(coef, n * d, out=np.zeros_like(d), where=d > 0)
    ga = coef[:, None] * diff / len(labels)
    return float(losses.mean()), ga, -ga


def prepare_curve(curve: PlanarCurve, n_points: int = N_POINTS) -> PlanarCurve:
    """Resample to ``n_points`` and normalize: the network's input convention."""
    return normalize_curve(resample_uniform(curve, n_points))


def make_positive_pair(
    curve: PlanarCurve,
    seed,
    scale_index: int = 1,
    n_points: int = N_POINTS,
    transform: EuclideanParams | None = None,
) -> TrainingPair:
    """Pair a curve with a randomly rotated, translated and possibly reflected copy."""
    params = transform if transform is not None else random_euclidean_params(seed)
    base = resample_uniform(curve, n_points)
    moved = resample_uniform(apply_euclidean(curve, params), n_points)
    return TrainingPair(normalize_curve(base), normalize_curve(moved), 1, scale_index)


def make_negative_pair(
    curve: PlanarCurve,
    scale_index: int,
    pool,
    seed,
    cross_shape_prob: float = 0.2,
    n_points: int = N_POINTS,
) -> TrainingPair:
    """Pair a curve with a smoothed copy of itself or, sometimes, a different shape."""
    if not 1 <= scale_index <= len(SPAN_LADDER):
        raise ValueError(f"scale_index must be in 1..{len(SPAN_LADDER)}, got {scale_index}")
    pool = list(pool)
    if not pool:
        raise ValueError("negative pool is empty")
    rng = np.random.default_rng(seed)
    base = resample_uniform(curve, n_points)
    others = [c for c in pool if c is not curve]
    if others and rng.random() < cross_shape_prob:
        partner = resample_uniform(others[rng.integers(len(others))], n_points)
    else:
        partner = smooth_loess(base, SPAN_LADDER[scale_index - 1])
    params = random_euclidean_params(rng.integers(2**63))
    partner = resample_uniform(apply_euclidean(partner, params), n_points)
    return TrainingPair(normalize_curve(base), normalize_curve(partner), 0, scale_index)


def build_pairs(
    curves,
    pair_count: int,
    positive_fraction: float = 0.5,
    scale_index: int = 1,
    seed=0,
    cross_shape_prob: float = 0.2,
    n_points: int = N_POINTS,
) -> list[TrainingPair]:
    """``round(positive_fraction * pair_count)`` positives, the rest negatives, interleaved at random."""
    curves = list(curves)
    if not curves:
        raise ValueError("no shapes to build pairs from")
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError("positive_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n_pos = int(round(positive_fraction * pair_count))
    is_pos = np.zeros(pair_count, dtype=bool)
    is_pos[:n_pos] = True
    rng.shuffle(is_pos)
    sources = rng.integers(len(curves), size=pair_count)
    seeds = rng.integers(2**63, size=pair_count)
    pairs = []
    for pos, src, s in zip(is_pos, sources, seeds):
        if pos:
            pairs.append(make_positive_pair(curves[src], s, scale_index, n_points))
        else:
            pairs.append(make_negative_pair(curves[src], scale_index, curves, s, cross_shape_prob, n_points))
    return pairs


@dataclass
class TrainResult:
    model: Model
    losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)

    def write_history(self, path) -> None:
        lines = ["epoch,mean_loss"] + [f"{i + 1},{loss:.17g}" for i, loss in enumerate(self.losses)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _stack(pairs):
    a = np.stack([p.curve_a.points for p in pairs])
    b = np.stack([p.curve_b.points for p in pairs])
    labels = np.array([p.label for p in pairs], dtype=np.float64)
    closed = {p.curve_a.closed for p in pairs} | {p.curve_b.closed for p in pairs}
    if len(closed) != 1:
        raise ValueError("training pairs must be all closed or all open")
    return a, b, labels, closed.pop()


def pair_losses(model: Model, pairs, margin: float = 1.0, batch: int = 100) -> float:
    """Mean contrastive loss of ``model`` over ``pairs``."""
    a, b, labels, closed = _stack(pairs)
    total = 0.0
    for lo in range(0, len(pairs), batch):
        sl = slice(lo, lo + batch)
        out = forward_batch(model, np.concatenate([a[sl], b[sl]]), closed)
        k = len(labels[sl])
        loss, _, _ = _batch_loss_and_grad(out[:k], out[k:], labels[sl], margin)
        total += loss * k
    return total / len(pairs)


def train_on_pairs(
    pairs,
    hp: Hyperparameters = Hyperparameters(),
    arch: Architecture | None = None,
    model: Model | None = None,
    validation=None,
    callback=None,
) -> TrainResult:
    """Adagrad on the mean contrastive loss, reshuffling the pairs every epoch.

    Both arms of each pair are pushed through one shared model in a single
    batch, so their parameter gradients are summed by construction.
    ``callback(epoch, model)`` is called with epoch 0 before training and after
    every epoch.
    """
    pairs = list(pairs)
    if len(pairs) < hp.batch_size:
        raise ValueError(f"need at least batch_size={hp.batch_size} pairs, got {len(pairs)}")
    rng = np.random.default_rng(hp.seed)
    if model is None:
        model = init_model(arch or Architecture(), rng.integers(2**63))
    state = init_optimizer(model, hp.learning_rate)
    a, b, labels, closed = _stack(pairs)
    result = TrainResult(model)
    if callback is not None:
        callback(0, model)
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(pairs))
        batch_losses = []
        for lo in range(0, len(order), hp.batch_size):
            idx = order[lo : lo + hp.batch_size]
            k = len(idx)
            out, cache = forward_batch(model, np.concatenate([a[idx], b[idx]]), closed, keep_cache=True)
            loss, ga, gb = _batch_loss_and_grad(out[:k], out[k:], labels[idx], hp.margin)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {lo}")
            grads = backward_batch(model, cache, np.concatenate([ga, gb]))
            try:
                model, state = adagrad_step(model, grads, state)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}, batch starting {lo}: {exc}") from None
            batch_losses.append(loss)
        result.model = model
        result.losses.append(float(np.mean(batch_losses)))
        if validation is not None:
            result.val_losses.append(pair_losses(model, validation, hp.margin))
        log.info("epoch %d mean loss %.6f", epoch, result.losses[-1])
        if callback is not None:
            callback(epoch, model)
    return result


def train(
    shapes,
    hp: Hyperparameters = Hyperparameters(),
    scale_index: int = 1,
    pair_count: int = 10_000,
    positive_fraction: float = 0.5,
    cross_shape_prob: float = 0.2,
    arch: Architecture | None = None,
    history_path=None,
    callback=None,
) -> TrainResult:
    """Build a pair dataset from ``shapes`` (curves or shape records) and train on it."""
    curves = [getattr(s, "curve", s) for s in shapes]
    rng = np.random.default_rng(hp.seed)
    pairs = build_pairs(
        curves, pair_count, positive_fraction, scale_index, rng.integers(2**63), cross_shape_prob
    )
    result = train_on_pairs(pairs, Hyperparameters(hp.margin, hp.learning_rate, hp.batch_size, hp.epochs,
                                                   int(rng.integers(2**63))), arch, callback=callback)
    if history_path is not None:
        result.write_history(history_path)
    return result
