"""Command-line interface: ``curvesig <command> [<subcommand>] [options]``.

Every invocation writes ``run.json`` (the resolved configuration) into the
output directory.  Errors are reported on stderr as one JSON line; exit code
2 means a usage problem or missing input, 1 a runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .curve import resample_uniform
from .data import (
    build_pair_dataset,
    ingest_directory,
    read_curve,
    read_manifest,
    read_shape_index,
    synth_collection,
    write_shape_index,
    write_signature,
)
from .evaluation import (
    KEEP_FRACTIONS,
    RADIUS_LADDER,
    noise_experiment,
    retrieval_experiment,
    sampling_experiment,
)
from .invariants import differentiate_wrt_arclength, euclidean_curvature, integral_area_invariant
from .net import forward, load_model, save_model
from .siamese import N_POINTS, Hyperparameters, prepare_curve, train, train_on_pairs
from .svgplot import write_line_plot

OUT_ENV = "CURVESIG_OUT"
log = logging.getLogger("curvesig")


class UsageError(Exception):
    """Bad flags, flag combinations or missing input files (exit 2)."""


class _HelpFormatter(argparse.HelpFormatter):
    """Append ``(default: ...)`` to every option whose help does not already state it."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or "required" in text or action.default is argparse.SUPPRESS:
            return text
        if action.option_strings or action.nargs in ("?", "*"):
            value = action.default
            if isinstance(value, (tuple, list)):
                value = ",".join(format(v, "g") if isinstance(v, float) else str(v) for v in value) or "none"
            elif isinstance(value, bool):
                value = "off" if not value else "on"
            elif value is None:
                value = "none"
            text += f" (default: {value})"
        return text


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _words(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.add_argument(
        "--out",
        default=None,
        help=f"output directory (default: ${OUT_ENV} if set, else the current directory)",
    )
    g.add_argument("--threads", type=int, default=None, help="worker threads for per-shape work (default: all cores)")
    g.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    common = _common()
    parser = _Parser(prog="curvesig", description="Invariant signatures of planar curves.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    cmds = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def leaf(group, name, help_text):
        return group.add_parser(name, help=help_text, description=help_text, parents=[common], formatter_class=fmt)

    # dataset
    ds = cmds.add_parser("dataset", help="build shape collections and training pairs", formatter_class=fmt)
    ds_cmds = ds.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    p = leaf(ds_cmds, "synth", "generate a synthetic star-shaped collection with known categories")
    p.add_argument("--count", type=int, default=30, help="number of shapes")
    p.add_argument("--families", type=int, default=6, help="number of categories")
    p.add_argument("--harmonics", type=int, default=6, help="radial harmonics per shape")
    p.add_argument("--amplitude", type=float, default=0.4, help="bound on the summed harmonic amplitudes")
    p.add_argument("--points", type=int, default=1000, help="points per synthetic contour")
    p = leaf(ds_cmds, "ingest", "trace <category>/<id>.pgm rasters into a shape collection")
    p.add_argument("--raster-dir", required=True, help="directory of <category>/<id>.pgm files (required)")
    p = leaf(ds_cmds, "pairs", "build a training-pair manifest from a shape collection")
    p.add_argument("--shapes", required=True, help="shape collection index.json (required)")
    p.add_argument("--pairs", type=int, default=10_000, help="number of pairs")
    p.add_argument("--positive-fraction", type=float, default=0.5, help="fraction of positive pairs")
    p.add_argument("--scale", type=int, default=1, help="scale index 1..5 of the smoothed negatives")
    p.add_argument("--cross-shape-prob", type=float, default=0.2, help="chance a negative uses another shape")
    p.add_argument("--points", type=int, default=N_POINTS, help="points per training curve")

    # train
    p = leaf(cmds, "train", "train signature networks with the contrastive loss")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--shapes", help="shape collection index.json; pairs are built per scale (this or --manifest is required)")
    src.add_argument("--manifest", help="pair manifest.json; trains a single model on it (this or --shapes is required)")
    p.add_argument("--pairs", type=int, default=10_000, help="pairs per scale when building from --shapes")
    p.add_argument("--scales", type=_ints, default=(1, 2, 3, 4, 5), help="scale indices, comma separated")
    p.add_argument("--positive-fraction", type=float, default=0.5, help="fraction of positive pairs")
    p.add_argument("--cross-shape-prob", type=float, default=0.2, help="chance a negative uses another shape")
    p.add_argument("--margin", type=float, default=1.0, help="contrastive margin")
    p.add_argument("--lr", type=float, default=5e-4, help="Adagrad learning rate")
    p.add_argument("--batch", type=int, default=10, help="pairs per batch")
    p.add_argument("--epochs", type=int, default=30, help="passes over the pairs")

    # sig
    p = leaf(cmds, "sig", "network signature of one curve")
    p.add_argument("--model", required=True, help="model weight file (required)")
    p.add_argument("--curve", required=True, help="curve CSV (required)")
    p.add_argument("--points", type=int, default=N_POINTS, help="resample to this many points first")
    p.add_argument("--svg", action="store_true", help="also write signature.svg")

    # invariant
    p = leaf(cmds, "invariant", "axiomatic invariant signature of one curve")
    p.add_argument("--curve", required=True, help="curve CSV (required)")
    p.add_argument("--kind", choices=("curvature", "curvature_s", "integral"), default="curvature",
                   help="which invariant")
    p.add_argument("--sigma", type=float, default=2.0, help="Gaussian scale in samples (curvature kinds)")
    p.add_argument("--radius", type=float, default=None,
                   help="disk radius for --kind integral (default: 0.1 x curve diameter)")
    p.add_argument("--points", type=int, default=0, help="resample to this many points first (0: as given)")
    p.add_argument("--svg", action="store_true", help="also write signature.svg")

    # eval
    ev = cmds.add_parser("eval", help="robustness and retrieval experiments", formatter_class=fmt)
    ev_cmds = ev.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    p = leaf(ev_cmds, "noise", "signature stability under noise and rotation")
    p.add_argument("--shapes", required=True, help="shape collection index.json (required)")
    p.add_argument("--model", default=None, help="model file; required when methods include network")
    p.add_argument("--sigmas", type=_floats, default=(0.0, 0.01, 0.02, 0.05), help="noise levels")
    p.add_argument("--methods", type=_words, default=("curvature", "integral", "network"), help="methods")
    p.add_argument("--curvature-sigma", type=float, default=2.0, help="Gaussian scale for curvature")
    p.add_argument("--radius-fraction", type=float, default=0.1, help="integral radius / diameter")
    p = leaf(ev_cmds, "sampling", "signature values at fixed anchors under decimation")
    p.add_argument("--curve", required=True, help="high-resolution curve CSV, >= 1000 points (required)")
    p.add_argument("--model", default=None, help="model file; required when methods include network")
    p.add_argument("--keep", type=_floats, default=KEEP_FRACTIONS, help="keep fractions")
    p.add_argument("--anchors", type=int, default=8, help="number of anchor points")
    p.add_argument("--methods", type=_words, default=("curvature", "integral", "network"), help="methods")
    p = leaf(ev_cmds, "retrieval", "precision@k ranking with Hausdorff set distances")
    p.add_argument("--shapes", required=True, help="shape collection index.json (required)")
    p.add_argument("--models", type=_words, default=(), help="model files for scales 1..5, comma separated")
    p.add_argument("--sigmas", type=_floats, default=(0.0, 0.02), help="noise levels")
    p.add_argument("--methods", type=_words, default=("integral", "network"), help="methods")
    p.add_argument("--radii", type=_floats, default=RADIUS_LADDER, help="integral radii / diameter")
    p.add_argument("--k", type=int, default=4, help="precision cut-off")

    # model
    md = cmds.add_parser("model", help="model file utilities", formatter_class=fmt)
    md_cmds = md.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    p = leaf(md_cmds, "inspect", "print architecture and parameter statistics")
    p.add_argument("--model", required=True, help="model weight file (required)")
    return parser


# --------------------------------------------------------------------------
# helpers


def _need_file(path, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file: {path}")
    return p


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run(out: Path, args, extra=None) -> None:
    # thread count and verbosity do not affect results, so they are left out
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("threads", "verbose", "out", "func")}
    config = {k: list(v) if isinstance(v, tuple) else v for k, v in config.items()}
    doc = {"program": "curvesig", "version": __version__, "config": config}
    if extra:
        doc["outputs"] = extra
    (out / "run.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _check_positive(**values):
    for name, v in values.items():
        if v is not None and v <= 0:
            raise UsageError(f"--{name.replace('_', '-')} must be positive, got {v}")


def _check_scales(scales):
    bad = [s for s in scales if not 1 <= s <= 5]
    if bad or not scales:
        raise UsageError(f"scale indices must lie in 1..5, got {list(scales)}")


# --------------------------------------------------------------------------
# commands


def cmd_dataset_synth(args, out):
    _check_positive(count=args.count, families=args.families, harmonics=args.harmonics, points=args.points)
    shapes = synth_collection(
        args.count, args.seed, args.families, harmonics=args.harmonics, amplitude=args.amplitude,
        n_points=args.points,
    )
    return {"index": str(write_shape_index(shapes, out).name)}


def cmd_dataset_ingest(args, out):
    root = Path(args.raster_dir)
    if not root.is_dir():
        raise UsageError(f"--raster-dir: no such directory: {root}")
    shapes = ingest_directory(root)
    return {"index": str(write_shape_index(shapes, out).name)}


def cmd_dataset_pairs(args, out):
    shapes = read_shape_index(_need_file(args.shapes, "--shapes"))
    _check_scales([args.scale])
    _check_positive(pairs=args.pairs, points=args.points)
    if not 0 <= args.positive_fraction <= 1 or not 0 <= args.cross_shape_prob <= 1:
        raise UsageError("--positive-fraction and --cross-shape-prob must lie in [0, 1]")
    build_pair_dataset(shapes, args.pairs, args.positive_fraction, args.scale, args.seed, out,
                       args.cross_shape_prob, args.points)
    return {"manifest": "manifest.json"}


def _plot_losses(path, histories):
    series = [(label, np.arange(1, len(h) + 1), h) for label, h in histories]
    write_line_plot(path, series, title="training loss", xlabel="epoch", ylabel="mean contrastive loss")


def cmd_train(args, out):
    _check_positive(pairs=args.pairs, margin=args.margin, lr=args.lr, batch=args.batch, epochs=args.epochs)
    outputs = {}
    if args.manifest:
        pairs = read_manifest(_need_file(args.manifest, "--manifest"))
        hp = Hyperparameters(args.margin, args.lr, args.batch, args.epochs, args.seed)
        result = train_on_pairs(pairs, hp)
        save_model(result.model, out / "model.json")
        result.write_history(out / "history.csv")
        _plot_losses(out / "history.svg", [("manifest", result.losses)])
        return {"model": "model.json", "history": "history.csv"}
    shapes = read_shape_index(_need_file(args.shapes, "--shapes"))
    _check_scales(args.scales)
    histories = []
    for scale in args.scales:
        # each scale gets its own stream so results do not depend on the scale list
        hp = Hyperparameters(args.margin, args.lr, args.batch, args.epochs, args.seed * 10 + scale)
        log.info("training scale %d", scale)
        result = train(shapes, hp, scale, args.pairs, args.positive_fraction, args.cross_shape_prob)
        save_model(result.model, out / f"model_scale{scale}.json")
        result.write_history(out / f"history_scale{scale}.csv")
        histories.append((f"scale {scale}", result.losses))
        outputs[f"scale{scale}"] = f"model_scale{scale}.json"
    _plot_losses(out / "history.svg", histories)
    return outputs


def _load_curve(path, points):
    curve = read_curve(_need_file(path, "--curve"))
    return resample_uniform(curve, points) if points else curve


def cmd_sig(args, out):
    _need_file(args.model, "--model")
    _check_positive(points=args.points)
    curve = _load_curve(args.curve, 0)
    model = load_model(args.model)
    sig = forward(model, prepare_curve(curve, args.points))
    write_signature(sig, out / "signature.csv")
    if args.svg:
        write_line_plot(out / "signature.svg", [("network", np.arange(len(sig)), sig.values)],
                        title="network signature", xlabel="point index", ylabel="value")
    return {"signature": "signature.csv"}


def cmd_invariant(args, out):
    _check_positive(sigma=args.sigma, radius=args.radius)
    if args.points < 0:
        raise UsageError("--points must be >= 0")
    if args.radius is not None and args.kind != "integral":
        raise UsageError("--radius only applies to --kind integral")
    curve = _load_curve(args.curve, args.points)
    if args.kind == "curvature":
        sig = euclidean_curvature(curve, args.sigma)
    elif args.kind == "curvature_s":
        sig = differentiate_wrt_arclength(euclidean_curvature(curve, args.sigma), curve, args.sigma)
    else:
        from .evaluation import diameter

        radius = args.radius if args.radius is not None else 0.1 * diameter(curve)
        sig = integral_area_invariant(curve, radius)
    write_signature(sig, out / "signature.csv")
    if args.svg:
        write_line_plot(out / "signature.svg", [(args.kind, np.arange(len(sig)), sig.values)],
                        title=f"{args.kind} signature", xlabel="point index", ylabel="value")
    return {"signature": "signature.csv"}


def _maybe_model(args, methods):
    if "network" not in methods:
        return None
    if not args.model:
        raise UsageError("--model is required when --methods includes network")
    return load_model(_need_file(args.model, "--model"))


def _check_methods(methods, allowed):
    bad = [m for m in methods if m not in allowed]
    if bad or not methods:
        raise UsageError(f"--methods must be drawn from {', '.join(allowed)}; got {', '.join(methods) or 'nothing'}")


def cmd_eval_noise(args, out):
    _check_methods(args.methods, ("curvature", "integral", "network"))
    if any(s < 0 for s in args.sigmas):
        raise UsageError("--sigmas must be >= 0")
    shapes = read_shape_index(_need_file(args.shapes, "--shapes"))
    model = _maybe_model(args, args.methods)
    detail, summary = noise_experiment(shapes, model, args.sigmas, args.seed, args.curvature_sigma,
                                       args.radius_fraction, args.methods)
    summary.write_csv(out / "noise.csv")
    detail.write_csv(out / "noise_detail.csv")
    series = [(m, list(args.sigmas), [r[2] for r in summary.rows if r[0] == m]) for m in args.methods]
    write_line_plot(out / "noise.svg", series, title="signature stability", xlabel="noise sigma",
                    ylabel="mean signature distance")
    return {"summary": "noise.csv", "detail": "noise_detail.csv"}


def cmd_eval_sampling(args, out):
    _check_methods(args.methods, ("curvature", "integral", "network"))
    curve = read_curve(_need_file(args.curve, "--curve"))
    model = _maybe_model(args, args.methods)
    report = sampling_experiment(curve, model, args.keep, args.anchors, args.seed, methods=args.methods)
    report.write_csv(out / "sampling.csv")
    return {"report": "sampling.csv"}


def cmd_eval_retrieval(args, out):
    _check_methods(args.methods, ("curvature", "integral", "network"))
    shapes = read_shape_index(_need_file(args.shapes, "--shapes"))
    models = None
    if "network" in args.methods:
        if not args.models:
            raise UsageError("--models is required when --methods includes network")
        models = [load_model(_need_file(m, "--models")) for m in args.models]
    result = retrieval_experiment(shapes, args.methods, args.sigmas, args.seed, models, args.radii, args.k,
                                   workers=args.threads or os.cpu_count() or 1)
    result.report.write_csv(out / "retrieval.csv")
    rows = result.report.rows
    series = [(m, [r[1] for r in rows if r[0] == m], [r[2] for r in rows if r[0] == m]) for m in args.methods]
    write_line_plot(out / "retrieval.svg", series, title=f"precision@{args.k}", xlabel="noise sigma",
                    ylabel="mean precision")
    return {"report": "retrieval.csv"}


def cmd_model_inspect(args, out):
    model = load_model(_need_file(args.model, "--model"))
    layers = [
        {"name": name, "shape": list(p.shape), "l2": float(np.linalg.norm(p)), "max_abs": float(np.max(np.abs(p)))}
        for name, p in zip(model.param_names(), model.params())
    ]
    info = {
        "architecture": model.arch.to_dict(),
        "num_params": model.num_params(),
        "receptive_radius": model.arch.receptive_radius,
        "layers": layers,
    }
    text = json.dumps(info, indent=1) + "\n"
    sys.stdout.write(text)
    (out / "inspect.json").write_text(text, encoding="utf-8")
    return {"report": "inspect.json"}


COMMANDS = {
    ("dataset", "synth"): cmd_dataset_synth,
    ("dataset", "ingest"): cmd_dataset_ingest,
    ("dataset", "pairs"): cmd_dataset_pairs,
    ("train", None): cmd_train,
    ("sig", None): cmd_sig,
    ("invariant", None): cmd_invariant,
    ("eval", "noise"): cmd_eval_noise,
    ("eval", "sampling"): cmd_eval_sampling,
    ("eval", "retrieval"): cmd_eval_retrieval,
    ("model", "inspect"): cmd_model_inspect,
}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    return code


def run(argv=None) -> int:
    """Parse ``argv``, execute the command and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    func = COMMANDS[(args.command, getattr(args, "subcommand", None))]
    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        from threadpoolctl import threadpool_limits

        # BLAS stays single-threaded: its reduction order varies with the thread
        # count, which would leak into results; --threads sizes our own pools
        with threadpool_limits(limits=1, user_api="blas"):
            out = _out_dir(args)
            outputs = func(args, out)
        _write_run(out, args, outputs)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        return _fail("runtime", f"{type(exc).__name__}: {exc}", 1)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
