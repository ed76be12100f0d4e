import argparse
import json
import subprocess
import sys

import numpy as np
import pytest

from curvesig.cli import build_parser, run
from curvesig.curve import PlanarCurve
from curvesig.data import write_curve
from curvesig.net import init_model, save_model


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    t = np.linspace(0, 2 * np.pi, 500, endpoint=False)
    write_curve(PlanarCurve(np.column_stack([np.cos(t), np.sin(t)])), root / "circle.csv")
    assert run(["dataset", "synth", "--count", "6", "--out", str(root / "shapes")]) == 0
    save_model(init_model(seed=1), root / "model.json")
    return root


def files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def leaf_parsers(parser, prefix=()):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for name, sub in action.choices.items():
                yield from leaf_parsers(sub, prefix + (name,))
            return
    yield prefix, parser


# -- parsing and help -------------------------------------------------------------


def test_every_subcommand_help_lists_defaults():
    leaves = dict(leaf_parsers(build_parser()))
    assert set(leaves) == {
        ("dataset", "synth"), ("dataset", "ingest"), ("dataset", "pairs"), ("train",), ("sig",),
        ("invariant",), ("eval", "noise"), ("eval", "sampling"), ("eval", "retrieval"), ("model", "inspect"),
    }
    for path, parser in leaves.items():
        text = " ".join(parser.format_help().split())
        for action in parser._actions:
            if isinstance(action, argparse._HelpAction):
                continue
            flag = action.option_strings[-1]
            assert flag in text, (path, flag)
            help_text = " ".join(parser._get_formatter()._expand_help(action).split()) if action.help else ""
            assert "default" in help_text or "required" in help_text, (path, flag, help_text)


def test_train_defaults_match_reference_hyperparameters():
    args = build_parser().parse_args(["train", "--shapes", "x.json"])
    assert (args.pairs, args.margin, args.lr, args.batch) == (10_000, 1.0, 5e-4, 10)
    assert args.scales == (1, 2, 3, 4, 5)
    args = build_parser().parse_args(["sig", "--model", "m", "--curve", "c"])
    assert args.points == 500


def test_help_exits_zero(capsys):
    assert run(["train", "--help"]) == 0
    assert "--margin" in capsys.readouterr().out


# -- exit codes -------------------------------------------------------------------------


def one_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


@pytest.mark.parametrize(
    "argv",
    [["train", "--nope"], ["frobnicate"], ["train", "--shapes", "a", "--manifest", "b"],
     ["invariant", "--curve", "missing.csv"], ["eval", "noise", "--shapes", "missing.json"]],
)
def test_usage_errors_exit_2(argv, capsys, tmp_path):
    assert run(argv + ["--out", str(tmp_path)] if argv[0] != "frobnicate" else argv) == 2
    assert one_error(capsys)["error"] == "usage"


def test_invalid_combination_exit_2(workspace, capsys, tmp_path):
    argv = ["invariant", "--curve", str(workspace / "circle.csv"), "--radius", "0.1", "--out", str(tmp_path)]
    assert run(argv) == 2
    assert "--radius" in one_error(capsys)["message"]


def test_malformed_model_exit_1_mentions_path(workspace, capsys, tmp_path):
    bad = tmp_path / "broken_model.json"
    bad.write_text('{"format_version": 1, "architecture": ')
    argv = ["sig", "--model", str(bad), "--curve", str(workspace / "circle.csv"), "--out", str(tmp_path)]
    assert run(argv) == 1
    err = one_error(capsys)
    assert err["error"] == "runtime" and str(bad) in err["message"]


def test_subprocess_entry_point(workspace, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "curvesig.cli", "sig", "--model", str(tmp_path / "absent.json"),
         "--curve", str(workspace / "circle.csv")],
        capture_output=True, text=True, cwd=tmp_path,
    )
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "usage"


# -- commands -------------------------------------------------------------------------------


def test_invariant_circle_curvature(workspace, tmp_path):
    argv = ["invariant", "--kind", "curvature", "--sigma", "2", "--curve", str(workspace / "circle.csv")]
    assert run(argv + ["--out", str(tmp_path)]) == 0
    lines = (tmp_path / "signature.csv").read_text().splitlines()
    assert lines[0] == "index,value,method,scale"
    values = np.array([float(line.split(",")[1]) for line in lines[1:]])
    assert len(values) == 500 and np.max(np.abs(values - 1)) < 0.05
    run_doc = json.loads((tmp_path / "run.json").read_text())
    assert run_doc["config"]["kind"] == "curvature" and run_doc["config"]["sigma"] == 2.0


def test_out_dir_from_environment(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("CURVESIG_OUT", str(tmp_path / "envout"))
    assert run(["invariant", "--kind", "integral", "--curve", str(workspace / "circle.csv")]) == 0
    assert (tmp_path / "envout" / "signature.csv").exists()


def test_model_inspect(workspace, tmp_path, capsys):
    assert run(["model", "inspect", "--model", str(workspace / "model.json"), "--out", str(tmp_path)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["num_params"] == 3781 and info["receptive_radius"] == 12


def test_sig_with_svg(workspace, tmp_path):
    argv = ["sig", "--model", str(workspace / "model.json"), "--curve", str(workspace / "circle.csv"), "--svg"]
    assert run(argv + ["--out", str(tmp_path)]) == 0
    assert (tmp_path / "signature.svg").read_text().startswith("<svg")


def test_ingest(tmp_path):
    from PIL import Image

    (tmp_path / "raw" / "blob").mkdir(parents=True)
    yy, xx = np.mgrid[:40, :40]
    Image.fromarray((((xx - 20) ** 2 + (yy - 20) ** 2 < 150) * 255).astype(np.uint8)).save(
        tmp_path / "raw" / "blob" / "one.pgm"
    )
    assert run(["dataset", "ingest", "--raster-dir", str(tmp_path / "raw"), "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "index.json").read_text())[0]["id"] == "blob/one"


REPRO_COMMANDS = [
    ["dataset", "synth", "--count", "6"],
    ["dataset", "pairs", "--shapes", "{shapes}", "--pairs", "12", "--scale", "3"],
    ["train", "--shapes", "{shapes}", "--pairs", "10", "--epochs", "1", "--scales", "2"],
    ["invariant", "--kind", "integral", "--curve", "{circle}", "--svg"],
    ["sig", "--model", "{model}", "--curve", "{circle}", "--svg"],
    ["eval", "noise", "--shapes", "{shapes}", "--model", "{model}", "--sigmas", "0,0.02"],
    ["eval", "sampling", "--curve", "{dense}", "--model", "{model}"],
    ["eval", "retrieval", "--shapes", "{shapes}", "--methods", "integral", "--radii", "0.1,0.3"],
    ["model", "inspect", "--model", "{model}"],
]


@pytest.mark.parametrize("argv", REPRO_COMMANDS, ids=lambda a: "-".join(a[:2]))
def test_byte_identical_reruns(argv, workspace, tmp_path):
    subs = {
        "shapes": str(workspace / "shapes" / "index.json"),
        "circle": str(workspace / "circle.csv"),
        "model": str(workspace / "model.json"),
        "dense": str(workspace / "shapes" / "curves" / "shape00000.csv"),
    }
    argv = [a.format(**subs) for a in argv]
    outputs = []
    for i, threads in enumerate(("1", "2", "1")):
        out = tmp_path / f"run{i}"
        assert run(argv + ["--seed", "7", "--threads", threads, "--out", str(out)]) == 0
        outputs.append(files(out))
    assert outputs[0] == outputs[1] == outputs[2]
    assert "run.json" in outputs[0]
