import csv
import json

import numpy as np
import pytest

from normalfusion.cli import BENCH_COLUMNS, EXIT_INPUT, EXIT_OK, build_parser, main
from normalfusion.scene_io import read_pfm

TINY = ["--batches", "4", "--patches", "8", "--table-log2", "10", "--finest-res", "32", "--mc-res", "32"]


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "scene"
    assert run("synth", "--views", 3, "--res", "24x24", "--mc-res", 64, "--out", out) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "train"
    assert run("train", "--scene", scene, *TINY, "--out", out) == EXIT_OK
    return out


def test_synth_defaults_and_manifest(scene):
    args = build_parser().parse_args(["synth", "--out", "x"])
    assert (args.views, args.res, args.shape) == (20, (128, 128), "sphere")
    man = json.loads((scene / "manifest.json").read_text())
    assert man["command"] == "synth" and man["findings"] == []
    # defaults are echoed too
    assert man["args"]["noise_deg"] == 0.0 and man["args"]["focal"] == 320.0
    assert len(list(scene.glob("normal_*.pfm"))) == 3
    assert (scene / "gt_mesh.obj").exists()


def test_synth_minimal_and_errors(tmp_path):
    assert run("synth", "--views", 2, "--res", "8x8", "--mc-res", 16, "--shape", "torus", "--out", tmp_path / "m") == 0
    assert run("validate", "--scene", tmp_path / "m") == EXIT_OK
    assert run("synth", "--shape", "teapot", "--out", tmp_path / "x") == EXIT_INPUT
    assert run("synth", "--res", "8by8", "--out", tmp_path / "x") == EXIT_INPUT
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("synth", "--views", 2, "--res", "8x8", "--out", blocker / "sub") == EXIT_INPUT


def test_validate_reports_errors(scene, tmp_path, capsys):
    assert run("validate", "--scene", scene) == EXIT_OK
    assert "scene is valid" in capsys.readouterr().out
    assert run("validate", "--scene", tmp_path / "nothing") == EXIT_INPUT


def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"metrics.csv", "timing.csv", "mesh.obj", "checkpoint.nfsdf", "loss.png", "manifest.json",
            "summary.json", "eval.json"} <= names
    rows = read_csv(trained / "metrics.csv")
    assert len(rows) == 4
    # dfd evaluates each patch sample once per ray of the 3x3 patch
    assert all(int(r["sdf_evals"]) == 9 * int(r["samples"]) for r in rows)
    man = json.loads((trained / "manifest.json").read_text())
    assert man["config"]["patches_per_batch"] == 8 and man["config"]["lr"] == 5e-3
    assert man["args"]["grad_mode"] == "dfd"


def test_train_fd_counts_seven_times(scene, tmp_path):
    assert run("train", "--scene", scene, *TINY, "--grad-mode", "fd", "--out", tmp_path / "fd") == EXIT_OK
    rows = read_csv(tmp_path / "fd" / "metrics.csv")
    assert all(int(r["sdf_evals"]) == 7 * 9 * int(r["samples"]) for r in rows)


def test_train_is_byte_deterministic(scene, tmp_path):
    for name in ("a", "b"):
        assert run("train", "--scene", scene, *TINY, "--deterministic", "--out", tmp_path / name) == EXIT_OK
    for f in ("mesh.obj", "metrics.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_input_errors(scene, tmp_path):
    assert run("train", "--scene", tmp_path / "missing", "--out", tmp_path / "o") == EXIT_INPUT
    assert run("train", "--scene", scene, "--batches", 0, "--out", tmp_path / "o") == EXIT_INPUT
    assert run("train", "--scene", scene, "--grad-mode", "sgd", "--out", tmp_path / "o") == EXIT_INPUT


def test_render_normals(scene, trained, tmp_path):
    out = tmp_path / "r"
    assert run("render-normals", "--checkpoint", trained / "checkpoint.nfsdf", "--scene", scene,
               "--mode", "sr-ad", "--views", "0,2", "--out", out) == EXIT_OK
    assert read_pfm(out / "normal_002.pfm").shape == (24, 24, 3)
    assert (out / "normal_000.png").exists()
    rows = read_csv(out / "angular_error.csv")
    assert [r["view"] for r in rows] == ["0", "2"]
    assert run("render-normals", "--checkpoint", trained / "checkpoint.nfsdf", "--scene", scene,
               "--mode", "raster", "--out", out) == EXIT_INPUT
    assert run("render-normals", "--checkpoint", trained / "checkpoint.nfsdf", "--scene", scene,
               "--views", "7", "--out", out) == EXIT_INPUT
    assert run("render-normals", "--checkpoint", scene / "scene.json", "--scene", scene, "--out", out) == EXIT_INPUT


def test_eval_self_and_missing_gt(scene, tmp_path, capsys):
    gt = scene / "gt_mesh.obj"
    assert run("eval", "--mesh", gt, "--gt-mesh", gt, "--scene", scene, "--out", tmp_path / "e") == EXIT_OK
    rep = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert rep["f_score"] == 1.0
    p, r = rep["precision"], rep["recall"]
    assert rep["f_score"] == pytest.approx(2 * p * r / (p + r), abs=1e-9)
    capsys.readouterr()
    bare = tmp_path / "bare"
    assert run("synth", "--views", 2, "--res", "8x8", "--mc-res", 16, "--out", bare) == EXIT_OK
    meta = json.loads((bare / "scene.json").read_text())
    meta.pop("analytic", None)
    (bare / "scene.json").write_text(json.dumps(meta))
    (bare / "gt_mesh.obj").unlink()
    assert run("eval", "--mesh", scene / "gt_mesh.obj", "--scene", bare) == EXIT_INPUT
    assert "no ground truth" in capsys.readouterr().err


def test_bench_grad(scene, tmp_path):
    out = tmp_path / "bench"
    assert run("bench-grad", "--scene", scene, *TINY, "--modes", "dfd,fd", "--err-views", 1, "--out", out) == 0
    rows = {r["mode"]: r for r in read_csv(out / "bench.csv")}
    assert list(read_csv(out / "bench.csv")[0]) == BENCH_COLUMNS
    # same seed and init: the first batch is identical, later ones drift with the field
    first = [read_csv(out / f"metrics_{m}.csv")[0] for m in ("dfd", "fd")]
    assert int(first[1]["sdf_evals"]) == 7 * int(first[0]["sdf_evals"])
    assert int(rows["fd"]["gradient_evals"]) == 6 * int(rows["fd"]["rendering_evals"])
    assert np.isfinite(float(rows["dfd"]["mean_angular_err_vs_analytic"]))
    assert (out / "bench.png").exists()
    assert run("bench-grad", "--scene", scene, "--modes", "dfd,xx", "--out", out) == EXIT_INPUT
