import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from warpfield import cli
from warpfield.checkpoint import load_checkpoint
from warpfield.imageio import read_png
from warpfield.training import NumericalError

TINY = ["--canonical-width", "8", "--canonical-depth", "2", "--canonical-skip", "1", "--encoding-bands", "2",
        "--latent-dim", "4", "--bending-width", "8", "--rigidity-width", "8", "--batch-size", "8",
        "--n-coarse", "4", "--n-fine", "4", "--chunk", "64", "--test-latent-iterations", "2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    assert cli.main(["make-dataset", "--output", data, "--frames", "17", "--width", "12", "--height", "12",
                     "--samples-per-ray", "16", "--novel-views", "1"]) == 0
    run = str(root / "run")
    assert cli.main(["train", "--dataset", data, "--output", run, "--iterations", "4", *TINY]) == 0
    return root, data, run


def pngs(path):
    return sorted(n for n in os.listdir(path) if n.endswith(".png"))


def test_train_writes_outputs(workspace):
    _, _, run = workspace
    assert {"config.txt", "loss.csv", "checkpoint.wf"} <= set(os.listdir(run))
    with open(os.path.join(run, "loss.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and all(np.isfinite(float(r["total"])) for r in rows)
    state = load_checkpoint(os.path.join(run, "checkpoint.wf"))
    assert state.iteration == 4 and "canonical_box" in state.extras


def test_train_refuses_to_clobber(workspace, tmp_path):
    _, data, run = workspace
    assert cli.main(["train", "--dataset", data, "--output", run, "--iterations", "1", *TINY]) == 1


def test_resume_extends_training(workspace, tmp_path):
    _, data, _ = workspace
    out = str(tmp_path / "r")
    assert cli.main(["train", "--dataset", data, "--output", out, "--iterations", "2", *TINY]) == 0
    assert cli.main(["train", "--dataset", data, "--output", out, "--iterations", "4", "--resume", *TINY]) == 0
    with open(os.path.join(out, "loss.csv")) as fh:
        assert [int(r["iteration"]) for r in csv.DictReader(fh)] == [0, 1, 2, 3]


def test_train_and_render_deterministic(workspace, tmp_path):
    _, data, _ = workspace
    blobs = []
    for k in range(2):
        out = str(tmp_path / f"t{k}")
        assert cli.main(["train", "--dataset", data, "--output", out, "--iterations", "3", "--seed", "5", *TINY]) == 0
        img = str(tmp_path / f"img{k}")
        assert cli.main(["render", "--checkpoint", os.path.join(out, "checkpoint.wf"), "--dataset", data,
                         "--output", img, "--split", "train"]) == 0
        blobs.append([open(os.path.join(img, n), "rb").read() for n in pngs(img)])
    assert blobs[0] == blobs[1] and len(blobs[0]) == 13


def test_fresh_model_canonical_equals_color(workspace, tmp_path):
    _, data, _ = workspace
    out = str(tmp_path / "fresh")
    assert cli.main(["train", "--dataset", data, "--output", out, "--iterations", "0", *TINY]) == 1  # must be >= 1
    assert cli.main(["train", "--dataset", data, "--output", out, "--iterations", "1", "--base-lr", "1e-12",
                     "--overwrite", *TINY]) == 0
    renders = {}
    for modality in ("color", "canonical"):
        img = str(tmp_path / modality)
        assert cli.main(["render", "--checkpoint", os.path.join(out, "checkpoint.wf"), "--dataset", data,
                         "--output", img, "--split", "test", "--modality", modality]) == 0
        renders[modality] = [read_png(os.path.join(img, n)) for n in pngs(img)]
    for a, b in zip(renders["color"], renders["canonical"]):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("modality", ["rigidity", "correspondence"])
def test_render_visualizations(workspace, tmp_path, modality):
    _, data, run = workspace
    out = str(tmp_path / modality)
    assert cli.main(["render", "--checkpoint", os.path.join(run, "checkpoint.wf"), "--dataset", data,
                     "--output", out, "--split", "test", "--modality", modality]) == 0
    assert len(pngs(out)) == 4


def test_render_from_camera_path(workspace, tmp_path):
    _, data, run = workspace
    with open(os.path.join(data, "cameras.json")) as fh:
        cams = json.load(fh)[:2]
    path = tmp_path / "path.json"
    path.write_text(json.dumps(cams))
    out = str(tmp_path / "path-out")
    assert cli.main(["render", "--checkpoint", os.path.join(run, "checkpoint.wf"), "--camera-path", str(path),
                     "--output", out]) == 0
    assert len(pngs(out)) == 2


def test_evaluate_writes_one_row_per_test_image(workspace, tmp_path):
    _, data, run = workspace
    out = str(tmp_path / "eval")
    assert cli.main(["evaluate", "--checkpoint", os.path.join(run, "checkpoint.wf"), "--dataset", data,
                     "--output", out]) == 0
    with open(os.path.join(out, "metrics.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and {r["split"] for r in rows} == {"test"}
    assert all(np.isfinite(float(r["psnr"])) and np.isfinite(float(r["ssim"])) for r in rows)


@pytest.mark.parametrize("flags", [["--exaggerate", "2"], ["--remove-foreground", "0.5"], ["--stabilize", "0.3"],
                                   ["--interpolate-time", "0", "0.5"]])
def test_edit_flags(workspace, tmp_path, flags):
    _, data, run = workspace
    out = str(tmp_path / "edit")
    assert cli.main(["edit", "--checkpoint", os.path.join(run, "checkpoint.wf"), "--dataset", data,
                     "--split", "test", "--output", out, *flags]) == 0
    assert len(pngs(out)) == 4


def test_edit_rejects_out_of_range_threshold(workspace, tmp_path):
    _, data, run = workspace
    assert cli.main(["edit", "--checkpoint", os.path.join(run, "checkpoint.wf"), "--dataset", data,
                     "--output", str(tmp_path / "e"), "--remove-foreground", "2"]) == 1


def test_stability_from_images_and_checkpoint(workspace, tmp_path):
    _, data, run = workspace
    out = str(tmp_path / "stab")
    assert cli.main(["stability", "--images", os.path.join(data, "images"), "--output", out]) == 0
    assert {"stability.png", "stability.csv"} <= set(os.listdir(out))
    out2 = str(tmp_path / "stab2")
    assert cli.main(["stability", "--checkpoint", os.path.join(run, "checkpoint.wf"), "--dataset", data,
                     "--output", out2, "--times", "test"]) == 0
    with open(os.path.join(out2, "stability.csv")) as fh:
        assert len(fh.readlines()) == 1 + 144


def test_exit_codes(workspace, tmp_path, monkeypatch):
    _, data, run = workspace
    assert cli.main([]) == 1
    assert cli.main(["train", "--bogus-flag"]) == 1
    assert cli.main(["train", "--dataset", data, "--output", str(tmp_path / "x"), "--view-dependence", "sideways"]) == 1
    assert cli.main(["train", "--dataset", str(tmp_path / "missing"), "--output", str(tmp_path / "y"), *TINY]) == 2
    assert cli.main(["render", "--checkpoint", str(tmp_path / "none.wf"), "--dataset", data,
                     "--output", str(tmp_path / "z")]) == 2
    bad = tmp_path / "bad.wf"
    bad.write_bytes(b"WARPFIELD1\x00")
    assert cli.main(["render", "--checkpoint", str(bad), "--dataset", data, "--output", str(tmp_path / "w")]) == 2

    def explode(self):
        raise NumericalError("non-finite loss at iteration 0")

    monkeypatch.setattr(cli.Trainer, "step", explode)
    assert cli.main(["train", "--dataset", data, "--output", str(tmp_path / "n"), "--iterations", "1", *TINY]) == 3


def test_config_file_and_preset(workspace, tmp_path):
    _, data, _ = workspace
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"dataset = {data}\niterations = 2\nbatch_size = 4\n")
    out = str(tmp_path / "cfgrun")
    assert cli.main(["train", "--config", str(cfg), "--output", out, *TINY, "--batch-size", "6"]) == 0
    state = load_checkpoint(os.path.join(out, "checkpoint.wf"))
    assert state.config["batch_size"] == 6 and state.config["iterations"] == 2
    assert cli.main(["train", "--preset", "nope", "--dataset", data, "--output", str(tmp_path / "p")]) == 1


def test_console_entry_point(tmp_path):
    env = dict(os.environ, WARPFIELD_THREADS="1")
    res = subprocess.run([sys.executable, "-m", "warpfield.cli", "--help"], capture_output=True, text=True, env=env)
    assert res.returncode == 0 and "make-dataset" in res.stdout
    res = subprocess.run([sys.executable, "-m", "warpfield.cli", "render"], capture_output=True, text=True, env=env)
    assert res.returncode == 1 and "usage error" in res.stderr
