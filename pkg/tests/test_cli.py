import json

import numpy as np
import pytest

from portrait_completion.checkpoint import load_checkpoint
from portrait_completion.cli import EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from portrait_completion.data import HoleMask, read_image, write_image, write_mask
from portrait_completion.metrics import read_report

TINY = {
    "parsing": {"backbone_channels": [8, 8, 8, 8], "stage5_channels": 8, "aspp_channels": 8,
                "pose_channels": 8, "refine_channels": 8},
    "generator": {"base_channels": 4, "n_front_resblocks": 1, "n_back_resblocks": 1, "dilation_rates": [2]},
    "face": {"base_channels": 4},
    "perception": {"channels": [4, 4, 4, 4, 4]},
    "max_steps": {"parse": 2, "complete": 2, "face": 2},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset, config and the three trained checkpoints, built once through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    c = ["--config", str(cfg)]
    assert main(["gen-data", "--count", "3", "--size", "64", "--out", str(root / "data")] + c) == EXIT_OK
    d = ["--data", str(root / "data")] + c
    assert main(["train-parse", "--out", str(root / "parse.npz")] + d) == EXIT_OK
    assert main(["train-complete", "--out", str(root / "gen.npz")] + d) == EXIT_OK
    assert main(["train-complete", "--extrapolate", "down", "--out", str(root / "ext.npz")] + d) == EXIT_OK
    assert main(["train-face", "--generator", str(root / "gen.npz"), "--out", str(root / "face.npz")] + d) == EXIT_OK
    image = next((root / "data" / "images").glob("*.png"))
    write_mask(root / "mask.png", HoleMask.from_boxes((64, 64), [(8, 8, 16, 16), (40, 36, 12, 20)]))
    return {"root": root, "cfg": c, "image": image}


def test_training_outputs(workspace):
    root = workspace["root"]
    assert load_checkpoint(root / "parse.npz", "parsing").meta["steps"] == 2
    assert (root / "gen.disc-global.npz").exists() and (root / "gen.disc-local.npz").exists()
    assert not (root / "ext.disc-local.npz").exists()
    assert (root / "face.disc-face.npz").exists()


def _infer(ws, out, *extra):
    r = ws["root"]
    return main(["infer", "--image", str(ws["image"]), "--mask", str(r / "mask.png"),
                 "--parsing", str(r / "parse.npz"), "--generator", str(r / "gen.npz"),
                 "--face", str(r / "face.npz"), "--out", str(out), *extra])


def test_infer_preserves_known_pixels_and_is_repeatable(workspace, capsys):
    r = workspace["root"]
    assert _infer(workspace, r / "a.png") == EXIT_OK
    assert "stages: parse -> complete" in capsys.readouterr().out
    assert _infer(workspace, r / "b.png", "--seed", "0") == EXIT_OK
    a, b = (np.asarray(read_image(r / n)) for n in ("a.png", "b.png"))
    assert np.array_equal(a, b)
    src = read_image(workspace["image"])
    mask = np.asarray(read_image(r / "mask.png"))[..., 0] > 0
    assert np.array_equal(a[~mask], src[~mask])


def test_infer_without_blend_and_work_size(workspace):
    r = workspace["root"]
    assert _infer(workspace, r / "c.png", "--no-blend") == EXIT_OK
    assert _infer(workspace, r / "d.png", "--work-size", "32", "32") == EXIT_OK
    assert _infer(workspace, r / "e.png", "--work-size", "30", "32") == EXIT_INVALID


def test_extrapolate_dimensions(workspace):
    r = workspace["root"]
    base = ["--image", str(workspace["image"]), "--parsing", str(r / "parse.npz"), "--out", str(r / "x.png")]
    assert main(["extrapolate", "--direction", "up", "--generator", str(r / "ext.npz")] + base) == EXIT_OK
    assert read_image(r / "x.png").shape == (72, 64, 3)
    # an inpainting generator cannot extrapolate
    assert main(["extrapolate", "--direction", "down", "--generator", str(r / "gen.npz")] + base) == EXIT_INVALID


def test_eval_report(workspace):
    r = workspace["root"]
    for sub in ("outs", "tgts", "masks"):
        (r / sub).mkdir(exist_ok=True)
    img = read_image(workspace["image"])
    for k in range(3):
        write_image(r / "tgts" / f"s{k}.png", img)
        write_image(r / "outs" / f"s{k}.png", np.clip(img + 0.1 * k, -1, 1))
        write_mask(r / "masks" / f"s{k}.png", HoleMask.from_boxes((64, 64), [(10, 10, 20, 20)]))
    out = r / "report.txt"
    assert main(["eval", "--outputs", str(r / "outs"), "--targets", str(r / "tgts"), "--masks", str(r / "masks"),
                 "--out", str(out)] + workspace["cfg"]) == EXIT_OK
    rep = read_report(out)
    assert rep["count"] == 3 and "fid" in rep and "hole.l1" in rep


def test_blend_command(workspace, tmp_path):
    r = np.random.default_rng(0)
    src, tgt = r.uniform(-1, 1, (2, 32, 32, 3))
    write_image(tmp_path / "s.png", src)
    write_image(tmp_path / "t.png", tgt)
    write_mask(tmp_path / "m.png", HoleMask.from_boxes((32, 32), [(4, 4, 20, 20)]))
    args = ["blend", "--source", str(tmp_path / "s.png"), "--target", str(tmp_path / "t.png"),
            "--mask", str(tmp_path / "m.png"), "--out", str(tmp_path / "o.png")]
    assert main(args) == EXIT_OK
    assert main(args + ["--max-iter", "1"]) == EXIT_NUMERIC


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["infer", "--out", "x.png"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["extrapolate", "--direction", "left", "--image", "a", "--parsing", "b",
                 "--generator", "c", "--out", "d"]) == EXIT_USAGE


def test_invalid_inputs(workspace, tmp_path):
    r = workspace["root"]
    assert main(["train-parse", "--data", str(tmp_path), "--out", str(tmp_path / "p.npz")]) == EXIT_INVALID
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == EXIT_INVALID
    # checkpoint of the wrong kind
    assert main(["infer", "--image", str(workspace["image"]), "--mask", str(r / "mask.png"),
                 "--parsing", str(r / "gen.npz"), "--generator", str(r / "gen.npz"),
                 "--out", str(tmp_path / "o.png")]) == EXIT_INVALID


def test_module_entry_point():
    import subprocess
    import sys

    ok = subprocess.run([sys.executable, "-m", "portrait_completion", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "infer" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "portrait_completion", "infer"], capture_output=True, text=True)
    assert bad.returncode == EXIT_USAGE
