import json
from pathlib import Path

import numpy as np
import pytest

from fusioncast import autodiff as ad
from fusioncast import cli
from fusioncast.data import load_grid
from fusioncast.metrics import read_categorical
from fusioncast.model import FusionCast, ModelConfig, load_checkpoint
from fusioncast.trainer import predict, window_to_sample

SMALL = """[grid]
n = 16
[data]
frames = 10
n_cells = 3
[model]
t_in = 2
t_out = 3
enc_channels = 2,3
prior_channels = 2,4
hidden = 3
prior_hidden = 3
proj_channels = 3
dec_channels = 2,3
head_channels = 3,2
[train]
epochs = 1
batch_size = 4
[eval]
lead_frames = 1,3
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    assert cli.main(["synth", "--config", str(root / "small.cfg"), "--seed", "5", "--scenes", "10",
                     "--out", str(root / "data")]) == 0
    return root


def run(root, *args):
    return cli.main([a.replace("@", str(root)) for a in args])


def test_help_lists_config_keys(capsys):
    assert cli.main(["--help"]) == 0
    out = capsys.readouterr().out
    assert "train.lr" in out and "ablate.variants" in out and "grid.n" in out


def test_bad_usage_exit_2(workspace, capsys):
    assert cli.main(["frobnicate"]) == 2
    assert run(workspace, "train", "--data", "@/absent", "--out", "@/x") == 2
    assert "does not exist" in capsys.readouterr().err
    assert run(workspace, "train", "--data", "@/data", "--out", "@/x", "--set", "train.bogus=1") == 2


def test_synth_single_scene_and_determinism(tmp_path):
    assert cli.main(["synth", "--seed", "1", "--scenes", "1", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth", "--seed", "1", "--scenes", "1", "--out", str(tmp_path / "b")]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 1
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_manifest_matches_disk(workspace):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert len(manifest["scenes"]) == 10
    for entry in manifest["scenes"]:
        sdir = workspace / "data" / entry["id"]
        assert len(list((sdir / "radar").glob("*.fgrid"))) == entry["frames"]
        assert len(list((sdir / "pwv").glob("*.fgrid"))) == entry["frames"]
        assert (sdir / "stations.csv").is_file()
    assert (workspace / "data" / "config.resolved").is_file()


@pytest.fixture(scope="module")
def trained(workspace):
    assert run(workspace, "prior", "generate", "--config", "@/small.cfg", "--data", "@/data") == 0
    assert run(workspace, "train", "--config", "@/small.cfg", "--data", "@/data", "--out", "@/run") == 0
    return workspace


def test_prior_layout(trained):
    sdir = trained / "data" / "scene000"
    issues = sorted((sdir / "prior").iterdir())
    assert len(issues) == 10 - 2 - 3 + 1
    first = issues[0]
    files = sorted(first.glob("*.fgrid"))
    assert len(files) == 3
    assert int(files[0].stem) == int(first.name) + 600


def test_train_outputs(trained):
    run_dir = trained / "run"
    for name in ("config.resolved", "model.json", "train_log.csv", "checkpoint.fckp"):
        assert (run_dir / name).is_file()
    assert "epochs = 1" in (run_dir / "config.resolved").read_text()


def test_train_deterministic(trained):
    assert run(trained, "train", "--config", "@/small.cfg", "--data", "@/data", "--out", "@/run2") == 0
    for name in ("train_log.csv", "checkpoint.fckp", "model.json"):
        assert (trained / "run" / name).read_bytes() == (trained / "run2" / name).read_bytes()


def test_eval_layout_and_aggregation(trained):
    assert run(trained, "eval", "--config", "@/small.cfg", "--checkpoint", "@/run/checkpoint.fckp",
               "--out", "@/ev") == 0
    header = (trained / "ev" / "categorical.csv").read_text().splitlines()[0]
    assert header == "threshold,variant,csi_t10,csi_t30"
    assert [k[1] for k in read_categorical(trained / "ev" / "categorical.csv")] == [0.1, 1.0, 4.0]
    assert run(trained, "eval", "--config", "@/small.cfg", "--checkpoint", "@/run/checkpoint.fckp",
               "--out", "@/ev_mean", "--csi-agg", "mean") == 0
    assert (trained / "ev" / "continuous.csv").read_text() == (trained / "ev_mean" / "continuous.csv").read_text()


def test_eval_strict_undefined(trained):
    args = ["eval", "--config", "@/small.cfg", "--checkpoint", "@/run/checkpoint.fckp", "--out", "@/ev_strict",
            "--strict", "--set", "eval.thresholds=1000"]
    assert run(trained, *args) == 1
    lenient = [a for a in args if a != "--strict"]
    assert run(trained, *lenient) == 0


def test_eval_corrupt_checkpoint_exit_3(trained, tmp_path):
    bad = tmp_path / "checkpoint.fckp"
    bad.write_bytes(b"nope")
    (tmp_path / "model.json").write_text((trained / "run" / "model.json").read_text())
    assert cli.main(["eval", "--checkpoint", str(bad), "--out", str(tmp_path / "e")]) == 3


def test_predict_matches_library(trained):
    run_dir = trained / "run"
    info = json.loads((run_dir / "model.json").read_text())
    cfg = cli.load_cfg(type("A", (), {"config": str(trained / "small.cfg"), "set": None})())
    windows = [w for _, w in cli.scene_windows(trained / "data", cfg, 2, 3)]
    w = windows[-1]
    assert run(trained, "predict", "--config", "@/small.cfg", "--checkpoint", "@/run/checkpoint.fckp",
               "--window", str(w.issue_epoch), "--out", "@/pred") == 0
    files = sorted((trained / "pred").glob("*.fgrid"), key=lambda p: int(p.stem))
    assert len(files) == 3
    with ad.default_dtype(info["dtype"]):
        model = FusionCast(ModelConfig(**info["model"]))
    load_checkpoint(run_dir / "checkpoint.fckp", model)
    ref = predict(model, [window_to_sample(w)])[0]
    for k, f in enumerate(files):
        grid, epoch, units = load_grid(f)
        assert epoch == w.target.epochs[k] and units == "mm/h"
        assert grid.tobytes() == ref[k].tobytes()
        assert np.all(grid >= 0)
    assert run(trained, "predict", "--config", "@/small.cfg", "--checkpoint", "@/run/checkpoint.fckp",
               "--window", "12345", "--out", "@/pred2") == 2


def test_no_pwv_without_pwv_files(trained, tmp_path):
    import shutil

    data = tmp_path / "data"
    shutil.copytree(trained / "data", data)
    for sdir in data.glob("scene*"):
        shutil.rmtree(sdir / "pwv")
        (sdir / "stations.csv").unlink()
    cfg = str(trained / "small.cfg")
    assert cli.main(["train", "--config", cfg, "--variant", "no_pwv", "--data", str(data),
                     "--out", str(tmp_path / "r")]) == 0
    assert cli.main(["train", "--config", cfg, "--data", str(data), "--out", str(tmp_path / "r2")]) == 2


def test_stations_regridded_when_grids_absent(trained, tmp_path):
    import shutil

    data = tmp_path / "data"
    shutil.copytree(trained / "data", data)
    for sdir in data.glob("scene*"):
        shutil.rmtree(sdir / "pwv")
    cfg = cli.load_cfg(type("A", (), {"config": str(trained / "small.cfg"), "set": None})())
    a = [w.x_pwv.frames for _, w in cli.scene_windows(trained / "data", cfg, 2, 3)]
    b = [w.x_pwv.frames for _, w in cli.scene_windows(data, cfg, 2, 3)]
    np.testing.assert_allclose(np.array(a), np.array(b), rtol=0, atol=1e-9)


def test_ablate_small(workspace):
    cfg = workspace / "small.cfg"
    assert cli.main(["ablate", "--config", str(cfg), "--out", str(workspace / "abl"),
                     "--set", "ablate.seeds=0,1", "--set", "data.train_scenes=1", "--set", "data.val_scenes=1",
                     "--set", "data.test_scenes=1"]) == 0
    rows = (workspace / "abl" / "comparison.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["full", "no_pwv", "no_prior", "no_rpf_concat",
                                                    "rpf_concat_fusion"]
    snap = (workspace / "abl" / "config.resolved").read_text()
    seeds_line = [l for l in snap.splitlines() if l.startswith("# seeds_per_variant")][0]
    seeds = json.loads(seeds_line.split("=", 1)[1])
    assert len(seeds) == 5 and all(v == [0, 1] for v in seeds.values())


def test_verify_clean_and_broken(capsys, monkeypatch):
    assert cli.main(["verify", "--model-coords", "4"]) == 0
    out = capsys.readouterr().out
    assert "gradcheck suite:" in out and "s)" in out
    real = ad.tanh

    def broken(x):
        y = real(x)
        return ad._make(y.data, [x], lambda g: (g,))

    monkeypatch.setattr(ad, "tanh", broken)
    assert cli.main(["verify", "--model-coords", "4"]) == 1
