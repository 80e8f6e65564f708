import csv
import json
import math

import numpy as np
import pytest

from spikesfp import cli, io
from spikesfp.unet import NetworkConfig, SpikingUNet

SIM = """[dataset]
scenes = sphere, composite, plane, ramp
height = 16
width = 16
seed = 3
"""
TRAIN = """[network]
depth = 1
base_channels = 4
mode = single
[train]
epochs = 2
"""


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "sim.cfg").write_text(SIM)
    (root / "train.cfg").write_text(TRAIN)
    assert cli.main(["simulate", "--config", str(root / "sim.cfg"), "--out", str(root / "ds")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset):
    out = dataset / "run"
    assert cli.main(["train", str(dataset / "ds"), "--config", str(dataset / "train.cfg"),
                     "--out", str(out)]) == 0
    return out


def test_simulate_file_contract(dataset):
    files = sorted(p.name for p in (dataset / "ds").iterdir())
    assert len(files) == 4 * 3 + 1 and "manifest.json" in files
    m = json.loads((dataset / "ds" / "manifest.json").read_text())
    assert m["command"] == "simulate" and [s["kind"] for s in m["scenes"]] == ["sphere", "composite", "plane", "ramp"]
    assert {"config", "seed", "inputs", "outputs", "version", "timestamp"} <= set(m)


def test_simulate_is_deterministic(dataset):
    again = dataset / "ds2"
    assert cli.main(["simulate", "--config", str(dataset / "sim.cfg"), "--out", str(again)]) == 0
    for p in (dataset / "ds").iterdir():
        if p.suffix != ".json":
            assert p.read_bytes() == (again / p.name).read_bytes(), p.name
    a = json.loads((dataset / "ds" / "manifest.json").read_text())
    b = json.loads((again / "manifest.json").read_text())
    a.pop("timestamp"), b.pop("timestamp")
    assert a == b


def test_seed_flag_overrides_file(dataset):
    out = dataset / "ds_seed"
    assert cli.main(["simulate", "--config", str(dataset / "sim.cfg"), "--out", str(out), "--seed", "9"]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 9
    assert (out / "scene_001.pnrm").read_bytes() != (dataset / "ds" / "scene_001.pnrm").read_bytes()


def test_sphere_normals_match_geometry(dataset):
    n = io.read_normals(dataset / "ds" / "scene_000.pnrm")
    h, w = n.shape[1:]
    radius = 0.45 * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.hypot(xx - (w - 1) / 2, yy - (h - 1) / 2) / radius
    on = d <= math.sin(math.radians(80))
    expected = np.arcsin(d[on]).mean()
    written = np.arccos(np.clip(n[2][on], -1, 1)).mean()
    assert abs(written - expected) <= 1e-3
    assert np.all(n[:, ~on] == 0)


def test_train_outputs(trained):
    assert {"model.pwts", "model.cfg", "history.csv", "manifest.json"} <= {p.name for p in trained.iterdir()}
    rows = list(csv.reader((trained / "history.csv").open()))
    assert rows[0] == ["epoch", "loss", "MAE", "AE11.25", "AE22.5", "AE30"] and len(rows) == 3


def test_train_is_deterministic(dataset, trained):
    out = dataset / "run_again"
    cli.main(["train", str(dataset / "ds"), "--config", str(dataset / "train.cfg"), "--out", str(out)])
    assert (out / "model.pwts").read_bytes() == (trained / "model.pwts").read_bytes()
    assert (out / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()


def test_zero_epochs_saves_initialization(dataset):
    out = dataset / "run0"
    assert cli.main(["train", str(dataset / "ds"), "--config", str(dataset / "train.cfg"),
                     "--out", str(out), "--epochs", "0", "--seed", "4"]) == 0
    cfg = NetworkConfig.from_text((out / "model.cfg").read_text())
    init = SpikingUNet(cfg, seed=4).state_dict()
    saved = io.read_weights(out / "model.pwts")
    assert set(saved) == set(init) and all(np.array_equal(saved[k], init[k]) for k in init)


def test_flags_override_config(dataset):
    out = dataset / "run_flags"
    assert cli.main(["train", str(dataset / "ds"), "--config", str(dataset / "train.cfg"), "--out", str(out),
                     "--epochs", "0", "--mode", "multi", "--upsample", "bilinear", "--neuron", "plif"]) == 0
    cfg = NetworkConfig.from_text((out / "model.cfg").read_text())
    assert (cfg.mode, cfg.upsample, cfg.neuron.kind, cfg.base_channels) == ("multi", "bilinear", "plif", 4)


def test_interrupted_training_keeps_last_checkpoint(dataset, monkeypatch):
    out = dataset / "run_interrupted"
    real_train = cli.train
    snapshots = []

    def interrupted(*args, on_epoch_end=None, **kw):
        def hook(epoch, network, row):
            on_epoch_end(epoch, network, row)
            snapshots.append(network.state_dict())
            if epoch == 1:
                raise KeyboardInterrupt
        return real_train(*args, on_epoch_end=hook, **kw)

    monkeypatch.setattr(cli, "train", interrupted)
    with pytest.raises(KeyboardInterrupt):
        cli.main(["train", str(dataset / "ds"), "--config", str(dataset / "train.cfg"), "--out", str(out)])
    saved = io.read_weights(out / "model.pwts")
    assert all(np.array_equal(saved[k], v) for k, v in snapshots[-1].items())
    assert len(list(csv.reader((out / "history.csv").open()))) == 2


def test_eval_aggregate_is_mean_of_rows(dataset, trained):
    out = dataset / "ev"
    assert cli.main(["eval", str(trained / "model.pwts"), str(dataset / "ds"), "--out", str(out)]) == 0
    rows = list(csv.reader((out / "eval.csv").open()))
    scenes = np.array([[float(v) for v in r[1:5]] for r in rows[1:-1]])
    assert rows[-1][0] == "mean" and len(scenes) == 4
    assert np.allclose([float(v) for v in rows[-1][1:5]], scenes.mean(axis=0), rtol=1e-12)


def test_eval_ground_truth_against_itself(dataset, trained):
    out = dataset / "ev_oracle"
    assert cli.main(["eval", str(trained / "model.pwts"), str(dataset / "ds"), "--out", str(out), "--oracle"]) == 0
    rows = list(csv.reader((out / "eval.csv").open()))
    assert float(rows[-1][1]) == pytest.approx(0, abs=1e-9) and float(rows[-1][2]) == 1


def test_checkpoint_config_mismatch_is_data_error(dataset, trained, tmp_path):
    (tmp_path / "model.pwts").write_bytes((trained / "model.pwts").read_bytes())
    (tmp_path / "model.cfg").write_text((trained / "model.cfg").read_text().replace("base_channels=4", "base_channels=8"))
    assert cli.main(["eval", str(tmp_path / "model.pwts"), str(dataset / "ds"), "--out", str(tmp_path / "o")]) == 2


def test_profile_single_mode(dataset, trained):
    out = dataset / "prof"
    assert cli.main(["profile", str(trained / "model.pwts"), str(dataset / "ds"), "--out", str(out)]) == 0
    rows = list(csv.reader((out / "energy.csv").open()))
    layers = [r for r in rows[1:] if r and r[0].startswith("layer")]
    assert len(layers) == 7 and {r[3] for r in layers} == {"1"}
    assert "Average" in (out / "rates.txt").read_text()


def test_encode_writes_tensors(dataset):
    out = dataset / "enc"
    assert cli.main(["encode", str(dataset / "ds"), "--out", str(out), "--bins", "4"]) == 0
    assert io.read_cvgri(out / "scene_000.pcvg").values.shape == (4, 16, 16)


def test_exit_codes(dataset, tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--bogus"])
    assert e.value.code == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("[dataset]\nscenes = cube\n")
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["train", str(tmp_path / "nothing"), "--out", str(tmp_path / "y")]) == 2
    assert cli.main(["simulate", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "z")]) == 1
