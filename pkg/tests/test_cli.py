import csv

import numpy as np
import pytest

from drcp.cli import main
from drcp.io import load_tensor

SMALL = "grid_height = 32\ngrid_width = 64\ntrain_frames = 2\neval_frames = 2\nn_iter = 20\n"


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return str(p)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_generate_scene(tmp_path, cfg_file, capsys):
    out = tmp_path / "scene"
    assert main(["generate-scene", "--agents", "2", "--seed", "4", "--out", str(out), "--config", cfg_file]) == 0
    lidar = load_tensor(out / "agent1_lidar.drcp")
    assert lidar.shape == (32, 32, 64) and lidar.dtype == np.float32
    assert load_tensor(out / "agent0_cam3.drcp").shape == (16, 8, 32)
    rows = read_csv(out / "agents.csv")
    assert rows[0] == ["agent", "x", "y", "yaw", "n_visible"] and len(rows) == 3
    assert read_csv(out / "ground_truth.csv")[0][:3] == ["frame_id", "x", "y"]
    assert "agents=2" in capsys.readouterr().out


def test_run_with_params_and_dumps(tmp_path, cfg_file, capsys):
    det, bundle, dump = tmp_path / "d.csv", tmp_path / "p.drcb", tmp_path / "dump"
    assert main(["run", "--config", cfg_file, "--out", str(det), "--save-params", str(bundle),
                 "--dump-intermediates", str(dump)]) == 0
    first = capsys.readouterr().out
    assert "mode=ppxx+mdma" in first and "AP@0.3=" in first and "stage_ms" in first
    assert read_csv(det)[0][0] == "frame_id"
    assert any(p.suffix == ".drcp" for p in dump.iterdir())

    det2 = tmp_path / "d2.csv"
    assert main(["run", "--config", cfg_file, "--params", str(bundle), "--out", str(det2)]) == 0
    assert det2.read_bytes() == det.read_bytes()
    assert main(["run", "--config", cfg_file, "--params", str(bundle), "--no-mdma"]) == 0
    assert "mode=ppxx_only" in capsys.readouterr().out


def test_sweep_writes_results_and_timing(tmp_path, cfg_file):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--param", "compression", "--grid", "1,32", "--out", str(out), "--config", cfg_file]) == 0
    rows = read_csv(out)
    assert rows[0] == ["param", "value", "AP30", "AP50", "AP70", "n_frames"]
    assert [r[1] for r in rows[1:]] == ["1", "32"]
    assert all(len(r[2].split(".")[1]) == 6 for r in rows[1:])
    timing = read_csv(tmp_path / "s.timing.csv")
    assert timing[0][:3] == ["param", "value", "ms_per_frame"]


def test_grid_dump(tmp_path, capsys):
    assert main(["grid", "dump", "--camera", "0"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "column,radial,theta,radius,x_cell,y_cell"
    assert len(lines) == 1 + 32 * 64
    out = tmp_path / "g.drcp"
    assert main(["grid", "dump", "--camera", "1", "--out", str(out)]) == 0
    assert load_tensor(out).shape == (2, 64, 32)


@pytest.mark.parametrize("argv", [["grid", "dump", "--camera", "9"],
                                  ["sweep", "--param", "pose", "--grid", "", "--out", "x.csv"],
                                  ["run", "--config", "/nonexistent/cfg"],
                                  ["generate-scene", "--agents", "7", "--seed", "0", "--out", "o"]])
def test_errors_return_code_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert "drcp: error:" in capsys.readouterr().err


def test_bad_config_value(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("compression_ratio = 5\n")
    assert main(["grid", "dump", "--camera", "0", "--config", str(p)]) == 2
