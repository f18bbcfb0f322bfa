import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from conftest import source_paths, traffic_row, weather_row, write_toy
from twgcn.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from twgcn.graph import read_adjacency_csv

TRAIN_TOML = """\
MODEL = "GRU"
SEQ_LENGTH = 4
NUM_CLUSTERS = 2
HIDDEN = 8
NUM_EPOCHS = {epochs}
LEARNING_RATE = {lr}
"""


def ingest_args(src, out):
    s, t, w, p = source_paths(src)
    return ["ingest", "--sessions", s, "--traffic", t, "--weather", w, "--poi", p, "--out", str(out)]


@pytest.fixture(scope="module")
def bundle(small_synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    assert main(ingest_args(small_synth_dir, out)) == EXIT_OK
    return out


def write_config(path, epochs=3, lr=1e-3, extra=""):
    path.write_text(TRAIN_TOML.format(epochs=epochs, lr=lr) + extra)
    return str(path)


def toy_sources(d, n_sessions=3, drop=None):
    hours = [f"2024-05-01T0{h}:00:00Z" for h in range(3)]
    sessions = [{"station_id": "S1", "station_latitude": 36.0, "station_longitude": -86.0,
                 "start_date_time": hours[i % 3], "energy_kwh": 1.0 + i} for i in range(n_sessions)]
    traffic = [traffic_row("T1", h, 36.001, -86.0) for h in hours]
    weather = [weather_row("W1", h, 36.0, -86.01) for h in hours]
    paths = write_toy(d, sessions, traffic, weather)
    if drop:
        pd.read_csv(paths[1]).drop(columns=[drop]).to_csv(paths[1], index=False)
    return d


# -- synth ----------------------------------------------------------------


def test_synth_is_idempotent(tmp_path):
    cfg = tmp_path / "s.toml"
    cfg.write_text("[synth]\nn_stations = 4\nn_hours = 48\nn_tmcs = 6\n")
    for name in ("a", "b"):
        assert main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path / name)]) == EXIT_OK
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert ma == json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["config"]["n_stations"] == 4
    for name in ("sessions", "traffic", "weather", "poi"):
        assert (tmp_path / "a" / f"{name}.csv").read_bytes() == (tmp_path / "b" / f"{name}.csv").read_bytes()


def test_synth_rejects_unknown_key(tmp_path):
    cfg = tmp_path / "s.toml"
    cfg.write_text("n_stations = 4\nwibble = 1\n")
    assert main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == EXIT_USAGE


# -- ingest ---------------------------------------------------------------


def test_ingest_three_row_toy(tmp_path):
    src = toy_sources(tmp_path / "src")
    assert main(ingest_args(src, tmp_path / "b")) == EXIT_OK
    panels = pd.read_csv(tmp_path / "b" / "panels.csv")
    assert panels["station_id"].unique().tolist() == ["S1"] and len(panels) == 3
    report = json.loads((tmp_path / "b" / "ingest_report.json").read_text())
    assert report["panels"]["stations_kept"] == 1


def test_ingest_missing_column_names_it(tmp_path, caplog):
    src = toy_sources(tmp_path / "src", drop="tti")
    assert main(ingest_args(src, tmp_path / "b")) == EXIT_DATA
    assert "tti" in caplog.text


def test_ingest_missing_file(tmp_path):
    src = toy_sources(tmp_path / "src")
    (src / "weather.csv").unlink()
    assert main(ingest_args(src, tmp_path / "b")) == EXIT_DATA


def test_ingest_is_idempotent(small_synth_dir, bundle, tmp_path):
    assert main(ingest_args(small_synth_dir, tmp_path)) == EXIT_OK
    for name in ("panels.csv", "stations.csv", "ingest_report.json"):
        assert (tmp_path / name).read_bytes() == (bundle / name).read_bytes()


def test_unwritable_output(tmp_path):
    src = toy_sources(tmp_path / "src")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(ingest_args(src, blocker / "sub")) == EXIT_DATA


# -- graph ----------------------------------------------------------------


def test_graph_writes_both_matrices(bundle, tmp_path):
    assert main(["graph", "--panels", str(bundle), "--out", str(tmp_path)]) == EXIT_OK
    geo, ids = read_adjacency_csv(tmp_path / "geo_adjacency.csv", "geo")
    dem, _ = read_adjacency_csv(tmp_path / "dem_adjacency.csv", "dem")
    geo, dem = geo.values, dem.values
    assert len(ids) == 10 and np.array_equal(geo, geo.T) and np.all(np.diag(dem) == 1.0)


def test_graph_single_station(tmp_path):
    src = toy_sources(tmp_path / "src")
    assert main(ingest_args(src, tmp_path / "b")) == EXIT_OK
    assert main(["graph", "--panels", str(tmp_path / "b"), "--out", str(tmp_path / "g")]) == EXIT_OK
    for name in ("geo", "dem"):
        a, _ = read_adjacency_csv(tmp_path / "g" / f"{name}_adjacency.csv", name)
        assert a.values.tolist() == [[1.0]]


def test_graph_bad_bundle(tmp_path):
    assert main(["graph", "--panels", str(tmp_path / "nothing"), "--out", str(tmp_path)]) == EXIT_DATA


# -- train / predict ------------------------------------------------------


def test_train_and_predict(bundle, tmp_path):
    cfg = write_config(tmp_path / "c.toml", epochs=125)
    assert main(["train", "--config", cfg, "--panels", str(bundle), "--out-dir", str(tmp_path / "runs")]) == EXIT_OK
    (report,) = (tmp_path / "runs").glob("run_*.json")
    assert len(json.loads(report.read_text())["loss_history"]) == 125
    (model,) = (tmp_path / "runs").glob("model_*.npz")
    out = tmp_path / "pred.csv"
    assert main(["predict", "--model", str(model), "--panels", str(bundle), "--horizon", "2", "--out", str(out)]) == 0
    pred = pd.read_csv(out)
    assert list(pred.columns) == ["station_id", "timestamp", "kwh_pred"] and len(pred) == 20
    assert (pred["kwh_pred"] >= 0).all()


def test_train_zero_lr_flat_history(bundle, tmp_path):
    cfg = write_config(tmp_path / "c.toml", epochs=4, lr=0.0, extra="WARMUP_EPOCHS = 0\n")
    assert main(["train", "--config", cfg, "--panels", str(bundle), "--out-dir", str(tmp_path)]) == EXIT_OK
    (report,) = tmp_path.glob("run_*.json")
    hist = json.loads(report.read_text())["loss_history"]
    assert len(set(hist)) == 1


def test_train_paths_from_config(bundle, tmp_path):
    cfg = write_config(tmp_path / "c.toml", epochs=1, extra=f'[paths]\npanels = "{bundle}"\nout_dir = "{tmp_path}"\n')
    assert main(["train", "--config", cfg]) == EXIT_OK
    assert len(list(tmp_path.glob("run_*.json"))) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_failure(bundle, tmp_path):
    cfg = write_config(tmp_path / "c.toml", lr=1e300)
    assert main(["train", "--config", cfg, "--panels", str(bundle), "--out-dir", str(tmp_path)]) == EXIT_NUMERIC


@pytest.mark.parametrize("body", ['ALPHA = 2.0\n', 'MODEL = "MLP"\n', 'NOT_A_KEY = 1\n', 'ALPHA = \n'])
def test_train_bad_config(bundle, tmp_path, body):
    (tmp_path / "c.toml").write_text(body)
    assert main(["train", "--config", str(tmp_path / "c.toml"), "--panels", str(bundle)]) == EXIT_USAGE


def test_train_missing_config_file(bundle, tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.toml"), "--panels", str(bundle)]) == EXIT_USAGE


def test_train_needs_panels(tmp_path):
    assert main(["train", "--config", write_config(tmp_path / "c.toml")]) == EXIT_USAGE


def test_predict_missing_checkpoint(bundle, tmp_path):
    assert main(["predict", "--model", str(tmp_path / "m.npz"), "--panels", str(bundle)]) == EXIT_DATA


# -- grid -----------------------------------------------------------------


def test_grid_writes_results_and_top5(bundle, tmp_path):
    cfg = write_config(tmp_path / "g.toml", epochs=1,
                       extra='[grid]\nMODEL = ["RNN", "GRU"]\nLAG_HOURS = [1]\nNUM_CLUSTERS = [2]\n'
                             'ALPHA = [0.5]\nSEQ_LENGTH = [4, 500]\n')
    out = tmp_path / "res.csv"
    assert main(["grid", "--config", cfg, "--panels", str(bundle), "--out", str(out)]) == EXIT_OK
    rows = pd.read_csv(out)
    assert len(rows) == 4 and rows["MAE"].isna().sum() == 2
    top = pd.read_csv(tmp_path / "res_top5.csv")
    assert len(top) == 2 and not top["MAE"].isna().any()


def test_grid_bad_domain(bundle, tmp_path):
    cfg = write_config(tmp_path / "g.toml", extra="[grid]\nDEPTH = [1]\n")
    assert main(["grid", "--config", cfg, "--panels", str(bundle)]) == EXIT_USAGE


# -- usage ----------------------------------------------------------------


def test_usage_errors(capsys):
    for argv in ([], ["bogus"], ["ingest", "--sessions", "x"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == EXIT_USAGE


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "twgcn", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "predict" in res.stdout
