import json
from pathlib import Path

import pandas as pd
import pytest

from av_geometry import MicPairConfig
from config import Knobs
from errors import InvalidInputError
from main import EXIT_DEGENERATE, EXIT_INPUT, EXIT_OK, build_parser, load_run_config, main

CONFIG_DATA = Path(__file__).resolve().parent.parent / "config_data"


def _scenario(tmp_path, faces=False, name="small"):
    scenario = {
        "name": name,
        "duration_s": 1.2,
        "visual_points_per_object": 1 if faces else 80,
        "visual_noise_sigma": 0.01 if faces else 0.05,
        "visual_outlier_rate": 0.0 if faces else 10.0,
        "itd_points_per_speaking_object": 10,
        "seed": 3,
        "objects": [
            {
                "name": "left",
                "waypoints": [[0.0, [-0.8, 0.0, 2.0]]],
                "visible": [[0.0, 10.0]],
                "speaking": [[0.0, 0.8]],
            },
            {
                "name": "right",
                "waypoints": [[0.0, [0.8, 0.0, 2.2]]],
                "visible": [[0.0, 10.0]],
                "speaking": [[0.8, 1.2]],
            },
        ],
    }
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(scenario))
    return path


def test_generate_is_reproducible(tmp_path):
    scenario = _scenario(tmp_path)
    for out in ("a", "b"):
        assert main(["generate", "--scenario", str(scenario), "--out", str(tmp_path / out)]) == EXIT_OK

    for name in ("observations.jsonl", "events.jsonl", "scenario.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert manifest["seed"] == 3
    assert len(manifest["config_sha256"]) == 64
    assert "numpy" in manifest["versions"]


def test_seed_override_changes_the_data(tmp_path):
    scenario = _scenario(tmp_path)
    main(["generate", "--scenario", str(scenario), "--out", str(tmp_path / "a")])
    main(["generate", "--scenario", str(scenario), "--out", str(tmp_path / "b"), "--seed", "4"])
    a = (tmp_path / "a" / "observations.jsonl").read_bytes()
    b = (tmp_path / "b" / "observations.jsonl").read_bytes()
    assert a != b


def test_missing_scenario_file(tmp_path):
    assert main(["generate", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_INPUT


def test_malformed_scenario_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{ not json")
    assert main(["generate", "--scenario", str(path), "--out", str(tmp_path / "out")]) == EXIT_INPUT


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--scenario", str(_scenario(tmp_path)), "--out", str(out), "--n-max", "3"])
    assert code == EXIT_OK

    summary = pd.read_csv(out / "summary.csv")
    for column in ("loc_fp", "loc_fn", "loc_tp", "ale_m", "audio_fp", "audio_fn", "audio_tp"):
        assert column in summary.columns
    assert summary.loc[0, "seq"] == "small"
    assert summary.loc[0, "loc_fn"] + summary.loc[0, "loc_tp"] == 6

    results = (out / "results.jsonl").read_text().splitlines()
    assert len(results) == 3
    histogram = json.loads((out / "itd_histograms.jsonl").read_text().splitlines()[0])
    assert len(histogram["counts"]) == 50
    assert len(histogram["bin_edges"]) == 51
    assert len(pd.read_csv(out / "timings.csv")) == 3
    assert set(json.loads((out / "manifest.json").read_text())["files"]) >= {"results.jsonl", "summary.json"}

    printed = [line for line in capsys.readouterr().out.splitlines() if line.startswith("interval ")]
    assert len(printed) == 3
    assert all(line.endswith(" ms") for line in printed)


def test_run_replays_events(tmp_path):
    scenario = _scenario(tmp_path)
    data_dir = tmp_path / "data"
    assert main(["generate", "--scenario", str(scenario), "--out", str(data_dir)]) == EXIT_OK

    direct, replayed = tmp_path / "direct", tmp_path / "replayed"
    common = ["--n-max", "3"]
    assert main(["run", "--data", str(data_dir / "observations.jsonl"), "--out", str(direct)] + common) == EXIT_OK
    code = main(
        [
            "run",
            "--data", str(data_dir / "observations.jsonl"),
            "--events", str(data_dir / "events.jsonl"),
            "--out", str(replayed),
        ]
        + common
    )
    assert code == EXIT_OK
    assert len((replayed / "results.jsonl").read_text().splitlines()) == 3
    assert json.loads((replayed / "summary.json").read_text()) == json.loads((direct / "summary.json").read_text())


def test_run_face_guided(tmp_path):
    out = tmp_path / "faces"
    scenario = _scenario(tmp_path, faces=True, name="faces")
    assert main(["run", "--scenario", str(scenario), "--pipeline", "face_guided", "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())["faces"]
    assert summary["loc_tp"] == 6
    assert summary["loc_fp"] == 0


def test_run_missing_mic_config(tmp_path):
    code = main(["run", "--scenario", "StaCon", "--mic-config", str(tmp_path / "mic.json"), "--out", str(tmp_path)])
    assert code == EXIT_INPUT


def test_calibrate(tmp_path):
    out = tmp_path / "mic_calibrated.json"
    code = main(
        [
            "calibrate",
            "--pairs", str(CONFIG_DATA / "calibration_pairs.csv"),
            "--mic-config", str(CONFIG_DATA / "mic_config.json"),
            "--out", str(out),
        ]
    )
    assert code == EXIT_OK
    fitted = MicPairConfig.load(out)
    assert fitted.c1 > 0
    assert fitted.mic_left == MicPairConfig.load(CONFIG_DATA / "mic_config.json").mic_left


def test_calibrate_degenerate_pairs(tmp_path):
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("x,y,z,itd\n0.0,0.0,1.0,1e-5\n0.0,0.3,2.0,2e-5\n0.0,-0.2,3.0,0.0\n")
    assert main(["calibrate", "--pairs", str(pairs), "--out", str(tmp_path / "out.json")]) == EXIT_DEGENERATE


def test_calibrate_missing_column(tmp_path):
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("x,y,itd\n0.1,0.0,1e-5\n")
    assert main(["calibrate", "--pairs", str(pairs), "--out", str(tmp_path / "out.json")]) == EXIT_INPUT


def test_calibrate_missing_mic_config(tmp_path):
    code = main(
        [
            "calibrate",
            "--pairs", str(CONFIG_DATA / "calibration_pairs.csv"),
            "--mic-config", str(tmp_path / "missing.json"),
            "--out", str(tmp_path / "out.json"),
        ]
    )
    assert code == EXIT_INPUT


def test_config_file_overrides_flags(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"pipeline": "face_guided", "n_max": 4, "knobs": {"tau_loc": 0.2}}))
    args = build_parser().parse_args(["run", "--config", str(config), "--n-max", "7", "--tol", "1e-4"])
    run = load_run_config(args)
    assert run.pipeline == "face_guided"
    assert run.knobs.n_max == 4
    assert run.knobs.tau_loc == 0.2
    assert run.knobs.tol == 1e-4
    assert run.knobs.max_iter == Knobs().max_iter


def test_config_file_with_unknown_key(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"colour": "blue"}))
    args = build_parser().parse_args(["run", "--config", str(config)])
    with pytest.raises(InvalidInputError):
        load_run_config(args)


def test_unknown_pipeline_in_config(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"pipeline": "lip_reading"}))
    assert main(["run", "--config", str(config), "--out", str(tmp_path)]) == EXIT_INPUT


def test_config_hash_tracks_knobs():
    args = build_parser().parse_args(["run"])
    base = load_run_config(args)
    other = load_run_config(build_parser().parse_args(["run", "--n-max", "3"]))
    assert base.config_hash() == load_run_config(args).config_hash()
    assert base.config_hash() != other.config_hash()
