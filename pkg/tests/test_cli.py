"""Batch CLI: config files, exit codes, artifacts, determinism."""

import json

import numpy as np
import pytest

from gacan.cli import (
    CONFIG_KEYS,
    block_checks,
    config_hash,
    main,
    model_checks,
    parse_config_text,
    primitive_checks,
    typed_values,
)
from gacan.data import SpeedSeries, synth_distances, write_distances, write_speeds
from gacan.errors import ConfigError


def write_config(path, **overrides):
    base = {
        "speeds": "", "distances": "", "p": "30", "q": "8", "h": "2",
        "mask": "mh", "k_heads": "2", "cheb_order": "2", "n_blocks": "1",
        "channels": "4", "max_steps": "20", "eval_every": "10",
        "batch_size": "4", "patience": "5",
    }
    base.update({k: str(v) for k, v in overrides.items()})
    path.write_text("".join(f"{k} = {v}\n" for k, v in base.items()))
    return str(path)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthdata")
    code = main(["synth", "--out", str(out), "--nodes", "4", "--days", "8",
                 "--p", "30", "--seed", "5"])
    assert code == 0
    return out


@pytest.fixture(scope="session")
def trained(tmp_path_factory, dataset):
    root = tmp_path_factory.mktemp("trained")
    cfg = write_config(root / "run.cfg", speeds=dataset / "speeds.csv",
                       distances=dataset / "distances.csv")
    out = root / "run"
    code = main(["train", "--config", cfg, "--out", str(out), "--seed", "3",
                 "--no-figures"])
    assert code == 0
    return cfg, out


# -- config files ---------------------------------------------------------------


def test_parse_config_skips_comments_and_blanks():
    cfg = parse_config_text("# top\n\np = 5\n  h = 12  \n")
    assert cfg == {"p": "5", "h": "12"}


def test_parse_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknown key 'pp'"):
        parse_config_text("pp = 5")


def test_parse_config_rejects_duplicate_key():
    with pytest.raises(ConfigError, match="duplicate key 'p'"):
        parse_config_text("p = 5\np = 6")


def test_parse_config_rejects_bare_line():
    with pytest.raises(ConfigError, match="line.cfg:2"):
        parse_config_text("p = 5\nnonsense", source="line.cfg")


def test_typed_values_names_the_bad_key():
    cfg = {key: default for key, (_p, default, _d) in CONFIG_KEYS.items()}
    cfg["k_heads"] = "many"
    with pytest.raises(ConfigError, match="config key 'k_heads'"):
        typed_values(cfg)


def test_typed_values_validates_mask_tags():
    cfg = {key: default for key, (_p, default, _d) in CONFIG_KEYS.items()}
    cfg["mask"] = "mx"
    with pytest.raises(ConfigError, match="config key 'mask'"):
        typed_values(cfg)


def test_config_hash_is_order_insensitive_and_value_sensitive():
    a = {"p": "5", "h": "12"}
    b = {"h": "12", "p": "5"}
    c = {"p": "5", "h": "13"}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 12


def test_defaults_parse_cleanly():
    cfg = {key: default for key, (_p, default, _d) in CONFIG_KEYS.items()}
    typed = typed_values(cfg)
    assert typed["q"] is None
    assert typed["channels"] == (16, 16)
    assert typed["mask"] == frozenset("mhdw")
    assert typed["standardize"] is False


# -- synth ---------------------------------------------------------------


def test_synth_writes_dataset_and_truth(dataset):
    for name in ("speeds.csv", "distances.csv", "truth.json",
                 "effective-config.txt"):
        assert (dataset / name).exists()
    truth = json.loads((dataset / "truth.json").read_text())
    assert truth["nodes"] == 4 and truth["days"] == 8
    assert truth["n_slices"] == 8 * 48
    assert len(truth["config_hash"]) == 12


def test_synth_is_deterministic(tmp_path, dataset):
    out = tmp_path / "again"
    assert main(["synth", "--out", str(out), "--nodes", "4", "--days", "8",
                 "--p", "30", "--seed", "5"]) == 0
    for name in ("speeds.csv", "distances.csv"):
        assert (out / name).read_bytes() == (dataset / name).read_bytes()


def test_synth_rejects_zero_days(tmp_path, capsys):
    code = main(["synth", "--out", str(tmp_path / "x"), "--days", "0"])
    assert code == 2
    assert "days" in capsys.readouterr().err


# -- preprocess ---------------------------------------------------------------


def test_preprocess_reports_gap_counts(tmp_path):
    rng = np.random.default_rng(0)
    values = 50.0 + rng.normal(size=(40, 3))
    missing = np.zeros((40, 3), dtype=bool)
    missing[4, 1] = missing[5, 1] = missing[20, 2] = True
    series = SpeedSeries(timestamps=np.arange(40, dtype=np.int64),
                         values=np.where(missing, np.nan, values),
                         missing=missing)
    src = tmp_path / "gappy.csv"
    write_speeds(src, series)
    cfg = tmp_path / "pre.cfg"
    cfg.write_text(f"speeds = {src}\n")
    out = tmp_path / "pre"
    assert main(["preprocess", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "preprocess.json").read_text())
    assert report["missing_cells"] == 3
    assert report["missing_per_node"] == [0, 2, 1]
    cleaned = (out / "cleaned.csv").read_text()
    assert "nan" not in cleaned


# -- train ---------------------------------------------------------------


def test_train_writes_checkpoint_and_history(trained):
    _cfg, out = trained
    history = (out / "history.csv").read_text().splitlines()
    assert history[0].startswith("# config ")
    assert history[1] == "step,train_loss,val_rmse"
    assert len(history) > 2
    checkpoint = (out / "checkpoint.txt").read_text()
    assert "norm/mean" in checkpoint
    assert "config_hash=" in checkpoint


def test_train_rerun_is_byte_identical(tmp_path, trained):
    cfg, out = trained
    again = tmp_path / "again"
    assert main(["train", "--config", cfg, "--out", str(again), "--seed", "3",
                 "--no-figures"]) == 0
    for name in ("checkpoint.txt", "history.csv"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_train_renders_history_figure(tmp_path, trained):
    cfg, _out = trained
    out = tmp_path / "fig"
    assert main(["train", "--config", cfg, "--out", str(out),
                 "--seed", "3"]) == 0
    assert (out / "history.png").stat().st_size > 0


def test_train_requires_speeds_key(tmp_path, capsys):
    cfg = write_config(tmp_path / "bare.cfg")
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "speeds" in capsys.readouterr().err


def test_train_missing_speeds_file_is_data_error(tmp_path, dataset):
    cfg = write_config(tmp_path / "run.cfg", speeds=tmp_path / "absent.csv",
                       distances=dataset / "distances.csv")
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 3


def test_train_missing_config_file(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "none.cfg"),
                 "--out", str(tmp_path)])
    assert code == 2
    assert "config file not found" in capsys.readouterr().err


def test_train_divergence_exits_4(tmp_path, capsys):
    rng = np.random.default_rng(3)
    series = SpeedSeries(timestamps=np.arange(60, dtype=np.int64),
                         values=rng.normal(size=(60, 3)) * 1e200,
                         missing=np.zeros((60, 3), dtype=bool))
    write_speeds(tmp_path / "huge.csv", series)
    write_distances(tmp_path / "dist.csv",
                    synth_distances(3, np.random.default_rng(1)))
    cfg = write_config(tmp_path / "div.cfg", speeds=tmp_path / "huge.csv",
                       distances=tmp_path / "dist.csv", q="4", h="1",
                       mask="m", channels="3", loss="mse",
                       ratios="0.6,0.2,0.2", max_steps="40")
    code = main(["train", "--config", cfg, "--out", str(tmp_path / "d"),
                 "--no-figures"])
    assert code == 4
    assert "non-finite" in capsys.readouterr().err


# -- eval ---------------------------------------------------------------


def test_eval_metrics_and_predictions(tmp_path, trained):
    cfg, run = trained
    out = tmp_path / "ev"
    code = main(["eval", "--config", cfg, "--checkpoint",
                 str(run / "checkpoint.txt"), "--out", str(out),
                 "--no-figures"])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["horizon_minutes"] == [30, 60]
    assert all(m <= r for m, r in zip(metrics["mae"], metrics["rmse"]))
    lines = (out / "predictions.csv").read_text().splitlines()
    assert lines[1] == "t0,horizon,node,pred,truth"
    n_samples = metrics["meta"]["samples"]
    assert len(lines) - 2 == n_samples * 2 * 4


def test_eval_rejects_conflicting_structure(tmp_path, trained, capsys):
    cfg_path, run = trained
    text = open(cfg_path).read().replace("h = 2", "h = 6")
    bad = tmp_path / "bad.cfg"
    bad.write_text(text)
    code = main(["eval", "--config", str(bad), "--checkpoint",
                 str(run / "checkpoint.txt"), "--out", str(tmp_path),
                 "--no-figures"])
    assert code == 2
    assert "conflicts with the checkpoint" in capsys.readouterr().err


def test_eval_rejects_node_count_mismatch(tmp_path, trained):
    cfg_path, run = trained
    other = tmp_path / "other"
    assert main(["synth", "--out", str(other), "--nodes", "6", "--days", "8",
                 "--p", "30", "--seed", "5"]) == 0
    cfg = write_config(tmp_path / "m.cfg", speeds=other / "speeds.csv",
                       distances=other / "distances.csv")
    code = main(["eval", "--config", cfg, "--checkpoint",
                 str(run / "checkpoint.txt"), "--out", str(tmp_path),
                 "--no-figures"])
    assert code == 2


def test_eval_renders_figures(tmp_path, trained):
    cfg, run = trained
    out = tmp_path / "evfig"
    assert main(["eval", "--config", cfg, "--checkpoint",
                 str(run / "checkpoint.txt"), "--out", str(out)]) == 0
    assert (out / "metrics.png").stat().st_size > 0
    assert (out / "predictions.png").stat().st_size > 0


# -- predict ---------------------------------------------------------------


def test_predict_writes_horizon_rows(tmp_path, trained):
    cfg, run = trained
    out = tmp_path / "pred"
    code = main(["predict", "--config", cfg, "--checkpoint",
                 str(run / "checkpoint.txt"), "--t0", "300",
                 "--out", str(out)])
    assert code == 0
    lines = (out / "prediction.csv").read_text().splitlines()
    assert lines[1] == "horizon,node_0,node_1,node_2,node_3"
    assert len(lines) == 2 + 2  # comment, header, one row per step
    assert lines[2].startswith("1,") and lines[3].startswith("2,")
    values = [float(v) for v in lines[2].split(",")[1:]]
    assert all(np.isfinite(values))


def test_predict_rejects_anchor_without_history(tmp_path, trained, capsys):
    cfg, run = trained
    code = main(["predict", "--config", cfg, "--checkpoint",
                 str(run / "checkpoint.txt"), "--t0", "3",
                 "--out", str(tmp_path)])
    assert code == 3
    assert "anchor 3" in capsys.readouterr().err


# -- gradcheck ---------------------------------------------------------------


def test_gradcheck_primitives_battery_passes():
    rows = primitive_checks()
    assert len(rows) == 20
    assert all(ok for _name, _err, ok in rows)


def test_gradcheck_block_and_model_pass():
    assert all(ok for _n, _e, ok in block_checks())
    assert all(ok for _n, _e, ok in model_checks())


def test_gradcheck_command_exit_codes(capsys):
    assert main(["gradcheck", "block"]) == 0
    assert main(["gradcheck", "block", "--self-test-corrupt"]) == 1
    assert "FAIL" in capsys.readouterr().out
    assert main(["gradcheck", "primitives", "--self-test-corrupt"]) == 2


# -- ablate ---------------------------------------------------------------


def test_ablate_writes_mode_grid(tmp_path, dataset):
    cfg = write_config(tmp_path / "abl.cfg", speeds=dataset / "speeds.csv",
                       distances=dataset / "distances.csv",
                       modes="a,b", buckets="1,2")
    out = tmp_path / "abl"
    code = main(["ablate", "--config", cfg, "--out", str(out), "--seed", "2",
                 "--no-figures"])
    assert code == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[1] == "mode,horizon_minutes,mae,rmse"
    assert len(lines) - 2 == 2 * 2  # modes x buckets
    modes = {line.split(",")[0] for line in lines[2:]}
    assert modes == {"a", "b"}


def test_every_output_carries_the_config_hash(tmp_path, trained):
    cfg, run = trained
    first = (run / "history.csv").read_text().splitlines()[0]
    assert first.startswith("# config ")
    echo = (run / "effective-config.txt").read_text().splitlines()[0]
    assert echo == first
