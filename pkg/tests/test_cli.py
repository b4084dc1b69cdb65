"""Dataset ingestion, checkpoint, and command-line workflow tests."""

import json
import math

import numpy as np
import pytest

from whvi import bnn, cli
from whvi import data as data_mod
from whvi import gp_rff as gp
from whvi import layers as ly


# ---------------------------------------------------------------------------
# dataset ingestion
# ---------------------------------------------------------------------------


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_load_csv_three_row_regression(tmp_path):
    path = _write(tmp_path / "d.csv", "a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
    ds = data_mod.load_csv(path, "regression")
    assert ds.n == 3
    assert ds.d_in == 2
    assert ds.task == "regression"
    assert ds.train_idx.size == 2 and ds.test_idx.size == 1
    assert np.all(np.isfinite(ds.X))
    assert ds.y.dtype == np.float64


def test_load_csv_classification_infers_classes(tmp_path):
    rows = ["f1,f2,label"] + [f"{i},{i * 2},{i % 3}" for i in range(12)]
    path = _write(tmp_path / "c.csv", "\n".join(rows) + "\n")
    ds = data_mod.load_csv(path, "classification")
    assert ds.n_classes == 3
    assert ds.y.dtype == np.int64
    assert set(np.unique(ds.y)) == {0, 1, 2}
    assert ds.label_values == (0, 1, 2)


def test_constant_column_std_clamped_to_one(tmp_path):
    rows = ["c,x,y"] + [f"7,{i},{i}" for i in range(10)]
    path = _write(tmp_path / "k.csv", "\n".join(rows) + "\n")
    ds = data_mod.load_csv(path, "regression")
    assert float(ds.feature_stds[0]) == 1.0
    assert np.all(np.isfinite(ds.X))
    # constant column standardizes to exactly zero everywhere
    assert np.max(np.abs(ds.X[:, 0])) == 0.0


def test_standardization_uses_training_split_only(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.normal(3.0, 2.0, size=(40, 2))
    y = raw @ np.array([1.0, -1.0])
    rows = ["x1,x2,y"] + [f"{float(a)!r},{float(b)!r},{float(t)!r}" for (a, b), t in zip(raw, y)]
    path = _write(tmp_path / "s.csv", "\n".join(rows) + "\n")
    ds = data_mod.load_csv(path, "regression", split_seed=3)
    means = raw[ds.train_idx].mean(axis=0)
    stds = raw[ds.train_idx].std(axis=0)
    assert np.allclose(ds.feature_means, means, atol=1e-12)
    assert np.allclose(ds.feature_stds, stds, atol=1e-12)
    assert np.allclose(ds.X, (raw - means) / stds, atol=1e-12)
    # training rows are centred; the full data generally is not
    assert np.max(np.abs(ds.X[ds.train_idx].mean(axis=0))) <= 1e-12
    # targets stay untouched
    assert np.array_equal(ds.y, y)


def test_split_sizes_determinism_and_partition(tmp_path):
    rows = ["x,y"] + [f"{i},{i}" for i in range(100)]
    path = _write(tmp_path / "p.csv", "\n".join(rows) + "\n")
    a = data_mod.load_csv(path, "regression", split_seed=5)
    b = data_mod.load_csv(path, "regression", split_seed=5)
    c = data_mod.load_csv(path, "regression", split_seed=6)
    assert a.test_idx.size == 10 and a.train_idx.size == 90
    assert np.array_equal(a.train_idx, b.train_idx)
    assert np.array_equal(a.test_idx, b.test_idx)
    assert not np.array_equal(a.test_idx, c.test_idx)
    merged = np.sort(np.concatenate([a.train_idx, a.test_idx]))
    assert np.array_equal(merged, np.arange(100))


def test_ragged_row_error_has_line_number(tmp_path):
    path = _write(tmp_path / "r.csv", "a,b,y\n1,2,3\n1,2\n4,5,6\n")
    with pytest.raises(ValueError, match="line 3"):
        data_mod.load_csv(path, "regression")


def test_non_numeric_cell_error_has_line_number(tmp_path):
    path = _write(tmp_path / "n.csv", "a,b,y\n1,2,3\n1,oops,3\n")
    with pytest.raises(ValueError, match="line 3.*oops"):
        data_mod.load_csv(path, "regression")


def test_empty_file_error_is_line_one(tmp_path):
    path = _write(tmp_path / "e.csv", "")
    with pytest.raises(ValueError, match="line 1"):
        data_mod.load_csv(path, "regression")
    header_only = _write(tmp_path / "h.csv", "a,b,y\n")
    with pytest.raises(ValueError, match="line 2"):
        data_mod.load_csv(header_only, "regression")


def test_non_finite_cell_rejected(tmp_path):
    path = _write(tmp_path / "f.csv", "a,y\n1,2\nnan,3\n")
    with pytest.raises(ValueError, match="line 3"):
        data_mod.load_csv(path, "regression")


def test_fractional_label_rejected(tmp_path):
    path = _write(tmp_path / "l.csv", "a,label\n1,0\n2,1\n3,1.5\n")
    with pytest.raises(ValueError, match="line 4"):
        data_mod.load_csv(path, "classification")


def test_unknown_task_rejected(tmp_path):
    path = _write(tmp_path / "t.csv", "a,y\n1,2\n3,4\n")
    with pytest.raises(ValueError, match="task"):
        data_mod.load_csv(path, "ranking")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "layer0.g_mu": rng.standard_normal(4),
        "layer0.chol": rng.standard_normal((3, 3)),
        "noise_logvar": np.array(math.log(0.01)),
    }
    fixed = {"rff.omega": rng.standard_normal((2, 5))}
    cfg = {"task": "regression", "split_seed": 0, "network": {"layers": []}}
    first = tmp_path / " captures.json"
    cli.save_checkpoint(first, "bnn", cfg, seed=7, step=42, params=params, fixed=fixed)
    model_type, cfg2, seed, step, params2, fixed2 = cli.load_checkpoint(first)
    assert (model_type, seed, step) == ("bnn", 7, 42)
    assert cfg2 == cfg
    for name in params:
        assert np.array_equal(params2[name], params[name])
        assert params2[name].shape == params[name].shape
    assert np.array_equal(fixed2["rff.omega"], fixed["rff.omega"])
    second = tmp_path / "resaved.json"
    cli.save_checkpoint(second, model_type, cfg2, seed, step, params2, fixed2)
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_version_guard(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format_version": 99, "params": {}}), encoding="utf-8")
    with pytest.raises(cli.CliError, match="format_version"):
        cli.load_checkpoint(path)
    not_ckpt = tmp_path / "plain.json"
    not_ckpt.write_text("{}", encoding="utf-8")
    with pytest.raises(cli.CliError, match="not a checkpoint"):
        cli.load_checkpoint(not_ckpt)


# ---------------------------------------------------------------------------
# command suite
# ---------------------------------------------------------------------------


def _regression_csv(tmp_path, n=30, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, 1.0, size=(n, 2))
    y = X @ np.array([2.0, -1.0]) + 0.05 * rng.standard_normal(n)
    rows = ["x1,x2,y"] + [f"{float(a)!r},{float(b)!r},{float(t)!r}" for (a, b), t in zip(X, y)]
    return _write(tmp_path / "reg.csv", "\n".join(rows) + "\n")


def _classification_csv(tmp_path, n=24, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, 1.0, size=(n, 2))
    labels = (X[:, 0] > 0).astype(int) + (X[:, 1] > 0).astype(int)
    rows = ["x1,x2,label"] + [f"{float(a)!r},{float(b)!r},{t}" for (a, b), t in zip(X, labels)]
    return _write(tmp_path / "cls.csv", "\n".join(rows) + "\n")


def _tiny_config(tmp_path, **overrides):
    cfg = {
        "task": "regression",
        "split_seed": 1,
        "network": {
            "layers": [
                {"kind": "whvi", "in_dim": 2, "out_dim": 4, "activation": "relu"},
                {"kind": "meanfield", "in_dim": 4, "out_dim": 1},
            ],
        },
        "schedule": {
            "total_steps": 5,
            "fixed_noise_steps": 2,
            "batch_size": 8,
            "eval_interval": 2,
        },
    }
    cfg.update(overrides)
    return _write(tmp_path / "config.json", json.dumps(cfg))


def test_train_steps_zero_checkpoint_equals_init(tmp_path):
    data = _regression_csv(tmp_path)
    config = _tiny_config(tmp_path)
    out = tmp_path / "run0"
    rc = cli.main(["train", "--config", config, "--data", data, "--out", str(out),
                   "--seed", "11", "--steps", "0"])
    assert rc == 0
    _, cfg, seed, step, params, _ = cli.load_checkpoint(out / "checkpoint.json")
    assert step == 0 and seed == 11
    assert cfg["schedule"]["total_steps"] == 0
    assert cfg["schedule"]["fixed_noise_steps"] == 0  # clamped with the override
    net_config, _ = cli._build_network(cfg)
    expected = bnn.init_network_params(net_config, np.random.default_rng(11))
    assert set(params) == set(expected)
    for name in expected:
        assert np.array_equal(params[name], expected[name]), name


def test_train_writes_checkpoint_log_and_summary(tmp_path, capsys):
    data = _regression_csv(tmp_path)
    config = _tiny_config(tmp_path)
    out = tmp_path / "run"
    rc = cli.main(["train", "--config", config, "--data", data, "--out", str(out),
                   "--seed", "3"])
    assert rc == 0
    summary = json.loads(capsys.readouterr().out.strip())
    assert summary["steps"] == 5
    assert math.isfinite(summary["final_neg_elbo"])
    records = [json.loads(line)
               for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [0, 2, 4]
    for record in records:
        assert set(record) == {"step", "lr", "neg_elbo", "nll", "kl", "wall_ms"}
    model_type, cfg, _, step, _, fixed = cli.load_checkpoint(out / "checkpoint.json")
    assert model_type == "bnn" and step == 5 and fixed == {}
    # defaults are materialized into the echoed config
    assert cfg["network"]["lam"] == 1.0
    assert cfg["network"]["layers"][0]["structure"]["kind"] == "S1HGHS2"


def test_train_reproducible_checkpoint_bytes(tmp_path):
    data = _regression_csv(tmp_path)
    config = _tiny_config(tmp_path)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        rc = cli.main(["train", "--config", config, "--data", data,
                       "--out", str(out), "--seed", "5"])
        assert rc == 0
    assert (out1 / "checkpoint.json").read_bytes() == (out2 / "checkpoint.json").read_bytes()


def test_eval_metric_json_deterministic(tmp_path, capsys):
    data = _regression_csv(tmp_path)
    config = _tiny_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", config, "--data", data,
                     "--out", str(out), "--seed", "3"]) == 0
    capsys.readouterr()
    ckpt = str(out / "checkpoint.json")
    assert cli.main(["eval", "--checkpoint", ckpt, "--data", data]) == 0
    first = capsys.readouterr().out
    assert cli.main(["eval", "--checkpoint", ckpt, "--data", data]) == 0
    second = capsys.readouterr().out
    assert first == second
    record = json.loads(first)
    assert set(record) == {"rmse", "mnll"}
    assert math.isfinite(record["rmse"]) and math.isfinite(record["mnll"])


def test_eval_mc_test_override_and_out_file(tmp_path, capsys):
    data = _regression_csv(tmp_path)
    config = _tiny_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", config, "--data", data,
                     "--out", str(out), "--seed", "3"]) == 0
    capsys.readouterr()
    metrics_path = tmp_path / "metrics.json"
    rc = cli.main(["eval", "--checkpoint", str(out / "checkpoint.json"),
                   "--data", data, "--mc-test", "4", "--out", str(metrics_path)])
    assert rc == 0
    printed = capsys.readouterr().out.strip()
    assert json.loads(metrics_path.read_text()) == json.loads(printed)


def test_classification_train_eval_metrics(tmp_path, capsys):
    data = _classification_csv(tmp_path)
    cfg = {
        "task": "classification",
        "network": {
            "layers": [
                {"kind": "whvi", "in_dim": 2, "out_dim": 4, "activation": "relu"},
                {"kind": "meanfield", "in_dim": 4, "out_dim": 3},
            ],
        },
        "schedule": {"total_steps": 4, "fixed_noise_steps": 0,
                     "batch_size": 8, "eval_interval": 2},
    }
    config = _write(tmp_path / "ccfg.json", json.dumps(cfg))
    out = tmp_path / "crun"
    assert cli.main(["train", "--config", config, "--data", data,
                     "--out", str(out), "--seed", "2"]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.json"),
                     "--data", data, "--mc-test", "8"]) == 0
    record = json.loads(capsys.readouterr().out)
    assert set(record) == {"mnll", "error_rate", "ece"}
    assert 0.0 <= record["error_rate"] <= 1.0
    assert 0.0 <= record["ece"] <= 1.0


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    data = _regression_csv(tmp_path)
    config = _tiny_config(tmp_path)
    raw = json.loads((tmp_path / "config.json").read_text())
    raw["network"]["learning_rate"] = 0.1
    bad = _write(tmp_path / "bad.json", json.dumps(raw))
    rc = cli.main(["train", "--config", bad, "--data", data, "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "learning_rate" in capsys.readouterr().err


def test_malformed_config_and_missing_files(tmp_path, capsys):
    data = _regression_csv(tmp_path)
    broken = _write(tmp_path / "broken.json", "{not json")
    assert cli.main(["train", "--config", broken, "--data", data,
                     "--out", str(tmp_path / "x")]) == 2
    assert "invalid JSON" in capsys.readouterr().err
    config = _tiny_config(tmp_path)
    assert cli.main(["train", "--config", str(tmp_path / "ghost.json"), "--data", data,
                     "--out", str(tmp_path / "x")]) == 2
    assert "no such file" in capsys.readouterr().err
    assert cli.main(["train", "--config", config, "--data", str(tmp_path / "ghost.csv"),
                     "--out", str(tmp_path / "x")]) == 2
    assert "no such file" in capsys.readouterr().err
    # dataset parse failures surface as usage errors too
    ragged = _write(tmp_path / "ragged.csv", "a,b,y\n1,2,3\n4,5\n")
    assert cli.main(["train", "--config", config, "--data", ragged,
                     "--out", str(tmp_path / "x")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_class_count_mismatch_is_usage_error(tmp_path, capsys):
    data = _classification_csv(tmp_path)  # labels {0,1,2}
    cfg = {
        "task": "classification",
        "network": {
            "layers": [
                {"kind": "meanfield", "in_dim": 2, "out_dim": 2},
            ],
        },
        "schedule": {"total_steps": 2, "fixed_noise_steps": 0, "batch_size": 4,
                     "eval_interval": 1},
    }
    config = _write(tmp_path / "mismatch.json", json.dumps(cfg))
    rc = cli.main(["train", "--config", config, "--data", data, "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "classes" in capsys.readouterr().err


def test_bench_fwht_csv_schema(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    rc = cli.main(["bench-fwht", "--out", str(out), "--dims", "1024,2048",
                   "--reps", "2", "--batch", "64"])
    assert rc == 0
    capsys.readouterr()
    lines = out.read_text().splitlines()
    assert lines[0] == "D,batch,mean_ms,std_ms"
    assert len(lines) == 3
    for line, D in zip(lines[1:], (1024, 2048)):
        cells = line.split(",")
        assert int(cells[0]) == D and int(cells[1]) == 64
        assert float(cells[2]) > 0.0 and float(cells[3]) >= 0.0


def test_bench_fwht_rejects_bad_dims(tmp_path, capsys):
    assert cli.main(["bench-fwht", "--out", str(tmp_path / "b.csv"),
                     "--dims", "1000"]) == 2
    assert "power of two" in capsys.readouterr().err


def test_approx_study_csv(tmp_path, capsys):
    out = tmp_path / "study.csv"
    rc = cli.main(["approx-study", "--out", str(out), "--dims", "4", "--trials", "2",
                   "--steps", "200", "--seed", "0"])
    assert rc == 0
    capsys.readouterr()
    lines = out.read_text().splitlines()
    assert lines[0] == "D,trial,best_rmse"
    assert len(lines) == 3
    for line, trial in zip(lines[1:], (0, 1)):
        cells = line.split(",")
        assert cells[0] == "4" and int(cells[1]) == trial
        assert 0.0 < float(cells[2]) < 0.6


def _gp_config(tmp_path, kind, **gp_overrides):
    section = {"n_rf": 8, "kind": kind, "total_steps": 6, "eval_interval": 2,
               "lr": 0.01}
    section.update(gp_overrides)
    cfg = {"task": "regression", "split_seed": 2, "gp": section}
    return _write(tmp_path / f"gp_{kind}.json", json.dumps(cfg))


@pytest.mark.parametrize("kind", ["meanfield", "whvi"])
def test_gp_train_and_eval(tmp_path, capsys, kind):
    data = _regression_csv(tmp_path)
    config = _gp_config(tmp_path, kind)
    out = tmp_path / f"gp_{kind}"
    rc = cli.main(["gp-train", "--config", config, "--data", data,
                   "--out", str(out), "--seed", "4"])
    assert rc == 0
    capsys.readouterr()
    model_type, cfg, _, step, params, fixed = cli.load_checkpoint(out / "checkpoint.json")
    assert model_type == "gp_rff" and step == 6
    assert set(fixed) == {"rff.omega", "rff.lengthscales"}
    assert fixed["rff.omega"].shape == (2, 4)
    if kind == "whvi":
        assert {"mu", "s1", "s2"} <= set(params)  # structured posterior parameters
    else:
        assert params["w_mu"].shape == (8,)
    assert (out / "train_log.jsonl").read_text().strip()
    assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.json"),
                     "--data", data, "--mc-test", "8"]) == 0
    record = json.loads(capsys.readouterr().out)
    assert set(record) == {"rmse", "mnll"}
    assert math.isfinite(record["rmse"])


def test_gp_checkpoint_roundtrip_byte_identical(tmp_path, capsys):
    data = _regression_csv(tmp_path)
    config = _gp_config(tmp_path, "meanfield")
    out = tmp_path / "gp_rt"
    assert cli.main(["gp-train", "--config", config, "--data", data,
                     "--out", str(out), "--seed", "4"]) == 0
    capsys.readouterr()
    path = out / "checkpoint.json"
    model_type, cfg, seed, step, params, fixed = cli.load_checkpoint(path)
    resaved = tmp_path / "resaved.json"
    cli.save_checkpoint(resaved, model_type, cfg, seed, step, params, fixed)
    assert path.read_bytes() == resaved.read_bytes()


def test_gp_steps_override(tmp_path, capsys):
    data = _regression_csv(tmp_path)
    config = _gp_config(tmp_path, "meanfield")
    out = tmp_path / "gp_steps"
    assert cli.main(["gp-train", "--config", config, "--data", data,
                     "--out", str(out), "--seed", "4", "--steps", "3"]) == 0
    capsys.readouterr()
    _, cfg, _, step, _, _ = cli.load_checkpoint(out / "checkpoint.json")
    assert step == 3 and cfg["gp"]["total_steps"] == 3


def test_gp_unknown_key_is_usage_error(tmp_path, capsys):
    data = _regression_csv(tmp_path)
    cfg = {"gp": {"n_rf": 8, "kernel": "matern"}}
    config = _write(tmp_path / "gbad.json", json.dumps(cfg))
    assert cli.main(["gp-train", "--config", config, "--data", data,
                     "--out", str(tmp_path / "x")]) == 2
    assert "kernel" in capsys.readouterr().err


def test_plot_renders_log_and_csvs(tmp_path, capsys):
    data = _regression_csv(tmp_path)
    config = _tiny_config(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["train", "--config", config, "--data", data,
                     "--out", str(out), "--seed", "3"]) == 0
    bench = tmp_path / "bench.csv"
    assert cli.main(["bench-fwht", "--out", str(bench), "--dims", "1024",
                     "--reps", "2", "--batch", "16"]) == 0
    study = tmp_path / "study.csv"
    assert cli.main(["approx-study", "--out", str(study), "--dims", "4",
                     "--trials", "2", "--steps", "40"]) == 0
    capsys.readouterr()
    for source in (out / "train_log.jsonl", bench, study):
        image = tmp_path / (source.stem + ".png")
        assert cli.main(["plot", "--data", str(source), "--out", str(image)]) == 0
        assert image.stat().st_size > 1000
    capsys.readouterr()
    weird = _write(tmp_path / "weird.csv", "a,b\n1,2\n")
    assert cli.main(["plot", "--data", weird, "--out", str(tmp_path / "w.png")]) == 2
    assert "unrecognized" in capsys.readouterr().err
