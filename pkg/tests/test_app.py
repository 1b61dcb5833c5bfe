from __future__ import annotations

import json

import pytest

import app


SMALL_TOML = """\
[model]
feature_dim = 16

[source]
n_classes = 4
input_dim = 8
samples_per_class = 40

[pretrain]
epochs = 200

[agop]
t_eig = 2

[stream]
batches_per_domain = 2
batch_size = 16
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(SMALL_TOML, encoding="utf-8")
    return path


def test_run_writes_metrics_and_summary(tmp_path, config_path, capsys):
    out = tmp_path / "metrics.csv"
    assert app.main(["--quiet", "run", "--config", str(config_path), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "batch,domain,err,align,kappa_r,loss_st,loss_cont,confident,eig"
    assert len(lines) == 17
    assert capsys.readouterr().out.startswith("mean_err=")


def test_run_with_same_seed_is_reproducible(tmp_path, config_path):
    outputs = [tmp_path / "a.csv", tmp_path / "b.csv"]
    for out in outputs:
        assert app.main(["--quiet", "run", "--config", str(config_path), "--seed", "7", "--out", str(out)]) == 0
    assert outputs[0].read_bytes() == outputs[1].read_bytes()


def test_missing_config_exits_1_without_output(tmp_path, capsys):
    out = tmp_path / "metrics.csv"
    assert app.main(["run", "--config", str(tmp_path / "nope.toml"), "--out", str(out)]) == 1
    assert not out.exists()
    assert "does not exist" in capsys.readouterr().err


def test_bad_config_value_exits_1(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[agop]\nalpha = 2.0\n", encoding="utf-8")
    assert app.main(["--quiet", "baseline", "--config", str(path), "--out", str(tmp_path / "b.csv")]) == 1


def test_usage_error_exits_1():
    with pytest.raises(SystemExit) as info:
        app.main(["frobnicate"])
    assert info.value.code == 1


def test_baseline_and_align(tmp_path, config_path):
    assert app.main(["--quiet", "baseline", "--config", str(config_path), "--out", str(tmp_path / "b.csv")]) == 0
    align = tmp_path / "align.csv"
    assert app.main(["--quiet", "align", "--config", str(config_path), "--out", str(align)]) == 0
    rows = align.read_text().splitlines()
    assert rows[0] == "batch,align,kappa_r"
    assert len(rows) == 1 + 8


def test_spectrum_from_snapshot(tmp_path):
    snapshot = tmp_path / "g.json"
    snapshot.write_text(
        json.dumps({"g": {"shape": [4, 4], "data": [4, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]}}),
        encoding="utf-8",
    )
    out = tmp_path / "spectrum.csv"
    assert app.main(["--quiet", "spectrum", "--snapshot", str(snapshot), "--out", str(out)]) == 0
    kappas = [float(line.split(",")[2]) for line in out.read_text().splitlines()[1:]]
    assert kappas == pytest.approx([0.8, 1.0, 1.0, 1.0])


def test_spectrum_rejects_empty_snapshot(tmp_path):
    snapshot = tmp_path / "g.json"
    snapshot.write_text(json.dumps({"g": {"shape": [0, 0], "data": []}}), encoding="utf-8")
    out = tmp_path / "spectrum.csv"
    assert app.main(["--quiet", "spectrum", "--snapshot", str(snapshot), "--out", str(out)]) == 1
    assert not out.exists()


def test_live_spectrum_concentrates_on_class_count(tmp_path, config_path):
    out = tmp_path / "spectrum.csv"
    assert app.main(["--quiet", "spectrum", "--config", str(config_path), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()[1:]
    assert len(rows) == 16
    assert float(rows[3].split(",")[2]) == pytest.approx(1.0, abs=1e-8)


def test_run_snapshot_feeds_spectrum(tmp_path, config_path):
    snapshot = tmp_path / "state.json"
    args = ["--quiet", "run", "--config", str(config_path), "--out", str(tmp_path / "m.csv"), "--snapshot", str(snapshot)]
    assert app.main(args) == 0
    assert app.main(["--quiet", "spectrum", "--snapshot", str(snapshot), "--out", str(tmp_path / "s.csv")]) == 0


def test_oracle_exit_codes(tmp_path, capsys):
    assert app.main(["--quiet", "oracle", "--trials", "10", "--out", str(tmp_path / "o.csv")]) == 0
    assert "minimality" in capsys.readouterr().out
    assert app.main(["--quiet", "oracle", "--trials", "0"]) == 1
    assert app.main(["--quiet", "oracle", "--trials", "5", "--inject-fault", "minimality"]) == 3
    assert "minimality" in capsys.readouterr().err


def test_gen_config_round_trips(tmp_path, capsys):
    assert app.main(["gen-config"]) == 0
    text = capsys.readouterr().out
    assert "[agop]" in text
    path = tmp_path / "default.toml"
    assert app.main(["gen-config", "--out", str(path)]) == 0
    assert path.read_text(encoding="utf-8") == text


def test_ablation_writes_one_row_per_variant(tmp_path, config_path):
    out = tmp_path / "ablation.csv"
    assert app.main(["--quiet", "ablation", "--config", str(config_path), "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "variant,mean_err,final_align"
    assert [row.split(",")[0] for row in rows[1:]] == ["agop", "static", "none", "agop-no-contrast", "frozen"]


def test_sweep_writes_one_row_per_value(tmp_path, config_path, capsys):
    out = tmp_path / "sweep.csv"
    args = ["--quiet", "sweep", "--config", str(config_path), "--param", "tau", "--values", "0.5,0.9", "--out", str(out)]
    assert app.main(args) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "param,value,mean_err,final_align"
    assert [row.split(",")[:2] for row in rows[1:]] == [["tau", "0.5"], ["tau", "0.9"]]
    assert "tau=0.5" in capsys.readouterr().out


def test_sweep_rejects_bad_values(tmp_path, config_path):
    out = tmp_path / "sweep.csv"
    base = ["--quiet", "sweep", "--config", str(config_path), "--out", str(out)]
    assert app.main(base + ["--param", "rank", "--values", "2.5"]) == 1
    assert app.main(base + ["--param", "tau", "--values", "high"]) == 1
    assert not out.exists()
    with pytest.raises(SystemExit) as info:
        app.main(base + ["--param", "momentum"])
    assert info.value.code == 1


def test_saved_model_is_reused(tmp_path, config_path):
    model = tmp_path / "model.json"
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    assert app.main(["--quiet", "run", "--config", str(config_path), "--out", str(first), "--save-model", str(model)]) == 0
    assert model.exists()
    assert app.main(["--quiet", "run", "--config", str(config_path), "--out", str(second), "--model", str(model)]) == 0
    assert first.read_bytes() == second.read_bytes()
    missing = ["--quiet", "run", "--config", str(config_path), "--model", str(tmp_path / "none.json")]
    assert app.main(missing + ["--out", str(tmp_path / "c.csv")]) == 1
