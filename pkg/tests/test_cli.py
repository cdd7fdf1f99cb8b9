import csv
import json

import numpy as np
import pytest

from glyco.cli import (
    EXIT_CKPT,
    EXIT_DATA,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    main,
    parse_args,
    read_config_file,
    sha256_file,
)

TINY = ["--hidden", "4", "--dense", "8", "--layers", "1", "--epochs", "2", "--batch-size", "64"]


def digests(d):
    return {p.name: sha256_file(p) for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--days", "2", "--seed", "7", "--out", str(d)]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def ckpt(synth_dir, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    argv = ["train", "--data", str(synth_dir / "dataset.csv"), "--seed", "1", "--out", str(path)] + TINY
    assert main(argv) == EXIT_OK
    return path


# -- synth -------------------------------------------------------------------


def test_synth_ten_days_has_2880_latent_rows(tmp_path):
    assert main(["synth", "--days", "10", "--seed", "7", "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "latent.csv").read_text().splitlines()
    assert rows[0] == "slot_ts,glucose" and len(rows) - 1 == 2880
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["days"] == 10 and manifest["command"] == "synth"


def test_synth_repeat_gives_identical_digests(tmp_path):
    argv = ["synth", "--days", "2", "--seed", "3", "--out", str(tmp_path)]
    main(argv)
    first = digests(tmp_path)
    main(argv)
    assert digests(tmp_path) == first and len(first) == 4


@pytest.mark.parametrize("days", ["0", "-2", "x"])
def test_synth_bad_days_is_usage_error(tmp_path, days):
    assert main(["synth", "--days", days, "--out", str(tmp_path)]) == EXIT_USAGE


def test_synth_bad_rate_is_usage_error(tmp_path):
    assert main(["synth", "--spike-prob", "2", "--out", str(tmp_path)]) == EXIT_USAGE


def test_synth_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--days", "1", "--out", str(blocker / "sub")]) == EXIT_IO


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("GLYCO_SEED", "11")
    main(["synth", "--days", "1", "--out", str(tmp_path / "a")])
    main(["synth", "--days", "1", "--seed", "11", "--out", str(tmp_path / "b")])
    assert sha256_file(tmp_path / "a" / "dataset.csv") == sha256_file(tmp_path / "b" / "dataset.csv")
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 11
    monkeypatch.setenv("GLYCO_SEED", "eleven")
    assert main(["synth", "--days", "1", "--out", str(tmp_path / "c")]) == EXIT_USAGE


def test_no_command_and_unknown_flag():
    assert main([]) == EXIT_USAGE
    assert main(["synth", "--bogus"]) == EXIT_USAGE


# -- smooth ------------------------------------------------------------------


def write_cgm(path, values, start=1000):
    lines = ["ts,kind,value"] + [f"{start + 5 * k},cgm,{v}" for k, v in enumerate(values) if v is not None]
    path.write_text("\n".join(lines) + "\n")


def test_smooth_constant_series(tmp_path):
    src = tmp_path / "p.csv"
    write_cgm(src, [123.0] * 50)
    out = tmp_path / "s.csv"
    assert main(["smooth", "--in", str(src), "--q-scale", "0.05", "--r", "9", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 50
    assert max(abs(float(r["mean"]) - 123.0) for r in rows) < 1e-6
    manifest = json.loads((tmp_path / "s.csv.manifest.json").read_text())
    assert manifest["config"]["q_scale"] == 0.05 and manifest["config"]["r"] == 9.0
    assert manifest["inputs"] == {str(src): sha256_file(src)}


def test_smooth_row_count_includes_gaps(tmp_path):
    src = tmp_path / "p.csv"
    write_cgm(src, [100.0, None, None, 103.0, 104.0])
    out = tmp_path / "s.csv"
    assert main(["smooth", "--in", str(src), "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 5 and [r["measured"] for r in rows] == ["1", "0", "0", "1", "1"]


def test_smooth_auto_q(synth_dir, tmp_path):
    out = tmp_path / "s.csv"
    assert main(["smooth", "--in", str(synth_dir / "dataset.csv"), "--q-scale", "auto", "--out", str(out)]) == 0
    cfg = json.loads((tmp_path / "s.csv.manifest.json").read_text())["config"]
    assert cfg["q_scale_flag"] == "auto" and cfg["q_scale"] > 0


def test_smooth_parse_error_exit_2(tmp_path, capsys):
    src = tmp_path / "bad.csv"
    src.write_text("ts,kind,value\n1000,cgm,abc\n")
    assert main(["smooth", "--in", str(src), "--out", str(tmp_path / "o.csv")]) == EXIT_IO
    err = capsys.readouterr().err
    assert "cgm record #1" in err and "abc" in err


def test_smooth_missing_file_exit_2(tmp_path):
    assert main(["smooth", "--in", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o.csv")]) == EXIT_IO


@pytest.mark.parametrize("flag", [["--q-scale", "0"], ["--q-scale", "-1"], ["--r", "0"]])
def test_smooth_rejects_bad_noise(tmp_path, flag):
    src = tmp_path / "p.csv"
    write_cgm(src, [100.0] * 5)
    assert main(["smooth", "--in", str(src), "--out", str(tmp_path / "o.csv")] + flag) == EXIT_USAGE


# -- train -------------------------------------------------------------------


@pytest.mark.parametrize("ph,history,slots", [("30", "120", (6, 24)), ("60", "30", (12, 6)), ("30", "240", (6, 48))])
def test_ph_and_history_map_to_slots(ph, history, slots, tmp_path):
    from glyco.cli import _train_config

    args = parse_args(["train", "--data", "d", "--out", "o", "--ph", ph, "--history", history])
    cfg, _ = _train_config(args)
    assert (cfg.ph_slots, cfg.history_slots) == slots


def test_ph_outside_choices_is_usage_error():
    assert main(["train", "--data", "d", "--out", "o", "--ph", "45"]) == EXIT_USAGE


def test_train_is_deterministic(synth_dir, ckpt, tmp_path):
    again = tmp_path / "m.ckpt"
    argv = ["train", "--data", str(synth_dir / "dataset.csv"), "--seed", "1", "--out", str(again)] + TINY
    assert main(argv) == EXIT_OK
    assert sha256_file(again) == sha256_file(ckpt)
    manifest = json.loads((tmp_path / "m.ckpt.manifest.json").read_text())
    assert manifest["config"]["ph_slots"] == 6 and manifest["config"]["hidden"] == 4


def test_train_insufficient_data_exit_3(tmp_path):
    src = tmp_path / "p.csv"
    write_cgm(src, [100.0 + k for k in range(30)])
    assert main(["train", "--data", str(src), "--out", str(tmp_path / "m.ckpt")] + TINY) == EXIT_DATA


def test_train_config_file_and_override(synth_dir, tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("# tiny run\nhidden = 3\n--dense = 8\nlayers = 1\nepochs = 1\nseed = 5\n")
    out = tmp_path / "m.ckpt"
    argv = ["train", "--config", str(conf), "--data", str(synth_dir / "dataset.csv"), "--out", str(out),
            "--hidden", "2"]
    assert main(argv) == EXIT_OK
    cfg = json.loads((tmp_path / "m.ckpt.manifest.json").read_text())["config"]
    assert cfg["hidden"] == 2 and cfg["max_epochs"] == 1 and cfg["seed"] == 5 and cfg["dense"] == [8]


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.conf"
    bad.write_text("novalue\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    unknown = tmp_path / "unknown.conf"
    unknown.write_text("flux = 3\n")
    assert main(["synth", "--config", str(unknown), "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["synth", "--config", str(tmp_path / "missing"), "--out", str(tmp_path)]) == EXIT_USAGE


def test_read_config_file(tmp_path):
    p = tmp_path / "c.conf"
    p.write_text("a-b = 1  # note\n\n--c = x = y\n")
    assert read_config_file(p) == {"a_b": "1", "c": "x = y"}


# -- predict / evaluate ------------------------------------------------------


def test_predict_writes_forecasts(synth_dir, ckpt, tmp_path):
    out = tmp_path / "p.csv"
    assert main(["predict", "--ckpt", str(ckpt), "--data", str(synth_dir / "dataset.csv"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert rows and all(int(r["target_ts"]) - int(r["anchor_ts"]) == 30 for r in rows)
    assert all(float(r["sigma2"]) > 0 for r in rows)


def test_evaluate_twice_identical(synth_dir, ckpt, tmp_path):
    argv = ["evaluate", "--ckpt", str(ckpt), "--data", str(synth_dir / "dataset.csv")]
    assert main(argv + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(argv + ["--out", str(tmp_path / "b")]) == EXIT_OK
    a, b = digests(tmp_path / "a"), digests(tmp_path / "b")
    a.pop("manifest.json"), b.pop("manifest.json")
    assert a == b and set(a) == {"report.txt", "report.csv", "anchors.csv", "plot.csv"}
    n = int(list(csv.DictReader((tmp_path / "a" / "report.csv").open()))[0]["n"])
    assert len((tmp_path / "a" / "plot.csv").read_text().splitlines()) - 1 == n
    assert "fingerstick MAE" in (tmp_path / "a" / "report.txt").read_text()


def test_checkpoint_mismatch_exit_4(synth_dir, ckpt, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(ckpt.read_bytes().replace(b"version = 1\n", b"version = 2\n", 1))
    argv = ["evaluate", "--ckpt", str(bad), "--data", str(synth_dir / "dataset.csv"), "--out", str(tmp_path)]
    assert main(argv) == EXIT_CKPT
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"\x00" * 32)
    argv[2] = str(junk)
    assert main(argv) == EXIT_CKPT


def test_missing_checkpoint_exit_2(synth_dir, tmp_path):
    argv = ["predict", "--ckpt", str(tmp_path / "none"), "--data", str(synth_dir / "dataset.csv"),
            "--out", str(tmp_path / "p.csv")]
    assert main(argv) == EXIT_IO


def test_perfect_predictor_scenario_reports_zero(synth_dir, ckpt, monkeypatch, tmp_path):
    import glyco.cli as cli

    real = cli.predict

    def oracle(ck, block):
        p = real(ck, block)
        target = p.anchors + ck.config.ph_slots
        ok = target < len(block)
        smoothed = cli.prepare(cli.load_dataset(synth_dir / "dataset.csv"), "smoothed",
                               ck.config.q_scale, ck.config.r).smoothed.mean
        p.mu = np.where(ok, smoothed[np.minimum(target, len(block) - 1)], p.mu)
        return p

    monkeypatch.setattr(cli, "predict", oracle)
    argv = ["evaluate", "--ckpt", str(ckpt), "--data", str(synth_dir / "dataset.csv"), "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    row = list(csv.DictReader((tmp_path / "report.csv").open()))[0]
    assert float(row["rmse_smoothed"]) == 0.0
