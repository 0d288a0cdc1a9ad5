import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from qpinqi.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, main
from qpinqi.core import read_tensor, write_tensor
from qpinqi.synth import Dataset


def digest(path, skip=("config.json",)):
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file() and p.name not in skip):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


SMALL = ["--n", "2", "--size", "16", "--coils", "2", "--seed", "7"]


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["simulate", "--out", str(out), *SMALL]) == 0
    return out


def test_simulate_deterministic(sim_dir, tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path / "again"), *SMALL]) == 0
    assert digest(sim_dir) == digest(tmp_path / "again")
    echoed = capsys.readouterr().out
    assert '"seed": 7' in echoed
    cfg = json.loads((tmp_path / "again" / "config.json").read_text())
    assert cfg["size"] == 16 and cfg["taus"] == [0.5, 1.0, 1.5, 2.0, 8.0]


def test_simulate_accel8_line_count(tmp_path):
    out = tmp_path / "d"
    assert main(["simulate", "--out", str(out), "--n", "1", "--size", "192", "--coils", "1",
                 "--accel", "8", "--taus", "0.5,1,1.5,2,8"]) == 0
    masks = Dataset(out)[0].masks
    assert masks.shape == (5, 192) and np.all(masks.sum(axis=1) == 24)


def test_config_file_and_flag_precedence(tmp_path):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps({"n": 1, "size": 16, "coils": 3, "seed": 2}))
    assert main(["simulate", "--config", str(cfgfile), "--out", str(tmp_path / "d"), "--coils", "2"]) == 0
    rec = Dataset(tmp_path / "d")[0]
    assert rec.coils.shape[0] == 2 and len(Dataset(tmp_path / "d")) == 1


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["simulate"]) == EXIT_CONFIG
    assert main(["simulate", "--out", str(tmp_path / "x"), "--size", "16", "--accel", "8", "--acs", "5"]) == EXIT_CONFIG
    assert main(["train", "--data", "x", "--out", str(tmp_path / "t"), "--ablation", "zz"]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--bogus-flag", "1"])
    assert exc.value.code == 2


def test_missing_data_is_io_error(tmp_path):
    assert main(["reconstruct", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_train_reconstruct_evaluate(sim_dir, tmp_path):
    ck = tmp_path / "ck"
    assert main(["train", "--data", str(sim_dir), "--out", str(ck), "--steps", "2", "--batch", "2",
                 "--n-iter", "2"]) == 0
    assert (ck / "last" / "manifest.json").is_file() and (ck / "train_log.csv").is_file()
    rec = tmp_path / "rec"
    assert main(["reconstruct", "--data", str(sim_dir), "--ckpt", str(ck / "last"), "--out", str(rec),
                 "--baseline", "zerofill", "--trace"]) == 0
    sdir = rec / "sample_0000"
    for name in ("p", "baseline_zerofill", "trace_y", "trace_p", "trace_lambdas"):
        assert (sdir / f"{name}.qten").is_file(), name
    assert read_tensor(sdir / "trace_p.qten").shape == (2, 3, 16, 16)
    out = tmp_path / "metrics.csv"
    assert main(["evaluate", "--pred", str(rec), "--ref", str(sim_dir), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["id"] for r in rows] == ["sample_0000", "sample_0001", "mean"]
    assert all(0 < float(r["nrmse_t1"]) < 1 for r in rows)


def test_evaluate_reference_against_itself(sim_dir, tmp_path):
    out = tmp_path / "m.csv"
    assert main(["evaluate", "--pred", str(sim_dir), "--ref", str(sim_dir), "--out", str(out)]) == 0
    for row in csv.DictReader(open(out)):
        assert float(row["nrmse_t1"]) == 0 and float(row["ssim_t1"]) == pytest.approx(1, abs=1e-12)


def test_tube_roi_table(tmp_path):
    data = tmp_path / "tubes"
    assert main(["simulate", "--out", str(data), "--n", "1", "--size", "32", "--coils", "2",
                 "--mode", "tubes"]) == 0
    out = tmp_path / "m.csv"
    assert main(["evaluate", "--pred", str(data), "--ref", str(data), "--out", str(out)]) == 0
    roi = list(csv.DictReader(open(tmp_path / "m_roi.csv")))
    assert len(roi) == 9 and all(abs(float(r["difference"])) < 1e-14 for r in roi)


def test_gradcheck_exit_codes(tmp_path, capsys, monkeypatch):
    rep = tmp_path / "g.json"
    assert main(["gradcheck", "--target", "nlreg", "--eps", "1e-5", "--out", str(rep)]) == 0
    table = capsys.readouterr().out
    assert "nlreg: max relative error" in table and "PASS" in table
    assert json.loads(rep.read_text())[0]["max_rel_error"] <= 1e-4
    # a step far too large for the differences breaks the check
    assert main(["gradcheck", "--target", "sigmodel", "--eps", "0.5"]) == EXIT_NUMERIC


def test_jobs_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("QPINQI_JOBS", "2")
    assert main(["simulate", "--out", str(tmp_path / "d"), *SMALL]) == 0
    assert json.loads((tmp_path / "d" / "config.json").read_text())["jobs"] == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "qpinqi", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
