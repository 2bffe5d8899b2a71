import csv
import json

import pytest

from coupledgp.cli import main, read_config
from coupledgp.experiment import REPORT_COLUMNS


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    o = str(out)
    assert main(["generate", "--n", "30", "--seed", "4", "--out", o]) == 0
    assert main(["fit-hypers", "--out", o, "--restarts", "1"]) == 0
    assert main(["train", "--out", o, "--m", "3", "--iters", "200"]) == 0
    assert main(["evaluate", "--out", o]) == 0
    assert main(["report", "--out", o, "--format", "both"]) == 0
    return out


def test_stage_files(staged):
    for name in ("data.csv", "truth.csv", "hypers.json", "state_coupled_3.json", "state_mf_3.json",
                 "evaluation.json", "report.csv", "report.json"):
        assert (staged / name).exists(), name
    assert (staged / "data.csv").read_text().splitlines()[0] == "x1,x2,y"
    assert len((staged / "data.csv").read_text().splitlines()) == 31


def test_hypers_file(staged):
    d = json.loads((staged / "hypers.json").read_text())
    assert len(d["variance"]) == 2 and d["noise_std"] > 0
    assert d["log_evidence"] < 0


def test_report_rows(staged):
    with open(staged / "report.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == REPORT_COLUMNS
    assert [r[0] for r in rows[1:]] == ["Exact", "VCGP[3]", "MF[3]"]
    mf = dict(zip(REPORT_COLUMNS, rows[3]))
    assert float(mf["mean_corr"]) == 0.0


def test_train_model_filter(tmp_path, staged):
    o = str(tmp_path)
    for name in ("data.csv", "hypers.json"):
        (tmp_path / name).write_text((staged / name).read_text())
    assert main(["train", "--out", o, "--model", "mf", "--m", "2", "--iters", "10"]) == 0
    assert (tmp_path / "state_mf_2.json").exists()
    assert not (tmp_path / "state_coupled_2.json").exists()


def test_read_config(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(
        "[experiment]\nseed = 7\nn = 120\nm = 5, 15\nmodels = exact, coupled\n"
        "learning_rate = 0.02\nbatch_size = none\nholdout = yes\nout = somewhere\n"
    )
    cfg = read_config(path)
    assert cfg == {
        "seed": 7,
        "n": 120,
        "m": (5, 15),
        "models": ("exact", "coupled"),
        "learning_rate": 0.02,
        "batch_size": None,
        "holdout": True,
        "out": "somewhere",
    }


def test_read_config_unknown_key(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[experiment]\nlearning_rat = 0.1\n")
    with pytest.raises(ValueError, match="unknown key"):
        read_config(path)


def test_run_all_from_config(tmp_path):
    out = tmp_path / "res"
    cfg = tmp_path / "exp.ini"
    cfg.write_text(f"[experiment]\nn = 25\nm = 2\nmodels = exact, mf\niterations = 20\nrestarts = 1\nout = {out}\n")
    assert main(["run-all", "--config", str(cfg), "--format", "csv"]) == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["Exact", "MF[2]"]
    assert not (out / "report.json").exists()


def test_run_all_rejects_zero_inducing(tmp_path, capsys):
    assert main(["run-all", "--m", "0", "--out", str(tmp_path)]) == 2
    assert "inducing" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["run-all", "--config", str(tmp_path / "nope.ini")]) == 2
