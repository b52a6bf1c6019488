from __future__ import annotations

import json

import pytest

from equigraph.cli import main


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen", "--dim", "3", "--family", "orthogonal", "--copies", "2",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def dgn_run(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("dgn")
    assert main(["train", "--preset", "dgn:mean", "--data", str(data_dir), "--seeds", "2",
                 "--epochs", "3", "--workers", "1", "--out", str(out)]) == 0
    return out


def test_gen_orthogonal_sizes(tmp_path, capsys):
    assert main(["gen", "--dim", "3", "--family", "orthogonal", "--copies", "20",
                 "--out", str(tmp_path)]) == 0
    test_meta = json.loads((tmp_path / "test_orth" / "metadata.json").read_text())
    train_meta = json.loads((tmp_path / "train" / "metadata.json").read_text())
    assert test_meta["num_samples"] == 100 and train_meta["num_samples"] == 5
    assert json.loads((tmp_path / "manifest.json").read_text())["command"] == "gen"
    assert "test_orth: 100 samples" in capsys.readouterr().out


def test_gen_dim4_has_six_classes(tmp_path):
    assert main(["gen", "--dim", "4", "--family", "orthogonal", "--copies", "1",
                 "--out", str(tmp_path)]) == 0
    meta = json.loads((tmp_path / "train" / "metadata.json").read_text())
    assert meta["num_classes"] == 6 and meta["num_samples"] == 6


def test_gen_table_and_augmentation(tmp_path):
    assert main(["gen", "--copies", "1", "--augment-k", "2", "--out", str(tmp_path)]) == 0
    names = sorted(p.name for p in tmp_path.iterdir() if p.is_dir())
    assert names == ["test_mu0.5", "test_mu1.5", "test_mu3.0", "test_orth", "test_orth_dil",
                     "train"]
    meta = json.loads((tmp_path / "train" / "metadata.json").read_text())
    assert meta["num_samples"] == 15 and meta["augment_k"] == 2


@pytest.mark.parametrize("argv", [
    ["gen", "--mu", "-1", "--out", "x"],
    ["gen", "--dim", "7", "--out", "x"],
    ["gen", "--gamma-min", "2", "--gamma-max", "1", "--out", "x"],
    ["gen", "--family", "shear", "--out", "x"],
    ["train", "--data", "x", "--out", "y", "--seeds", "0"],
    ["bogus"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_train_missing_data_is_runtime_error(tmp_path, capsys):
    code = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == 3
    assert "train/" in capsys.readouterr().err


def test_train_outputs(dgn_run):
    assert (dgn_run / "seed_0" / "checkpoint.json").is_file()
    run = json.loads((dgn_run / "seed_1" / "run.json").read_text())
    assert len(run["losses"]) == 3 and "test_orth" in run["test_acc"]
    header, row = (dgn_run / "results.csv").read_text().splitlines()
    assert header.startswith("block,rho,psi,dim,train_acc") and row.startswith("dgn,mean,identity,3,")


def test_rerun_is_byte_identical(dgn_run):
    before = (dgn_run / "results.csv").read_bytes()
    ckpt = (dgn_run / "seed_0" / "checkpoint.json").read_bytes()
    assert main(["rerun", "--manifest", str(dgn_run / "manifest.json")]) == 0
    assert (dgn_run / "results.csv").read_bytes() == before
    assert (dgn_run / "seed_0" / "checkpoint.json").read_bytes() == ckpt


def test_check_e3_passes_and_conf_fails(dgn_run, data_dir, tmp_path, capsys):
    ckpt = str(dgn_run / "seed_0" / "checkpoint.json")
    data = str(data_dir / "test_orth")
    assert main(["check", "--checkpoint", ckpt, "--data", data, "--group", "e3",
                 "--trials", "3", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "equivariance.json").read_text())
    assert report[0]["passed"] and report[0]["group"] == "e3"
    capsys.readouterr()
    assert main(["check", "--checkpoint", ckpt, "--data", data, "--group", "conf",
                 "--trials", "3"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "worst case:" in out and '"gamma"' in out
    assert main(["check", "--checkpoint", ckpt, "--data", "figure1", "--group", "local",
                 "--trials", "3"]) == 0


def test_check_trials_zero_is_usage_error(dgn_run, data_dir):
    ckpt = str(dgn_run / "seed_0" / "checkpoint.json")
    assert main(["check", "--checkpoint", ckpt, "--data", str(data_dir / "test_orth"),
                 "--group", "e3", "--trials", "0"]) == 2


def test_evaluate(dgn_run, data_dir, capsys):
    ckpt = str(dgn_run / "seed_0" / "checkpoint.json")
    assert main(["evaluate", "--checkpoint", ckpt, "--data", str(data_dir / "test_orth")]) == 0
    assert "samples=10" in capsys.readouterr().out


def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert capsys.readouterr().out.startswith("PASS checked=200")


def test_report_table_and_json(tmp_path, capsys):
    csv_text = ("block,rho,psi,dim,train_acc,test_orth,test_orth_dil,test_mu0.5,test_mu1.5,"
                "test_mu3.0,seed_count,augment_k\n"
                "agn,sum,identity,3,1.0000±0.0000,1.0000±0.0000,,,,,10,0\n"
                "gn,sum,-,3,1.0000±0.0000,0.5000±0.0400,,,,,5,20\n"
                "gn,sum,-,3,1.0000±0.0000,0.3000±0.0500,,,,,5,5\n")
    path = tmp_path / "results.csv"
    path.write_text(csv_text)
    assert main(["report", "--in", str(path)]) == 0
    table = capsys.readouterr().out
    assert "1.00 ± 0.00" in table and "0.50 ± 0.04" in table
    assert main(["report", "--in", str(path), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    series = doc["series"]["gn/sum/dim3"]["test_orth"]
    assert [p["k"] for p in series] == [5, 20] and series[1]["mean"] == 0.5


def test_report_malformed_csv(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("block,rho,psi,dim,train_acc,test_orth\nagn,sum,-,3,oops,\n")
    assert main(["report", "--in", str(path)]) == 3


def test_malformed_graph_is_runtime_error(tmp_path, dgn_run):
    bad = tmp_path / "g.json"
    bad.write_text('{"nodes": [{"coords": [0, 0, "z"]}]}')
    assert main(["check", "--checkpoint", str(dgn_run / "seed_0" / "checkpoint.json"),
                 "--data", str(bad), "--group", "e3", "--trials", "1"]) == 3
