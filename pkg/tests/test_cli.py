import csv
import json

import pytest

from adapter_sentinel.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main

FORGE = {"pretrain": {"n_train": 200, "n_test": 100, "epochs": 1, "min_ca": 0.0}, "n_benign": 5,
         "n_backdoored": 5, "pool_size": 120, "test_size": 60, "hyper": {"epochs": 1}}
CONFIG = {
    "forge": FORGE,
    "detector": {"mlp": [8], "conv_channels": 2, "epochs": 2},
    "attack": {"configs": [{"kind": "None", "name": "Initial Model"}, {"kind": "GaussStd", "scale": 1.0},
                           {"kind": "PGD", "eps": 1e-4, "alpha": 1e-5, "iters": 2}]},
    "mitigation": {"rho": 0.5, "hyper": {"epochs": 1}},
    "seed": 3,
}


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, monkeypatch_module):
    root = tmp_path_factory.mktemp("cli")
    monkeypatch_module.setenv("ADAPTER_SENTINEL_CACHE", str(root / "cache"))
    cfg = root / "config.json"
    cfg.write_text(json.dumps(CONFIG))
    run = lambda *a: main([*a, "--config", str(cfg)])
    assert run("forge", "--out", str(root / "bench")) == EXIT_OK
    bench = str(root / "bench")
    assert run("train-detector", "--manifest", bench, "--out", str(root / "det")) == EXIT_OK
    assert run("train-detector", "--manifest", bench, "--seed", "9", "--out", str(root / "sur")) == EXIT_OK
    det, sur = str(root / "det" / "detector.model"), str(root / "sur" / "detector.model")
    assert run("eval", "--manifest", bench, "--detector", det, "--split", "all", "--out", str(root / "eval")) == 0
    assert run("cross-eval", "--manifest", bench, "--detector", det, "--out", str(root / "xfer")) == 0
    assert run("attack", "--manifest", bench, "--surrogate", sur, "--target", det, "--split", "all",
               "--out", str(root / "attack")) == EXIT_OK
    assert run("mitigate", "--manifest", bench, "--split", "all", "--out", str(root / "mit")) == EXIT_OK
    assert main(["report", str(root), "--out", str(root / "report")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def monkeypatch_module():
    mp = pytest.MonkeyPatch()
    yield mp
    mp.undo()


def test_pipeline_outputs(pipeline):
    assert (pipeline / "bench" / "manifest.json").exists()
    d = rows(pipeline / "eval" / "detection.csv")[0]
    assert 0 <= float(d["da"]) <= 1 and 0 <= float(d["auc"]) <= 1
    t = rows(pipeline / "xfer" / "transfer.csv")[0]
    assert t["source"] == "LoRA" and t["target"] == "LoRA"
    assert len(rows(pipeline / "attack" / "attack.csv")) == 3
    assert {r["method"] for r in rows(pipeline / "mit" / "mitigation.csv")} == {"SFT", "Fine-mix"}


def test_report_tables(pipeline):
    rep = pipeline / "report"
    with open(rep / "attack_table.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["Attack Method", "Parameters", "CA under Attack", "ASR under Attack", "ASR on Detector"]
    assert rows(rep / "attack_table.csv")[0]["Attack Method"] == "Initial Model"
    assert "## Mitigation" in (rep / "report.md").read_text()
    assert rows(rep / "transfer_matrix.csv")[0]["source"] == "LoRA"


def test_run_json_records_provenance(pipeline):
    run = json.loads((pipeline / "det" / "run.json").read_text())
    assert run["command"] == "train-detector"
    assert run["config"]["seed"] == 3
    assert {"numpy", "scipy", "python"} <= set(run["versions"])


def test_run_json_replays(pipeline, tmp_path):
    # a previous run.json works as a config; the same seed gives the same detector bytes
    prev = pipeline / "sur" / "run.json"
    out = tmp_path / "again"
    assert main(["train-detector", "--manifest", str(pipeline / "bench"), "--seed", "9", "--config", str(prev),
                 "--out", str(out)]) == EXIT_OK
    assert (out / "detector.model").read_bytes() == (pipeline / "sur" / "detector.model").read_bytes()


def test_empty_test_split_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"forge": {**FORGE, "test_fraction": 0.0, "n_benign": 2, "n_backdoored": 2}}))
    assert main(["forge", "--config", str(cfg), "--out", str(tmp_path / "b")]) == EXIT_OK
    code = main(["train-detector", "--manifest", str(tmp_path / "b"), "--out", str(tmp_path / "d"),
                 "--config", str(cfg)])
    assert code == EXIT_OK
    code = main(["eval", "--manifest", str(tmp_path / "b"), "--detector", str(tmp_path / "d" / "detector.model"),
                 "--out", str(tmp_path / "e")])
    assert code == EXIT_CONFIG
    assert "zero adapters" in capsys.readouterr().err


def test_bad_inputs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"optimizer": {}}))
    assert main(["forge", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["eval", "--manifest", str(tmp_path / "nope"), "--detector", "x", "--out", str(tmp_path)]) == EXIT_IO
    assert main(["report", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == EXIT_IO
    assert main(["forge", "--jobs", "0", "--out", str(tmp_path / "y")]) == EXIT_CONFIG


def test_ensemble_reports_fused_and_members(pipeline, tmp_path):
    out = tmp_path / "ens"
    assert main(["train-detector", "--manifest", str(pipeline / "bench"), "--ensemble", "2",
                 "--config", str(pipeline / "config.json"), "--out", str(out)]) == EXIT_OK
    assert [r["run_id"] for r in rows(out / "fusion.csv")] == ["member_0", "member_1", "fused"]
    assert (out / "member_1.model").exists()
