import csv
import json

import pytest
import yaml

from advml import cli, data, scenarios
from advml.rng import make_rng

FAST = {"epochs": 3, "batch_size": 16}


def _cfg(name, tmp_path, params=None, **extra):
    cfg = {
        "scenario": name,
        "seed": 5,
        "data": {"generator": "grid", "n_per_class": 12, "k_classes": 4},
        "model": {"hidden": [8]},
        "train": dict(FAST),
        "params": params or {},
        "outputs": {"metrics": str(tmp_path / f"{name}.csv"), "manifest": str(tmp_path / f"{name}.json")},
    }
    cfg.update(extra)
    return cfg


@pytest.mark.parametrize("name,params", [
    ("train", {}),
    ("attack", {"method": "pgd", "iters": 3}),
    ("poison", {"method": "backdoor"}),
    ("poison", {"method": "flip", "rule": [0, 1]}),
    ("poison", {"method": "noiseflip", "count": 4}),
    ("defend", {"method": "advtrain"}),
    ("defend", {"method": "sanitize"}),
    ("defend", {"method": "blur"}),
    ("federate", {"rounds": 2, "poisoned": [1]}),
    ("rep", {"method": "rotation"}),
    ("rep", {"method": "autoencoder"}),
    ("privacy", {"method": "invert", "steps": 20}),
    ("serve-audit", {"requests": 6}),
])
def test_scenarios_run_and_rerun_byte_identical(tmp_path, name, params):
    cfg = _cfg(name, tmp_path, params)
    status, metrics = scenarios.run_scenario(cfg)
    assert status == 0 and metrics.rows
    first = (tmp_path / f"{name}.csv").read_bytes()
    scenarios.run_scenario(cfg)
    assert (tmp_path / f"{name}.csv").read_bytes() == first
    manifest = json.loads((tmp_path / f"{name}.json").read_text())
    assert manifest["status"] == "ok" and len(manifest["dataset_digest"]) == 64


def test_backdoor_scenario_with_headroom(tmp_path):
    cfg = _cfg("poison", tmp_path, {"method": "backdoor"},
               data={"generator": "grid", "n_per_class": 20, "k_classes": 4, "clip_high": 0.99})
    _, metrics = scenarios.run_scenario(cfg)
    assert metrics.get("filter_recall", "train") == 1.0
    assert metrics.get("filter_precision", "train") == 1.0


def test_serve_audit_counts(tmp_path):
    _, metrics = scenarios.run_scenario(_cfg("serve-audit", tmp_path, {"requests": 6}))
    assert metrics.get("accepted") == 5 and metrics.get("rate_limited") == 1
    assert metrics.get("wrong_token_status") == 401


def test_zero_epochs_gives_only_eval_rows(tmp_path):
    cfg = _cfg("train", tmp_path, train={"epochs": 0})
    _, metrics = scenarios.run_scenario(cfg)
    assert {r[5] for r in metrics.rows} == {"accuracy", "loss"}
    assert all(r[3] == 0 for r in metrics.rows)
    assert len(metrics.rows) == 4


def test_wrong_digest_aborts_without_model(tmp_path):
    ds = data.gen_two_gaussians(10, make_rng(0))
    data.save_dataset(ds, tmp_path / "d.json")
    cfg = _cfg("train", tmp_path, data={"path": str(tmp_path / "d.json"), "expected_digest": "0" * 64})
    cfg["outputs"]["model"] = str(tmp_path / "model.json")
    status, _ = scenarios.run_scenario(cfg)
    assert status != 0
    assert not (tmp_path / "model.json").exists()
    assert json.loads((tmp_path / "train.json").read_text())["status"].startswith("aborted")
    cfg["data"]["expected_digest"] = data.dataset_sha256(ds)
    assert scenarios.run_scenario(cfg)[0] == 0
    assert (tmp_path / "model.json").exists()


def test_unknown_scenario_and_generator(tmp_path):
    with pytest.raises(scenarios.ScenarioError):
        scenarios.run_scenario({"scenario": "bogus"})
    with pytest.raises(scenarios.ScenarioError):
        scenarios.run_scenario(_cfg("train", tmp_path, data={"generator": "bogus"}))


def test_yaml_config_file(tmp_path):
    cfg = _cfg("train", tmp_path)
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(cfg))
    status, metrics = scenarios.run_scenario(p)
    assert status == 0 and metrics.get("accuracy", "test") >= 0.0


def test_cli_pipeline(tmp_path, capsys):
    d = str(tmp_path / "d.json")
    assert cli.main(["--seed", "2", "gen-data", "grid", "--n-per-class", "10", "--out", d]) == 0
    digest = capsys.readouterr().out.strip()
    assert cli.main(["audit-hash", d, "--expect", digest]) == 0
    assert cli.main(["audit-hash", d, "--expect", "f" * 64]) == 2
    m = str(tmp_path / "m.json")
    csv_path = tmp_path / "train.csv"
    assert cli.main(["--seed", "2", "--metrics", str(csv_path), "train", "--data", d, "--epochs", "2",
                     "--out", m]) == 0
    rows = list(csv.DictReader(csv_path.open()))
    assert rows[0]["scenario"] == "train"
    attack_csv = tmp_path / "attack.csv"
    assert cli.main(["--metrics", str(attack_csv), "attack", "--method", "fgsm", "--eps", "0.1",
                     "--model", m, "--data", d]) == 0
    metrics = {r["metric"]: float(r["value"]) for r in csv.DictReader(attack_csv.open())}
    assert metrics["linf_perturbation"] <= 0.1 + 1e-12
    assert cli.main(["attack", "--data", d, "--expected-digest", "0" * 64, "--epochs", "1"]) == 2


def test_cli_other_subcommands(tmp_path, capsys):
    g = str(tmp_path / "g.json")
    cli.main(["--seed", "1", "gen-data", "two_gaussians", "--n-per-class", "30", "--out", g])
    assert cli.main(["steal", "--data", g, "--probes", "100", "--epochs", "5"]) == 0
    assert cli.main(["privacy", "membership", "--data", g, "--epochs", "5"]) == 0
    assert cli.main(["defend", "--method", "audit", "--flip-fraction", "0.1", "--data", g,
                     "--epochs", "5", "--folds", "3"]) == 0
    assert cli.main(["poison", "--method", "flip", "--data", g, "--no-eval",
                     "--out", str(tmp_path / "p.json")]) == 0
    assert data.load_dataset(tmp_path / "p.json").poisoned_mask().sum() == 4  # floor(0.1 * 45 training rows)
    assert cli.main(["rep", "distill", "--data", g, "--epochs", "2"]) == 0
    assert cli.main(["rep", "contrastive", "--data", g, "--epochs", "2"]) == 0
    assert cli.main(["federate", "--data", g, "--rounds", "1", "--clients", "2"]) == 0
    out = capsys.readouterr().out
    assert "agreement" in out and "advantage" in out


def test_cli_run_and_errors(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(_cfg("train", tmp_path)))
    assert cli.main(["run", str(p)]) == 0
    assert cli.main(["run", str(tmp_path / "missing.json")]) == 1
    with pytest.raises(SystemExit):
        cli.main(["attack", "--method", "nope"])
