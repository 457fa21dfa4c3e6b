import csv
import json

import pytest

from fcpmp.cli import main
from fcpmp.config import ConfigError, load_config, load_preset, parse_config

SMALL = {
    "scenario": {"area": [0, 50, 0, 50], "deploy_zone": [5, 45, 5, 45], "n_agents": 6, "n_anchors": 4,
                 "comm_radius": 25.0, "l_max": 3},
    "n_realizations": 2,
    "n_slots": 2,
    "seed": 7,
    "workers": 1,
}


def write_config(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_presets_load():
    tr, ev = load_config("paper_train"), load_config("paper_eval")
    assert tr.scenario.n_agents == 50 and tr.scenario.comm_radius == 20
    assert ev.scenario.n_anchors == 41 and ev.baselines == ("particle_bp",)
    assert load_preset("paper_eval")["seed"] == ev.seed
    with pytest.raises(ConfigError):
        load_preset("nope")


def test_unknown_keys_are_named():
    with pytest.raises(ConfigError) as e:
        parse_config({"bogus": 1})
    assert e.value.key == "bogus"
    with pytest.raises(ConfigError) as e:
        parse_config({"scenario": {"radius": 3}})
    assert e.value.key == "scenario.radius"
    with pytest.raises(ConfigError) as e:
        parse_config({"train": {"epochz": 3}})
    assert e.value.key == "train.epochz"


@pytest.mark.parametrize("doc,key", [
    ({"n_slots": 0}, "n_slots"),
    ({"fusion_mode": "fast"}, "fusion_mode"),
    ({"enhancer": {"enabled": True}}, "enhancer.weights"),
    ({"engine": {"bimodal": "max"}}, "engine.bimodal"),
    ({"baselines": ["nebp"]}, "baselines"),
    ({"seed": -1}, "seed"),
    ({"scenario": {"seed": 3}}, "scenario.seed"),
    ({"workers": 0}, "workers"),
])
def test_invalid_values_are_named(doc, key):
    with pytest.raises(ConfigError) as e:
        parse_config(doc)
    assert e.value.key == key


def test_seed_environment_override(monkeypatch):
    monkeypatch.setenv("FCPMP_SEED", "42")
    cfg = parse_config({"seed": 1})
    assert cfg.seed == 42 and cfg.scenario.seed == 42
    monkeypatch.setenv("FCPMP_SEED", "x")
    with pytest.raises(ConfigError):
        parse_config({})


def test_relative_weight_path_resolves_against_config(tmp_path):
    cfg = parse_config({"enhancer": {"enabled": True, "weights": "w.json"}}, tmp_path)
    assert cfg.enhancer.weights == str(tmp_path / "w.json")


def test_config_round_trip():
    cfg = parse_config(SMALL)
    doc = json.loads(cfg.to_json())
    doc["scenario"].pop("seed")
    assert parse_config(doc) == cfg


def test_loops_census_matches_reference(tmp_path):
    cfg = write_config(tmp_path, {"scenario": {"area": [0, 500, 0, 500], "deploy_zone": [50, 450, 50, 450],
                                               "n_agents": 50, "n_anchors": 41, "comm_radius": 50.0}})
    assert main(["loops", "--config", cfg, "--trials", "300", "--out", str(tmp_path / "o")]) == 0
    row = next(csv.DictReader(open(tmp_path / "o" / "loops.csv")))
    assert abs(float(row["mean_triangles"]) - 23.74) <= 0.15 * 23.74
    assert json.loads((tmp_path / "o" / "config.json").read_text())["command"]["name"] == "loops"


def test_simulate_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    for d in ("a", "b"):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "dataset.jsonl").read_bytes() == (tmp_path / "b" / "dataset.jsonl").read_bytes()


def test_seed_override_changes_dataset(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, SMALL)
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
    monkeypatch.setenv("FCPMP_SEED", "8")
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "dataset.jsonl").read_bytes() != (tmp_path / "b" / "dataset.jsonl").read_bytes()
    assert json.loads((tmp_path / "b" / "config.json").read_text())["seed"] == 8


def test_missing_weights_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "enhancer": {"enabled": True, "weights": "missing.json"}})
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "missing.json" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, {**SMALL, "scenario": {**SMALL["scenario"], "radius": 3}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "scenario.radius" in capsys.readouterr().err


def test_train_then_compare(tmp_path):
    doc = {**SMALL, "train": {"epochs": 2, "batch": 1, "validation_realizations": 1}}
    cfg = write_config(tmp_path, doc)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "t")]) == 0
    log = list(csv.DictReader(open(tmp_path / "t" / "train_log.csv")))
    assert [r["epoch"] for r in log] == ["1", "2"] and all(r["val_rmse"] for r in log)
    doc2 = {**SMALL, "enhancer": {"enabled": True, "weights": "t/weights.json"}, "baselines": ["particle_bp"],
            "particle": {"n_particles": 100}}
    cfg2 = write_config(tmp_path, doc2, "cfg2.json")
    assert main(["compare", "--config", cfg2, "--out", str(tmp_path / "c")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "c" / "comparison.csv")))
    assert [r["method"] for r in rows] == ["fcpmp", "gnn_fcpmp", "particle_bp"]
    for m in ("fcpmp", "gnn_fcpmp", "particle_bp"):
        header = (tmp_path / "c" / m / "trace.csv").read_text().splitlines()[0]
        assert header.startswith("run_id,")


def test_fit_cheb_outputs(tmp_path):
    assert main(["fit-cheb", "--out", str(tmp_path)]) == 0
    cmd = json.loads((tmp_path / "config.json").read_text())["command"]
    assert cmd["best_domain"] and cmd["deviation"] < 0.01
    assert (tmp_path / "domain_table.csv").read_text().startswith("domain,max_abs_deviation")
