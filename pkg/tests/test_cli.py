import csv
import json

import numpy as np
import pytest

from gmetafl import cli, config
from gmetafl.config import ConfigError

TINY = {
    "dataset": {"kind": "synthetic", "samples": 2000, "partition": {"samples_per_client": 100}},
    "model": {"hidden": [6]},
    "federation": {"n_clients": 10, "participation": 0.3, "rounds": 3, "alpha": 0.02, "beta": 0.05,
                   "tau": 2, "nu": 2, "batch_size": 10},
    "scenarios": [{"label": "gmeta", "engine": "exact", "nu": 2},
                  {"label": "fedavg", "engine": "fo", "nu": 0, "eval_nu": 2}],
    "seeds": [0, 1],
}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_expected_rows(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", str(write(tmp_path, TINY)), "--out", str(out)]) == 0
    r = rows(out / "metrics.csv")
    assert list(r[0]) == cli.METRICS_HEADER
    for label in ("gmeta", "fedavg"):
        mine = [x for x in r if x["engine"] == label]
        assert len(mine) == 2 * (3 + 1)
        for seed in ("0", "1"):
            assert [int(x["round"]) for x in mine if x["seed"] == seed] == [0, 1, 2, 3]
    assert all(0 <= float(x["mean_accuracy"]) <= 1 and x["wall_ms"] == "" for x in r)
    man = json.loads((out / "manifest.json").read_text())
    assert man["code_version"] and man["config"]["federation"]["eval_nu"] == 2
    assert not (out / "bounds.json").exists()


def test_refuses_existing_output_unless_forced(tmp_path, capsys):
    cfg = write(tmp_path, TINY)
    out = tmp_path / "out"
    assert cli.main(["run", str(cfg), "--out", str(out)]) == 0
    assert cli.main(["run", str(cfg), "--out", str(out)]) == 2
    assert "--force" in capsys.readouterr().err
    assert cli.main(["run", str(cfg), "--out", str(out), "--force"]) == 0


def test_manifest_round_trip_and_workers_are_byte_identical(tmp_path):
    cfg = write(tmp_path, TINY)
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "c"), "--workers", "3"]) == 0
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes() == (tmp_path / "c" / "metrics.csv").read_bytes()


def test_wall_time_column_opt_in(tmp_path):
    doc = dict(TINY, output={"record_wall_time": True})
    out = tmp_path / "out"
    assert cli.main(["run", str(write(tmp_path, doc)), "--out", str(out)]) == 0
    assert all(float(x["wall_ms"]) >= 0 for x in rows(out / "metrics.csv"))
    assert len(rows(out / "timings.csv")) == 2 * 2 * 4


def test_schema_errors_name_the_field(tmp_path, capsys):
    doc = json.loads(json.dumps(TINY))
    doc["federation"]["participation"] = 2
    doc["scenarios"][0]["engine"] = "newton"
    assert cli.main(["run", str(write(tmp_path, doc)), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "federation/participation" in err and "scenarios/0/engine" in err
    assert not (tmp_path / "o").exists()
    with pytest.raises(ConfigError, match="seeds"):
        config.resolve({k: v for k, v in TINY.items() if k != "seeds"})
    with pytest.raises(ConfigError, match="seeds"):
        config.resolve(dict(TINY, seeds=[]))


def test_missing_dataset_path_reported(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("CIFAR_DATA_ROOT", raising=False)
    missing = tmp_path / "no_such_cifar"
    doc = dict(TINY, dataset={"kind": "cifar10", "path": str(missing)})
    assert cli.main(["run", str(write(tmp_path, doc))]) != 0
    assert str(missing) in capsys.readouterr().err


def test_failed_run_leaves_no_outputs(tmp_path):
    doc = json.loads(json.dumps(TINY))
    doc["federation"]["alpha"] = 1e308
    doc["scenarios"] = [{"label": "hf", "engine": "hf", "nu": 2}]
    out = tmp_path / "out"
    with np.errstate(all="ignore"):
        assert cli.main(["run", str(write(tmp_path, doc)), "--out", str(out)]) == 2
    assert not out.exists()
    assert [p.name for p in tmp_path.iterdir()] == ["cfg.json"]


@pytest.mark.parametrize("name", ["fig1", "fig2", "fig3", "fig4"])
def test_desk_presets_resolve(name):
    cfg = config.load(name)
    assert cfg["seeds"] and cfg["scenarios"]


def test_paper_preset_resolves_with_paper_parameters(tmp_path, monkeypatch):
    for f in [f"data_batch_{i}.bin" for i in range(1, 6)]:
        (tmp_path / f).touch()
    monkeypatch.setenv("CIFAR_DATA_ROOT", str(tmp_path))
    cfg = config.load("fig1_paper")
    fed, part = cfg["federation"], cfg["dataset"]["partition"]
    assert (fed["n_clients"], fed["participation"], fed["alpha"], fed["beta"], fed["tau"], fed["nu"]) == \
        (50, 0.2, 0.01, 0.001, 4, 3)
    assert part["dirichlet_alpha"] == 0.01 and fed["batch_size"] == 40 and cfg["model"]["hidden"] == [80, 60]
    assert cfg["dataset"]["path"] == str(tmp_path)


def test_compare_table(tmp_path, capsys):
    out = tmp_path / "out"
    cli.main(["run", str(write(tmp_path, TINY)), "--out", str(out)])
    m = str(out / "metrics.csv")
    table = cli.summarize([m, m], target=0.0)
    assert len(table) == 4
    a = [r for r in table if r["engine"] == "gmeta"]
    assert {k: v for k, v in a[0].items() if k != "source"} == {k: v for k, v in a[1].items() if k != "source"}
    assert a[0]["first_round_above"] == 0 and a[0]["seeds"] == 2
    finals = [r["final_mean"] for r in table]
    assert finals == sorted(finals, reverse=True)
    assert cli.main(["compare", m, m, "--target", "0.5"]) == 0
    assert "+/-" in capsys.readouterr().out


def test_compare_rejects_mismatched_rounds(tmp_path):
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    cli.main(["run", str(write(tmp_path, TINY)), "--out", str(out1)])
    doc = json.loads(json.dumps(TINY))
    doc["federation"]["rounds"] = 2
    cli.main(["run", str(write(tmp_path, doc, "c2.json")), "--out", str(out2)])
    with pytest.raises(cli.CLIError, match="rounds"):
        cli.summarize([out1 / "metrics.csv", out2 / "metrics.csv"])


def test_bounds_sweep_monotone_and_beta_flag(tmp_path):
    doc = dict(TINY, theory={"enabled": True, "probe_count": 2, "max_clients": 2})
    rep = cli.report_bounds(config.resolve(doc))
    sweep = rep["nu_sweep"]
    assert [r["nu"] for r in sweep] == [1, 2, 3, 4]
    for key in ("L_F", "mu_F", "sigma_F_sq", "gamma_F_sq", "theorem_rhs"):
        vals = [r[key] for r in sweep]
        assert all(b >= a for a, b in zip(vals, vals[1:])), key
    limit = 1 / (10 * doc["federation"]["tau"] * sweep[0]["L_F"])
    assert rep["beta_hypothesis_violated"] == (doc["federation"]["beta"] > limit)
    low = json.loads(json.dumps(doc))
    low["federation"]["beta"] = 1e-6
    assert not cli.report_bounds(config.resolve(low))["beta_hypothesis_violated"]
    high = json.loads(json.dumps(doc))
    high["federation"]["beta"] = 10.0
    assert cli.report_bounds(config.resolve(high))["beta_hypothesis_violated"]


def test_noise_free_quadratic_bounds(tmp_path):
    doc = dict(TINY, model={"kind": "quadratic", "A": [[2.0, 0.0], [0.0, 0.5]]},
               theory={"probe_count": 2, "max_clients": 2})
    rep = cli.report_bounds(config.resolve(doc))
    for row in rep["nu_sweep"]:
        assert row["mu_F"] == 0 and row["sigma_F_sq"] == 0


def test_bounds_command_and_run_with_theory(tmp_path):
    doc = dict(TINY, theory={"enabled": True, "probe_count": 2, "max_clients": 2})
    cfg = write(tmp_path, doc)
    assert cli.main(["bounds", str(cfg), "--out", str(tmp_path / "b.json")]) == 0
    assert json.loads((tmp_path / "b.json").read_text())["nu_sweep"]
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "bounds.json").exists()
