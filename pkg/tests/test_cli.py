import csv
import json
from pathlib import Path

import numpy as np
import pytest

from hgpmpc.cli import (ABLATION_COLUMNS, PER_RUN_COLUMNS, SUMMARY_COLUMNS, TIMING_COLUMNS, ConfigError,
                        cmd_ablate_alpha_min, cmd_fit_gps, cmd_run, load_config, load_model, main,
                        parse_config)
from hgpmpc.gp import load_hyperparams, predict_hybrid

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def derive(tmp_path, name, out="out", **over):
    doc = json.loads((CONFIGS / name).read_text())
    doc.update(over)
    doc["output_dir"] = str(tmp_path / out)
    path = tmp_path / f"{out}.json"
    path.write_text(json.dumps(doc))
    return path


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def small_fig8(tmp_path, out="fig8", **over):
    task = {"kind": "figure8", "T": 12, "center": [2.0, 2.0], "radii": [1.2, 0.9]}
    kw = dict(task=task, seeds=2, gp={"source": "fit", "n_per_mode": 60, "seed": 0})
    return derive(tmp_path, "lti-fig8.json", out, **{**kw, **over})


def small_protocol(tmp_path, out="proto", **over):
    doc = json.loads((CONFIGS / "quad-protocol.json").read_text())
    runs = doc["protocol"]["runs"]
    runs[0]["task"].update(T=120, freqs=[1, 2])
    runs[1]["task"]["T"] = 60
    runs[1]["repeat"] = 2
    kw = dict(seeds=2, gp={"source": "fit", "n_per_mode": 40, "seed": 0},
              protocol={"runs": runs, "shift_run": 3},
              training={"epochs": 20, "step_size": 0.001, "optimizer": "gd", "hidden": [16, 16]},
              controllers=doc["controllers"][:1])
    return derive(tmp_path, "quad-protocol.json", out, **{**kw, **over})


# ---------------------------------------------------------------------------
# shipped configs
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["lti-fig8.json", "lti-boundary.json", "quad-protocol.json", "lti-gps.json"])
def test_shipped_configs_parse(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.output_dir.is_absolute()


def test_boundary_config_layout():
    cfg = load_config(CONFIGS / "lti-boundary.json")
    layout = [(c.cfg.kind, c.cfg.p_x, c.cfg.shrink) for c in cfg.controllers]
    assert layout == [("endo", 0.99, False),
                      ("minlp", 0.99, True), ("endo", 0.99, True), ("exo", 0.99, True),
                      ("minlp", 0.9, True), ("endo", 0.9, True), ("exo", 0.9, True)]


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def base_doc():
    return json.loads((CONFIGS / "lti-fig8.json").read_text())


def test_rejects_low_probability():
    doc = base_doc()
    doc["controllers"][0]["p_x"] = 0.4
    with pytest.raises(ConfigError, match=r"\[0.5, 1\)"):
        parse_config(doc, CONFIGS)


def test_rejects_zero_horizon():
    doc = base_doc()
    doc["controllers"][1]["N"] = 0
    with pytest.raises(ConfigError, match="integer >= 1"):
        parse_config(doc, CONFIGS)


@pytest.mark.parametrize("where", ["top", "controller", "task", "gp"])
def test_rejects_unknown_keys(where):
    doc = base_doc()
    target = {"top": doc, "controller": doc["controllers"][0], "task": doc["task"], "gp": doc["gp"]}[where]
    target["colour"] = "red"
    with pytest.raises(ConfigError, match="colour"):
        parse_config(doc, CONFIGS)


def test_rejects_bad_schema():
    doc = base_doc()
    doc["schema"] = "hgpmpc.experiment/0"
    with pytest.raises(ConfigError):
        parse_config(doc, CONFIGS)


def test_rejects_missing_bank(tmp_path):
    doc = base_doc()
    doc["gp"] = {"source": "file", "path": str(tmp_path / "nope.json")}
    with pytest.raises(ConfigError, match="nope.json"):
        parse_config(doc, CONFIGS)


def test_rejects_unknown_environment_param():
    doc = base_doc()
    doc["environment"]["params"] = {"gravity": 3.0}
    with pytest.raises(ConfigError, match="gravity"):
        parse_config(doc, CONFIGS)


def test_exit_codes(tmp_path, capsys):
    doc = base_doc()
    doc["controllers"][0]["p_x"] = 0.3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["run", "--config", str(bad)]) == 2
    assert "p_x" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert main(["fit-gps", "--config", str(tmp_path / "broken.json")]) == 2
    assert not (tmp_path / "out").exists()


# ---------------------------------------------------------------------------
# fit-gps
# ---------------------------------------------------------------------------

def test_fit_gps_round_trip(tmp_path):
    cfg_path = derive(tmp_path, "lti-gps.json", "bank", gp={"source": "fit", "n_per_mode": 60, "seed": 1})
    assert main(["fit-gps", "--config", str(cfg_path)]) == 0
    bank = tmp_path / "bank" / "gp_bank.json"
    hps, doc = load_hyperparams(bank)
    assert len(hps) == 3 and all(len(h) == 1 for h in hps)
    assert (tmp_path / "bank" / doc["data"]).is_file()
    fitted = load_model(load_config(cfg_path))
    file_cfg = derive(tmp_path, "lti-gp-file.json", "from_bank", gp={"source": "file", "path": str(bank)})
    loaded = load_model(load_config(file_cfg))
    q = np.linspace(-0.05, 4.0, 25)[:, None]
    for m in range(3):
        a, b = predict_hybrid(fitted, m, q), predict_hybrid(loaded, m, q)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def strip_timing(rows):
    return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows]


def test_fig8_summary_rows(tmp_path):
    assert main(["run", "--config", str(small_fig8(tmp_path))]) == 0
    out = tmp_path / "fig8"
    rows = read_csv(out / "summary.csv")
    assert list(rows[0].keys()) == SUMMARY_COLUMNS
    assert [r["controller"] for r in rows] == ["C_MINLP(N=6)", "C_NLP-endo(N=30)", "C_NLP-exo(N=30)"]
    assert len(read_csv(out / "per_seed.csv")) == 6
    grid = read_csv(out / "mode_grid.csv")
    assert len(grid) == 100 * 100
    assert {r["mode"] for r in grid} == {"1", "2", "3"}


def test_run_is_deterministic(tmp_path):
    a = small_fig8(tmp_path, "a", write_trajectories=True)
    b = small_fig8(tmp_path, "b", write_trajectories=True)
    assert main(["run", "--config", str(a)]) == 0
    assert main(["run", "--config", str(b)]) == 0
    for name in ("summary.csv", "per_seed.csv"):
        assert strip_timing(read_csv(tmp_path / "a" / name)) == strip_timing(read_csv(tmp_path / "b" / name))
    for name in ["mode_grid.csv"] + [f"trajectories/{p.name}" for p in (tmp_path / "a" / "trajectories").iterdir()]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_base_shifts_seeds(tmp_path):
    path = small_fig8(tmp_path, controllers=[{"name": "exo", "kind": "exo", "N": 10}])
    assert main(["run", "--config", str(path), "--seed-base", "7"]) == 0
    assert [r["seed"] for r in read_csv(tmp_path / "fig8" / "per_seed.csv")] == ["7", "8"]


def test_debug_trace(tmp_path):
    path = small_fig8(tmp_path, controllers=[{"name": "exo", "kind": "exo", "N": 10}], seeds=1)
    assert main(["run", "--config", str(path), "--debug-trace"]) == 0
    files = sorted((tmp_path / "fig8" / "trace" / "exo").iterdir())
    assert len(files) == 12
    assert files[0].read_text().startswith("iteration,objective,kkt")


def test_boundary_seven_rows(tmp_path):
    task = {"kind": "boundary", "T": 6, "points": [[0.0, 3.0], [0.0, -0.05], [4.0, -0.05], [4.0, 3.0]]}
    path = derive(tmp_path, "lti-boundary.json", "bnd", task=task, seeds=1,
                  gp={"source": "fit", "n_per_mode": 60, "seed": 0})
    cfg = load_config(path)
    rows = cmd_run(cfg)
    assert len(rows) == 7
    csv_rows = read_csv(tmp_path / "bnd" / "summary.csv")
    assert [r["controller"] for r in csv_rows] == [c.name for c in cfg.controllers]
    assert [r["shrink"] for r in csv_rows] == ["False"] + ["True"] * 6


# ---------------------------------------------------------------------------
# protocol and ablation
# ---------------------------------------------------------------------------

def test_protocol_and_single_alpha_ablation(tmp_path):
    path = small_protocol(tmp_path)
    assert main(["run", "--config", str(path)]) == 0
    out = tmp_path / "proto"
    runs = read_csv(out / "per_run.csv")
    assert list(runs[0].keys()) == PER_RUN_COLUMNS
    assert len(runs) == 3 * 2
    assert [r["run"] for r in runs[:3]] == ["1", "2", "3"]
    assert sorted(p.name for p in (out / "mapping").iterdir()) == ["proposed_seed0.json", "proposed_seed1.json"]
    grid = read_csv(out / "mode_grid.csv")
    assert {r["run_index"] for r in grid} == {"1", "2", "3"}
    assert "predicted" in grid[0]

    assert main(["ablate-alpha-min", "--config", str(path), "--alpha-min", "0.3"]) == 0
    abl = read_csv(out / "ablation.csv")
    assert list(abl[0].keys()) == ABLATION_COLUMNS
    assert len(abl) == len(runs)
    for a, r in zip(abl, runs):
        assert float(a["alpha_min"]) == 0.3
        a.pop("alpha_min")
        assert strip_timing([a]) == strip_timing([r])


def test_ablation_row_counts(tmp_path):
    cfg = load_config(small_protocol(tmp_path, seeds=1))
    rows = cmd_ablate_alpha_min(cfg, [0.1, 0.9])
    assert len(rows) == 2 * 3 * 1
    summary = read_csv(tmp_path / "proto" / "ablation_summary.csv")
    assert len(summary) == 2 * 3
    with pytest.raises(ConfigError):
        cmd_ablate_alpha_min(cfg, [1.5])
    with pytest.raises(ConfigError):
        cmd_ablate_alpha_min(load_config(small_fig8(tmp_path)), [0.5])
