import json
import os

import numpy as np
import pytest

from switchgeo import _io, harness
from switchgeo.errors import ConfigError
from switchgeo.louis import default_sigma_g_grid


def tiny_curvature(tmp_path):
    return {"experiment": "curvature_gap", "seed": 1, "output_dir": str(tmp_path / "curv"),
            "data": {"T_train": 1500, "burn_in": 100, "sigma_proc": [0.1], "sigma_obs": [0.1, 0.3]},
            "train": {"tau": [4], "n_init": 1, "M": 4, "P": 2, "batch_size": 4, "bptt_len": 20, "epochs": 2,
                      "batches_per_epoch": 3},
            "louis": {"T": 30, "n_particles": 16, "n_draws": 4}}


def tiny_saem(tmp_path):
    return {"experiment": "saem_misalignment", "seed": 2, "output_dir": str(tmp_path / "saem"),
            "saem_data": {"T": 300, "burn_in": 50, "n_seq": 2},
            "pretrain": {"sigma_proc": [0.1], "sigma_obs": [0.1], "T_train": 1500, "M": 4, "P": 2,
                         "batch_size": 4, "bptt_len": 20, "epochs": 2, "batches_per_epoch": 3},
            "saem": {"window_lens": [16], "iterations": 1, "windows_per_iter": 4, "n_particles": 16, "n_smooth": 2,
                     "heldout_window_count": 4},
            "qoi": {"T": 1200, "burn_in": 100}}


def test_empty_toy_config_is_fully_defaulted():
    cfg = harness.validate_config({"experiment": "toy_mechanism"})
    assert cfg["toy"] == {"a0": 0.9, "a1": 0.6, "sigma": 0.15, "T": 600, "n_seeds": 20, "sigma_g": None}
    assert cfg["schema_version"] == harness.SCHEMA_VERSION and cfg["seed"] == 0
    assert "train" not in cfg


def test_curvature_and_saem_defaults():
    c = harness.validate_config({"experiment": "curvature_gap"})
    assert c["train"]["tau"] == [4, 8, 16, 32, 64] and c["train"]["M"] == 30 and c["train"]["P"] == 10
    assert c["data"]["sigma_proc"] == [0.1, 0.3, 0.5] and c["diagnostics"]["k"] == 50
    s = harness.validate_config({"experiment": "saem_misalignment"})
    assert s["saem"]["window_lens"] == [16, 32, 64, 128, 200] and s["saem"]["heldout_window_count"] == 120
    assert s["saem"]["blend"] == 0.25 and s["saem"]["ridge"] == 1e-2 and s["qoi"]["n_bins"] == 30


def test_config_errors_are_aggregated_with_pointers():
    with pytest.raises(ConfigError) as err:
        harness.validate_config({"experiment": "toy_mechanism", "toy": {"sigma_g": [0.1, -0.2], "bogus": 1},
                                 "extra": True})
    ptrs = {p for p, _ in err.value.errors}
    assert {"/toy/sigma_g", "/toy/bogus", "/extra"} <= ptrs
    with pytest.raises(ConfigError) as err:
        harness.validate_config({"experiment": "nope"})
    assert err.value.errors[0][0] == "/experiment"
    with pytest.raises(ConfigError):
        harness.validate_config({"experiment": "toy_mechanism", "schema_version": 99})
    with pytest.raises(ConfigError):
        harness.validate_config({"experiment": "toy_mechanism", "train": {}})


def test_checkpoint_references_must_exist(tmp_path):
    with pytest.raises(ConfigError) as err:
        harness.validate_config({"experiment": "curvature_gap",
                                 "checkpoints": [{"path": str(tmp_path / "missing"), "sigma_proc": 0.1,
                                                  "sigma_obs": 0.1, "tau": 4}]})
    assert err.value.errors[0][0].startswith("/checkpoints/0")


def test_toy_run_shape_and_rerun_determinism(tmp_path):
    s1, m1 = harness.run_experiment({"experiment": "toy_mechanism"}, tmp_path / "a")
    a = json.loads(m1.read_text())
    s2, m2 = harness.run_experiment({"experiment": "toy_mechanism"}, tmp_path / "a")
    header, rows = _io.read_csv(tmp_path / "a" / "toy" / "toy_sweep.csv")
    assert header == harness.TOY_COLUMNS and len(rows) == 500
    assert sorted({float(r[0]) for r in rows}) == pytest.approx(list(default_sigma_g_grid()), rel=1e-15)
    b = json.loads(m2.read_text())
    assert [(o["path"], o["sha256"]) for o in a["outputs"]] == [(o["path"], o["sha256"]) for o in b["outputs"]]
    assert a["config_sha256"] == b["config_sha256"] and a["status"] == "ok"
    assert set(a["versions"]) >= {"switchgeo", "numpy", "scipy", "numba", "python"}

    written = harness.emit_plot_data(tmp_path / "a")
    fig = tmp_path / "a" / "plots" / "fig1a.csv"
    h, r = _io.read_csv(fig)
    assert h == ["sigma_g", "seed", "entropy", "mir", "log10_tr"] and len(r) == 500
    schema = json.loads((tmp_path / "a" / "plots" / "fig1a.schema.json").read_text())
    assert [c["name"] for c in schema["columns"]] == h and schema["n_rows"] == 500
    assert fig in written


def manifest_covers_everything(root):
    man = json.loads((root / "manifest.json").read_text())
    listed = {o["path"] for o in man["outputs"]} | {p["path"] for p in man.get("plots", [])}
    on_disk = {str(p.relative_to(root)) for p in root.rglob("*") if p.is_file()} - {"manifest.json"}
    return on_disk == listed, on_disk - listed


def test_emit_plots_failures(tmp_path):
    with pytest.raises(harness.MissingArtifacts):
        harness.emit_plot_data(tmp_path)
    harness.run_experiment({"experiment": "toy_mechanism", "toy": {"n_seeds": 2, "sigma_g": [0.1, 0.5]}},
                           tmp_path / "r")
    os.remove(tmp_path / "r" / "toy" / "toy_sweep.csv")
    with pytest.raises(harness.MissingArtifacts) as err:
        harness.emit_plot_data(tmp_path / "r")
    assert any("toy_sweep.csv" in m for m in err.value.missing)


def test_curvature_gap_pipeline(tmp_path):
    cfg = tiny_curvature(tmp_path)
    summary, man = harness.run_experiment(cfg)
    root = tmp_path / "curv"
    assert summary == {"n_checkpoints": 2}
    header, rows = _io.read_csv(root / "curvature_gap" / "curvature_gap.csv")
    assert header == harness.CURV_COLUMNS and len(rows) == 2
    for r in rows:
        row = dict(zip(header, r))
        assert np.isfinite(float(row["g_Q"])) and 0 <= float(row["H_c"]) <= 2
        assert float(row["tr_itf"]) > 0
    harness.emit_plot_data(root)
    ok, orphans = manifest_covers_everything(root)
    assert ok, orphans
    first = {o["path"]: o["sha256"] for o in json.loads(man.read_text())["outputs"]}
    _, man2 = harness.run_experiment(cfg)
    second = {o["path"]: o["sha256"] for o in json.loads(man2.read_text())["outputs"]}
    assert first == second


def test_curvature_gap_from_existing_checkpoints(tmp_path):
    cfg = tiny_curvature(tmp_path)
    harness.run_experiment(cfg)
    ck = tmp_path / "curv" / "checkpoints" / "sp0.1_so0.1_tau4_init0"
    cfg2 = dict(cfg, output_dir=str(tmp_path / "reuse"),
                checkpoints=[{"path": str(ck), "sigma_proc": 0.1, "sigma_obs": 0.1, "tau": 4}])
    summary, man = harness.run_experiment(cfg2)
    assert summary == {"n_checkpoints": 1}
    a = _io.read_csv(tmp_path / "curv" / "curvature_gap" / "curvature_gap.csv")[1][0]
    b = _io.read_csv(tmp_path / "reuse" / "curvature_gap" / "curvature_gap.csv")[1][0]
    assert a[:3] == b[:3]  # same checkpoint, same regime, same seed key -> identical H_c and g_Q
    assert json.loads(man.read_text())["inputs"][0]["sha256"]


def test_saem_pipeline(tmp_path):
    summary, _ = harness.run_experiment(tiny_saem(tmp_path))
    root = tmp_path / "saem"
    assert summary == {"n_rows": 3}
    header, rows = _io.read_csv(root / "saem" / "saem_results.csv")
    assert header == harness.SAEM_COLUMNS
    by_conf = {r[2]: dict(zip(header, r)) for r in rows}
    assert set(by_conf) == {"baseline", "calib", "full"}
    # calib only touches the noise, so hard-gated QoIs match baseline exactly
    for k in ("d_stsp", "le_error", "lambda1"):
        assert by_conf["calib"][k] == by_conf["baseline"][k]
    assert by_conf["baseline"]["sigma_proc"] == by_conf["baseline"]["sigma_obs"]
    harness.emit_plot_data(root)
    h, r = _io.read_csv(root / "plots" / "fig1c.csv")
    assert h == ["ckpt", "L", "config", "evidence", "d_stsp", "le_error"] and len(r) == 3
    ok, orphans = manifest_covers_everything(root)
    assert ok, orphans


def test_stratified_association():
    rng = np.random.default_rng(0)
    rows = []
    for sp in (0.1, 0.3):
        for so in (0.0, 0.1, 0.3):
            for _ in range(6):
                h = rng.uniform(0, 3)
                rows.append([f"{h:.3f}", h, 2 * h + rng.normal(0, 0.1), so, sp])
    table = (["ckpt", "H_c", "g_Q", "sigma_obs", "sigma_proc"], [[str(v) for v in r] for r in rows])
    out = harness.stratified_association(table, n_boot=200)
    assert [r[0] for r in out] == [0.1, 0.3]
    assert all(r[1] == 12 for r in out)  # sigma_obs = 0 rows dropped
    assert all(r[5] > 0.9 for r in out)
