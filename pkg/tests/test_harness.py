import json
import os

import numpy as np
import pytest

from qmonitor.dynamics import ConstantControl, lindblad_reference
from qmonitor.harness import (
    ConfigError, ExperimentConfig, available_recipes, built_in_recipes, read_csv, recipe_runs,
    run_experiment, write_csv,
)
from qmonitor.harness import runner
from qmonitor.harness.cli import main


def small(cfg, **extra):
    return cfg.merged({"noise": {"T": 0.05}, "realizations": 6, **extra})


def test_recipe_values():
    assert available_recipes() == ["fig2-dynamics", "fig3-5-filters", "fig6-covariance", "fig7-8-mmae", "fig9-control"]
    for name in available_recipes():
        for _, cfg in recipe_runs(name):
            m = cfg.model
            assert (m.gamma, m.omega_r, m.m, m.eta) == (10.0, 50.0, 1.0, 0.8)
            assert (cfg.noise.dt, cfg.noise.T) == (1e-3, 1.0)
            assert cfg.x0 == [0.0, 1.0, 0.0]
            assert cfg.realizations == 100
            if cfg.estimator.kind != "none":
                assert cfg.estimator.x0 == [1.0, 0.0, 0.0]
    fig2 = built_in_recipes("fig2-dynamics")
    assert fig2.controller.kind == "constant" and fig2.constant_omega() == 30.0
    assert built_in_recipes("fig7-8-mmae").estimator.multipliers == [0.8, 0.9, 1.0, 1.1, 1.2]
    fig9 = built_in_recipes("fig9-control")
    assert fig9.controller.kind == "lyapunov-estimated"
    assert [label for label, _ in recipe_runs("fig3-5-filters")] == ["qf", "ekf"]


def test_unknown_recipe_lists_available():
    with pytest.raises(ConfigError, match="fig2-dynamics"):
        built_in_recipes("fig10")


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"model": {"gama": 3}})
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig().merged({"colour": "red"})
    for bad in ({"model": {"eta": 1.2}}, {"model": {"gamma": -1}}, {"noise": {"dt": 0}},
                {"estimator": {"kind": "ukf"}}, {"x0": [0, 0, 2]}, {"realizations": 0},
                {"controller": {"kind": "lyapunov-estimated"}}, {"noise": {"scheme": "heun"}},
                {"estimator": {"kind": "mmae-ekf", "floor": 0.5}}, {"model": {"gamma": "ten"}}):
        with pytest.raises(ConfigError):
            ExperimentConfig().merged(bad)
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(str(path))


def test_config_round_trip_and_digest(tmp_path):
    cfg = built_in_recipes("fig9-control")
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    again = ExperimentConfig.load(str(path))
    assert again.to_dict() == cfg.to_dict()
    assert again.digest() == cfg.digest()
    assert cfg.merged({"output": "elsewhere", "workers": 4}).digest() == cfg.digest()
    assert cfg.merged({"noise": {"seed": 1}}).digest() != cfg.digest()


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    series = {"t": np.arange(5) * 1e-3, "a": rng.normal(size=5), "b": rng.normal(size=5) * 1e-300}
    path = tmp_path / "s.csv"
    write_csv(series, path)
    back = read_csv(path)
    assert list(back) == ["t", "a", "b"]
    for k in series:
        assert np.array_equal(back[k], series[k])
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")


def test_csv_empty_is_header_only(tmp_path):
    path = tmp_path / "e.csv"
    write_csv({"t": [], "x1": []}, path)
    assert path.read_text() == "t,x1\n"
    write_csv({}, tmp_path / "none.csv")
    assert (tmp_path / "none.csv").read_text() == "\n"


def test_noise_free_run_equals_lindblad():
    cfg = ExperimentConfig().merged({"model": {"eta": 0.0, "sigma_z2": 0.0}, "realizations": 3,
                                     "noise": {"T": 0.3}, "controller": {"omega": 30.0}})
    res = run_experiment(cfg)
    _, ref = lindblad_reference(cfg.params(), 30.0, cfg.x0, cfg.noise.dt, cfg.noise.T)
    for k in range(3):
        assert np.abs(res.columns["x1"][k] - ref[:, 0]).max() < 1e-12
        assert np.abs(res.columns["x3"][k] - ref[:, 2]).max() < 1e-12


def test_columns_per_configuration():
    base = {"noise": {"T": 0.02}, "realizations": 2}
    cols = lambda cfg: list(run_experiment(ExperimentConfig().merged({**base, **cfg})).columns)
    assert cols({}) == ["x1", "x2", "x3", "rho00_re", "rho01_re", "rho01_im", "rho11_re", "Omega"]
    assert "traceP" in cols({"estimator": {"kind": "ekf"}})
    assert "traceP" not in cols({"estimator": {"kind": "qf"}})
    mm = cols({"estimator": {"kind": "mmae-qf", "multipliers": [0.9, 1.0, 1.1]}})
    assert [c for c in mm if c.startswith("p")] == ["p1", "p2", "p3"]
    ctl = cols({"estimator": {"kind": "ekf"}, "controller": {"kind": "lyapunov-estimated"}})
    assert {"fidelity_truth_estimate", "fidelity_truth_target", "V"} <= set(ctl)


def test_run_shapes_and_meta(tmp_path):
    cfg = small(built_in_recipes("fig7-8-mmae"))
    res = run_experiment(cfg, out_dir=str(tmp_path))
    assert res.t.shape == (51,)
    assert all(v.shape == (6, 51) for v in res.columns.values())
    assert res.stats.n == 6
    meta = json.loads((tmp_path / "_meta.json").read_text())
    assert meta["config_sha256"] == cfg.digest()
    assert meta["master_seed"] == 0 and meta["failed_trajectories"] == []
    assert sorted(os.listdir(tmp_path))[:2] == ["_ensemble.csv", "_meta.json"]
    ens = read_csv(tmp_path / "_ensemble.csv")
    assert np.allclose(ens["x1_mean"], res.columns["x1"].mean(axis=0))
    t0 = read_csv(tmp_path / "traj_00000.csv")
    assert np.array_equal(t0["p3"], res.columns["p3"][0])


def test_references_written(tmp_path):
    run_experiment(small(built_in_recipes("fig2-dynamics")), out_dir=str(tmp_path))
    lind = read_csv(tmp_path / "_reference_lindblad.csv")
    uni = read_csv(tmp_path / "_reference_unitary.csv")
    norm = np.sqrt(uni["x1"] ** 2 + uni["x2"] ** 2 + uni["x3"] ** 2)
    # RK4 loses ~(omega dt)^6 / 144 of the norm per step
    assert np.abs(norm - 1).max() < 1e-7
    assert lind["x3"][-1] > uni["x3"][0]


def _tree_bytes(path):
    out = {}
    for root, _, files in os.walk(path):
        for f in files:
            full = os.path.join(root, f)
            out[os.path.relpath(full, path)] = open(full, "rb").read()
    return out


def test_byte_identical_across_runs_and_workers(tmp_path):
    cfg = small(built_in_recipes("fig9-control"), noise={"T": 0.05, "seed": 42}, realizations=7)
    run_experiment(cfg, out_dir=str(tmp_path / "a"))
    run_experiment(cfg, out_dir=str(tmp_path / "b"))
    run_experiment(cfg, out_dir=str(tmp_path / "c"), workers=3)
    a = _tree_bytes(tmp_path / "a")
    assert a == _tree_bytes(tmp_path / "b") == _tree_bytes(tmp_path / "c")
    assert len(a) == 9


def test_standard_error_scales_with_sqrt_n():
    cfg = built_in_recipes("fig2-dynamics").merged({"noise": {"T": 0.3}})
    se = [run_experiment(cfg.merged({"realizations": n})).stats.se["x1"][50:].mean() for n in (100, 400)]
    assert se[0] / se[1] == pytest.approx(2.0, rel=0.15)


class _NaNControl(ConstantControl):
    """Constant drive that breaks trajectory row 2 after a few steps."""

    def __call__(self, i, t, x):
        out = super().__call__(i, t, x)
        if i >= 5 and len(out) > 2:
            out[2] = np.nan
        return out


def test_failed_trajectory_skipped_and_reported(monkeypatch, tmp_path):
    monkeypatch.setattr(runner, "ConstantControl", _NaNControl)
    cfg = small(built_in_recipes("fig3-5-filters"))
    res = run_experiment(cfg, out_dir=str(tmp_path))
    assert res.failed.tolist() == [False, False, True, False, False, False]
    assert res.exit_code == 1 and res.stats.n == 5
    keep = np.array([0, 1, 3, 4, 5])
    assert np.allclose(res.stats.mean["x1"], res.columns["x1"][keep].mean(axis=0))
    assert (tmp_path / "traj_00002_failed.csv").exists()
    assert json.loads((tmp_path / "_meta.json").read_text())["failed_trajectories"] == [2]


def test_cli_exit_codes(monkeypatch, tmp_path, capsys):
    out = str(tmp_path / "ok")
    assert main(["simulate", "--realizations", "3", "--T", "0.02", "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "_ensemble.csv"))
    assert main(["recipe", "fig3-5-filters", "--realizations", "2", "--T", "0.02", "--out", out]) == 0
    assert os.path.isdir(os.path.join(out, "qf")) and os.path.isdir(os.path.join(out, "ekf"))
    assert main(["recipe"]) == 0
    assert "fig9-control" in capsys.readouterr().out
    assert main(["recipe", "nope", "--out", out]) == 2
    assert main(["simulate", "--eta", "2", "--out", out]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"bogus": 1}}))
    assert main(["simulate", "--config", str(cfg), "--out", out]) == 2
    monkeypatch.setattr(runner, "ConstantControl", _NaNControl)
    assert main(["simulate", "--realizations", "4", "--T", "0.02", "--out", str(tmp_path / "bad")]) == 1


def test_cli_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"noise": {"T": 0.02, "seed": 5}, "realizations": 2, "controller": {"alpha": 7.0}}))
    out = tmp_path / "r"
    assert main(["recipe", "fig9-control", "--config", str(cfg), "--seed", "9", "--out", str(out)]) == 0
    meta = json.loads((out / "_meta.json").read_text())
    c = meta["config"]
    # recipe supplies the controller kind, the file alpha and horizon, the flag the seed
    assert c["controller"]["kind"] == "lyapunov-estimated"
    assert c["controller"]["alpha"] == 7.0
    assert c["noise"]["T"] == 0.02 and c["noise"]["seed"] == 9
