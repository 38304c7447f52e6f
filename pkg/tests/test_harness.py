import json
import math

import numpy as np
import pytest
from conftest import CONFIG_DIR, make_config, packaged

from deplab.controller import WeightSnapshot
from deplab.harness import (
    ConfigError,
    ExperimentConfig,
    RunLog,
    SimulationError,
    expand_grid,
    load_config,
    load_sweep_configs,
    output_root,
    run_experiment,
    schedule_recall,
    sweep,
    window_variance,
)


def short(name="s", plant=None, duration=2.0, **kw):
    raw = {"name": name, "duration": duration, "plant": plant or {"type": "chain", "n": 4, "coupling_strength": 2.0},
           "plasticity": {"rule": "dep", "tau": 0.4, "kappa": 2.2}}
    raw.update(kw)
    return ExperimentConfig.from_dict(raw)


def all_packaged():
    return sorted(CONFIG_DIR.glob("*.json"))


@pytest.mark.parametrize("path", all_packaged(), ids=lambda p: p.stem)
def test_packaged_configs_round_trip(path):
    for raw in expand_grid(json.loads(path.read_text())):
        cfg = ExperimentConfig.from_dict(raw, base_dir=path.parent)
        again = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())), base_dir=path.parent)
        assert again == cfg and again.to_dict() == cfg.to_dict()


def test_shipped_experiment_set():
    names = {p.stem for p in all_packaged()}
    assert {"crawl-parameters", "hexapod-m1", "hexapod-m2", "wheel", "two-agent-wheel",
            "rule-comparison-dep", "rule-comparison-dhl"} <= names


@pytest.mark.parametrize("change,match", [
    ({"colour": 1}, "unknown config keys"),
    ({"perturbations": [{"kind": "kick", "time": 5.0, "index": 0, "magnitude": 1.0}]}, "outside"),
    ({"perturbations": [{"kind": "kick", "time": -0.5, "index": 0, "magnitude": 1.0}]}, "non-negative"),
    ({"perturbations": [{"kind": "kick", "time": 1.0, "index": 9, "magnitude": 1.0}]}, "index"),
    ({"snapshots": {"a": 3.0}}, "outside"),
    ({"recall": [{"snapshot": "a", "time": 9.0}]}, "outside"),
    ({"dt": 0.03}, "multiple"),
    ({"log_interval": 0.03}, "log_interval"),
    ({"plasticity": {"rule": "dep", "dt": 0.01}}, "differs"),
    ({"plasticity": {"rule": "oja"}}, "plasticity"),
    ({"plant": {"type": "chain", "n": 4, "stiffness": 1e6}}, "plant"),
    ({"model": {"type": "matrix", "M": [[1.0, 0.0]]}}, "model"),
    ({"model": "hexapod-m9"}, "model"),
    ({"delay": {"indices": [0], "delay": 0.03}}, "multiple"),
    ({"delay": {"indices": [7], "delay": 0.2}}, "delayed"),
    ({"weight_copy": {"time": 1.0}}, "weight_copy"),
    ({"sweep": {"plasticity.kappa": [1, 2]}}, "sweep"),
])
def test_validation_errors(change, match):
    with pytest.raises(ConfigError, match=match):
        short(**change)


def test_missing_keys():
    with pytest.raises(ConfigError, match="missing"):
        ExperimentConfig.from_dict({"name": "x", "duration": 1.0, "plant": {"type": "linear", "n": 1}})


def test_expand_grid():
    raw = packaged("wheel")
    grid = expand_grid(raw)
    assert len(grid) == 10
    assert grid[0]["name"] == "wheel_inertia=0.02_zero_commands=False"
    assert grid[-1]["plant"]["inertia"] == 10 and grid[-1]["zero_commands"] is True
    assert expand_grid({"name": "a"}) == [{"name": "a"}]


def test_output_root_precedence(tmp_path, monkeypatch):
    cfg = short(output={"dir": "elsewhere"})
    assert output_root(cfg, tmp_path / "x") == tmp_path / "x"
    monkeypatch.setenv("DEPLAB_OUTPUT_DIR", str(tmp_path / "env"))
    assert output_root(cfg) == tmp_path / "env"
    monkeypatch.delenv("DEPLAB_OUTPUT_DIR")
    assert output_root(cfg).name == "elsewhere"


def test_schedule_exactness():
    times = [0.0, 0.3, 0.7, 1.26, 1.98]
    cfg = short(perturbations=[{"kind": "kick", "time": t, "index": 1, "magnitude": 0.5} for t in times],
                snapshots={"a": 0.46, "b": 2.0})
    log = run_experiment(cfg, write=False)
    steps = [e["step"] for e in log.events if e["kind"] == "perturbation"]
    assert steps == [round(t / 0.02) for t in times]
    snaps = {e["detail"]["id"]: e["step"] for e in log.events if e["kind"] == "snapshot"}
    assert snaps == {"a": 23, "b": 100}


def test_log_shape_and_time_axis():
    cfg = short(duration=3.0)
    log = run_experiment(cfg, write=False)
    assert len(log.t) == 150 and np.all(np.diff(log.t) > 0)
    assert log.x.shape == (150, 4) and log.y.shape == (150, 4)
    assert len(log.weight_t) == 6 and log.weights[0].shape == (6, 4, 4)


@pytest.mark.parametrize("name", ["rule-comparison-dep", "crawl-parameters"])
def test_logged_weights_respect_normalization(name):
    cfg = make_config(name, duration=30.0)
    log = run_experiment(cfg, write=False)
    kappa = cfg.plasticity.kappa
    if cfg.plasticity.normalization.value == "global":
        assert np.all(np.linalg.norm(log.weights[0], axis=(1, 2)) <= kappa)
    else:
        assert np.all(np.linalg.norm(log.weights[0], axis=2) <= kappa)
    assert np.abs(log.weights[0]).max() > 0


def test_replay_is_bit_identical(tmp_path):
    cfg = make_config("hexapod-m1", duration=20.0, snapshots={"a": 10.0})
    a = run_experiment(cfg, out_dir=tmp_path / "a").path
    b = run_experiment(cfg, out_dir=tmp_path / "b").path
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir()) and "steps.csv" in files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_run_log_save_load_round_trip(tmp_path):
    log = run_experiment(make_config("hexapod-m2", duration=10.0, snapshots={"a": 5.0}), out_dir=tmp_path)
    back = RunLog.load(log.path)
    for attr in ("t", "x", "y", "ytd_norm", "dyd_norm", "obs", "contacts", "weight_t"):
        assert np.array_equal(getattr(back, attr), getattr(log, attr)), attr
    for a in range(log.agents):
        assert np.array_equal(back.weights[a], log.weights[a])
        assert np.array_equal(back.thresholds[a], log.thresholds[a])
        assert np.array_equal(back.models[a], log.models[a])
    assert back.events == log.events
    assert np.array_equal(back.snapshots["a"][0].C, log.snapshots["a"][0].C)
    assert back.summary == log.summary
    summary = json.loads((log.path / "summary.json").read_text())
    assert summary["schema"] == 1
    header = (log.path / "steps.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "t"


def test_wheel_log_round_trip(tmp_path):
    log = run_experiment(make_config("two-agent-wheel", duration=4.0), out_dir=tmp_path)
    back = RunLog.load(log.path)
    assert back.agents == 2 and back.obs_names == ["omega", "phi"]
    assert np.array_equal(back.observable("omega"), log.observable("omega"))


@pytest.mark.parametrize("plant", [
    {"type": "linear", "n": 3},
    {"type": "linear", "n": 2, "theta": 0.3},
    {"type": "chain", "n": 18, "coupling_strength": 5.0},
    {"type": "wheel", "agents": 1, "inertia": 1.0},
    {"type": "wheel", "agents": 2, "inertia": 10.0},
])
@pytest.mark.parametrize("rule", ["dep", "dhl", "hebb"])
def test_least_biased_start_stays_at_rest(plant, rule):
    cfg = ExperimentConfig.from_dict({"name": "z", "duration": 20.0, "plant": plant,
                                      "plasticity": {"rule": rule, "kappa": 3.0, "tau_h": 0.4}})
    log = run_experiment(cfg, write=False)
    assert not log.x.any() and not log.y.any() and not log.weights[0].any()


def test_zero_kick_is_a_no_op():
    base = make_config("rule-comparison-dep", duration=20.0, perturbations=[])
    ref = run_experiment(base, write=False)
    kicked = run_experiment(make_config("rule-comparison-dep", duration=20.0, perturbations=[
        {"kind": "kick", "time": 0.0, "index": 0, "magnitude": 0.0}]), write=False)
    assert np.array_equal(ref.x, kicked.x) and np.array_equal(ref.weights[0], kicked.weights[0])


def test_kick_releases_activity_and_mirror_kick_mirrors_it():
    runs = [run_experiment(make_config("rule-comparison-dep", duration=20.0, perturbations=[
        {"kind": "kick", "time": 0.0, "index": 0, "magnitude": m}]), write=False) for m in (5.0, -5.0)]
    assert runs[0].x.var() > 1e-3
    assert np.array_equal(runs[0].x, -runs[1].x)
    assert np.array_equal(runs[0].weights[0], runs[1].weights[0])


def test_frozen_initial_weights_never_change():
    rng = np.random.default_rng(0)
    C = rng.normal(size=(4, 4)).tolist()
    cfg = short(duration=5.0, init={"C": C, "h": [0.1, 0, 0, -0.1], "frozen": True},
                perturbations=[{"kind": "kick", "time": 0.0, "index": 0, "magnitude": 3.0}])
    log = run_experiment(cfg, write=False)
    assert all(np.array_equal(W, np.array(C)) for W in log.weights[0])


def test_unknown_snapshot_rejected():
    cfg = short(recall=[{"snapshot": "nope", "time": 0.0}])
    with pytest.raises(ConfigError, match="unknown snapshot"):
        schedule_recall(cfg, {"a": [WeightSnapshot(np.eye(4), np.zeros(4))]}, write=False)
    with pytest.raises(ConfigError):
        schedule_recall(short(), {}, write=False)


def test_recall_at_zero_equals_frozen_run():
    rng = np.random.default_rng(4)
    C, h = rng.normal(size=(4, 4)), rng.normal(size=4) * 0.1
    kick = [{"kind": "kick", "time": 0.0, "index": 2, "magnitude": 2.0}]
    frozen = run_experiment(short(duration=6.0, perturbations=kick,
                                  init={"C": C.tolist(), "h": h.tolist(), "frozen": True}), write=False)
    recalled = schedule_recall(short(duration=6.0, perturbations=kick, recall=[{"snapshot": "a", "time": 0.0}]),
                               {"a": [WeightSnapshot(C, h)]}, write=False)
    assert np.array_equal(frozen.x, recalled.x) and np.array_equal(frozen.y, recalled.y)
    assert [e["kind"] for e in recalled.events][:2] == ["perturbation", "recall"]


def test_recall_from_rest_stays_at_rest():
    src = run_experiment(make_config("hexapod-m1", duration=30.0, snapshots={"gait": 30.0}), write=False)
    cfg = make_config("hexapod-m1", duration=20.0, perturbations=[], snapshots={},
                      recall=[{"snapshot": "gait", "time": 0.0}])
    rest = schedule_recall(cfg, src, write=False)
    assert not rest.x.any()
    cfg = make_config("hexapod-m1", duration=20.0, snapshots={}, recall=[{"snapshot": "gait", "time": 0.0}])
    assert schedule_recall(cfg, src, write=False).x.var() > 1e-3


def test_weight_copy_installs_source_weights():
    cfg = make_config("rule-comparison-dhl", duration=12.0)
    log = run_experiment(cfg, write=False)
    ev = [e for e in log.events if e["kind"] == "weight_copy"]
    assert len(ev) == 1 and ev[0]["step"] == 500
    i = int(np.searchsorted(log.weight_t, 10.0))
    assert not log.weights[0][i - 1].any() and log.weights[0][i].any()


def test_sweep_single_config_matches_run():
    cfg = short(duration=4.0, perturbations=[{"kind": "kick", "time": 0.0, "index": 0, "magnitude": 1.0}])
    rows = sweep([cfg])
    summary = run_experiment(cfg, write=False).summary
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    assert {k: rows[0][k] for k in summary} == summary


def test_sweep_records_failures_and_continues(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    good = tmp_path / "good.json"
    good.write_text(json.dumps(short(duration=2.0).to_dict()))
    recall = tmp_path / "recall.json"
    recall.write_text(json.dumps(short(duration=2.0, name="r", recall=[{"snapshot": "x", "time": 0.0}]).to_dict()))
    invalid = tmp_path / "invalid.json"
    invalid.write_text(json.dumps({"name": "inv", "duration": 1.0, "plant": {"type": "blob"}, "plasticity": {}}))
    configs = load_sweep_configs([bad, good, recall, invalid])
    rows = sweep(configs, csv_path=tmp_path / "table.csv")
    assert [r["status"] for r in rows] == ["failed", "ok", "failed", "failed"]
    assert "unknown snapshot" in rows[2]["error"]
    assert (tmp_path / "table.csv").read_text().count("\n") == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_state_aborts_with_step_index():
    # two enormous kicks overflow the joint velocity at step 10; the NaN reaches the sensors one step later
    kicks = [{"kind": "kick", "time": 0.2, "index": 0, "magnitude": 1.7e308}] * 2
    with pytest.raises(SimulationError) as err:
        run_experiment(short(perturbations=kicks), write=False)
    assert err.value.step == 11 and "step 11" in str(err.value)


def test_window_variance():
    x = np.zeros((1000, 2))
    x[250:500] = np.array([1.0, -1.0])
    wv = window_variance(x, 0.02, 5.0)
    assert wv.shape == (4, 2)
    np.testing.assert_allclose(wv[:, 0], [5.0, 10.0, 15.0, 20.0])
    assert wv[1, 1] == 0.0 and wv[0, 1] == 0.0


def test_load_config_relative_paths(tmp_path):
    src = tmp_path / "src.json"
    src.write_text(json.dumps(make_config("rule-comparison-dep", duration=11.0).to_dict()))
    raw = make_config("rule-comparison-dhl", duration=11.0).to_dict()
    raw["weight_copy"] = {"time": 10.0, "source": "src.json"}
    (tmp_path / "dhl.json").write_text(json.dumps(raw))
    log = run_experiment(load_config(tmp_path / "dhl.json"), write=False)
    assert any(e["kind"] == "weight_copy" and e["detail"]["source"] == "rule-comparison-dep" for e in log.events)
    assert not math.isnan(log.summary["activity_variance"])
