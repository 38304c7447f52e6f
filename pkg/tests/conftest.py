import json
from importlib.resources import files
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from deplab.harness import ExperimentConfig, deep_merge

settings.register_profile("deplab", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("deplab")

CONFIG_DIR = Path(str(files("deplab") / "configs"))

# filled by the acceptance tests, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def packaged(name: str) -> dict:
    return json.loads((CONFIG_DIR / f"{name}.json").read_text())


def make_config(packaged_name: str, **overrides) -> ExperimentConfig:
    """A packaged config with nested overrides merged in.

    A shortened duration drops the scheduled events that no longer fit.
    """
    raw = deep_merge(packaged(packaged_name), overrides)
    raw.pop("sweep", None)
    T = raw["duration"]
    raw["perturbations"] = [p for p in raw.get("perturbations", []) if p["time"] <= T]
    raw["snapshots"] = {k: t for k, t in raw.get("snapshots", {}).items() if t <= T}
    if raw.get("weight_copy") and raw["weight_copy"]["time"] > T:
        raw["weight_copy"] = None
    return ExperimentConfig.from_dict(raw, base_dir=CONFIG_DIR)


@pytest.fixture(autouse=True)
def _isolated_output(tmp_path, monkeypatch):
    monkeypatch.setenv("DEPLAB_OUTPUT_DIR", str(tmp_path / "runs"))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
