"""Experiment orchestration: configs, the simulation loop, run logs and sweeps."""
from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import Agent
from .analysis import SpectrumSample, phase_matrix, spectrum
from .controller import WeightSnapshot
from .inverse_model import (
    DelayedSensorConfig,
    DelayLine,
    build_guided_model,
    learn_model_offline,
    preset_model,
)
from .plants import Perturbation, Plant, make_plant
from .plasticity import NonFiniteError, PlasticityParams

SCHEMA_VERSION = 1
OUTPUT_ENV = "DEPLAB_OUTPUT_DIR"
DEFAULT_OUTPUT = "runs"
VARIANCE_WINDOW = 5.0  # seconds, for windowed activity variance

CONFIG_KEYS = {
    "name", "duration", "dt", "plant", "plasticity", "model", "delay", "perturbations",
    "snapshots", "recall", "weight_copy", "init", "zero_commands", "log_interval",
    "metrics_window", "output", "sweep", "description",
}


class ConfigError(ValueError):
    pass


class SimulationError(FloatingPointError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------- config

@dataclass
class RecallStep:
    snapshot: str
    time: float


@dataclass
class ExperimentConfig:
    name: str
    duration: float
    plant: dict
    plasticity: PlasticityParams
    dt: float = 0.02
    model: dict = field(default_factory=lambda: {"type": "identity"})
    delay: DelayedSensorConfig | None = None
    perturbations: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)  # id -> time
    recall: list = field(default_factory=list)
    weight_copy: dict | None = None
    init: dict | None = None
    zero_commands: bool = False
    log_interval: float = 0.5
    metrics_window: float = 30.0
    output: dict = field(default_factory=dict)
    description: str = ""
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def step_of(self, t: float) -> int:
        return int(round(t / self.dt))

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        d = copy.deepcopy(d)
        unknown = set(d) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "sweep" in d:
            raise ConfigError("config carries a sweep grid; expand it with expand_grid first")
        for key in ("name", "duration", "plant", "plasticity"):
            if key not in d:
                raise ConfigError(f"config is missing {key!r}")
        dt = float(d.get("dt", 0.02))
        pl = dict(d["plasticity"])
        if "dt" in pl and float(pl["dt"]) != dt:
            raise ConfigError(f"plasticity dt {pl['dt']} differs from experiment dt {dt}")
        pl["dt"] = dt
        try:
            params = PlasticityParams.from_dict(pl)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"plasticity: {e}") from None
        model = d.get("model", {"type": "identity"})
        if isinstance(model, str):
            model = {"type": "identity"} if model == "identity" else {"type": "preset", "name": model}
        delay = d.get("delay")
        if delay is not None:
            delay = DelayedSensorConfig(tuple(int(i) for i in delay["indices"]), float(delay["delay"]))
        try:
            perts = [p if isinstance(p, Perturbation) else Perturbation(**p) for p in d.get("perturbations", [])]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"perturbation: {e}") from None
        snaps = d.get("snapshots", {})
        if isinstance(snaps, list):
            snaps = {f"s{i}": t for i, t in enumerate(snaps)}
        recall = [r if isinstance(r, RecallStep) else RecallStep(str(r["snapshot"]), float(r["time"]))
                  for r in d.get("recall", [])]
        cfg = cls(
            name=str(d["name"]), duration=float(d["duration"]), plant=dict(d["plant"]), plasticity=params,
            dt=dt, model=dict(model), delay=delay, perturbations=perts,
            snapshots={str(k): float(v) for k, v in snaps.items()}, recall=recall,
            weight_copy=d.get("weight_copy"), init=d.get("init"),
            zero_commands=bool(d.get("zero_commands", False)),
            log_interval=float(d.get("log_interval", 0.5)),
            metrics_window=float(d.get("metrics_window", 30.0)),
            output=dict(d.get("output", {})), description=str(d.get("description", "")),
            base_dir=Path(base_dir),
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        pl = self.plasticity.to_dict()
        pl.pop("dt")
        d = {
            "name": self.name, "duration": self.duration, "dt": self.dt, "plant": copy.deepcopy(self.plant),
            "plasticity": pl, "model": copy.deepcopy(self.model),
            "delay": None if self.delay is None else {"indices": list(self.delay.indices), "delay": self.delay.delay},
            "perturbations": [p.to_dict() for p in self.perturbations],
            "snapshots": dict(self.snapshots),
            "recall": [{"snapshot": r.snapshot, "time": r.time} for r in self.recall],
            "weight_copy": copy.deepcopy(self.weight_copy), "init": copy.deepcopy(self.init),
            "zero_commands": self.zero_commands, "log_interval": self.log_interval,
            "metrics_window": self.metrics_window, "output": dict(self.output),
            "description": self.description,
        }
        return d

    def validate(self):
        if not self.name:
            raise ConfigError("name must be non-empty")
        if not (self.dt > 0 and self.duration > 0):
            raise ConfigError("dt and duration must be positive")
        if abs(self.duration / self.dt - self.steps) > 1e-6:
            raise ConfigError(f"duration {self.duration} is not a multiple of dt {self.dt}")
        li = self.log_interval / self.dt
        if self.log_interval <= 0 or abs(li - round(li)) > 1e-9:
            raise ConfigError(f"log_interval {self.log_interval} must be a positive multiple of dt")

        def check_time(t, what):
            if not (0.0 <= t <= self.duration):
                raise ConfigError(f"{what} at t={t} lies outside [0, {self.duration}]")

        try:
            plant = make_plant(self.plant, self.dt)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"plant: {e}") from None
        for p in self.perturbations:
            check_time(p.time, f"{p.kind.value} perturbation")
            if not 0 <= p.index < plant.n_sensors:
                raise ConfigError(f"perturbation index {p.index} outside plant with {plant.n_sensors} channels")
        for sid, t in self.snapshots.items():
            check_time(t, f"snapshot {sid!r}")
        for r in self.recall:
            check_time(r.time, f"recall of {r.snapshot!r}")
        if self.weight_copy is not None:
            if "time" not in self.weight_copy or "source" not in self.weight_copy:
                raise ConfigError("weight_copy needs 'time' and 'source'")
            check_time(float(self.weight_copy["time"]), "weight copy")
        if self.delay is not None:
            try:
                self.delay.steps(self.dt)
            except ValueError as e:
                raise ConfigError(str(e)) from None
            n_base = min(s.stop - s.start for s in plant.agent_sensors)
            if any(not 0 <= i < n_base for i in self.delay.indices):
                raise ConfigError(f"delayed sensor index outside the {n_base} base channels")
        try:
            for sl_s, sl_m in zip(plant.agent_sensors, plant.agent_motors):
                self._model_shape_check(sl_s.stop - sl_s.start, sl_m.stop - sl_m.start)
        except (KeyError, IndexError, ValueError) as e:
            raise ConfigError(f"model: {e}") from None

    def _model_shape_check(self, n_base: int, m: int):
        n = n_base + (len(self.delay.indices) if self.delay else 0)
        kind = self.model.get("type")
        if kind in ("identity", "learned"):
            return
        M = static_model(self.model, m, n)
        if M.shape != (m, n):
            raise ValueError(f"model shape {M.shape} does not match ({m}, {n})")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return ExperimentConfig.from_dict(json.loads(path.read_text()), base_dir=path.parent)


def _set_dotted(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def expand_grid(raw: dict) -> list[dict]:
    """Expand ``{"sweep": {"dotted.key": [values, ...]}}`` into one config per grid point."""
    grid = raw.get("sweep")
    if not grid:
        return [copy.deepcopy(raw)]
    base = {k: v for k, v in raw.items() if k != "sweep"}
    keys = list(grid)
    out = []
    for values in itertools.product(*(grid[k] for k in keys)):
        d = copy.deepcopy(base)
        for k, v in zip(keys, values):
            _set_dotted(d, k, v)
        d["name"] = base["name"] + "".join(f"_{k.split('.')[-1]}={v}" for k, v in zip(keys, values))
        d.setdefault("output", {})["grid"] = dict(zip(keys, values))
        out.append(d)
    return out


# ---------------------------------------------------------------- models

def static_model(spec: dict, m: int, n: int) -> np.ndarray:
    kind = spec.get("type")
    if kind == "identity":
        return np.eye(m, n)
    if kind == "preset":
        return preset_model(spec["name"], m, n)
    if kind == "entries":
        return build_guided_model(spec["entries"], m, n)
    if kind == "matrix":
        return np.array(spec["M"], dtype=np.float64, ndmin=2)
    raise KeyError(f"unknown model type {kind!r}")


def babble_samples(config: ExperimentConfig, duration: float = 20.0, amplitude: float = 0.5, periods=None):
    """Drive a fresh plant with slow sinusoids and collect ``(xdot', ydot)`` pairs per agent.

    The sensor derivative is taken one step after the command derivative, the
    first step at which the plant can show the command's effect.
    """
    plant = make_plant(config.plant, config.dt)
    dt = config.dt
    n_steps = int(round(duration / dt))
    m_total = plant.n_motors
    if periods is None:
        periods = [4.0 + 1.7 * i for i in range(m_total)]
    periods = np.asarray(periods, dtype=np.float64)
    phases = np.linspace(0.0, np.pi, m_total, endpoint=False)
    lines = [DelayLine(config.delay, s.stop - s.start, dt) for s in plant.agent_sensors]
    xs, ys = [], []
    for k in range(n_steps + 1):
        xb = plant.sensors()
        xs.append([ln.push(xb[s]) for ln, s in zip(lines, plant.agent_sensors)])
        y = amplitude * np.sin(2 * np.pi * k * dt / periods + phases)
        ys.append(y)
        plant.step(y)
    samples = []
    for a, sm in enumerate(plant.agent_motors):
        X = np.array([x[a] for x in xs])
        Y = np.array([y[sm] for y in ys])
        xdot = np.diff(X, axis=0) / dt
        ydot = np.diff(Y, axis=0) / dt
        samples.append(list(zip(xdot[1:], ydot[:-1])))
    return samples


def build_models(config: ExperimentConfig, plant: Plant) -> list[np.ndarray]:
    dims = []
    for s, sm in zip(plant.agent_sensors, plant.agent_motors):
        n = (s.stop - s.start) + (len(config.delay.indices) if config.delay else 0)
        dims.append((sm.stop - sm.start, n))
    if config.model.get("type") == "learned":
        opts = dict(config.model.get("babble", {}))
        samples = babble_samples(config, **opts)
        return [learn_model_offline(s).M for s in samples]
    return [static_model(config.model, m, n) for m, n in dims]


# ---------------------------------------------------------------- run log

@dataclass
class RunLog:
    config: dict
    dt: float
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    ytd_norm: np.ndarray
    dyd_norm: np.ndarray
    obs_names: list
    obs: np.ndarray
    contacts: np.ndarray | None
    agent_sensors: list  # (start, stop) per agent in x
    agent_motors: list
    models: list  # M per agent
    weight_t: np.ndarray
    weights: list  # per agent: array (rows, m, n)
    thresholds: list  # per agent: array (rows, m)
    raw_norms: list  # per agent: array (rows,)
    events: list
    snapshots: dict  # id -> list of WeightSnapshot (one per agent)
    summary: dict = field(default_factory=dict)
    path: Path | None = None

    @property
    def agents(self) -> int:
        return len(self.models)

    def window(self, t0: float | None = None, t1: float | None = None) -> slice:
        i0 = 0 if t0 is None else int(np.searchsorted(self.t, t0 - 1e-9))
        i1 = len(self.t) if t1 is None else int(np.searchsorted(self.t, t1 - 1e-9))
        return slice(i0, i1)

    def spectra(self, agent: int = 0) -> list[SpectrumSample]:
        M = self.models[agent]
        return [spectrum(M, C, t) for t, C in zip(self.weight_t, self.weights[agent])]

    def weights_at(self, t: float, agent: int = 0) -> np.ndarray:
        i = int(np.argmin(np.abs(self.weight_t - t)))
        return self.weights[agent][i]

    def observable(self, name: str) -> np.ndarray:
        return self.obs[:, self.obs_names.index(name)]

    # ------------------------------------------------------------ files

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _write_csv(d / "steps.csv", self._step_header(), self._step_rows())
        m, n = self.weights[0].shape[1:]
        header = ["t", "agent", "raw_norm"] + [f"h{i}" for i in range(m)] + \
                 [f"C{i}_{j}" for i in range(m) for j in range(n)]
        rows = ([t, a, self.raw_norms[a][r], *self.thresholds[a][r], *self.weights[a][r].ravel()]
                for r, t in enumerate(self.weight_t) for a in range(self.agents))
        _write_csv(d / "weights.csv", header, rows)
        spec_rows = []
        for a in range(self.agents):
            for s in self.spectra(a):
                for i, lam in enumerate(s.eigenvalues):
                    spec_rows.append([s.time, a, i, lam.real, lam.imag, abs(lam)])
        spec_rows.sort(key=lambda r: (r[0], r[1], r[2]))
        _write_csv(d / "spectrum.csv", ["t", "agent", "index", "real", "imag", "modulus"], spec_rows)
        _write_csv(d / "events.csv", ["step", "t", "kind", "agent", "detail"],
                   ([e["step"], e["t"], e["kind"], e["agent"], json.dumps(e["detail"], sort_keys=True)]
                    for e in self.events))
        _write_json(d / "model.json", {"schema": SCHEMA_VERSION, "models": [M.tolist() for M in self.models]})
        _write_json(d / "snapshots.json", {"schema": SCHEMA_VERSION,
                                           "snapshots": {k: [s.to_dict() for s in v] for k, v in self.snapshots.items()}})
        _write_json(d / "config.json", self.config)
        meta = {
            "schema": SCHEMA_VERSION, "name": self.config["name"], "dt": self.dt, "steps": len(self.t),
            "agent_sensors": self.agent_sensors, "agent_motors": self.agent_motors,
            "observables": self.obs_names,
            "contacts": 0 if self.contacts is None else int(self.contacts.shape[1]),
            "metrics": self.summary,
        }
        _write_json(d / "summary.json", meta)
        self.path = d
        return d

    def _step_header(self):
        h = ["t"] + [f"x{i}" for i in range(self.x.shape[1])] + [f"y{i}" for i in range(self.y.shape[1])]
        h += [f"ytd_norm{a}" for a in range(self.agents)] + [f"dyd_norm{a}" for a in range(self.agents)]
        h += list(self.obs_names)
        if self.contacts is not None:
            h += [f"contact{i}" for i in range(self.contacts.shape[1])]
        return h

    def _step_rows(self):
        parts = [self.t[:, None], self.x, self.y, self.ytd_norm, self.dyd_norm, self.obs]
        if self.contacts is not None:
            parts.append(self.contacts.astype(np.float64))
        return np.hstack(parts)

    @classmethod
    def load(cls, directory) -> "RunLog":
        d = Path(directory)
        meta = json.loads((d / "summary.json").read_text())
        if meta.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"run log schema {meta.get('schema')} != supported {SCHEMA_VERSION}")
        config = json.loads((d / "config.json").read_text())
        models = [np.array(M, dtype=np.float64, ndmin=2) for M in json.loads((d / "model.json").read_text())["models"]]
        steps = np.loadtxt(d / "steps.csv", delimiter=",", skiprows=1, ndmin=2)
        na = len(models)
        nx = sum(b - a for a, b in meta["agent_sensors"])
        ny = sum(b - a for a, b in meta["agent_motors"])
        no = len(meta["observables"])
        c = 0
        cols = {}
        for key, width in (("t", 1), ("x", nx), ("y", ny), ("ytd", na), ("dyd", na), ("obs", no),
                           ("contacts", meta["contacts"])):
            cols[key] = steps[:, c:c + width]
            c += width
        W = np.loadtxt(d / "weights.csv", delimiter=",", skiprows=1, ndmin=2)
        weights, thresholds, raws = [], [], []
        wt = None
        for a, M in enumerate(models):
            m, n = M.shape
            rows = W[W[:, 1] == a]
            wt = rows[:, 0]
            raws.append(rows[:, 2])
            thresholds.append(rows[:, 3:3 + m])
            weights.append(rows[:, 3 + m:].reshape(-1, m, n))
        events = []
        with open(d / "events.csv", newline="") as f:
            for r in csv.DictReader(f):
                events.append({"step": int(r["step"]), "t": float(r["t"]), "kind": r["kind"],
                               "agent": int(r["agent"]), "detail": json.loads(r["detail"])})
        snaps = json.loads((d / "snapshots.json").read_text())["snapshots"]
        snapshots = {k: [WeightSnapshot.from_dict(s) for s in v] for k, v in snaps.items()}
        clusters = d / "clusters.json"
        if clusters.exists():
            for k, v in json.loads(clusters.read_text())["centers"].items():
                snapshots[k] = [WeightSnapshot.from_dict(s) for s in v]
        return cls(
            config=config, dt=float(meta["dt"]), t=cols["t"][:, 0], x=cols["x"], y=cols["y"],
            ytd_norm=cols["ytd"], dyd_norm=cols["dyd"], obs_names=list(meta["observables"]), obs=cols["obs"],
            contacts=cols["contacts"].astype(bool) if meta["contacts"] else None,
            agent_sensors=[tuple(s) for s in meta["agent_sensors"]],
            agent_motors=[tuple(s) for s in meta["agent_motors"]],
            models=models, weight_t=wt, weights=weights, thresholds=thresholds, raw_norms=raws,
            events=events, snapshots=snapshots, summary=meta.get("metrics", {}), path=d,
        )


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n")


# ---------------------------------------------------------------- simulation

def window_variance(x, dt: float, window: float = VARIANCE_WINDOW) -> np.ndarray:
    """Mean per-channel variance over consecutive windows; rows are (window end time, variance)."""
    x = np.asarray(x, dtype=np.float64)
    w = max(1, int(round(window / dt)))
    out = []
    for i in range(0, len(x) - w + 1, w):
        out.append(((i + w) * dt, float(x[i:i + w].var(axis=0).mean())))
    return np.array(out).reshape(-1, 2)


def output_root(config: ExperimentConfig, out_dir=None) -> Path:
    if out_dir is not None:
        return Path(out_dir)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    if config.output.get("dir"):
        return (config.base_dir / config.output["dir"]).resolve()
    return Path(DEFAULT_OUTPUT)


def _init_matrix(spec, m: int, n: int):
    if isinstance(spec, str):
        if spec == "identity":
            return np.eye(m, n)
        if spec == "zero":
            return np.zeros((m, n))
        raise ConfigError(f"unknown initial weight {spec!r}")
    return np.array(spec, dtype=np.float64, ndmin=2)


def _source_config(config: ExperimentConfig) -> ExperimentConfig:
    wc = config.weight_copy
    src = wc["source"]
    if isinstance(src, str):
        path = config.base_dir / src
        return load_config(path)
    raw = config.to_dict()
    raw.pop("weight_copy")
    raw = deep_merge(raw, src)
    raw["name"] = config.name + "-source"
    return ExperimentConfig.from_dict(raw, base_dir=config.base_dir)


def _copied_weights(config: ExperimentConfig):
    src = _source_config(config)
    t = float(config.weight_copy["time"])
    raw = src.to_dict()
    raw["duration"] = t
    raw["perturbations"] = [p for p in raw["perturbations"] if p["time"] < t]
    raw["snapshots"] = {}
    raw["recall"] = []
    trunc = ExperimentConfig.from_dict(raw, base_dir=src.base_dir)
    _, agents = _simulate(trunc, None, keep_agents=True)
    return [(a.state.C.copy(), a.state.h.copy()) for a in agents], src.name


def run_experiment(config: ExperimentConfig, out_dir=None, write: bool = True,
                   snapshot_source=None) -> RunLog:
    """Run one experiment and (optionally) write its log directory.

    ``snapshot_source`` supplies the weight sets named in the recall sequence:
    a RunLog or a mapping from snapshot id to per-agent WeightSnapshots.
    """
    log, _ = _simulate(config, snapshot_source)
    if write:
        log.save(output_root(config, out_dir) / config.name)
    return log


def schedule_recall(config: ExperimentConfig, run, out_dir=None, write: bool = True) -> RunLog:
    if not config.recall:
        raise ConfigError("config has no recall sequence")
    return run_experiment(config, out_dir=out_dir, write=write, snapshot_source=run)


def _simulate(config: ExperimentConfig, snapshot_source=None, keep_agents: bool = False):
    dt = config.dt
    plant = make_plant(config.plant, dt)
    models = build_models(config, plant)
    agents = []
    for s, sm, M in zip(plant.agent_sensors, plant.agent_motors, models):
        a = Agent(s.stop - s.start, sm.stop - sm.start, config.plasticity, M=M, delay=config.delay)
        if config.init:
            C0 = _init_matrix(config.init.get("C", "zero"), a.m, a.n)
            a.set_weights(C0, config.init.get("h"), frozen=bool(config.init.get("frozen", False)))
        agents.append(a)

    store = {}
    if snapshot_source is not None:
        store = snapshot_source.snapshots if isinstance(snapshot_source, RunLog) else dict(snapshot_source)
    for r in config.recall:
        if r.snapshot not in store:
            raise ConfigError(f"unknown snapshot id {r.snapshot!r}; available: {sorted(store)}")
        if len(store[r.snapshot]) != len(agents):
            raise ConfigError(f"snapshot {r.snapshot!r} holds {len(store[r.snapshot])} weight sets for {len(agents)} agents")

    copy_step, copied = None, None
    if config.weight_copy is not None:
        copied, copy_src = _copied_weights(config)
        copy_step = config.step_of(float(config.weight_copy["time"]))

    N = config.steps
    sched: dict[int, list] = {}
    for p in config.perturbations:
        sched.setdefault(config.step_of(p.time), []).append(("perturbation", p))
    for r in config.recall:
        sched.setdefault(config.step_of(r.time), []).append(("recall", r))
    if copy_step is not None:
        sched.setdefault(copy_step, []).append(("weight_copy", None))
    snap_steps: dict[int, list] = {}
    for sid, t in config.snapshots.items():
        snap_steps.setdefault(config.step_of(t), []).append(sid)

    nx, ny = plant.n_sensors, plant.n_motors
    obs_names = sorted(plant.observables())
    contacts0 = plant.contacts()
    X = np.empty((N, nx))
    Y = np.empty((N, ny))
    YT = np.empty((N, len(agents)))
    DY = np.empty((N, len(agents)))
    OB = np.empty((N, len(obs_names)))
    CT = None if contacts0 is None else np.empty((N, contacts0.size), dtype=bool)
    log_every = int(round(config.log_interval / dt))
    wt, Ws, Hs, Rs = [], [[] for _ in agents], [[] for _ in agents], [[] for _ in agents]
    events = []
    snapshots: dict[str, list] = {}
    prev_contacts = contacts0

    def event(step, kind, detail, agent=-1):
        events.append({"step": step, "t": step * dt, "kind": kind, "agent": agent, "detail": detail})

    def take_snapshots(step):
        for sid in snap_steps.get(step, []):
            snapshots[sid] = [WeightSnapshot.of(a.state, id=sid, t=step * dt, agent=i) for i, a in enumerate(agents)]
            event(step, "snapshot", {"id": sid})

    y_all = np.zeros(ny)
    for s in range(N):
        for kind, item in sched.get(s, []):
            if kind == "perturbation":
                plant.apply_perturbation(item)
                event(s, "perturbation", item.to_dict())
            elif kind == "recall":
                for i, (a, snap) in enumerate(zip(agents, store[item.snapshot])):
                    a.set_weights(snap.C, snap.h, frozen=True)
                event(s, "recall", {"snapshot": item.snapshot})
            else:
                for a, (C, h) in zip(agents, copied):
                    a.set_weights(C, h, frozen=False)
                event(s, "weight_copy", {"source": copy_src})
        take_snapshots(s)
        xb = plant.sensors()
        if not np.all(np.isfinite(xb)):
            raise SimulationError(s, "plant produced non-finite sensor values")
        try:
            for a, sl, sm in zip(agents, plant.agent_sensors, plant.agent_motors):
                y_all[sm] = a.step(xb[sl])
        except NonFiniteError as e:
            raise SimulationError(s, str(e)) from None
        if config.zero_commands:
            y_all[:] = 0.0
        X[s] = xb
        Y[s] = y_all
        for i, a in enumerate(agents):
            YT[s, i] = np.linalg.norm(a.y_tilde_dot)
            DY[s, i] = np.linalg.norm(a.delta_y_dot)
        if s % log_every == 0:
            wt.append(s * dt)
            for i, a in enumerate(agents):
                Ws[i].append(a.state.C.copy())
                Hs[i].append(a.state.h.copy())
                Rs[i].append(float(np.linalg.norm(a.C_raw)))
        plant.step(y_all)
        obs = plant.observables()
        OB[s] = [obs[k] for k in obs_names]
        if CT is not None:
            c = plant.contacts()
            CT[s] = c
            changed = np.flatnonzero(c != prev_contacts)
            for j in changed:
                event(s, "contact", {"leg": int(j), "down": bool(c[j])})
            prev_contacts = c
    take_snapshots(N)

    log = RunLog(
        config=config.to_dict(), dt=dt, t=np.arange(N) * dt, x=X, y=Y, ytd_norm=YT, dyd_norm=DY,
        obs_names=obs_names, obs=OB, contacts=CT,
        agent_sensors=[(s.start, s.stop) for s in plant.agent_sensors],
        agent_motors=[(s.start, s.stop) for s in plant.agent_motors],
        models=[a.M.copy() for a in agents], weight_t=np.array(wt),
        weights=[np.array(w) for w in Ws], thresholds=[np.array(h) for h in Hs],
        raw_norms=[np.array(r) for r in Rs], events=events, snapshots=snapshots,
    )
    log.summary = summarize(log, config)
    return log, (agents if keep_agents else None)


def summarize(log: RunLog, config: ExperimentConfig) -> dict:
    dt = log.dt
    sl = log.window(log.t[-1] + dt - config.metrics_window, None)
    xw = log.x[sl]
    wv = window_variance(log.x, dt)
    out = {
        "activity_variance": float(xw.var(axis=0).mean()) if len(xw) else math.nan,
        "min_window_variance": float(wv[:, 1].min()) if len(wv) else math.nan,
        "max_abs_x": float(np.abs(log.x).max()) if log.x.size else 0.0,
        "max_abs_y": float(np.abs(log.y).max()) if log.y.size else 0.0,
    }
    if "omega" in log.obs_names:
        om = log.observable("omega")[sl]
        out["mean_omega"] = float(om.mean())
        out["abs_mean_omega"] = float(abs(om.mean()))
    for a in range(log.agents):
        counts = [s.nonzero_count() for s in log.spectra(a)]
        out[f"eig_count_final_{a}"] = counts[-1]
        out[f"eig_count_min_{a}"] = min(counts)
        out[f"eig_count_max_{a}"] = max(counts)
        out[f"C_norm_final_{a}"] = float(np.linalg.norm(log.weights[a][-1]))
    return out


def phase_relations(log: RunLog, joints, t0: float | None = None, t1: float | None = None):
    sl = log.window(t0, t1)
    return phase_matrix(log.x[sl][:, list(joints)], log.dt, labels=list(joints))


# ---------------------------------------------------------------- sweeps

def sweep(configs, out_dir=None, write_logs: bool = False, csv_path=None) -> list[dict]:
    """Run configs independently and collate their scalar metrics.

    A failing run is recorded with its error and the sweep continues.
    """
    rows = []
    for cfg in configs:
        row = {"name": getattr(cfg, "name", str(cfg)), "status": "ok", "error": ""}
        try:
            if isinstance(cfg, _Broken):
                raise ConfigError(str(cfg.error))
            if not isinstance(cfg, ExperimentConfig):
                raise ConfigError(f"not a config: {cfg!r}")
            row.update({f"grid.{k}": v for k, v in cfg.output.get("grid", {}).items()})
            log = run_experiment(cfg, out_dir=out_dir, write=write_logs)
            row.update(log.summary)
        except Exception as e:  # recorded, the sweep goes on
            row["status"] = "failed"
            row["error"] = f"{type(e).__name__}: {e}"
        rows.append(row)
    if csv_path is not None:
        write_table(csv_path, rows)
    return rows


def write_table(path, rows: list[dict]):
    cols = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(path, cols, ([_cell(r.get(c, "")) for c in cols] for r in rows))


def _cell(v):
    if isinstance(v, bool) or v is None:
        return str(v)
    if isinstance(v, (int, float, np.integer, np.floating)):
        return v
    return str(v)


def load_sweep_configs(paths) -> list:
    """Configs from files, expanding sweep grids; unreadable files become error entries."""
    out = []
    for p in paths:
        p = Path(p)
        try:
            raw = json.loads(p.read_text())
            for d in expand_grid(raw):
                try:
                    out.append(ExperimentConfig.from_dict(d, base_dir=p.parent))
                except (ConfigError, ValueError, TypeError, KeyError) as e:
                    out.append(_Broken(d.get("name", p.stem), e))
        except (OSError, json.JSONDecodeError) as e:
            out.append(_Broken(p.stem, e))
    return out


@dataclass
class _Broken:
    name: str
    error: Exception

    def __str__(self):
        return f"{self.name}: {self.error}"


def config_replace(config: ExperimentConfig, **changes) -> ExperimentConfig:
    raw = config.to_dict()
    raw.update(changes)
    return ExperimentConfig.from_dict(raw, base_dir=config.base_dir)

