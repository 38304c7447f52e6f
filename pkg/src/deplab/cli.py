"""Command line: run, sweep, analyze and recall experiments."""
from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .analysis import cluster_weights, extract_step_pattern
from .controller import WeightSnapshot
from .harness import (
    DEFAULT_OUTPUT,
    OUTPUT_ENV,
    SCHEMA_VERSION,
    ConfigError,
    ExperimentConfig,
    RunLog,
    SimulationError,
    load_config,
    load_sweep_configs,
    output_root,
    phase_relations,
    run_experiment,
    schedule_recall,
    sweep,
    write_table,
)


def _ints(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    log = run_experiment(cfg, out_dir=args.out)
    if not args.no_figures:
        plotting.spectrum_figure(log.spectra(0), log.path / "spectrum.png", title=cfg.name)
    print(f"{cfg.name}: {log.path}")
    for k, v in log.summary.items():
        print(f"  {k} = {v}")
    return 0


def cmd_sweep(args) -> int:
    paths = []
    for pattern in args.configs:
        hits = sorted(glob.glob(pattern))
        paths += hits if hits else [pattern]
    if not paths:
        print("no config files matched", file=sys.stderr)
        return 2
    configs = load_sweep_configs(paths)
    out = _sweep_root(configs, args.out) / (args.name or "sweep.csv")
    rows = sweep(configs, out_dir=args.out, write_logs=args.logs, csv_path=out)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} runs, {len(failed)} failed -> {out}")
    for r in failed:
        print(f"  {r['name']}: {r['error']}", file=sys.stderr)
    return 1 if failed else 0


def _sweep_root(configs, out_dir) -> Path:
    for c in configs:
        if isinstance(c, ExperimentConfig):
            return output_root(c, out_dir)
    return Path(out_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


def cmd_analyze(args) -> int:
    log = RunLog.load(args.runlog)
    d = log.path
    t0, t1 = args.t_from, args.t_to
    chosen = args.spectrum or args.phase or args.steps or args.cluster is not None
    report = {"schema": SCHEMA_VERSION, "run": log.config["name"]}
    if args.spectrum or not chosen:
        rows = []
        for a in range(log.agents):
            samples = [s for s in log.spectra(a) if (t0 is None or s.time >= t0) and (t1 is None or s.time <= t1)]
            for s in samples:
                lead = s.eigenvalues[:6]
                rows.append([s.time, a, s.nonzero_count()] + [float(abs(v)) for v in lead])
            plotting.spectrum_figure(samples, d / f"spectrum_agent{a}.png", title=f"{log.config['name']} agent {a}")
            counts = [s.nonzero_count() for s in samples]
            report[f"spectrum_agent{a}"] = {"samples": len(samples), "nonzero_min": min(counts), "nonzero_max": max(counts)}
        write_table(d / "spectrum_series.csv",
                    [dict(zip(["t", "agent", "nonzero"] + [f"mod{i + 1}" for i in range(len(r) - 3)], r)) for r in rows])
    if args.phase or not chosen:
        joints = _ints(args.joints) if args.joints else list(range(min(log.x.shape[1], 18)))
        pm = phase_relations(log, joints, t0, t1)
        report["phase"] = pm.to_dict()
        write_table(d / "phase.csv", [{"i": i, "j": j, "phase": pm.phases[a, b] if pm.defined[a, b] else ""}
                                      for a, i in enumerate(joints) for b, j in enumerate(joints)])
        plotting.phase_figure(pm, d / "phase.png")
    if args.steps or (not chosen and log.contacts is not None):
        if log.contacts is None:
            print("run log has no contact channels", file=sys.stderr)
            return 1
        pat = extract_step_pattern(log.contacts[log.window(t0, t1)], log.dt)
        report["steps"] = {"label": pat.label, "intervals": pat.intervals}
        write_table(d / "step_pattern.csv", [{"leg": leg, "down_start": a, "down_end": b} for leg, a, b in pat.to_rows()])
        plotting.step_figure(pat, d / "steps.png")
    if args.cluster is not None:
        report["clusters"] = _cluster(log, args.cluster, args.seed, t0, t1)
    # repeated analyze calls accumulate their sections in one report
    path = d / "analysis.json"
    merged = json.loads(path.read_text()) if path.exists() else {}
    merged.update(report)
    path.write_text(json.dumps(merged, indent=1, default=_jsonable) + "\n")
    print(json.dumps({k: v for k, v in report.items() if k != "phase"}, indent=1, default=_jsonable)[:2000])
    return 0


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    raise TypeError(type(v))


def _cluster(log: RunLog, k: int, seed: int, t0, t1) -> dict:
    """Cluster the run's snapshots (or its logged weights when it took none)."""
    own = {sid: snaps for sid, snaps in log.snapshots.items() if not sid.startswith("cluster")}
    if own:
        items = sorted(own.items(), key=lambda kv: kv[1][0].meta.get("t", 0.0))
        items = [(sid, s) for sid, s in items if (t0 is None or s[0].meta.get("t", 0.0) >= t0)
                 and (t1 is None or s[0].meta.get("t", 0.0) <= t1)]
        ids = [sid for sid, _ in items]
        per_agent = [[s[a].C for _, s in items] for a in range(log.agents)]
        hs = [[s[a].h for _, s in items] for a in range(log.agents)]
    else:
        keep = [i for i, t in enumerate(log.weight_t) if (t0 is None or t >= t0) and (t1 is None or t <= t1)]
        ids = [f"t{log.weight_t[i]:g}" for i in keep]
        per_agent = [[log.weights[a][i] for i in keep] for a in range(log.agents)]
        hs = [[log.thresholds[a][i] for i in keep] for a in range(log.agents)]
    # agents are clustered jointly so a center is a consistent set of controllers
    flat = [np.concatenate([per_agent[a][i].ravel() for a in range(log.agents)]) for i in range(len(ids))]
    res = cluster_weights([f[None, :] for f in flat], k, seed=seed)
    centers = {}
    for c, center in enumerate(res.centers):
        members = np.flatnonzero(res.labels == c)
        snaps, off = [], 0
        for a in range(log.agents):
            m, n = per_agent[a][0].shape
            C = center.ravel()[off:off + m * n].reshape(m, n)
            off += m * n
            h = np.mean([hs[a][i] for i in members], axis=0)
            snaps.append(WeightSnapshot(C, h, {"id": f"cluster{c}", "agent": a, "members": int(members.size)}))
        centers[f"cluster{c}"] = [s.to_dict() for s in snaps]
    (log.path / "clusters.json").write_text(json.dumps({"schema": SCHEMA_VERSION, "k": k, "seed": seed,
                                                        "centers": centers}, indent=1) + "\n")
    write_table(log.path / "clusters.csv", [{"snapshot": sid, "cluster": int(c)} for sid, c in zip(ids, res.labels)])
    return {"k": k, "inertia": res.inertia, "sizes": [int(np.sum(res.labels == c)) for c in range(k)]}


def parse_sequence(text: str) -> dict:
    """A recall sequence from a JSON file or inline ``id@time,id@time``."""
    p = Path(text)
    if p.exists():
        raw = json.loads(p.read_text())
        return raw if isinstance(raw, dict) else {"sequence": raw}
    steps = []
    for part in text.split(","):
        sid, _, t = part.strip().partition("@")
        if not sid or not t:
            raise ConfigError(f"cannot parse recall step {part!r}; expected id@time")
        steps.append({"snapshot": sid, "time": float(t)})
    return {"sequence": steps}


def cmd_recall(args) -> int:
    log = RunLog.load(args.runlog)
    seq = parse_sequence(args.sequence)
    raw = dict(log.config)
    raw.pop("weight_copy", None)
    raw["snapshots"] = {}
    raw["recall"] = seq["sequence"]
    raw["name"] = seq.get("name", raw["name"] + "-recall")
    for key in ("duration", "perturbations"):
        if key in seq:
            raw[key] = seq[key]
    if args.duration is not None:
        raw["duration"] = args.duration
    cfg = ExperimentConfig.from_dict(raw, base_dir=log.path)
    out = schedule_recall(cfg, log, out_dir=args.out)
    print(f"{cfg.name}: {out.path}")
    for ev in out.events:
        if ev["kind"] == "recall":
            print(f"  t={ev['t']:g}s step {ev['step']}: {ev['detail']['snapshot']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deplab", description="Closed-loop plasticity experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config")
    p.add_argument("--out", help="output root (default: $DEPLAB_OUTPUT_DIR, the config's output.dir, or ./runs)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run every config (and sweep grid) matching the glob(s)")
    p.add_argument("configs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--name", help="table file name (default sweep.csv)")
    p.add_argument("--logs", action="store_true", help="also write a run log per grid point")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="analyze a run log directory")
    p.add_argument("runlog")
    p.add_argument("--spectrum", action="store_true")
    p.add_argument("--phase", action="store_true")
    p.add_argument("--steps", action="store_true")
    p.add_argument("--cluster", type=int, metavar="K")
    p.add_argument("--joints", help="comma-separated sensor indices for --phase")
    p.add_argument("--from", dest="t_from", type=float)
    p.add_argument("--to", dest="t_to", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("recall", help="replay a run with frozen snapshot weights")
    p.add_argument("runlog")
    p.add_argument("sequence", help="JSON file or inline id@time[,id@time...]")
    p.add_argument("--out")
    p.add_argument("--duration", type=float)
    p.set_defaults(func=cmd_recall)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SimulationError as e:
        print(f"simulation aborted at {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as e:  # bad config, file or argument
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
