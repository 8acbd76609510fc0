"""Command-line workflow: ``sample``, ``train``, ``test-open-loop``, ``control``, ``bench``.

Every verb reads one JSON experiment file with the sections ``plant``,
``sampling``, ``scaling``, ``model``, ``training``, ``ocp`` and
``scenario``; missing sections fall back to :func:`default_config`.
Each run writes a ``run_manifest.json`` next to its outputs.

Run as ``python -m koopnmpc <verb> ...``.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .baseline import IdealController
from .dataset import (build_windows, fit_scaling, load_dataset, run_campaign, save_dataset, split_train_val,
                      SamplingConfig)
from .harness import (COLUMN_INPUT_BOUNDS, COLUMN_SAMPLING_RANGES, COLUMN_X_TRANSFORMS, COLUMN_Y_TRANSFORMS,
                      cpu_report, run_closed_loop, run_open_loop_test, two_step_profile, write_cpu_csv, Scenario,
                      IMPURITY, INVENTORY, PRODUCTION)
from .model import KoopmanModel, init_model
from .nmpc import KoopmanController, OcpConfig
from .plant import make_plant, steady_state, wrap_p_controller, column_p_config, COLUMN_NOMINAL_INPUT
from .train import TrainConfig, train, write_history_csv

logger = logging.getLogger("koopnmpc")


def default_config():
    return {
        "plant": {"name": "column"},
        "sampling": {"input_ranges": COLUMN_SAMPLING_RANGES, "rng_seed": 0},
        "scaling": {"x": COLUMN_X_TRANSFORMS, "y": COLUMN_Y_TRANSFORMS},
        "windows": {"s": 24, "stride": 5},
        "model": {"n_z": 6, "hidden": [16, 10], "mode": "diag", "seed": 0},
        "training": {"epochs": 6000, "batch_size": 32, "lr": 1e-3, "seed": 0},
        "ocp": {"N_c": 24, "input_bounds": COLUMN_INPUT_BOUNDS,
                "cost": [[PRODUCTION, 1.0, 15.0], [INVENTORY, 0.0005, 30.0]],
                "bounds": [[IMPURITY, 100e-6, 2000e-6], [INVENTORY, 20.0, 40.0]]},
        "open_loop": {"seed": 7, "step_time": 7200.0, "horizon": 14400.0},
        "scenario": {"initial_input": COLUMN_NOMINAL_INPUT.tolist(),
                     "schedule": [[0.0, 15.0], [18000.0, 17.0], [36000.0, 13.5], [54000.0, 15.5]],
                     "duration": 72000.0, "dt_s": 300.0, "inventory_sp": 30.0,
                     "acceptance": {"max_settling_s": 3600.0, "max_input_violations": 0}},
    }


def load_config(path):
    cfg = default_config()
    if path:
        for key, val in json.loads(Path(path).read_text()).items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(out_dir, cfg, verb, **extra):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"verb": verb, "config_hash": config_hash(cfg), "config": cfg,
                "versions": {"koopnmpc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                             "python": platform.python_version()}}
    manifest.update(extra)
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))


def _plant(cfg):
    return make_plant(cfg["plant"]["name"], **cfg["plant"].get("params", {}))


def _sampling_plant(cfg):
    plant = _plant(cfg)
    if cfg["plant"]["name"] == "column":
        return plant, wrap_p_controller(plant, column_p_config())
    return plant, plant


def _ocp(cfg, **over):
    d = dict(cfg["ocp"])
    d.update(over)
    return OcpConfig.from_dict(d)


def _scenario(cfg):
    s = cfg["scenario"]
    return Scenario(s["initial_input"], s["schedule"], s["duration"], s.get("dt_s", 300.0),
                    s.get("inventory_sp", 30.0))


def _outdir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# verbs


def cmd_sample(args, cfg):
    if args.plant:
        cfg["plant"]["name"] = args.plant
    plant, sampler = _sampling_plant(cfg)
    sc = SamplingConfig(**cfg["sampling"])
    x_guess = steady_state(plant, COLUMN_NOMINAL_INPUT) if cfg["plant"]["name"] == "column" else None
    ds = run_campaign(sampler, sc, x_guess=x_guess)
    spec = fit_scaling(ds, cfg["scaling"]["x"], cfg["scaling"]["y"], cfg["scaling"].get("u"))
    out = _outdir(args.out)
    save_dataset(ds.scaled(spec), out)
    write_manifest(out, cfg, "sample", seed=sc.rng_seed, snapshots=len(ds), trajectories=ds.n_trajectories)
    print(f"sampled {len(ds)} snapshots in {ds.n_trajectories} trajectories -> {out}")
    return 0


def cmd_train(args, cfg):
    ds = load_dataset(args.data)
    if ds.scaling is None:
        raise SystemExit("dataset has no scaling spec")
    tc = TrainConfig(**cfg["training"])
    w = cfg["windows"]
    windows = build_windows(ds, w["s"], w["stride"])
    split = split_train_val(windows, 1.0 - tc.val_fraction, tc.batch_size, tc.seed)
    mc = cfg["model"]
    model = init_model(ds.x.shape[1], ds.y.shape[1], ds.u.shape[1], mc["n_z"], mc["hidden"], mc["mode"],
                       mc["seed"], ds.manifest.get("sampling", {}).get("dt_s", 300.0), ds.scaling)
    model.manifest_hash = hashlib.sha256(json.dumps(ds.manifest, sort_keys=True).encode()).hexdigest()[:16]
    t0 = time.perf_counter()
    best, history = train(split, model, tc)
    wall = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    best.save(out, epoch=best.meta["best_epoch"])
    write_history_csv(out.with_suffix(".history.csv"), history)
    write_manifest(out.parent, cfg, "train", seed=tc.seed, model_digest=best.digest(), wall_time_s=wall)
    print(f"best epoch {best.meta['best_epoch']} val {best.meta['best_val']:.3e} -> {out}")
    return 0


def cmd_test_open_loop(args, cfg):
    model = KoopmanModel.load(args.model)
    plant, sampler = _sampling_plant(cfg)
    ol = cfg["open_loop"]
    profile = two_step_profile(cfg["sampling"]["input_ranges"], ol["seed"], ol["step_time"])
    x0 = steady_state(plant, cfg["scenario"]["initial_input"])
    res = run_open_loop_test(model, sampler, profile, x0, ol["horizon"])
    out = _outdir(args.out)
    res.to_csv(out / "open_loop.csv")
    summary = {"nrmse_multi": res.nrmse_multi.tolist(), "nrmse_single": res.nrmse_single.tolist()}
    (out / "nrmse.json").write_text(json.dumps(summary, indent=1))
    write_manifest(out, cfg, "test-open-loop", model_digest=model.digest())
    print(json.dumps(summary))
    lim = ol.get("acceptance", {})
    ok = (np.all(res.nrmse_single < lim.get("single", np.inf)) and np.all(res.nrmse_multi < lim.get("multi", np.inf)))
    return 0 if ok else 1


def make_controller(name, model, cfg, plant):
    ocp = _ocp(cfg)
    if name == "koopman_tailored":
        return KoopmanController(model, ocp, "tailored")
    if name == "koopman_generic_dense":
        return KoopmanController(model, ocp, "generic_dense")
    if name == "ideal":
        return IdealController(plant, model.scaling, ocp, model.dt)
    raise SystemExit(f"unknown controller {name!r}")


def _scenario_ok(rec, cfg):
    acc = cfg["scenario"].get("acceptance", {})
    ok = rec.input_violations() <= acc.get("max_input_violations", np.inf)
    if "max_settling_s" in acc:
        ok = ok and max(rec.settling_times(), default=0.0) <= acc["max_settling_s"]
    return bool(ok)


def cmd_control(args, cfg):
    model = KoopmanModel.load(args.model)
    plant = _plant(cfg)
    scen = _scenario(cfg)
    ctrl = make_controller(args.controller, model, cfg, plant)
    rec = run_closed_loop(scen, ctrl, plant)
    out = _outdir(args.out)
    rec.to_csv(out / f"closed_loop_{args.controller}.csv")
    agg = rec.aggregates()
    agg["settling_times"] = rec.settling_times()
    (out / f"aggregates_{args.controller}.json").write_text(json.dumps(agg, indent=1))
    write_manifest(out, cfg, "control", controller=args.controller, model_digest=model.digest())
    print(json.dumps(agg))
    return 0 if _scenario_ok(rec, cfg) else 1


def cmd_bench(args, cfg):
    model = KoopmanModel.load(args.model)
    plant = _plant(cfg)
    scen = _scenario(cfg)
    out = _outdir(args.out)
    records = {}
    for name in ("ideal", "koopman_generic_dense", "koopman_tailored"):
        rec = run_closed_loop(scen, make_controller(name, model, cfg, plant), plant)
        rec.to_csv(out / f"closed_loop_{name}.csv")
        records[name] = rec
    rows, text = cpu_report(records)
    write_cpu_csv(out / "cpu_report.csv", rows)
    (out / "cpu_report.txt").write_text(text + "\n")
    write_manifest(out, cfg, "bench", model_digest=model.digest())
    print(text)
    return 0 if all(_scenario_ok(r, cfg) for r in records.values()) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="koopnmpc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    s = sub.add_parser("sample", help="run the sampling campaign")
    s.add_argument("--plant", default=None)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)
    s = sub.add_parser("train", help="train a Koopman model")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)
    s = sub.add_parser("test-open-loop", help="two-step open-loop model test")
    s.add_argument("--model", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_test_open_loop)
    s = sub.add_parser("control", help="closed-loop scenario with one controller")
    s.add_argument("--model", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--controller", default="koopman_tailored",
                   choices=["koopman_tailored", "koopman_generic_dense", "ideal"])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_control)
    s = sub.add_parser("bench", help="all three controllers plus the CPU report")
    s.add_argument("--model", required=True)
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    cfg = load_config(args.config)
    return args.func(args, copy.deepcopy(cfg))


if __name__ == "__main__":
    sys.exit(main())
