"""Open-loop model tests, closed-loop scenarios and CPU comparison.

The column experiment used throughout lives here too: its sampling
configuration, output scaling, NMPC tuning and the setpoint scenario.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import SamplingConfig
from .model import KoopmanModel
from .nmpc import OcpConfig
from .plant import PlantModel, integrate_step, simulate_profile, steady_state, COLUMN_NOMINAL_INPUT

# stacked [x, y] channels of the 20-tray column (n_x = 22)
IMPURITY, PRODUCTION, INVENTORY = 22, 23, 24

COLUMN_SAMPLING_RANGES = [[28.0, 52.0], [34.0, 38.0], [48.0, 54.0], [19.0, 41.0]]
COLUMN_X_TRANSFORMS = ["log10"] * 20 + ["linear", "linear"]
COLUMN_Y_TRANSFORMS = ["log10", "linear", "linear"]
COLUMN_INPUT_BOUNDS = [[30.0, 50.0], [34.5, 37.5], [48.5, 53.5], [5.0, 45.0]]


def column_sampling_config(seed: int = 0, **kw) -> SamplingConfig:
    return SamplingConfig(input_ranges=COLUMN_SAMPLING_RANGES, rng_seed=seed, **kw)


def column_ocp_config(production_sp: float = 15.0, inventory_sp: float = 30.0, N_c: int = 24,
                      w_production: float = 1.0, w_inventory: float = 0.0005, **kw) -> OcpConfig:
    """Production tracking with a weak inventory term; impurity and inventory as soft path bounds."""
    return OcpConfig(input_bounds=COLUMN_INPUT_BOUNDS, N_c=N_c,
                     cost=[(PRODUCTION, w_production, production_sp), (INVENTORY, w_inventory, inventory_sp)],
                     bounds=[(IMPURITY, 100e-6, 2000e-6), (INVENTORY, 20.0, 40.0)], **kw)


# ---------------------------------------------------------------------------
# Open-loop test


def nrmse(reference, prediction):
    """Per-channel RMS error over the reference range (range floor ``1e-12``)."""
    ref = np.asarray(reference, dtype=float)
    err = np.sqrt(np.mean((np.asarray(prediction, dtype=float) - ref) ** 2, axis=0))
    span = ref.max(axis=0) - ref.min(axis=0)
    return err / np.maximum(span, 1e-12 * np.maximum(1.0, np.abs(ref).max(axis=0)))


def two_step_profile(ranges, seed: int, step_time: float, rng_stream: int = 99):
    """Two random steps of all inputs: at ``t = 0`` and at ``t = step_time``."""
    rng = np.random.default_rng([seed, rng_stream])
    r = np.asarray(ranges, dtype=float)
    draws = r[:, 0] + (r[:, 1] - r[:, 0]) * rng.random((2, len(r)))
    return [(0.0, draws[0]), (float(step_time), draws[1])]


@dataclass
class OpenLoopResult:
    t: np.ndarray
    u: np.ndarray
    reference: np.ndarray  # (K+1, n_y) raw
    multi_step: np.ndarray
    single_step: np.ndarray
    nrmse_multi: np.ndarray
    nrmse_single: np.ndarray

    def to_csv(self, path):
        ny = self.reference.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"{tag}_{i}" for tag in ("ref", "multi", "single") for i in range(ny)])
            for k in range(self.t.size):
                w.writerow([repr(float(self.t[k]))] + [repr(float(v)) for v in
                           np.concatenate([self.reference[k], self.multi_step[k], self.single_step[k]])])


def run_open_loop_test(model: KoopmanModel, plant: PlantModel, profile, x0, horizon: float,
                       n_sub: int = 10) -> OpenLoopResult:
    """Simulate the plant and compare multi-step and single-step model predictions.

    Both predictions start at the plant's initial snapshot, which is also
    their first entry. NRMSE uses snapshots ``1..K``.
    """
    traj = simulate_profile(plant, x0, profile, model.dt, horizon, n_sub)
    sc = model.scaling
    xs, ys, us = sc.x.scale(traj.x), sc.y.scale(traj.y), sc.u.scale(traj.u)
    _, y_multi = model.rollout(xs[0], ys[0], us[:-1])
    _, y_single = model.single_step_series(xs, ys, us)
    multi = np.vstack([traj.y[:1], sc.y.unscale(y_multi)])
    single = np.vstack([traj.y[:1], sc.y.unscale(y_single)])
    return OpenLoopResult(traj.t, traj.u, traj.y, multi, single,
                          nrmse(traj.y[1:], multi[1:]), nrmse(traj.y[1:], single[1:]))


# ---------------------------------------------------------------------------
# Closed loop


@dataclass
class Scenario:
    initial_input: np.ndarray
    schedule: list  # [(t, production setpoint)], first entry at t = 0
    duration: float
    dt_s: float = 300.0
    inventory_sp: float = 30.0
    controller: str = "koopman_tailored"

    def __post_init__(self):
        self.initial_input = np.asarray(self.initial_input, dtype=float)
        self.schedule = [(float(t), float(v)) for t, v in self.schedule]
        if not self.schedule or self.schedule[0][0] != 0.0:
            raise ValueError("schedule must start at t = 0")
        for t, _ in self.schedule:
            if abs(t / self.dt_s - round(t / self.dt_s)) > 1e-9:
                raise ValueError(f"schedule time {t} is not a multiple of dt_s")
        if self.duration < self.schedule[-1][0]:
            raise ValueError("duration does not cover the schedule")

    @property
    def n_steps(self):
        return int(round(self.duration / self.dt_s))

    def setpoint(self, t):
        sp = self.schedule[0][1]
        for ts, v in self.schedule:
            if t >= ts - 1e-9:
                sp = v
        return sp

    def to_dict(self):
        return {"initial_input": self.initial_input.tolist(), "schedule": self.schedule, "duration": self.duration,
                "dt_s": self.dt_s, "inventory_sp": self.inventory_sp}

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def column_scenario(controller: str = "koopman_tailored") -> Scenario:
    """Steady start at the nominal input, then three unannounced production steps."""
    return Scenario(COLUMN_NOMINAL_INPUT, [(0.0, 15.0), (18000.0, 17.0), (36000.0, 13.5), (54000.0, 15.5)],
                    72000.0, 300.0, 30.0, controller)


@dataclass
class ClosedLoopRecord:
    controller: str
    scenario: str  # scenario digest
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    setpoint: np.ndarray
    wall_time: np.ndarray
    iterations: np.ndarray
    status: list
    failed: np.ndarray
    bounds: list = field(default_factory=list)  # [(y index, lo, hi)] judged on the plant
    input_bounds: Optional[np.ndarray] = None
    tracked: int = 1  # output index of the tracked setpoint

    def __len__(self):
        return self.t.size

    def tracking_ise(self, channel: Optional[int] = None):
        """Sum of squared tracking errors times ``dt`` over the record."""
        ch = self.tracked if channel is None else channel
        return float(np.sum((self.y[:, ch] - self.setpoint) ** 2) * self.dt)

    def violations(self):
        """Per-step violation magnitude of each plant bound, shape ``(len, n_bounds)``."""
        out = np.zeros((self.t.size, len(self.bounds)))
        for j, (i, lo, hi) in enumerate(self.bounds):
            v = self.y[:, i]
            if lo is not None:
                out[:, j] = np.maximum(out[:, j], lo - v)
            if hi is not None:
                out[:, j] = np.maximum(out[:, j], v - hi)
        return np.maximum(out, 0.0)

    def input_violations(self):
        if self.input_bounds is None:
            return 0
        lo, hi = self.input_bounds[:, 0], self.input_bounds[:, 1]
        return int(np.sum((self.u < lo) | (self.u > hi)))

    def aggregates(self):
        viol = self.violations()
        return {"tracking_ise": self.tracking_ise(),
                "violation_count": int(np.sum(viol > 0)),
                "violation_max": float(viol.max(initial=0.0)),
                "violation_integral": [float(v) for v in viol.sum(axis=0) * self.dt],
                "input_violations": self.input_violations(),
                "mean_wall_time": float(np.mean(self.wall_time)),
                "max_wall_time": float(np.max(self.wall_time)),
                "failures": int(np.sum(self.failed)),
                "n_solves": int(self.t.size)}

    @property
    def dt(self):
        return float(self.t[1] - self.t[0]) if self.t.size > 1 else 0.0

    def settling_times(self, channel: Optional[int] = None, fraction: float = 0.01):
        """Time after each setpoint change until the error stays below ``fraction`` of the step.

        ``inf`` when the output never settles before the next change.
        """
        ch = self.tracked if channel is None else channel
        sp = self.setpoint
        changes = np.flatnonzero(np.diff(sp)) + 1
        ends = list(changes[1:]) + [sp.size]
        out = []
        for k0, k1 in zip(changes, ends):
            band = fraction * abs(sp[k0] - sp[k0 - 1])
            err = np.abs(self.y[k0:k1, ch] - sp[k0])
            outside = np.flatnonzero(err >= band)
            if outside.size == 0:
                out.append(0.0)
            elif outside[-1] == err.size - 1:
                out.append(np.inf)
            else:
                out.append(float(self.t[k0 + outside[-1] + 1] - self.t[k0]))
        return out

    def to_csv(self, path):
        nx, ny, nu = self.x.shape[1], self.y.shape[1], self.u.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i}" for i in range(nx)] + [f"y_{i}" for i in range(ny)]
                       + [f"u_{i}" for i in range(nu)] + ["setpoint", "wall_time_ms", "iterations", "status",
                                                          "failed"])
            for k in range(self.t.size):
                w.writerow([repr(float(self.t[k]))] + [repr(float(v)) for v in self.x[k]]
                           + [repr(float(v)) for v in self.y[k]] + [repr(float(v)) for v in self.u[k]]
                           + [repr(float(self.setpoint[k])), repr(1e3 * float(self.wall_time[k])),
                              int(self.iterations[k]), self.status[k], int(self.failed[k])])


def run_closed_loop(scenario: Scenario, controller, plant: PlantModel, x0=None, n_sub: int = 10,
                    plant_bounds=None) -> ClosedLoopRecord:
    """Plant in the loop with full state feedback and zero-order hold.

    At every sample the controller solves on the measurement and its first
    move is applied for one interval. The solve time is recorded but not
    fed back as a delay. The final sample is solved and recorded, not applied.
    """
    if x0 is None:
        x0 = steady_state(plant, scenario.initial_input)
    controller.reset(scenario.initial_input)
    K = scenario.n_steps
    x = np.array(x0, dtype=float)
    T, X, Y, U, SP, WT, IT, ST, FL = [], [], [], [], [], [], [], [], []
    for k in range(K + 1):
        t = k * scenario.dt_s
        y = plant.output_map(x)
        sp = scenario.setpoint(t)
        t0 = time.perf_counter()
        u, info = controller.step(x, y, [sp, scenario.inventory_sp])
        WT.append(time.perf_counter() - t0)
        T.append(t); X.append(x.copy()); Y.append(y); U.append(u); SP.append(sp)
        IT.append(info.result.iterations if info.result is not None else -1)
        ST.append(info.result.status if info.result is not None else "failed")
        FL.append(info.failed)
        if k < K:
            x = integrate_step(plant, x, u, scenario.dt_s, n_sub)
    ny_off = plant.n_x
    if plant_bounds is None:
        plant_bounds = [(ch - ny_off, lo, hi) for ch, lo, hi in controller.config.bounds if ch >= ny_off]
    return ClosedLoopRecord(getattr(controller, "name", type(controller).__name__), scenario.digest(),
                            np.array(T), np.array(X), np.array(Y), np.array(U), np.array(SP), np.array(WT),
                            np.array(IT), ST, np.array(FL), list(plant_bounds),
                            np.array(controller.config.input_bounds),
                            controller.config.cost[0][0] - ny_off)


def cpu_report(records: dict, reference: str = "ideal"):
    """Mean/max wall time per controller and the reduction against ``reference``.

    Returns ``(rows, text)``; each row is a dict with ``controller``,
    ``n_solves``, ``mean_s``, ``max_s`` and ``reduction_pct``.
    """
    digests = {r.scenario for r in records.values()}
    if len(digests) != 1:
        raise ValueError("records come from different scenarios")
    base = float(np.mean(records[reference].wall_time)) if reference in records else None
    rows = []
    for name, rec in records.items():
        mean = float(np.mean(rec.wall_time))
        rows.append({"controller": name, "n_solves": int(rec.wall_time.size), "mean_s": mean,
                     "max_s": float(np.max(rec.wall_time)),
                     "reduction_pct": None if base is None else 100.0 * (1.0 - mean / base)})
    lines = [f"{'controller':<24}{'solves':>8}{'mean [ms]':>12}{'max [ms]':>12}{'reduction':>11}"]
    for r in rows:
        red = "" if r["reduction_pct"] is None else f"{r['reduction_pct']:.1f}%"
        lines.append(f"{r['controller']:<24}{r['n_solves']:>8}{1e3 * r['mean_s']:>12.2f}"
                     f"{1e3 * r['max_s']:>12.2f}{red:>11}")
    return rows, "\n".join(lines)


def reduction(mean_candidate: float, mean_reference: float) -> float:
    return 100.0 * (1.0 - mean_candidate / mean_reference)


def write_cpu_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["controller", "n_solves", "mean_s", "max_s", "reduction_pct"])
        w.writeheader()
        for r in rows:
            w.writerow(r)
