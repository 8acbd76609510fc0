"""Sampling campaign, channel scaling, sliding windows and train/validation split."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .plant import PlantModel, SteadyStateNotFound, simulate_profile, steady_state

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class DegenerateChannelError(ValueError):
    pass


@dataclass
class SamplingConfig:
    """Random-step campaign settings; times in seconds, ranges per plant input."""

    input_ranges: list
    dt_s: float = 300.0
    n_step_experiments: int = 800
    step_duration_range: tuple = (1800.0, 7200.0)
    n_steady_trajectories: int = 500
    steady_duration: float = 7200.0
    rng_seed: int = 0
    n_sub: int = 10
    max_steady_failures: int = 10

    def __post_init__(self):
        self.input_ranges = [list(map(float, r)) for r in self.input_ranges]
        for lo, hi in self.input_ranges:
            if not lo < hi:
                raise ValueError(f"empty sampling range [{lo}, {hi}]")
        lo, hi = self.step_duration_range
        if not 0 < lo <= hi:
            raise ValueError("bad step duration range")
        for d in (lo, hi, self.steady_duration):
            if abs(d / self.dt_s - round(d / self.dt_s)) > 1e-9:
                raise ValueError("dt_s must divide all durations")

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Scaling


@dataclass
class ChannelScaling:
    """Per-channel ``linear`` or ``log10`` transform followed by min-max scaling."""

    transforms: list
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self._log = np.array([t == "log10" for t in self.transforms], dtype=bool)

    @property
    def size(self):
        return len(self.transforms)

    def _forward(self, v):
        v = np.asarray(v, dtype=float)
        if not self._log.any():
            return v
        return np.where(self._log, np.log10(np.where(self._log, v, 1.0) + LOG_FLOOR), v)

    def scale(self, v):
        return (self._forward(v) - self.lo) / (self.hi - self.lo)

    def unscale(self, s):
        t = np.asarray(s, dtype=float) * (self.hi - self.lo) + self.lo
        if not self._log.any():
            return t
        return np.where(self._log, 10.0 ** np.where(self._log, t, 0.0) - LOG_FLOOR, t)

    def dscale(self, v):
        """Derivative of the scaled value w.r.t. the raw value, elementwise."""
        v = np.asarray(v, dtype=float)
        d = np.where(self._log, 1.0 / ((v + LOG_FLOOR) * np.log(10.0)), 1.0)
        return d / (self.hi - self.lo)

    def to_dict(self):
        return {"transforms": list(self.transforms), "min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["transforms"]), d["min"], d["max"])


@dataclass
class ScalingSpec:
    x: ChannelScaling
    y: ChannelScaling
    u: ChannelScaling

    def scale_xy(self, x, y):
        return np.concatenate([self.x.scale(x), self.y.scale(y)], axis=-1)

    def to_dict(self):
        return {"x": self.x.to_dict(), "y": self.y.to_dict(), "u": self.u.to_dict(), "log_floor": LOG_FLOOR}

    @classmethod
    def from_dict(cls, d):
        return cls(ChannelScaling.from_dict(d["x"]), ChannelScaling.from_dict(d["y"]), ChannelScaling.from_dict(d["u"]))


def _fit_channels(data, transforms, label):
    data = np.asarray(data, dtype=float)
    if len(transforms) != data.shape[1]:
        raise ValueError(f"{label}: {len(transforms)} transforms for {data.shape[1]} channels")
    for i, t in enumerate(transforms):
        if t not in ("linear", "log10"):
            raise ValueError(f"{label}[{i}]: unknown transform {t!r}")
        if t == "log10" and np.any(data[:, i] <= 0):
            raise ValueError(f"{label}[{i}]: log10 channel needs strictly positive data")
    cs = ChannelScaling(list(transforms), np.zeros(data.shape[1]), np.ones(data.shape[1]))
    tv = cs._forward(data)
    lo, hi = tv.min(axis=0), tv.max(axis=0)
    flat = np.flatnonzero(hi - lo <= 1e-14 * np.maximum(1.0, np.abs(hi)))
    if flat.size:
        raise DegenerateChannelError(f"{label} channel(s) {flat.tolist()} have zero range")
    return ChannelScaling(list(transforms), lo, hi)


# ---------------------------------------------------------------------------
# Dataset


@dataclass
class SnapshotDataset:
    """Ordered snapshots with trajectory ids; raw units unless ``scaling`` is set."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    trajectory: np.ndarray
    manifest: dict = field(default_factory=dict)
    scaling: Optional[ScalingSpec] = None

    def __len__(self):
        return self.t.size

    @property
    def n_trajectories(self):
        return int(self.trajectory.max()) + 1 if self.t.size else 0

    def trajectory_slices(self):
        """``(start, stop)`` index pairs, one per contiguous trajectory."""
        if not self.t.size:
            return []
        cuts = np.flatnonzero(np.diff(self.trajectory)) + 1
        starts = np.concatenate([[0], cuts])
        stops = np.concatenate([cuts, [self.t.size]])
        return list(zip(starts.tolist(), stops.tolist()))

    def scaled(self, spec: ScalingSpec) -> "SnapshotDataset":
        if self.scaling is not None:
            raise ValueError("dataset already scaled")
        return SnapshotDataset(self.t.copy(), spec.x.scale(self.x), spec.y.scale(self.y), spec.u.scale(self.u),
                               self.trajectory.copy(), dict(self.manifest), spec)

    def unscaled(self) -> "SnapshotDataset":
        s = self.scaling
        if s is None:
            return self
        return SnapshotDataset(self.t.copy(), s.x.unscale(self.x), s.y.unscale(self.y), s.u.unscale(self.u),
                               self.trajectory.copy(), dict(self.manifest), None)

    @classmethod
    def from_trajectories(cls, trajectories, manifest=None):
        ts, xs, ys, us, ids = [], [], [], [], []
        for i, tr in enumerate(trajectories):
            ts.append(tr.t)
            xs.append(tr.x)
            ys.append(tr.y)
            us.append(tr.u)
            ids.append(np.full(tr.t.size, i, dtype=int))
        return cls(np.concatenate(ts), np.concatenate(xs), np.concatenate(ys), np.concatenate(us),
                   np.concatenate(ids), manifest or {})


def fit_scaling(dataset: SnapshotDataset, x_transforms: Sequence[str], y_transforms: Sequence[str],
                u_transforms: Optional[Sequence[str]] = None) -> ScalingSpec:
    """Fit min-max scaling after the per-channel transforms."""
    if u_transforms is None:
        u_transforms = ["linear"] * dataset.u.shape[1]
    return ScalingSpec(_fit_channels(dataset.x, x_transforms, "x"),
                       _fit_channels(dataset.y, y_transforms, "y"),
                       _fit_channels(dataset.u, u_transforms, "u"))


def _draw_input(rng, ranges):
    r = np.asarray(ranges)
    return r[:, 0] + (r[:, 1] - r[:, 0]) * rng.random(len(r))


def _draw_steps(rng, cfg: SamplingConfig):
    lo = int(round(cfg.step_duration_range[0] / cfg.dt_s))
    hi = int(round(cfg.step_duration_range[1] / cfg.dt_s))
    return int(rng.integers(lo, hi + 1))


def _steady_start(plant, ranges, rng, x_guess, max_failures, label):
    for attempt in range(max_failures):
        u = _draw_input(rng, ranges)
        try:
            return u, steady_state(plant, u, x_guess=x_guess)
        except SteadyStateNotFound as err:
            logger.warning("%s: steady state not found for u=%s (%s), resampling", label, u, err)
    raise SteadyStateNotFound(f"{label}: {max_failures} consecutive steady-state failures")


def run_campaign(plant: PlantModel, cfg: SamplingConfig, x_guess=None) -> SnapshotDataset:
    """Random-step campaign followed by steady trajectories, in raw units.

    All step experiments form one concatenated trajectory (id 0) that starts at
    the steady state of its first input. Steady trajectory ``i`` (id ``i+1``)
    starts at the steady state of its own sampled input. Each trajectory draws
    from ``default_rng([seed, id])``.
    """
    if len(cfg.input_ranges) != plant.n_u:
        raise ValueError(f"{len(cfg.input_ranges)} sampling ranges for {plant.n_u} inputs")
    trajectories = []
    if cfg.n_step_experiments > 0:
        rng = np.random.default_rng([cfg.rng_seed, 0])
        u0, x0 = _steady_start(plant, cfg.input_ranges, rng, x_guess, cfg.max_steady_failures, "step run")
        steps, t = [], 0.0
        for i in range(cfg.n_step_experiments):
            u = u0 if i == 0 else _draw_input(rng, cfg.input_ranges)
            steps.append((t, u))
            t += _draw_steps(rng, cfg) * cfg.dt_s
        trajectories.append(simulate_profile(plant, x0, steps, cfg.dt_s, t, cfg.n_sub))
    for i in range(cfg.n_steady_trajectories):
        rng = np.random.default_rng([cfg.rng_seed, 1 + i])
        u, x0 = _steady_start(plant, cfg.input_ranges, rng, x_guess, cfg.max_steady_failures, f"steady {i}")
        trajectories.append(simulate_profile(plant, x0, [(0.0, u)], cfg.dt_s, cfg.steady_duration, cfg.n_sub))
    manifest = {
        "plant": plant.name,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.rng_seed,
        "version": __version__,
        "log_floor": LOG_FLOOR,
    }
    return SnapshotDataset.from_trajectories(trajectories, manifest)


def sampled_step_inputs(cfg: SamplingConfig) -> np.ndarray:
    """Replay the rng stream of the step run and return the drawn step inputs."""
    rng = np.random.default_rng([cfg.rng_seed, 0])
    out = []
    u0 = _draw_input(rng, cfg.input_ranges)
    out.append(u0)
    for i in range(1, cfg.n_step_experiments):
        _draw_steps(rng, cfg)
        out.append(_draw_input(rng, cfg.input_ranges))
    return np.array(out)


# ---------------------------------------------------------------------------
# Windows and split


@dataclass
class TrajectoryWindow:
    xy: np.ndarray  # (s, n_x + n_y)
    u: np.ndarray   # (s, n_u)
    start: int
    trajectory: int

    def __len__(self):
        return self.xy.shape[0]


def build_windows(dataset: SnapshotDataset, s: int = 24, stride: int = 5) -> list:
    """Cut length-``s`` windows every ``stride`` snapshots within each trajectory."""
    if s < 2:
        raise ValueError("window length must be >= 2")
    xy = np.concatenate([dataset.x, dataset.y], axis=1)
    out = []
    for start, stop in dataset.trajectory_slices():
        for k in range(start, stop - s + 1, stride):
            out.append(TrajectoryWindow(xy[k:k + s], dataset.u[k:k + s], k, int(dataset.trajectory[k])))
    return out


def stack_windows(windows):
    """``(xy, u)`` arrays of shape ``(W, s, n)`` from a list of windows."""
    return np.stack([w.xy for w in windows]), np.stack([w.u for w in windows])


@dataclass
class Split:
    train: list
    val: list
    batch_size: int
    seed: int

    def batches(self, epoch: int):
        """Index arrays into ``train`` for one epoch, reshuffled per epoch."""
        rng = np.random.default_rng([self.seed, 1, epoch])
        order = rng.permutation(len(self.train))
        return [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]


def split_train_val(windows, fraction: float = 0.8, batch_size: int = 32, seed: int = 0) -> Split:
    """Seeded random partition of windows into training and validation sets."""
    if len(windows) < 2:
        raise ValueError("need at least two windows")
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    rng = np.random.default_rng([seed, 0])
    order = rng.permutation(len(windows))
    n_train = min(max(int(round(fraction * len(windows))), 1), len(windows) - 1)
    return Split([windows[i] for i in np.sort(order[:n_train])],
                 [windows[i] for i in np.sort(order[n_train:])], batch_size, seed)


# ---------------------------------------------------------------------------
# Persistence


def save_dataset(dataset: SnapshotDataset, directory) -> Path:
    """Write ``snapshots.csv`` plus ``scaling.json`` and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nx, ny, nu = dataset.x.shape[1], dataset.y.shape[1], dataset.u.shape[1]
    header = ["trajectory", "t"] + [f"x_{i + 1}" for i in range(nx)] + [f"y_{i + 1}" for i in range(ny)] \
        + [f"u_{i + 1}" for i in range(nu)]
    data = np.column_stack([dataset.trajectory, dataset.t, dataset.x, dataset.y, dataset.u])
    with open(d / "snapshots.csv", "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    if dataset.scaling is not None:
        (d / "scaling.json").write_text(json.dumps(dataset.scaling.to_dict(), indent=1))
    manifest = dict(dataset.manifest, dims={"n_x": nx, "n_y": ny, "n_u": nu}, scaled=dataset.scaling is not None)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def load_dataset(directory) -> SnapshotDataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    dims = manifest["dims"]
    data = np.loadtxt(d / "snapshots.csv", delimiter=",", skiprows=1, ndmin=2)
    nx, ny = dims["n_x"], dims["n_y"]
    scaling = None
    if (d / "scaling.json").exists():
        scaling = ScalingSpec.from_dict(json.loads((d / "scaling.json").read_text()))
    return SnapshotDataset(data[:, 1], data[:, 2:2 + nx], data[:, 2 + nx:2 + nx + ny], data[:, 2 + nx + ny:],
                           data[:, 0].astype(int), manifest, scaling)
