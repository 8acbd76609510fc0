"""Two-branch prediction loss, its exact gradient, Adam and the training loop.

For a window of ``s`` snapshots the loss is the sum of two mean squared
errors over the ``s - 1`` transitions:

* single-step: re-encode snapshot ``k``, take one latent step, decode;
* multi-step: encode snapshot 0 once and roll the latent dynamics forward.

There is no separate reconstruction (autoencoder) term.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import Split, split_train_val, stack_windows
from .model import KoopmanModel

logger = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    def __init__(self, message, block=None, checkpoint=None):
        super().__init__(message)
        self.block = block
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    epochs: int = 20000
    batch_size: int = 32
    lr: float = 1e-3
    lr_final: Optional[float] = None  # geometric per-epoch decay to this value; constant when None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.2
    seed: int = 0
    clamp_stable: bool = False  # optionally keep a_ii <= 1 - 1e-6 as well
    log_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.lr_final is not None and not self.lr_final > 0:
            raise ValueError("lr_final must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class LossBreakdown:
    single_step_mse: float
    multi_step_mse: float

    @property
    def total(self):
        return self.single_step_mse + self.multi_step_mse


def _as_batch(windows):
    if isinstance(windows, tuple):
        xy, u = windows
    elif isinstance(windows, list):
        xy, u = stack_windows(windows)
    else:  # a single TrajectoryWindow
        xy, u = windows.xy[None], windows.u[None]
    xy = np.asarray(xy, dtype=float)
    u = np.asarray(u, dtype=float)
    if xy.ndim == 2:
        xy, u = xy[None], u[None]
    if xy.shape[1] < 2:
        raise ValueError("window needs at least two snapshots")
    return xy, u


def _forward(model: KoopmanModel, xy, u):
    m = xy.shape[1] - 1
    z_enc, enc_cache = model.encoder.forward_cache(xy[:, :m])
    z_single = model.latent_step(z_enc, u[:, :m])
    z_multi = np.empty_like(z_single)
    z = z_enc[:, 0]
    for k in range(m):
        z = model.latent_step(z, u[:, k])
        z_multi[:, k] = z
    pred, dec_cache = model.decoder.forward_cache(np.concatenate([z_single, z_multi], axis=1))
    target = xy[:, 1:]
    err = pred - np.concatenate([target, target], axis=1)
    return err, (z_enc, enc_cache, z_multi, dec_cache)


def _breakdown(err, m):
    return LossBreakdown(float(np.mean(err[:, :m] ** 2)), float(np.mean(err[:, m:] ** 2)))


def window_loss(model: KoopmanModel, window) -> LossBreakdown:
    """Loss of one window (or the mean over a batch of equal-length windows)."""
    xy, u = _as_batch(window)
    err, _ = _forward(model, xy, u)
    return _breakdown(err, xy.shape[1] - 1)


def loss_gradient(model: KoopmanModel, windows):
    """Batch-mean loss and its gradient w.r.t. every model parameter.

    Returns ``(LossBreakdown, grads)`` where ``grads`` maps parameter names
    (see ``KoopmanModel.params``) to arrays of the same shapes.
    """
    xy, u = _as_batch(windows)
    nw, s, n = xy.shape
    m = s - 1
    err, (z_enc, enc_cache, z_multi, dec_cache) = _forward(model, xy, u)
    loss = _breakdown(err, m)

    g_pred = err * (2.0 / (nw * m * n))
    gW_dec, gb_dec, g_z = model.decoder.backward(dec_cache, g_pred)
    g_single, g_multi = g_z[:, :m], g_z[:, m:]
    diag = model.mode == "diag"
    A = model.A

    # single-step branch: z_single = A z_enc + B u
    if diag:
        gA = np.einsum("wki,wki->i", g_single, z_enc)
        g_enc = g_single * A
    else:
        gA = np.einsum("wki,wkj->ij", g_single, z_enc)
        g_enc = g_single @ A
    gB = np.einsum("wki,wkj->ij", g_single, u[:, :m])

    # multi-step branch: adjoint recursion backwards through z_{k+1} = A z_k + B u_k
    g = np.zeros((nw, model.n_z))
    for k in range(m - 1, -1, -1):
        g = g + g_multi[:, k]
        z_prev = z_multi[:, k - 1] if k > 0 else z_enc[:, 0]
        gB += g.T @ u[:, k]
        if diag:
            gA += np.einsum("wi,wi->i", g, z_prev)
            g = g * A
        else:
            gA += g.T @ z_prev
            g = g @ A
    g_enc[:, 0] += g

    gW_enc, gb_enc, _ = model.encoder.backward(enc_cache, g_enc)

    grads = {}
    for l in range(len(gW_enc)):
        grads[f"enc.W{l}"] = gW_enc[l]
        grads[f"enc.b{l}"] = gb_enc[l]
    for l in range(len(gW_dec)):
        grads[f"dec.W{l}"] = gW_dec[l]
        grads[f"dec.b{l}"] = gb_dec[l]
    grads["A"] = gA
    grads["B"] = gB
    for name, gv in grads.items():
        if not np.all(np.isfinite(gv)):
            raise TrainingDivergence(f"non-finite gradient in {name}", block=name)
    return loss, grads


# ---------------------------------------------------------------------------
# Optimizer


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_final is None or cfg.epochs == 1:
        return cfg.lr
    return cfg.lr * (cfg.lr_final / cfg.lr) ** (epoch / (cfg.epochs - 1))


def adam_step(params: dict, grads: dict, state: dict, t: int, cfg: TrainConfig, lr: Optional[float] = None):
    """One in-place Adam update with bias correction; returns ``(params, state)``."""
    lr = cfg.lr if lr is None else lr
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state:
            state[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


def project_A(model: KoopmanModel, clamp_stable: bool = False) -> KoopmanModel:
    """Clamp the diagonal latent eigenvalues to ``a_ii >= 0`` in place."""
    if model.mode != "diag":
        logger.info("project_A: full-A model, projection skipped")
        return model
    np.maximum(model.A, 0.0, out=model.A)
    if clamp_stable:
        np.minimum(model.A, 1.0 - 1e-6, out=model.A)
    return model


# ---------------------------------------------------------------------------
# Training loop


def train(data, model: KoopmanModel, cfg: TrainConfig, callback=None):
    """Mini-batch Adam with projection; returns ``(best_model, history)``.

    ``data`` is a :class:`Split` or a list of windows (split here with
    ``cfg.val_fraction`` and ``cfg.seed``). The returned model is the
    checkpoint with the smallest validation loss. ``history`` holds one dict
    per epoch.
    """
    split = data if isinstance(data, Split) else split_train_val(
        data, 1.0 - cfg.val_fraction, cfg.batch_size, cfg.seed)
    xy_tr, u_tr = stack_windows(split.train)
    xy_va, u_va = stack_windows(split.val)
    model = model.copy()
    project_A(model, cfg.clamp_stable)
    params = model.params()
    state: dict = {}
    best, best_val, best_epoch = model.copy(), np.inf, -1
    history = []
    t = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        sums = np.zeros(2)
        count = 0
        lr = learning_rate(cfg, epoch)
        for idx in split.batches(epoch):
            try:
                loss, grads = loss_gradient(model, (xy_tr[idx], u_tr[idx]))
            except TrainingDivergence as err:
                err.checkpoint = best
                raise
            t += 1
            adam_step(params, grads, state, t, cfg, lr)
            project_A(model, cfg.clamp_stable)
            sums += len(idx) * np.array([loss.single_step_mse, loss.multi_step_mse])
            count += len(idx)
        tr = LossBreakdown(*(sums / count))
        va = window_loss(model, (xy_va, u_va))
        if not np.isfinite(va.total):
            raise TrainingDivergence(f"non-finite validation loss at epoch {epoch}", checkpoint=best)
        if va.total < best_val:
            best, best_val, best_epoch = model.copy(), va.total, epoch
        row = {"epoch": epoch,
               "train_single": tr.single_step_mse, "train_multi": tr.multi_step_mse, "train_total": tr.total,
               "val_single": va.single_step_mse, "val_multi": va.multi_step_mse, "val_total": va.total,
               "wall_time": time.perf_counter() - t0}
        history.append(row)
        if cfg.log_every and epoch % cfg.log_every == 0:
            logger.info("epoch %d train %.3e val %.3e", epoch, tr.total, va.total)
        if callback is not None:
            callback(row, model)
    best.meta = dict(best.meta, best_epoch=best_epoch, best_val=best_val,
                     train_config=dataclasses.asdict(cfg))
    return best, history


def write_history_csv(path, history):
    cols = ["epoch", "train_single", "train_multi", "train_total", "val_single", "val_multi", "val_total",
            "wall_time"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in cols])
