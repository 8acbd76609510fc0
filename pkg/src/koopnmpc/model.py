"""Wiener-type Koopman model: tanh MLP encoder/decoder around LTI latent dynamics.

All evaluations are in scaled units. Arrays may carry leading batch axes;
the trailing axis is the channel axis.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import ScalingSpec

FORMAT_TAG = "koopnmpc-model/1"


@dataclass
class Mlp:
    """Dense network, tanh on hidden layers, linear output layer.

    ``weights[l]`` has shape ``(n_out, n_in)``.
    """

    weights: list
    biases: list

    def __post_init__(self):
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: weight/bias mismatch")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input width {W.shape[1]} != {self.weights[l - 1].shape[0]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l}: non-finite parameters")

    @property
    def widths(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_in(self):
        return self.weights[0].shape[1]

    @property
    def n_out(self):
        return self.weights[-1].shape[0]

    @classmethod
    def init(cls, widths, rng) -> "Mlp":
        weights, biases = [], []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            lim = np.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-lim, lim, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(weights, biases)

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != self.n_in:
            raise ValueError(f"input width {v.shape[-1]} != {self.n_in}")
        return v

    def forward(self, v):
        h = self._check(v)
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if l < last:
                h = np.tanh(h)
        return h

    def forward_cache(self, v):
        """Forward pass keeping each layer's input for the reverse pass."""
        h = self._check(v)
        cache = []
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            cache.append(h)
            h = h @ W.T + b
            if l < last:
                h = np.tanh(h)
        return h, cache

    def backward(self, cache, g_out, param_grads: bool = True):
        """Reverse pass. Returns ``(gW, gb, g_in)``; gradients are summed over batch axes."""
        g = np.asarray(g_out, dtype=float)
        nl = len(self.weights)
        gW, gb = [None] * nl, [None] * nl
        for l in range(nl - 1, -1, -1):
            h = cache[l]
            if param_grads:
                g2 = g.reshape(-1, g.shape[-1])
                gW[l] = g2.T @ h.reshape(-1, h.shape[-1])
                gb[l] = g2.sum(axis=0)
            g = g @ self.weights[l]
            if l > 0:
                g = g * (1.0 - h * h)
        return gW, gb, g

    def jacobian(self, v, rows=None):
        """Input Jacobian, shape ``(..., len(rows), n_in)``, one reverse pass per row."""
        out, cache = self.forward_cache(v)
        rows = range(self.n_out) if rows is None else rows
        jac = []
        for r in rows:
            g = np.zeros_like(out)
            g[..., r] = 1.0
            jac.append(self.backward(cache, g, param_grads=False)[2])
        return np.stack(jac, axis=-2)

    def to_dict(self):
        return {"layers": [{"shape": list(W.shape), "W": W.ravel().tolist(), "b": b.tolist()}
                           for W, b in zip(self.weights, self.biases)]}

    @classmethod
    def from_dict(cls, d):
        ws = [np.array(layer["W"], dtype=float).reshape(layer["shape"]) for layer in d["layers"]]
        bs = [np.array(layer["b"], dtype=float) for layer in d["layers"]]
        return cls(ws, bs)


def mlp_forward(net: Mlp, v):
    return net.forward(v)


@dataclass
class KoopmanModel:
    encoder: Mlp
    decoder: Mlp
    A: np.ndarray  # (n_z,) in diagonal mode, (n_z, n_z) in full mode
    B: np.ndarray  # (n_z, n_u)
    n_x: int
    n_y: int
    dt: float = 300.0
    mode: str = "diag"
    scaling: Optional[ScalingSpec] = None
    manifest_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.mode not in ("diag", "full"):
            raise ValueError(f"unknown mode {self.mode!r}")
        nz = self.B.shape[0]
        if self.mode == "diag" and self.A.shape != (nz,):
            raise ValueError("diagonal mode needs A as a length-n_z vector")
        if self.mode == "full" and self.A.shape != (nz, nz):
            raise ValueError("full mode needs A as an n_z x n_z matrix")
        if self.encoder.n_in != self.n_x + self.n_y or self.encoder.n_out != nz:
            raise ValueError("encoder widths do not match (n_x + n_y) -> n_z")
        if self.decoder.n_in != nz or self.decoder.n_out != self.n_x + self.n_y:
            raise ValueError("decoder widths do not match n_z -> (n_x + n_y)")

    @property
    def n_z(self):
        return self.B.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    @property
    def reduction_ratio(self):
        return self.n_z / self.n_x

    def A_matrix(self):
        return np.diag(self.A) if self.mode == "diag" else self.A

    # -- evaluation -------------------------------------------------------
    def encode(self, x, y):
        return self.encoder.forward(np.concatenate([np.asarray(x, float), np.asarray(y, float)], axis=-1))

    def latent_step(self, z, u):
        z = np.asarray(z, dtype=float)
        u = np.asarray(u, dtype=float)
        if z.shape[-1] != self.n_z or u.shape[-1] != self.n_u:
            raise ValueError("latent_step dimension mismatch")
        if self.mode == "diag":
            return self.A * z + u @ self.B.T
        return z @ self.A.T + u @ self.B.T

    def decode_xy(self, z):
        return self.decoder.forward(z)

    def decode(self, z):
        xy = self.decoder.forward(z)
        return xy[..., :self.n_x], xy[..., self.n_x:]

    def rollout(self, x0, y0, U):
        """Multi-step prediction ``(x_hat, y_hat)`` for k = 1..K from one encoding."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        if U.shape[0] < 1:
            raise ValueError("need at least one input")
        z = self.encode(x0, y0)
        zs = np.empty((U.shape[0], self.n_z))
        for k, u in enumerate(U):
            z = self.latent_step(z, u)
            zs[k] = z
        return self.decode(zs)

    def single_step_series(self, X, Y, U):
        """One-step predictions for k = 1..K, each re-encoded at step k-1."""
        X, Y, U = (np.asarray(a, dtype=float) for a in (X, Y, U))
        if X.shape[0] < 2:
            raise ValueError("trajectory needs at least two snapshots")
        z = self.encode(X[:-1], Y[:-1])
        return self.decode(self.latent_step(z, U[:X.shape[0] - 1]))

    # -- parameters -------------------------------------------------------
    def param_names(self):
        names = []
        for tag, net in (("enc", self.encoder), ("dec", self.decoder)):
            for l in range(len(net.weights)):
                names += [f"{tag}.W{l}", f"{tag}.b{l}"]
        return names + ["A", "B"]

    def params(self) -> dict:
        """Name -> array; the arrays are the live parameters (no copies)."""
        out = {}
        for tag, net in (("enc", self.encoder), ("dec", self.decoder)):
            for l, (W, b) in enumerate(zip(net.weights, net.biases)):
                out[f"{tag}.W{l}"] = W
                out[f"{tag}.b{l}"] = b
        out["A"] = self.A
        out["B"] = self.B
        return out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params().values()])

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        i = 0
        for p in self.params().values():
            p[...] = theta[i:i + p.size].reshape(p.shape)
            i += p.size
        if i != theta.size:
            raise ValueError("parameter vector length mismatch")

    @property
    def n_params(self):
        return sum(p.size for p in self.params().values())

    def copy(self) -> "KoopmanModel":
        return KoopmanModel(
            Mlp([W.copy() for W in self.encoder.weights], [b.copy() for b in self.encoder.biases]),
            Mlp([W.copy() for W in self.decoder.weights], [b.copy() for b in self.decoder.biases]),
            self.A.copy(), self.B.copy(), self.n_x, self.n_y, self.dt, self.mode, self.scaling,
            self.manifest_hash, dict(self.meta))

    # -- persistence ------------------------------------------------------
    def to_dict(self):
        return {
            "format": FORMAT_TAG,
            "dims": {"n_x": self.n_x, "n_y": self.n_y, "n_u": self.n_u, "n_z": self.n_z},
            "mode": self.mode,
            "dt": self.dt,
            "encoder": self.encoder.to_dict(),
            "decoder": self.decoder.to_dict(),
            "A": self.A.ravel().tolist(),
            "B": self.B.ravel().tolist(),
            "scaling": None if self.scaling is None else self.scaling.to_dict(),
            "manifest_hash": self.manifest_hash,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported model format {d.get('format')!r}")
        dims = d["dims"]
        nz, nu = dims["n_z"], dims["n_u"]
        A = np.array(d["A"], dtype=float)
        if d["mode"] == "full":
            A = A.reshape(nz, nz)
        scaling = None if d["scaling"] is None else ScalingSpec.from_dict(d["scaling"])
        return cls(Mlp.from_dict(d["encoder"]), Mlp.from_dict(d["decoder"]), A,
                   np.array(d["B"], dtype=float).reshape(nz, nu), dims["n_x"], dims["n_y"], d["dt"],
                   d["mode"], scaling, d.get("manifest_hash", ""), d.get("meta", {}))

    def save(self, path, **extra):
        d = self.to_dict()
        d.update(extra)
        Path(path).write_text(json.dumps(d))

    @classmethod
    def load(cls, path) -> "KoopmanModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(self.get_flat().tobytes()).hexdigest()[:16]


def init_model(n_x: int, n_y: int, n_u: int, n_z: int, hidden=(16, 10), mode: str = "diag",
               seed: int = 0, dt: float = 300.0, scaling: Optional[ScalingSpec] = None,
               a0: float = 0.9) -> KoopmanModel:
    """Glorot-uniform networks, ``A = a0 * I`` and ``B = 0``.

    The decoder mirrors the encoder's hidden widths.
    """
    rng = np.random.default_rng(seed)
    hidden = list(hidden)
    enc = Mlp.init([n_x + n_y] + hidden + [n_z], rng)
    dec = Mlp.init([n_z] + hidden[::-1] + [n_x + n_y], rng)
    A = np.full(n_z, a0) if mode == "diag" else a0 * np.eye(n_z)
    return KoopmanModel(enc, dec, A, np.zeros((n_z, n_u)), n_x, n_y, dt, mode, scaling)

