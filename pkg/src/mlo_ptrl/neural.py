"""Recurrent Q-network in plain numpy.

Architecture: GRU cell on the observation encoding, then a ReLU hidden layer
and a linear output layer producing one Q-value per action. Row vectors
throughout: x is (B, in), h is (B, H), weights are (fan_in, fan_out).

    z  = sigmoid(x Wz + h Uz + bz)
    r  = sigmoid(x Wr + h Ur + br)
    n  = tanh(x Wn + (r * h) Un + bn)
    h' = (1 - z) * n + z * h
    q  = relu(h' W1 + b1) W2 + b2
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1

GRU_KEYS = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wn", "Un", "bn")
HEAD_KEYS = ("W1", "b1", "W2", "b2")
PARAM_KEYS = GRU_KEYS + HEAD_KEYS

Params = dict  # name -> np.ndarray


def orthogonal_init(rows, cols, gain=1.0, seed=None, rng=None):
    """(Semi-)orthogonal matrix: Q^T Q = gain^2 I when rows >= cols, Q Q^T otherwise."""
    if rows < 1 or cols < 1:
        raise ValueError("orthogonal_init needs rows, cols >= 1")
    rng = rng if rng is not None else np.random.default_rng(seed)
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    # sign fix makes the distribution uniform (Haar)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q


def init_params(input_dim, n_actions, hidden=64, mlp_hidden=64, seed=None, rng=None) -> Params:
    rng = rng if rng is not None else np.random.default_rng(seed)
    p = {}
    for g in "zrn":
        p["W" + g] = orthogonal_init(input_dim, hidden, rng=rng)
        p["U" + g] = orthogonal_init(hidden, hidden, rng=rng)
        p["b" + g] = np.zeros(hidden)
    p["W1"] = orthogonal_init(hidden, mlp_hidden, gain=np.sqrt(2.0), rng=rng)
    p["b1"] = np.zeros(mlp_hidden)
    p["W2"] = orthogonal_init(mlp_hidden, n_actions, rng=rng)
    p["b2"] = np.zeros(n_actions)
    return p


def zeros_like_params(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def params_equal(a: Params, b: Params) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def check_shapes(params: Params, x=None, h=None):
    H = params["Uz"].shape[0]
    if x is not None and x.shape[-1] != params["Wz"].shape[0]:
        raise ValueError(f"input dim {x.shape[-1]} != network input dim {params['Wz'].shape[0]}")
    if h is not None and h.shape[-1] != H:
        raise ValueError(f"hidden dim {h.shape[-1]} != network hidden dim {H}")


def _sigmoid(a):
    # numerically stable logistic
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _gru(x, h, p):
    z = _sigmoid(x @ p["Wz"] + h @ p["Uz"] + p["bz"])
    r = _sigmoid(x @ p["Wr"] + h @ p["Ur"] + p["br"])
    rh = r * h
    n = np.tanh(x @ p["Wn"] + rh @ p["Un"] + p["bn"])
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, z, r, rh, n)


def gru_forward(x, h, params: Params):
    x, h = np.atleast_2d(x), np.atleast_2d(h)
    check_shapes(params, x, h)
    return _gru(x, h, params)[0]


def _gru_backward(cache, dh_new, p, grads):
    x, h, z, r, rh, n = cache
    dz = dh_new * (h - n)
    dn = dh_new * (1.0 - z)
    dh = dh_new * z

    da_n = dn * (1.0 - n * n)
    grads["Wn"] += x.T @ da_n
    grads["Un"] += rh.T @ da_n
    grads["bn"] += da_n.sum(0)
    drh = da_n @ p["Un"].T
    dx = da_n @ p["Wn"].T
    dh += drh * r
    dr = drh * h

    da_r = dr * r * (1.0 - r)
    grads["Wr"] += x.T @ da_r
    grads["Ur"] += h.T @ da_r
    grads["br"] += da_r.sum(0)
    dx += da_r @ p["Wr"].T
    dh += da_r @ p["Ur"].T

    da_z = dz * z * (1.0 - z)
    grads["Wz"] += x.T @ da_z
    grads["Uz"] += h.T @ da_z
    grads["bz"] += da_z.sum(0)
    dx += da_z @ p["Wz"].T
    dh += da_z @ p["Uz"].T
    return dx, dh


@dataclass
class ForwardRecord:
    """Intermediate values of one batched q_forward, consumed by backward()."""

    params: Params
    gru_cache: tuple
    h_out: np.ndarray
    a1: np.ndarray
    m1: np.ndarray
    used: bool = field(default=False)


def q_forward(x, h, params: Params, record=False):
    """Q-values for every action plus the new hidden state.

    With ``record=True`` a third element, the ForwardRecord, is returned.
    """
    x, h = np.atleast_2d(x), np.atleast_2d(h)
    check_shapes(params, x, h)
    h_out, cache = _gru(x, h, params)
    a1 = h_out @ params["W1"] + params["b1"]
    m1 = np.maximum(a1, 0.0)
    q = m1 @ params["W2"] + params["b2"]
    if record:
        return q, h_out, ForwardRecord(params, cache, h_out, a1, m1)
    return q, h_out


def backward(rec: ForwardRecord | None, dq, dh_out=None):
    """Reverse pass through one recorded q_forward.

    ``dq`` is dLoss/dq (B, A); ``dh_out`` optionally adds dLoss/dh_out.
    Returns (grads, dx, dh_in) with grads keyed like the params.
    """
    if rec is None:
        raise RuntimeError("backward() called without a recorded forward pass")
    p = rec.params
    grads = zeros_like_params(p)
    dq = np.atleast_2d(dq)
    grads["W2"] += rec.m1.T @ dq
    grads["b2"] += dq.sum(0)
    dm1 = dq @ p["W2"].T
    da1 = dm1 * (rec.a1 > 0)
    grads["W1"] += rec.h_out.T @ da1
    grads["b1"] += da1.sum(0)
    dh = da1 @ p["W1"].T
    if dh_out is not None:
        dh = dh + dh_out
    dx, dh_in = _gru_backward(rec.gru_cache, dh, p, grads)
    rec.used = True
    return grads, dx, dh_in


@dataclass
class Adam:
    lr: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    def step(self, params: Params, grads: Params) -> Params:
        """One bias-corrected update; returns fresh arrays, inputs untouched."""
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise FloatingPointError(f"non-finite gradient for {k!r} ({bad} entries)")
        if not self.m:
            self.m = zeros_like_params(params)
            self.v = zeros_like_params(params)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            out[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


def opt_step(params: Params, grads: Params, opt: Adam) -> Params:
    return opt.step(params, grads)


def numeric_grad(f, params: Params, eps=1e-5) -> Params:
    """Central finite differences of scalar f(params) w.r.t. every entry."""
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v)
        it = np.nditer(v, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = v[i]
            v[i] = old + eps
            fp = f(params)
            v[i] = old - eps
            fm = f(params)
            v[i] = old
            g[i] = (fp - fm) / (2 * eps)
        out[k] = g
    return out


def max_rel_error(analytic: Params, numeric: Params, floor=1e-6) -> float:
    worst = 0.0
    for k in analytic:
        a, n = analytic[k], numeric[k]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradcheck(f, params: Params, analytic: Params, eps=1e-5, floor=1e-6) -> float:
    return max_rel_error(analytic, numeric_grad(f, params, eps), floor)


def save_params(path, params: Params, **meta):
    """Write a versioned .npz; every tensor keeps its dtype and shape exactly."""
    arrays = {f"p.{k}": v for k, v in params.items()}
    for k, v in meta.items():
        arrays[f"meta.{k}"] = np.asarray(v)
    np.savez(path, __version__=np.asarray(CHECKPOINT_VERSION), **arrays)


def load_params(path) -> tuple[Params, dict]:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        version = int(z["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p.")}
        meta = {k[5:]: z[k].copy() for k in z.files if k.startswith("meta.")}
    return params, meta
