"""Linear SVM trained by dual coordinate descent, plus the logistic map.

Solves ``min 1/2 ||w||^2 + sum_i C_i max(0, 1 - y_i (w.x_i + b))`` where
the bias is handled as an extra constant feature (so it is regularised
together with ``w``). Positives get ``C_i = C * n_neg / n_pos`` and
negatives ``C_i = C``. Training data are sorted canonically before the
solve, so the result does not depend on input order.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

BIAS_FEATURE = 1.0
DEFAULT_TOL = 1e-6
MAX_EPOCHS = 200_000

MODEL_MAGIC = b"TLSV"
MODEL_VERSION = 1


@dataclass(frozen=True, eq=False)
class LinearModel:
    weights: np.ndarray
    bias: float
    C: float
    n_pos: int = 0
    n_neg: int = 0
    seed: int = 0
    duality_gap: float = 0.0
    primal: float = 0.0
    epochs: int = 0
    dual_trace: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def dim(self) -> int:
        return len(self.weights)


@njit(cache=True)
def _objectives(X, y, Cw, alpha, w):
    n = X.shape[0]
    ww = 0.0
    for j in range(w.shape[0]):
        ww += w[j] * w[j]
    loss = 0.0
    for i in range(n):
        m = 0.0
        for j in range(X.shape[1]):
            m += w[j] * X[i, j]
        h = 1.0 - y[i] * m
        if h > 0.0:
            loss += Cw[i] * h
    primal = 0.5 * ww + loss
    dual = 0.0
    for i in range(n):
        dual += alpha[i]
    dual -= 0.5 * ww
    return primal, dual


@njit(cache=True)
def _dual_cd(X, y, Cw, alpha, seed, tol, max_epochs):
    n, d = X.shape
    w = np.zeros(d)
    for i in range(n):
        if alpha[i] != 0.0:
            for j in range(d):
                w[j] += alpha[i] * y[i] * X[i, j]
    Q = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += X[i, j] * X[i, j]
        Q[i] = s
    np.random.seed(seed)
    trace = np.empty(max_epochs + 1)
    primal, dual = _objectives(X, y, Cw, alpha, w)
    trace[0] = dual
    gap = primal - dual
    epoch = 0
    while gap > tol and epoch < max_epochs:
        order = np.random.permutation(n)
        for k in range(n):
            i = order[k]
            if Q[i] <= 0.0:
                continue
            g = 0.0
            for j in range(d):
                g += w[j] * X[i, j]
            g = y[i] * g - 1.0
            a_old = alpha[i]
            if a_old == 0.0:
                pg = min(g, 0.0)
            elif a_old == Cw[i]:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg == 0.0:
                continue
            a_new = min(max(a_old - g / Q[i], 0.0), Cw[i])
            delta = (a_new - a_old) * y[i]
            if delta != 0.0:
                alpha[i] = a_new
                for j in range(d):
                    w[j] += delta * X[i, j]
        epoch += 1
        primal, dual = _objectives(X, y, Cw, alpha, w)
        trace[epoch] = dual
        gap = primal - dual
    return w, alpha, primal, gap, epoch, trace[: epoch + 1]


def _stack(vectors, name: str) -> np.ndarray:
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1) if X.size else X.reshape(0, 0)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError(f"{name}: need at least one vector")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name}: non-finite input")
    return X


def _canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    # np.lexsort sorts by the last key first
    keys = [X[:, j] for j in range(X.shape[1] - 1, -1, -1)] + [y]
    return np.lexsort(keys)


_MONITORS: list[list["LinearModel"]] = []


@contextmanager
def monitor():
    """Collect every model trained in this process while the block runs."""
    seen: list[LinearModel] = []
    _MONITORS.append(seen)
    try:
        yield seen
    finally:
        _MONITORS.remove(seen)


def train(positives, negatives, C: float = 1.0, *, seed: int = 0,
          tol: float = DEFAULT_TOL, warm_start: LinearModel | None = None,
          max_epochs: int = MAX_EPOCHS) -> LinearModel:
    """Fit a class-balanced hinge-loss linear SVM."""
    if not C > 0:
        raise ValueError("C must be positive")
    P = _stack(positives, "positives")
    N = _stack(negatives, "negatives")
    if P.shape[1] != N.shape[1]:
        raise ValueError(f"dimension mismatch: positives {P.shape[1]}, negatives {N.shape[1]}")
    n_pos, n_neg = len(P), len(N)
    X = np.vstack([P, N])
    y = np.concatenate([np.ones(n_pos), -np.ones(n_neg)])
    order = _canonical_order(X, y)
    X, y = X[order], y[order]
    Xa = np.hstack([X, np.full((len(X), 1), BIAS_FEATURE)])
    Cw = np.where(y > 0, C * n_neg / n_pos, C)

    alpha = np.zeros(len(X))
    if warm_start is not None:
        if warm_start.dim != X.shape[1]:
            raise ValueError("warm start model has the wrong dimension")
        m = y * (X @ warm_start.weights + warm_start.bias)
        alpha = np.where(m >= 1.0, 0.0, Cw * np.minimum(1.0, 1.0 - m))

    w, alpha, primal, gap, epochs, trace = _dual_cd(
        np.ascontiguousarray(Xa), y, Cw, alpha, int(seed) & 0x7FFFFFFF, float(tol), int(max_epochs))
    model = LinearModel(weights=w[:-1].copy(), bias=float(w[-1] * BIAS_FEATURE), C=float(C),
                        n_pos=n_pos, n_neg=n_neg, seed=int(seed), duality_gap=float(gap),
                        primal=float(primal), epochs=int(epochs), dual_trace=trace.copy())
    for seen in _MONITORS:
        seen.append(model)
    return model


def decision(model: LinearModel, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ValueError(f"dimension mismatch: model {model.dim}, input {x.shape[-1]}")
    out = x @ model.weights + model.bias
    return float(out) if np.ndim(out) == 0 else out


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out) if out.ndim == 0 else out


def probability(model: LinearModel, x):
    return sigmoid(decision(model, x))


def save_model(path, model: LinearModel) -> None:
    """Binary: magic, u16 version, u32 dim, f64 C, f64 bias, u32 n_pos,
    u32 n_neg, u64 seed, dim * f64 weights (little-endian)."""
    head = struct.pack("<HIddIIQ", MODEL_VERSION, model.dim, model.C, model.bias,
                       model.n_pos, model.n_neg, model.seed)
    Path(path).write_bytes(MODEL_MAGIC + head + np.asarray(model.weights, dtype="<f8").tobytes())


def load_model(path) -> LinearModel:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, dim, C, bias, n_pos, n_neg, seed = struct.unpack_from("<HIddIIQ", data, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = 4 + struct.calcsize("<HIddIIQ")
    w = np.frombuffer(data, dtype="<f8", count=dim, offset=off).astype(np.float64)
    return LinearModel(weights=w, bias=bias, C=C, n_pos=n_pos, n_neg=n_neg, seed=seed)


def dump_model(model: LinearModel) -> str:
    lines = [f"dim {model.dim}", f"C {model.C!r}", f"bias {model.bias!r}",
             f"n_pos {model.n_pos}", f"n_neg {model.n_neg}", f"seed {model.seed}"]
    lines += [f"w[{i}] {v!r}" for i, v in enumerate(model.weights)]
    return "\n".join(lines) + "\n"
