"""Two-layer tanh network with closed-form input derivatives.

The PDE loss depends on first and second input-derivatives of the value
network, so parameter gradients are taken through those derivative
expressions. The architecture is fixed (3 -> N -> 1), which makes a
hand-derived reverse pass cheap and exactly checkable against finite
differences; no general tape is used.

Inputs are physical (W, L, t). Each network carries box bounds ``lo``/``hi``
and maps inputs affinely onto [-1, 1]^3 before the first layer; all reported
derivatives are with respect to the physical inputs.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = "liqhjb-net/1"

# (i, k) index pairs of the stored second derivatives: WW, LL, WL
_PAIRS = ((0, 0), (1, 1), (0, 1))


@dataclass
class TwoLayerNet:
    W1: np.ndarray  # (N, 3)
    b1: np.ndarray  # (N,)
    W2: np.ndarray  # (N,)
    b2: np.ndarray  # 0-d
    lo: np.ndarray  # (3,) input box lower bounds
    hi: np.ndarray  # (3,)
    head: str = "linear"

    def __post_init__(self):
        if self.head not in ("linear", "sigmoid"):
            raise ValueError(f"unknown head {self.head!r}")
        self.b2 = np.asarray(self.b2, dtype=float).reshape(())
        if np.any(self.hi <= self.lo):
            raise ValueError("input bounds must satisfy hi > lo")

    @property
    def hidden_size(self) -> int:
        return self.W1.shape[0]

    @property
    def input_scale(self) -> np.ndarray:
        return 2.0 / (self.hi - self.lo)

    def params(self) -> tuple[np.ndarray, ...]:
        return (self.W1, self.b1, self.W2, self.b2)

    def copy(self) -> "TwoLayerNet":
        return TwoLayerNet(
            self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy(),
            self.lo.copy(), self.hi.copy(), self.head,
        )

    def __call__(self, x):
        return forward(self, x)


@dataclass
class ParamGrad:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.W1, self.b1, self.W2, self.b2)

    def __add__(self, other: "ParamGrad") -> "ParamGrad":
        return ParamGrad(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def scale(self, c: float) -> "ParamGrad":
        return ParamGrad(*(c * a for a in self.arrays()))


@dataclass
class InputJet:
    """Value and partial derivatives in (W, L, t) at one point or a batch.

    The mixed second derivative is stored once (``WL`` serves both orders).
    """

    value: np.ndarray
    W: np.ndarray
    L: np.ndarray
    t: np.ndarray
    WW: np.ndarray
    LL: np.ndarray
    WL: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "InputJet":
        return cls(*(np.zeros(n) for _ in range(7)))

    def entries(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    def __add__(self, other: "InputJet") -> "InputJet":
        return InputJet(*(a + b for a, b in zip(self.entries(), other.entries())))

    def scale(self, c) -> "InputJet":
        return InputJet(*(c * a for a in self.entries()))

    def _first(self):
        return np.stack([self.W, self.L, self.t], axis=-1)

    def _second(self):
        return np.stack([self.WW, self.LL, self.WL], axis=-1)


def init(hidden_size: int = 128, seed: int = 0, lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0),
         head: str = "linear", zero_output: bool = False) -> TwoLayerNet:
    """Uniform fan-in initialisation, zero biases.

    ``zero_output`` zeroes the last layer so a sigmoid head starts at 0.5
    everywhere.
    """
    if hidden_size < 1:
        raise ValueError("hidden_size must be >= 1")
    rng = np.random.default_rng(seed)
    lim1 = 1.0 / np.sqrt(3.0)
    lim2 = 1.0 / np.sqrt(hidden_size)
    W1 = rng.uniform(-lim1, lim1, size=(hidden_size, 3))
    W2 = rng.uniform(-lim2, lim2, size=hidden_size)
    if zero_output:
        W2[:] = 0.0
    return TwoLayerNet(
        W1=W1, b1=np.zeros(hidden_size), W2=W2, b2=np.zeros(()),
        lo=np.asarray(lo, dtype=float), hi=np.asarray(hi, dtype=float), head=head,
    )


def _as_points(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != 3:
        raise ValueError(f"inputs must have trailing dimension 3, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite network input")
    return x, single


def _sigmoid(y):
    return 0.5 * (1.0 + np.tanh(0.5 * y))


class _Cache:
    """Hidden-layer quantities shared by a forward pass and its reverse pass.

    Arithmetic runs in ``dtype``; parameters stay float64 on the net.
    """

    __slots__ = ("s", "h", "h1", "a", "scale", "V", "VV", "_h2")

    def __init__(self, net: TwoLayerNet, x: np.ndarray, dtype=np.float64):
        self.scale = net.input_scale
        self.s = ((x - net.lo) * self.scale - 1.0).astype(dtype, copy=False)
        W1 = net.W1.astype(dtype)
        z = self.s[:, :1] * W1[:, 0]
        z += self.s[:, 1:2] * W1[:, 1]
        z += self.s[:, 2:3] * W1[:, 2]
        z += net.b1.astype(dtype)
        self.h = np.tanh(z, out=z)
        self.h1 = 1.0 - self.h * self.h           # tanh'
        self.a = net.W2.astype(dtype)
        self.V = (net.W1 * self.scale).astype(dtype)   # physical-unit first-layer weights (N, 3)
        self.VV = np.stack([self.V[:, i] * self.V[:, k] for i, k in _PAIRS], axis=1)
        self._h2 = None

    @property
    def h2(self):                                 # tanh''
        if self._h2 is None:
            self._h2 = -2.0 * self.h * self.h1
        return self._h2


def _raw_jet(net: TwoLayerNet, c: _Cache):
    y = c.h @ c.a + net.b2
    d1 = (c.h1 * c.a) @ c.V      # (P, 3): W, L, t
    d2 = (c.h2 * c.a) @ c.VV     # (P, 3): WW, LL, WL
    return y, d1, d2


def forward(net: TwoLayerNet, x, dtype=np.float64):
    """Network output at one point (3,) or a batch (P, 3)."""
    x, single = _as_points(x)
    c = _Cache(net, x, dtype)
    y = c.h @ c.a + net.b2
    if net.head == "sigmoid":
        y = _sigmoid(y)
    return float(y[0]) if single else y


def value_and_pullback(net: TwoLayerNet, x, dtype=np.float64):
    """Batch output and a function mapping d(loss)/d(output) to a ParamGrad."""
    x, _ = _as_points(x)
    c = _Cache(net, x, dtype)
    y = c.h @ c.a + net.b2
    if net.head == "sigmoid":
        y = _sigmoid(y)

    def pullback(g0) -> ParamGrad:
        g0 = np.asarray(g0, dtype=dtype)
        if g0.shape != y.shape:
            raise ValueError(f"cotangent shape {g0.shape} does not match output {y.shape}")
        if net.head == "sigmoid":
            g0 = g0 * y * (1.0 - y)
        gz = (c.h1 * g0[:, None]) * c.a
        return ParamGrad(
            (gz.T @ c.s).astype(float), gz.sum(0).astype(float),
            (c.h.T @ g0).astype(float), np.asarray(float(g0.sum())),
        )

    return y, pullback


def jet_and_pullback(net: TwoLayerNet, x, dtype=np.float64):
    """InputJet of a batch and a function pulling jet cotangents back to a ParamGrad."""
    x, _ = _as_points(x)
    P = x.shape[0]
    c = _Cache(net, x, dtype)
    y, d1, d2 = _raw_jet(net, c)
    raw = (y, d1, d2)
    if net.head == "sigmoid":
        s = _sigmoid(y)
        s1 = s * (1.0 - s)
        s2 = s1 * (1.0 - 2.0 * s)
        cross = np.stack([d1[:, i] * d1[:, k] for i, k in _PAIRS], axis=1)
        d2 = s2[:, None] * cross + s1[:, None] * d2
        d1 = s1[:, None] * d1
        y = s
    jet = InputJet(y, d1[:, 0], d1[:, 1], d1[:, 2], d2[:, 0], d2[:, 1], d2[:, 2])

    def pullback(cot: InputJet) -> ParamGrad:
        try:
            g0 = np.broadcast_to(np.asarray(cot.value, dtype=dtype), (P,))
            g1 = np.broadcast_to(cot._first(), (P, 3)).astype(dtype)
            g2 = np.broadcast_to(cot._second(), (P, 3)).astype(dtype)
        except ValueError as exc:
            raise ValueError(f"cotangent shapes do not match a batch of {P} points") from exc
        if net.head == "sigmoid":
            g0, g1, g2 = _sigmoid_pullback(raw, g0, g1, g2)
        return _raw_backward(c, g0, g1, g2)

    return jet, pullback


def forward_jet(net: TwoLayerNet, x, dtype=np.float64) -> InputJet:
    """Value, gradient and the needed second derivatives w.r.t. (W, L, t)."""
    xs, single = _as_points(x)
    jet, _ = jet_and_pullback(net, xs, dtype)
    if single:
        jet = InputJet(*(float(e[0]) for e in jet.entries()))
    return jet


def loss_backward(net: TwoLayerNet, x, cot: InputJet, dtype=np.float64) -> ParamGrad:
    """Summed parameter gradient given per-point d(loss)/d(jet entry) on batch ``x``."""
    return jet_and_pullback(net, x, dtype)[1](cot)


def _sigmoid_pullback(raw, g0, g1, g2):
    """Map cotangents on the sigmoid jet onto cotangents on the raw jet."""
    y, d1, d2 = raw
    s = _sigmoid(y)
    s1 = s * (1.0 - s)
    s2 = s1 * (1.0 - 2.0 * s)
    s3 = s1 * (1.0 - 6.0 * s + 6.0 * s**2)
    # out0 = s; out_i = s1 d_i; out_ik = s2 d_i d_k + s1 d_ik
    cross = np.stack([d1[:, i] * d1[:, k] for i, k in _PAIRS], axis=1)
    gy = g0 * s1 + (g1 * d1).sum(1) * s2 + (g2 * (s3[:, None] * cross + s2[:, None] * d2)).sum(1)
    gd1 = g1 * s1[:, None]
    for q, (i, k) in enumerate(_PAIRS):
        w = g2[:, q] * s2
        gd1[:, i] += w * d1[:, k]
        gd1[:, k] += w * d1[:, i]
    gd2 = g2 * s1[:, None]
    return gy, gd1, gd2


def _raw_backward(c: _Cache, g0, g1, g2) -> ParamGrad:
    a, h, h1 = c.a, c.h, c.h1
    G1 = g1 @ c.V.T                      # (P, N): sum_i g1_i V_ji
    G2 = g2 @ c.VV.T                     # (P, N): sum_q g2_q VV_jq
    # with t2 = -2 h h1 and t3 = h1 (6 h^2 - 2) the 2nd/3rd tanh derivatives:
    #   d/dW2 = h g0 + h1 G1 + t2 G2 = h g0 + h1 (G1 - 2 h G2)
    #   d/dz  = a (h1 g0 + t2 G1 + t3 G2) = a h1 (g0 - 2 h G1 + (6 h^2 - 2) G2)
    hG2 = h * G2
    E = G1 - 2.0 * hG2
    gW2 = h.T @ g0 + np.einsum("pj,pj->j", h1, E)
    inner = 2.0 * h * (hG2 - E)
    inner -= 2.0 * G2
    inner += g0[:, None]
    inner *= h1
    gz = inner * a
    gW1 = gz.T @ c.s
    gb1 = gz.sum(0)
    # explicit dependence of the derivative terms on the first-layer weights
    gV = (h1.T @ g1) * a[:, None]
    S = (c.h2.T @ g2) * a[:, None]
    V = c.V
    gV[:, 0] += 2.0 * S[:, 0] * V[:, 0] + S[:, 2] * V[:, 1]
    gV[:, 1] += 2.0 * S[:, 1] * V[:, 1] + S[:, 2] * V[:, 0]
    gW1 = gW1.astype(float) + gV.astype(float) * c.scale
    return ParamGrad(gW1, gb1.astype(float), gW2.astype(float), np.asarray(float(g0.sum())))


def hidden_features(net: TwoLayerNet, x) -> InputJet:
    """Per-unit jets of the hidden layer (float64): each entry has shape (P, N).

    The linear-head output jet equals ``features @ W2`` (plus b2 on the value),
    so the output layer can be fitted by linear least squares.
    """
    x, _ = _as_points(x)
    c = _Cache(net, x)
    d1 = [c.h1 * c.V[:, i] for i in range(3)]
    d2 = [c.h2 * c.VV[:, q] for q in range(3)]
    return InputJet(c.h, *d1, *d2)


def flat_params(net: TwoLayerNet) -> np.ndarray:
    """(W1 row-major, b1, W2, b2) as one vector; the order used by residual_jacobian."""
    return np.concatenate([p.ravel() for p in net.params()])


def set_flat_params(net: TwoLayerNet, theta) -> TwoLayerNet:
    theta = np.asarray(theta, dtype=float)
    N = net.hidden_size
    if theta.shape != (5 * N + 1,):
        raise ValueError(f"expected {5 * N + 1} parameters, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise FloatingPointError("non-finite parameter vector")
    net.W1 = theta[: 3 * N].reshape(N, 3).copy()
    net.b1 = theta[3 * N: 4 * N].copy()
    net.W2 = theta[4 * N: 5 * N].copy()
    net.b2 = np.asarray(theta[5 * N])
    return net


def residual_jacobian(net: TwoLayerNet, x, coef: InputJet, out=None):
    """Per-point r = sum_e coef_e * jet_e and its Jacobian dr/d(flat params), shape (P, 5N+1).

    ``coef`` entries broadcast to (P,). For a sigmoid head only the value
    entry may be non-zero (the control network never needs its jet here).
    ``out`` may supply a preallocated (P, 5N+1) array for the Jacobian.
    """
    x, _ = _as_points(x)
    P = x.shape[0]
    N = net.hidden_size
    J = np.empty((P, 5 * N + 1)) if out is None else out
    if J.shape != (P, 5 * N + 1):
        raise ValueError(f"Jacobian buffer has shape {J.shape}, expected {(P, 5 * N + 1)}")
    J1 = J[:, : 3 * N].reshape(P, N, 3)   # view: W1 is stored row-major
    c = _Cache(net, x)
    c0 = np.broadcast_to(np.asarray(coef.value, dtype=float), (P,))
    c1 = np.broadcast_to(coef._first(), (P, 3)).astype(float)
    c2 = np.broadcast_to(coef._second(), (P, 3)).astype(float)
    h, h1, a, V = c.h, c.h1, c.a, c.V
    if net.head == "sigmoid":
        if np.any(c1) or np.any(c2):
            raise ValueError("sigmoid head: only value coefficients are supported")
        y = _sigmoid(h @ a + net.b2)
        g = c0 * y * (1.0 - y)
        G = (g[:, None] * h1) * a
        np.multiply(G[:, :, None], c.s[:, None, :], out=J1)
        J[:, 3 * N: 4 * N] = G
        np.multiply(g[:, None], h, out=J[:, 4 * N: 5 * N])
        J[:, 5 * N] = g
        return c0 * y, J
    h2 = c.h2
    p = c1 @ V.T                          # (P, N)
    q = c2 @ c.VV.T
    h3 = h1 * (6.0 * h * h - 2.0)
    dW2 = J[:, 4 * N: 5 * N]
    np.multiply(c0[:, None], h, out=dW2)
    dW2 += h1 * p
    dW2 += h2 * q
    r = dW2 @ a + c0 * net.b2
    G = J[:, 3 * N: 4 * N]
    np.multiply(c0[:, None], h1, out=G)
    G += h2 * p
    G += h3 * q
    G *= a
    np.multiply(G[:, :, None], c.s[:, None, :], out=J1)
    # explicit dependence of V = W1 * scale inside the derivative terms
    h1a, h2a = h1 * a, h2 * a
    dq0 = 2.0 * c2[:, 0:1] * V[:, 0] + c2[:, 2:3] * V[:, 1]
    dq1 = 2.0 * c2[:, 1:2] * V[:, 1] + c2[:, 2:3] * V[:, 0]
    J1[:, :, 0] += (h1a * c1[:, 0:1] + h2a * dq0) * c.scale[0]
    J1[:, :, 1] += (h1a * c1[:, 1:2] + h2a * dq1) * c.scale[1]
    J1[:, :, 2] += h1a * c1[:, 2:3] * c.scale[2]
    J[:, 5 * N] = c0
    return r, J


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

_BLOCKS = ("W1", "b1", "W2", "b2")


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: TwoLayerNet, learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in net.params()],
            v=[np.zeros_like(p) for p in net.params()],
            learning_rate=learning_rate, **kw,
        )


def adam_step(net: TwoLayerNet, grad: ParamGrad, state: AdamState) -> tuple[TwoLayerNet, AdamState]:
    """One bias-corrected Adam descent step; parameters are updated in place."""
    for name, g in zip(_BLOCKS, grad.arrays()):
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(np.atleast_1d(g)))[0]
            raise FloatingPointError(f"non-finite gradient in block {name} at index {tuple(bad)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(net.params(), grad.arrays(), state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


# ---------------------------------------------------------------------------
# Levenberg-Marquardt
# ---------------------------------------------------------------------------


@dataclass
class LMState:
    """Damping state of a Levenberg-Marquardt (damped Gauss-Newton) loop."""

    damping: float = 1e-3
    step: int = 0
    rejected: int = 0
    up: float = 4.0
    down: float = 3.0
    max_tries: int = 12
    min_damping: float = 1e-12
    max_damping: float = 1e10


def lm_step(net: TwoLayerNet, residuals_and_jacobian, loss, state: LMState) -> float:
    """One LM step on sum(r**2); ``net`` is updated in place when the step helps.

    ``residuals_and_jacobian(net) -> (r, J)`` with J = dr/d(flat params);
    ``loss(net)`` must equal sum(r**2) and is used to accept or reject trials.
    The damping is Marquardt's: mu * diag(J^T J). Returns the loss after the step.
    """
    r, J = residuals_and_jacobian(net)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(J))):
        raise FloatingPointError("non-finite residual or Jacobian in LM step")
    current = float(r @ r)
    A = J.T @ J
    g = J.T @ r
    d = np.diag(A).copy()
    d += 1e-12 * max(d.max(), 1e-300)
    theta = flat_params(net)
    state.step += 1
    for _ in range(state.max_tries):
        M = A.copy()
        M[np.diag_indices_from(M)] += state.damping * d
        try:
            delta = np.linalg.solve(M, -g)
        except np.linalg.LinAlgError:
            state.damping = min(state.damping * state.up, state.max_damping)
            continue
        trial = set_flat_params(net.copy(), theta + delta) if np.all(np.isfinite(delta)) else None
        value = loss(trial) if trial is not None else np.inf
        if value < current:
            set_flat_params(net, theta + delta)
            state.damping = max(state.damping / state.down, state.min_damping)
            return float(value)
        state.rejected += 1
        state.damping = min(state.damping * state.up, state.max_damping)
    return current


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(net: TwoLayerNet, path) -> None:
    """Write an ``.npz`` container with a JSON header and row-major arrays."""
    header = dict(version=CHECKPOINT_VERSION, hidden_size=net.hidden_size, head=net.head)
    buf = io.BytesIO()
    np.savez(
        buf, header=np.array(json.dumps(header)), lo=net.lo, hi=net.hi,
        W1=np.ascontiguousarray(net.W1), b1=net.b1, W2=net.W2, b2=net.b2,
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> TwoLayerNet:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        net = TwoLayerNet(
            W1=z["W1"], b1=z["b1"], W2=z["W2"], b2=z["b2"], lo=z["lo"], hi=z["hi"],
            head=header["head"],
        )
    if net.hidden_size != header["hidden_size"]:
        raise ValueError("checkpoint hidden_size does not match weight shapes")
    return net
