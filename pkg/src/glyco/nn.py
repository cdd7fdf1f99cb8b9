"""Stacked LSTM with a Gaussian output head, written directly against numpy.

Shapes follow the batch-first convention: a window batch is ``(B, T, I)``.
Each LSTM gate has its own weight matrix acting on the concatenation
``[h_{t-1}, x_t]``; internally the four gates are stacked in the order
forget, input, candidate, output so one matmul serves a time step.

The head emits two numbers per sample: the mean (identity activation) and
the log-variance, whose exponential is the predicted variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError, StructuralError

GATES = ("f", "i", "c", "o")
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 4
    hidden: int = 128
    n_layers: int = 2
    dense: tuple[int, ...] = (512, 128)
    dropout: float = 0.2

    def __post_init__(self) -> None:
        if self.input_size < 1 or self.hidden < 1 or self.n_layers < 1:
            raise ValueError("input_size, hidden and n_layers must be positive")
        if any(d < 1 for d in self.dense):
            raise ValueError("dense widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        object.__setattr__(self, "dense", tuple(int(d) for d in self.dense))


@dataclass
class LSTMLayerParams:
    W: dict[str, np.ndarray]  # gate -> (hidden, hidden + input)
    b: dict[str, np.ndarray]  # gate -> (hidden,)

    @property
    def hidden(self) -> int:
        return self.b["f"].shape[0]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        W = np.concatenate([self.W[g] for g in GATES], axis=0)
        b = np.concatenate([self.b[g] for g in GATES])
        return W, b


class ModelParams:
    """Named parameter tensors plus the config that shaped them.

    Names: ``lstm{l}.W_{g}``, ``lstm{l}.b_{g}``, ``dense{j}.W``,
    ``dense{j}.b``, ``head.W`` and ``head.b``.  Iteration order is fixed,
    which keeps serialisation and seeding reproducible.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
        self.config = config
        self.tensors = tensors
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            raise StructuralError("parameter names do not match the model config")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise StructuralError(f"{name} has shape {tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def layer(self, l: int) -> LSTMLayerParams:
        return LSTMLayerParams(
            W={g: self.tensors[f"lstm{l}.W_{g}"] for g in GATES},
            b={g: self.tensors[f"lstm{l}.b_{g}"] for g in GATES},
        )

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    H = config.hidden
    fan_in = config.input_size
    for l in range(config.n_layers):
        for g in GATES:
            shapes[f"lstm{l}.W_{g}"] = (H, H + fan_in)
        for g in GATES:
            shapes[f"lstm{l}.b_{g}"] = (H,)
        fan_in = H
    width = H
    for j, d in enumerate(config.dense):
        shapes[f"dense{j}.W"] = (d, width)
        shapes[f"dense{j}.b"] = (d,)
        width = d
    shapes["head.W"] = (2, width)
    shapes["head.b"] = (2,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if len(shape) == 2:
            fan_out, fan_in = shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-a, a, size=shape)
        elif name.endswith(".b_f"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(config, tensors)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

# Internal row order of the stacked gate matrix: the three sigmoid gates are
# contiguous so one activation call covers them.
_STACK_ORDER = ("f", "i", "o", "c")


def _stack(layer: LSTMLayerParams) -> tuple[np.ndarray, np.ndarray]:
    W = np.concatenate([layer.W[g] for g in _STACK_ORDER], axis=0)
    b = np.concatenate([layer.b[g] for g in _STACK_ORDER])
    return W, b


@dataclass
class CellCache:
    hx: np.ndarray
    f: np.ndarray
    i: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c_prev: np.ndarray
    tanh_c: np.ndarray


def lstm_cell_forward(
    layer: LSTMLayerParams, x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray
) -> tuple[np.ndarray, np.ndarray, CellCache]:
    """One LSTM step.

    f = sigmoid(W_f [h, x] + b_f), i = sigmoid(W_i [h, x] + b_i),
    C~ = tanh(W_c [h, x] + b_c), C = f * C_prev + i * C~,
    o = sigmoid(W_o [h, x] + b_o), h = tanh(C) * o.
    """
    H = layer.hidden
    x_t, h_prev, c_prev = (np.asarray(a, dtype=np.float64) for a in (x_t, h_prev, c_prev))
    n_in = layer.W["f"].shape[1] - H
    if h_prev.shape[-1] != H or c_prev.shape[-1] != H or x_t.shape[-1] != n_in:
        raise StructuralError(
            f"cell expects input {n_in} and hidden {H}, got x {x_t.shape}, "
            f"h {h_prev.shape}, c {c_prev.shape}"
        )
    hx = np.concatenate([h_prev, x_t], axis=-1)
    W, b = _stack(layer)
    z = hx @ W.T + b
    s = sigmoid(z[..., : 3 * H])
    f, i, o = s[..., :H], s[..., H : 2 * H], s[..., 2 * H :]
    g = np.tanh(z[..., 3 * H :])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    return o * tanh_c, c, CellCache(hx, f, i, g, o, c_prev, tanh_c)


@dataclass
class LayerCache:
    """Per-layer activations, stored time-major as ``(T, B, .)``."""

    inputs: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: np.ndarray  # sigmoid gates f, i, o stacked: (T, B, 3H)
    cand: np.ndarray
    tanh_c: np.ndarray


def _layer_forward(W: np.ndarray, b: np.ndarray, seq: np.ndarray) -> tuple[np.ndarray, LayerCache]:
    """``seq`` and the returned hidden sequence are time-major ``(T, B, .)``."""
    T, B, _ = seq.shape
    H = b.shape[0] // 4
    Wh_T = np.ascontiguousarray(W[:, :H].T)
    zx = seq @ W[:, H:].T + b
    h_all = np.zeros((T + 1, B, H))  # h_all[t] is the state entering step t
    c_all = np.zeros((T + 1, B, H))
    gates = np.empty((T, B, 3 * H))
    cand = np.empty((T, B, H))
    tanh_c = np.empty((T, B, H))
    for t in range(T):
        z = zx[t]
        z += h_all[t] @ Wh_T
        s = gates[t]
        np.multiply(z[:, : 3 * H], 0.5, out=s)
        np.tanh(s, out=s)
        s += 1.0
        s *= 0.5
        g = np.tanh(z[:, 3 * H :], out=cand[t])
        c = c_all[t + 1]
        np.multiply(s[:, :H], c_all[t], out=c)
        c += s[:, H : 2 * H] * g
        tc = np.tanh(c, out=tanh_c[t])
        np.multiply(s[:, 2 * H :], tc, out=h_all[t + 1])
    return h_all[1:], LayerCache(seq, h_all[:-1], c_all[:-1], gates, cand, tanh_c)


def _layer_backward(
    W: np.ndarray, lc: LayerCache, d_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backprop through time over time-major arrays; returns ``(dW, db, d_inputs)``."""
    T, B, H = d_out.shape
    Wh = W[:, :H]
    dz = np.empty((T, B, 4 * H))
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        s = lc.gates[t]
        f, i, o = s[:, :H], s[:, H : 2 * H], s[:, 2 * H :]
        g = lc.cand[t]
        tc = lc.tanh_c[t]
        dh += d_out[t]
        dc += dh * o * (1.0 - tc * tc)
        z = dz[t]
        # sigmoid'(x) = s (1 - s); tanh'(x) = 1 - tanh^2
        np.multiply(dc * lc.c_prev[t], f * (1.0 - f), out=z[:, :H])
        np.multiply(dc * g, i * (1.0 - i), out=z[:, H : 2 * H])
        np.multiply(dh * tc, o * (1.0 - o), out=z[:, 2 * H : 3 * H])
        np.multiply(dc * i, 1.0 - g * g, out=z[:, 3 * H :])
        dc *= f
        dh = z @ Wh
    flat_dz = dz.reshape(T * B, 4 * H)
    dWh = flat_dz.T @ lc.h_prev.reshape(T * B, H)
    dWx = flat_dz.T @ lc.inputs.reshape(T * B, -1)
    d_inputs = dz @ W[:, H:]
    return np.concatenate([dWh, dWx], axis=1), flat_dz.sum(axis=0), d_inputs


# ---------------------------------------------------------------------------
# Full network
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    params: ModelParams
    windows: np.ndarray
    stacked: list[tuple[np.ndarray, np.ndarray]]
    layers: list[LayerCache]
    h_last: np.ndarray
    mask: np.ndarray | None
    dense_in: list[np.ndarray]
    dense_pre: list[np.ndarray]
    head_in: np.ndarray
    mu: np.ndarray
    log_var: np.ndarray
    sigma2: np.ndarray = field(repr=False)


def dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept units scaled by ``1 / (1 - rate)``."""
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def stacked_forward(
    params: ModelParams,
    windows: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | int | None = None,
) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """Run a batch of windows through the network.

    Parameters
    ----------
    params : ModelParams
    windows : array, shape ``(B, T, input_size)`` or ``(T, input_size)``
        Normalised, fully observed inputs.
    mode : {"eval", "train"}
        ``"train"`` applies dropout to the last LSTM layer's final hidden
        state, using ``rng`` (a Generator or an integer seed).

    Returns
    -------
    mu, sigma2 : arrays of shape ``(B,)``
    cache : ForwardCache
        Everything :func:`backward` needs.
    """
    cfg = params.config
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != cfg.input_size or x.shape[1] < 1:
        raise StructuralError(f"windows must be (B, T, {cfg.input_size}), got {np.shape(windows)}")
    if np.isnan(x).any():
        raise StructuralError("windows contain missing values")
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', not {mode!r}")

    stacked = [_stack(params.layer(l)) for l in range(cfg.n_layers)]
    seq = np.ascontiguousarray(x.transpose(1, 0, 2))
    layers = []
    for W, b in stacked:
        seq, lc = _layer_forward(W, b, seq)
        layers.append(lc)
    h_last = seq[-1].copy()

    mask = None
    d = h_last
    if mode == "train" and cfg.dropout > 0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng or seed")
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        mask = dropout_mask(h_last.shape, cfg.dropout, gen)
        d = h_last * mask

    dense_in, dense_pre = [], []
    for j in range(len(cfg.dense)):
        dense_in.append(d)
        pre = d @ params[f"dense{j}.W"].T + params[f"dense{j}.b"]
        dense_pre.append(pre)
        d = np.maximum(pre, 0.0)
    out = d @ params["head.W"].T + params["head.b"]
    mu = out[:, 0]
    log_var = out[:, 1]
    with np.errstate(over="ignore"):
        sigma2 = np.exp(log_var)
    for name, arr in (("mu", mu), ("sigma2", sigma2)):
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite {name} in network output")
    if (sigma2 <= 0).any():
        raise NumericalError("variance underflowed to zero")
    cache = ForwardCache(params, x, stacked, layers, h_last, mask, dense_in, dense_pre, d, mu, log_var, sigma2)
    return mu, sigma2, cache


def nll_loss(mu, sigma2, y) -> float:
    """Mean Gaussian negative log-likelihood."""
    mu, sigma2, y = (np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (mu, sigma2, y))
    if np.isnan(sigma2).any() or (sigma2 <= 0).any():
        raise DomainError("variance must be positive")
    per = 0.5 * (LOG_2PI + np.log(sigma2)) + (y - mu) ** 2 / (2.0 * sigma2)
    return float(per.mean())


def backward(params: ModelParams, cache: ForwardCache, y) -> dict[str, np.ndarray]:
    """Exact gradient of the mean NLL with respect to every parameter."""
    if cache.params is not params:
        raise StructuralError("forward cache was produced with a different parameter object")
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    B = cache.mu.shape[0]
    if y.shape != (B,):
        raise StructuralError(f"targets have shape {y.shape}, batch size is {B}")
    cfg = params.config
    grads: dict[str, np.ndarray] = {}

    resid = y - cache.mu
    inv_var = np.exp(-cache.log_var)
    d_out = np.empty((B, 2))
    d_out[:, 0] = -resid * inv_var / B
    d_out[:, 1] = 0.5 * (1.0 - resid**2 * inv_var) / B

    head = {"head.W": d_out.T @ cache.head_in, "head.b": d_out.sum(axis=0)}
    dense = {}
    dd = d_out @ params["head.W"]
    for j in reversed(range(len(cfg.dense))):
        dpre = dd * (cache.dense_pre[j] > 0)
        dense[f"dense{j}.W"] = dpre.T @ cache.dense_in[j]
        dense[f"dense{j}.b"] = dpre.sum(axis=0)
        dd = dpre @ params[f"dense{j}.W"]
    dh_last = dd if cache.mask is None else dd * cache.mask

    H = cfg.hidden
    B, T, _ = cache.windows.shape
    d_seq = np.zeros((T, B, H))
    d_seq[-1] = dh_last
    for l in reversed(range(cfg.n_layers)):
        W, _ = cache.stacked[l]
        dW, db, d_seq = _layer_backward(W, cache.layers[l], d_seq)
        for k, g in enumerate(_STACK_ORDER):
            grads[f"lstm{l}.W_{g}"] = dW[k * H : (k + 1) * H]
            grads[f"lstm{l}.b_{g}"] = db[k * H : (k + 1) * H]
    grads.update(dense)
    grads.update(head)
    return {name: np.ascontiguousarray(grads[name]) for name in params}


def loss_and_grads(
    params: ModelParams,
    windows: np.ndarray,
    y: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | int | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    mu, sigma2, cache = stacked_forward(params, windows, mode, rng)
    return nll_loss(mu, sigma2, y), backward(params, cache, y)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step, self.beta1, self.beta2, self.eps,
        )


def adam_step(
    params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float
) -> tuple[ModelParams, AdamState]:
    """Bias-corrected Adam update; inputs are left untouched."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_t, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise StructuralError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_t[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return (
        ModelParams(params.config, new_t),
        AdamState(new_m, new_v, t, b1, b2, state.eps),
    )
