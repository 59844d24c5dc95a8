"""Small feed-forward approximators with explicit forward/backward passes.

Parameters live in one flat float64 vector.  Layout, in layer order: the
weight matrix W (out_size x in_size, row-major) followed by the bias b
(out_size).  Hidden activation is tanh; each output coordinate is squashed
through its own head: 'identity', 'unit' (sigmoid, range (0,1)) or
'positive' (softplus, range (0,inf)).

forward/backward accept a single input vector or a (batch, in_size) matrix.
For batched input the returned parameter gradient is summed over the batch;
input gradients keep the batch shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

HEAD_KINDS = ("identity", "unit", "positive")


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    heads: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        object.__setattr__(self, "heads", tuple(self.heads))
        if len(self.layer_sizes) < 3:
            raise ValueError("need at least one hidden layer (>= 3 sizes)")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("all layer sizes must be >= 1")
        if len(self.heads) != self.layer_sizes[-1]:
            raise ValueError("one head per output required")
        for h in self.heads:
            if h not in HEAD_KINDS:
                raise ValueError(f"unknown head {h!r}")

    @property
    def in_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_size(self) -> int:
        return self.layer_sizes[-1]


def uniform_heads(kind: str, n: int) -> tuple[str, ...]:
    return tuple([kind] * n)


def n_params(spec: MlpSpec) -> int:
    sizes = spec.layer_sizes
    return sum(sizes[i + 1] * sizes[i] + sizes[i + 1] for i in range(len(sizes) - 1))


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Fan-in-scaled uniform weights, zero biases."""
    chunks = []
    sizes = spec.layer_sizes
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=sizes[i + 1] * fan_in))
        chunks.append(np.zeros(sizes[i + 1]))
    return np.concatenate(chunks)


def _layers(spec: MlpSpec, params: np.ndarray):
    """Views (W, b) per layer into the flat parameter vector."""
    if params.shape != (n_params(spec),):
        raise ValueError(
            f"parameter vector has shape {params.shape}, expected ({n_params(spec)},)"
        )
    sizes = spec.layer_sizes
    out, off = [], 0
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        w = params[off:off + n_out * n_in].reshape(n_out, n_in)
        off += n_out * n_in
        b = params[off:off + n_out]
        off += n_out
        out.append((w, b))
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _apply_heads(spec: MlpSpec, raw: np.ndarray) -> np.ndarray:
    out = raw.copy()
    for j, head in enumerate(spec.heads):
        if head == "unit":
            out[..., j] = expit(raw[..., j])
        elif head == "positive":
            out[..., j] = _softplus(raw[..., j])
    return out


def _head_derivs(spec: MlpSpec, raw: np.ndarray) -> np.ndarray:
    d = np.ones_like(raw)
    for j, head in enumerate(spec.heads):
        if head == "unit":
            s = expit(raw[..., j])
            d[..., j] = s * (1.0 - s)
        elif head == "positive":
            d[..., j] = expit(raw[..., j])
    return d


def _forward_cached(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    layers = _layers(spec, params)
    hs = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w.T + b)
        hs.append(h)
    w, b = layers[-1]
    raw = h @ w.T + b
    return hs, raw


def forward(spec: MlpSpec, params: np.ndarray, x) -> np.ndarray:
    """Evaluate the network.  x: (in_size,) or (batch, in_size)."""
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    if single:
        x_arr = x_arr[None, :]
    if x_arr.shape[1] != spec.in_size:
        raise ValueError(f"input size {x_arr.shape[1]} != spec input {spec.in_size}")
    _, raw = _forward_cached(spec, params, x_arr)
    out = _apply_heads(spec, raw)
    return out[0] if single else out


def backward(spec: MlpSpec, params: np.ndarray, x, upstream):
    """Reverse-mode derivatives of forward.

    upstream holds dL/d(output) after head squashing, shaped like the
    forward output.  Returns (param_grads, input_grad): flat dL/dparams
    (summed over the batch when x is 2-D) and dL/dx with x's shape.
    """
    x_arr = np.asarray(x, dtype=float)
    g_out = np.asarray(upstream, dtype=float)
    single = x_arr.ndim == 1
    if single:
        x_arr = x_arr[None, :]
        g_out = g_out[None, :]
    if g_out.shape != (x_arr.shape[0], spec.out_size):
        raise ValueError(f"upstream shape {g_out.shape} does not match output")

    layers = _layers(spec, params)
    hs, raw = _forward_cached(spec, params, x_arr)

    grads = np.zeros_like(params)
    gviews = _layers(spec, grads)

    delta = g_out * _head_derivs(spec, raw)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = gviews[i]
        gw += delta.T @ hs[i]
        gb += delta.sum(axis=0)
        d_h = delta @ w
        if i > 0:
            delta = d_h * (1.0 - hs[i] ** 2)   # tanh'
    input_grad = d_h[0] if single else d_h
    return grads, input_grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def opt_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
             learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One Adam descent step.  Pure: returns new params and state."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("params/grads/state shapes disagree")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads**2
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new_params = params - learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m=m, v=v, t=t)


def params_to_dict(spec: MlpSpec, params: np.ndarray) -> dict:
    """JSON-ready form: sizes, heads, then the flat parameter list in the
    documented layer-major (W row-major, then b) order."""
    return {
        "layer_sizes": list(spec.layer_sizes),
        "heads": list(spec.heads),
        "params": [float(p) for p in params],
    }


def params_from_dict(d: dict) -> tuple[MlpSpec, np.ndarray]:
    spec = MlpSpec(tuple(d["layer_sizes"]), tuple(d["heads"]))
    params = np.asarray(d["params"], dtype=float)
    if params.shape != (n_params(spec),):
        raise ValueError("parameter count does not match spec")
    return spec, params


def save_params(path, spec: MlpSpec, params: np.ndarray) -> None:
    Path(path).write_text(json.dumps(params_to_dict(spec, params)))


def load_params(path) -> tuple[MlpSpec, np.ndarray]:
    return params_from_dict(json.loads(Path(path).read_text()))
