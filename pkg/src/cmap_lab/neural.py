"""Small multilayer perceptron with hand-written reverse mode and Adam.

Layout: ``layers[i] = (W, b)`` with ``W`` of shape ``(fan_in, fan_out)`` so a
batch ``x`` of shape ``(n, fan_in)`` maps to ``x @ W + b``. Every hidden layer
is followed by its activation; the last layer is affine.

Snapshot format (JSON, ``format == "cmap-lab-mlp"``, ``version == 1``)::

    {"format": "cmap-lab-mlp", "version": 1,
     "input_dim": 3, "output_dim": 2, "activations": ["gelu"],
     "layers": [{"shape": [3, 8], "weight": [...24 floats...], "bias": [...8...]},
                {"shape": [8, 2], "weight": [...], "bias": [...]}]}

Weights are stored row-major. Python's float repr round-trips exactly, so a
save/load cycle reproduces forward outputs bit-for-bit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .numerics import NumericsError, RngStream, as_tensor

SNAPSHOT_FORMAT = "cmap-lab-mlp"
SNAPSHOT_VERSION = 1
GELU_SCALE = 1.702


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        return x * _sigmoid(GELU_SCALE * x)
    if name == "tanh":
        return np.tanh(x)
    if name == "identity":
        return x
    raise NumericsError(f"unknown activation {name!r}")


def _act_grad(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        s = _sigmoid(GELU_SCALE * x)
        return s + GELU_SCALE * x * s * (1.0 - s)
    if name == "tanh":
        return 1.0 - np.tanh(x) ** 2
    if name == "identity":
        return np.ones_like(x)
    raise NumericsError(f"unknown activation {name!r}")


@dataclass
class MlpParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    activations: list[str]

    def __post_init__(self):
        if len(self.activations) != len(self.layers) - 1:
            raise NumericsError("need one activation per hidden layer")
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise NumericsError(f"layer dimensions do not chain: {w0.shape} -> {w1.shape}")
        for w, b in self.layers:
            if b.shape != (w.shape[1],):
                raise NumericsError("bias shape does not match weight fan-out")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def copy(self) -> "MlpParams":
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers], list(self.activations))

    def flat(self) -> list[np.ndarray]:
        return [a for wb in self.layers for a in wb]

    @classmethod
    def from_flat(cls, arrays: list[np.ndarray], activations: list[str]) -> "MlpParams":
        return cls([(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)], list(activations))


def init_mlp(sizes: list[int], stream: RngStream, activation: str = "gelu",
             out_scale: float = 1.0) -> MlpParams:
    """He-style initialisation; ``sizes = [in, hidden..., out]``."""
    gen = stream.generator()
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = np.sqrt(2.0 / fan_in)
        if i == len(sizes) - 2:
            scale *= out_scale
        layers.append((gen.standard_normal((fan_in, fan_out)) * scale, np.zeros(fan_out)))
    return MlpParams(layers, [activation] * (len(sizes) - 2))


def _forward_cache(params: MlpParams, x: np.ndarray):
    pre = []
    h = x
    hs = [x]
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        a = h @ w + b
        if i < last:
            pre.append(a)
            h = _act(params.activations[i], a)
            hs.append(h)
        else:
            h = a
    return h, hs, pre


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise NumericsError(f"input dim {x.shape[-1]} != {params.input_dim}")
    lead = x.shape[:-1]
    out, _, _ = _forward_cache(params, x.reshape(-1, params.input_dim))
    return out.reshape(*lead, params.output_dim)


def mlp_vjp(params: MlpParams, x: np.ndarray, cotangent: np.ndarray,
            need_params: bool = True):
    """Reverse-mode gradients of ``<cotangent, forward(x)>``.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` mirrors
    ``params.layers`` (or is ``None`` when ``need_params`` is false).
    """
    x = np.asarray(x, dtype=np.float64)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise NumericsError(f"input dim {x.shape[-1]} != {params.input_dim}")
    expected = x.shape[:-1] + (params.output_dim,)
    if cotangent.shape != expected:
        raise NumericsError(f"cotangent shape {cotangent.shape} != output shape {expected}")
    lead = x.shape[:-1]
    x2 = x.reshape(-1, params.input_dim)
    _, hs, pre = _forward_cache(params, x2)
    g = cotangent.reshape(-1, params.output_dim)
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        if need_params:
            grads[i] = (hs[i].T @ g, g.sum(axis=0))
        g = g @ w.T
        if i > 0:
            g = g * _act_grad(params.activations[i - 1], pre[i - 1])
    return (grads if need_params else None), g.reshape(*lead, params.input_dim)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_init(arrays: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(lr, beta1, beta2, eps, 0,
                     [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(state: AdamState, arrays: list[np.ndarray], grads: list[np.ndarray]):
    """One bias-corrected Adam update. Returns ``(new_state, new_arrays)``."""
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise NumericsError("parameter / gradient / state lists differ in length")
    step = state.step + 1
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise NumericsError(f"shape mismatch in adam_step: {p.shape} vs {g.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return AdamState(state.lr, state.beta1, state.beta2, state.eps, step, new_m, new_v), new_p


def adam_step_mlp(state: AdamState, params: MlpParams, grads) -> tuple[AdamState, MlpParams]:
    flat_g = [a for wb in grads for a in wb]
    state, flat = adam_step(state, params.flat(), flat_g)
    return state, MlpParams.from_flat(flat, params.activations)


# ---------------------------------------------------------------------------
# finite differences


def numeric_grad(f: Callable[[np.ndarray], float], point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    point = np.array(point, dtype=np.float64)
    g = np.zeros_like(point)
    flat = point.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(point)
        flat[i] = old - h
        fm = f(point)
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max over coordinates of ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is 1e-3 of the largest numeric component, so coordinates whose
    true derivative is (near) zero are compared on the gradient's own scale.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.shape != numeric.shape:
        raise NumericsError("gradient shapes differ")
    scale = float(np.max(np.abs(numeric))) if numeric.size else 0.0
    floor = max(1e-3 * scale, 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_diff_check(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                      point: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between ``grad(point)`` and central differences of ``f``."""
    if h <= 0:
        raise NumericsError("h must be positive")
    point = as_tensor(point, "point")
    return gradient_error(grad(point.copy()), numeric_grad(f, point, h))


# ---------------------------------------------------------------------------
# snapshots


def mlp_to_dict(params: MlpParams) -> dict:
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "input_dim": params.input_dim,
        "output_dim": params.output_dim,
        "activations": list(params.activations),
        "layers": [
            {"shape": list(w.shape), "weight": w.reshape(-1).tolist(), "bias": b.tolist()}
            for w, b in params.layers
        ],
    }


def mlp_from_dict(d: dict) -> MlpParams:
    if d.get("format") != SNAPSHOT_FORMAT or d.get("version") != SNAPSHOT_VERSION:
        raise NumericsError("not a cmap-lab-mlp v1 snapshot")
    layers = []
    for layer in d["layers"]:
        shape = tuple(layer["shape"])
        w = np.array(layer["weight"], dtype=np.float64).reshape(shape)
        b = np.array(layer["bias"], dtype=np.float64)
        layers.append((w, b))
    params = MlpParams(layers, list(d["activations"]))
    if params.input_dim != d["input_dim"] or params.output_dim != d["output_dim"]:
        raise NumericsError("snapshot dims disagree with layer shapes")
    return params


def save_mlp(params: MlpParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mlp_to_dict(params)))


def load_mlp(path: str | Path) -> MlpParams:
    return mlp_from_dict(json.loads(Path(path).read_text()))
