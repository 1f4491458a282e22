"""Desk-scale MLP classifier with input-gradient access for attacks.

Snapshot: ``network.json`` (MLP snapshot format) plus a ``classifier.json``
sidecar ``{"format": "cmap-lab-clf", "version": 1, "num_classes": C,
"norm_mean": [...] | null, "norm_std": [...] | null}``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import neural
from .data import Dataset
from .neural import MlpParams
from .numerics import NumericsError, RngStream, as_tensor


class ClassifierTrainingError(RuntimeError):
    pass


@dataclass
class ClfParams:
    network: MlpParams
    num_classes: int
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None

    def __post_init__(self):
        if self.network.output_dim != self.num_classes:
            raise NumericsError("network output dimension must equal the class count")
        for arr in (self.norm_mean, self.norm_std):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise NumericsError("normalisation constants must be finite")

    @property
    def input_dim(self) -> int:
        return self.network.input_dim


@dataclass
class ClfConfig:
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128)
    standardize: bool = True


def _prep(params: ClfParams, x) -> tuple[np.ndarray, tuple]:
    x = as_tensor(x, "x")
    lead = x.shape[:-1] if x.shape[-1] == params.input_dim else None
    if lead is None:
        # image batches (n, H, W) or a single image (H, W)
        per = params.input_dim
        if x.size % per:
            raise NumericsError(f"input of shape {x.shape} does not match classifier dim {per}")
        flat = x.reshape(-1, per)
        lead = (flat.shape[0],) if x.ndim > 2 else ()
    else:
        flat = x.reshape(-1, params.input_dim)
    if params.norm_mean is not None:
        flat = (flat - params.norm_mean) / params.norm_std
    return flat, lead


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def predict(params: ClfParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Logits and argmax labels (ties go to the lowest class index)."""
    flat, lead = _prep(params, x)
    logits = neural.mlp_forward(params.network, flat)
    labels = np.argmax(logits, axis=-1)  # first maximum wins
    if lead == ():
        return logits[0], labels[0]
    return logits, labels


def cross_entropy(params: ClfParams, x, y) -> np.ndarray:
    flat, _ = _prep(params, x)
    y = np.atleast_1d(np.asarray(y))
    lp = log_softmax(neural.mlp_forward(params.network, flat))
    return -lp[np.arange(len(y)), y]


def clf_input_grad(params: ClfParams, x, y) -> np.ndarray:
    """Gradient of each row's cross-entropy w.r.t. that row's input, shaped like ``x``."""
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if np.any(y < 0) or np.any(y >= params.num_classes):
        raise NumericsError(f"labels must lie in [0, {params.num_classes})")
    flat, _ = _prep(params, x)
    if len(y) != flat.shape[0]:
        raise NumericsError("one label per input row is required")
    p = softmax(neural.mlp_forward(params.network, flat))
    p[np.arange(len(y)), y] -= 1.0
    _, gin = neural.mlp_vjp(params.network, flat, p, need_params=False)
    if params.norm_std is not None:
        gin = gin / params.norm_std
    return gin.reshape(np.shape(x))


def accuracy(params: ClfParams, ds: Dataset) -> float:
    _, labels = predict(params, ds.flat())
    return float(np.mean(labels == ds.labels))


def train_clf(dataset: Dataset, config: ClfConfig = ClfConfig(),
              test: Dataset | None = None) -> tuple[ClfParams, dict]:
    root = RngStream(config.seed, 0xC1F)
    x = dataset.flat()
    y = dataset.labels
    c = dataset.num_classes
    if c < 2:
        raise NumericsError("classification needs at least two classes")
    mean = std = None
    if config.standardize:
        mean = x.mean(axis=0)
        std = x.std(axis=0) + 1e-8
    net = neural.init_mlp([x.shape[1], *config.hidden, c], root.child(0), "gelu")
    params = ClfParams(net, c, mean, std)
    xin = (x - mean) / std if mean is not None else x
    opt = neural.adam_init(net.flat(), lr=config.lr)
    n = x.shape[0]
    for epoch in range(config.epochs):
        order = root.child(1, epoch).generator().permutation(n)
        for start in range(0, n, config.batch):
            rows = order[start:start + config.batch]
            logits = neural.mlp_forward(params.network, xin[rows])
            p = softmax(logits)
            loss = -np.mean(np.log(p[np.arange(len(rows)), y[rows]] + 1e-300))
            if not math.isfinite(loss):
                raise ClassifierTrainingError(f"cross-entropy diverged in epoch {epoch}")
            p[np.arange(len(rows)), y[rows]] -= 1.0
            grads, _ = neural.mlp_vjp(params.network, xin[rows], p / len(rows))
            opt, net = neural.adam_step_mlp(opt, params.network, grads)
            params = ClfParams(net, c, mean, std)
    report = {"train_acc": accuracy(params, dataset)}
    if test is not None:
        report["test_acc"] = accuracy(params, test)
    return params, report


def save_clf(params: ClfParams, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    neural.save_mlp(params.network, d / "network.json")
    side = {
        "format": "cmap-lab-clf",
        "version": 1,
        "num_classes": params.num_classes,
        "norm_mean": None if params.norm_mean is None else params.norm_mean.tolist(),
        "norm_std": None if params.norm_std is None else params.norm_std.tolist(),
    }
    (d / "classifier.json").write_text(json.dumps(side, indent=2))


def load_clf(directory: str | Path) -> ClfParams:
    d = Path(directory)
    side = json.loads((d / "classifier.json").read_text())
    if side.get("format") != "cmap-lab-clf":
        raise NumericsError(f"{d} is not a classifier snapshot")
    mean = None if side["norm_mean"] is None else np.asarray(side["norm_mean"])
    std = None if side["norm_std"] is None else np.asarray(side["norm_std"])
    return ClfParams(neural.load_mlp(d / "network.json"), side["num_classes"], mean, std)
