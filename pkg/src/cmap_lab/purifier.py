"""Latent-optimisation purification with K latents and label voting.

Each test input ``x_hat`` gets K latents ``z_i ~ N(0, sigma_T^2 I)``. They are
optimised jointly on ``L_a + beta * L_d``, where ``L_a`` is the restoration
loss of the generated samples against ``x_hat`` and ``L_d`` is the latent
moment penalty. The K generated samples are then classified and the majority
label wins.

Trace CSV columns: ``iteration,loss_a,loss_d,total,latent_mean_norm,latent_std_mean``.
Result JSON per sample: ``{"true_label", "input_kind", "votes", "voted_label",
"branch_labels"}``.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import classifier as clf_mod
from . import neural
from .consistency import CmParams, cm_apply, cm_vjp
from .metrics import SsimConfig, loss_a_batch, loss_d_batch
from .numerics import NumericsError, RngStream, as_tensor

TRACE_COLUMNS = ["iteration", "loss_a", "loss_d", "total", "latent_mean_norm", "latent_std_mean"]
PURIFY_STREAM = 0xB0F1


class PurificationError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class PurifyConfig:
    k: int = 10
    iterations: int = 200
    eta: float = 2.0
    alpha: float = 2.0
    beta: float = 5e-4
    optimizer: str = "adam"  # adam | sgd
    sigma_t: float | None = None  # None -> the model's sigma_max
    seed: int = 0
    snapshot_stride: int = 10
    data_range: tuple[float, float] | None = (0.0, 1.0)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    reduction: str = "mean"

    def validate(self) -> None:
        if self.k < 2:
            raise NumericsError("K must be at least 2")
        if self.iterations < 1:
            raise NumericsError("iterations must be at least 1")
        if self.eta < 0 or self.alpha < 0 or self.beta < 0:
            raise NumericsError("eta, alpha and beta must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise NumericsError(f"unknown optimizer {self.optimizer!r}")
        if self.snapshot_stride < 1:
            raise NumericsError("snapshot stride must be positive")

    def latent_scale(self, cm: CmParams) -> float:
        return cm.schedule.sigma_max if self.sigma_t is None else float(self.sigma_t)


@dataclass
class LatentBatch:
    """Latents for B samples, shaped ``(B, K, d)``, plus optimiser state."""
    latents: np.ndarray
    iteration: int = 0
    opt: neural.AdamState | None = None

    def __post_init__(self):
        if self.latents.ndim != 3:
            raise NumericsError("latents must be shaped (B, K, d)")
        if not np.all(np.isfinite(self.latents)):
            raise NumericsError("latents must be finite")


@dataclass
class PurifyTrace:
    records: list[dict] = field(default_factory=list)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)  # iteration -> (K, *shape)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])


@dataclass
class PurifyResult:
    generated: np.ndarray  # (K, *shape), unclamped
    labels: np.ndarray  # (K,)
    voted: int
    counts: np.ndarray
    trace: PurifyTrace
    latents: np.ndarray | None = None
    vote_curve: list[tuple[int, int]] = field(default_factory=list)  # (iteration, voted label)


def sample_stream(cfg: PurifyConfig, sample_id: int) -> RngStream:
    return RngStream(cfg.seed, PURIFY_STREAM).child(sample_id)


def init_latents(cfg: PurifyConfig, dim: int, streams: Sequence[RngStream], sigma_t: float) -> LatentBatch:
    """K i.i.d. ``N(0, sigma_t^2 I)`` latents per stream, one substream per latent."""
    z = np.empty((len(streams), cfg.k, dim))
    for b, s in enumerate(streams):
        for i in range(cfg.k):
            z[b, i] = s.child(0, i).generator().standard_normal(dim)
    return LatentBatch(z * sigma_t)


def _generate(cm: CmParams, z: np.ndarray) -> np.ndarray:
    b, k, d = z.shape
    return cm_apply(cm, z.reshape(b * k, d), cm.schedule.sigma_max).reshape(b, k, d)


def objective(cm: CmParams, z: np.ndarray, x_hat: np.ndarray, cfg: PurifyConfig,
              shape: tuple[int, ...], sigma_t: float):
    """Per-sample ``(L_a, L_d, gradient of L_a + beta L_d w.r.t. z, generated)``."""
    b, k, d = z.shape
    gen = _generate(cm, z)
    image = len(shape) == 2
    la, g_gen = loss_a_batch(gen.reshape(b, k, *shape), x_hat.reshape(b, *shape), cfg.alpha,
                             cfg.ssim, image, cfg.reduction)
    ld, g_d = loss_d_batch(z, 0.0, sigma_t)
    g = cm_vjp(cm, z.reshape(b * k, d), g_gen.reshape(b * k, d)).reshape(b, k, d)
    return la, ld, g + cfg.beta * g_d, gen


def _record(it: int, la: float, ld: float, beta: float, z: np.ndarray) -> dict:
    m = z.mean(axis=0)
    return {"iteration": it, "loss_a": float(la), "loss_d": float(ld), "total": float(la + beta * ld),
            "latent_mean_norm": float(np.linalg.norm(m)),
            "latent_std_mean": float(z.std(axis=0).mean()),
            # over all K*d entries; kept in memory only, the CSV holds TRACE_COLUMNS
            "latent_mean_pooled": float(z.mean()), "latent_std_pooled": float(z.std())}


def purify_step(state: LatentBatch, x_hat: np.ndarray, cm: CmParams, cfg: PurifyConfig,
                shape: tuple[int, ...], sigma_t: float):
    """One descent step on ``L_a + beta L_d``. Returns ``(state', records, generated)``.

    Records and generated samples describe the iterate *before* the update.
    """
    z = state.latents
    la, ld, g, gen = objective(cm, z, x_hat, cfg, shape, sigma_t)
    if not (np.all(np.isfinite(la)) and np.all(np.isfinite(ld)) and np.all(np.isfinite(g))):
        raise PurificationError("purification loss is not finite", state.iteration)
    recs = [_record(state.iteration, la[i], ld[i], cfg.beta, z[i]) for i in range(len(z))]
    if cfg.optimizer == "adam":
        opt = state.opt or neural.adam_init([z], lr=cfg.eta)
        opt, (z_new,) = neural.adam_step(opt, [z], [g])
    else:
        opt = None
        z_new = z - cfg.eta * g
    return LatentBatch(z_new, state.iteration + 1, opt), recs, gen


def purify_batch(x_hats, cm: CmParams, cfg: PurifyConfig, sample_ids: Sequence[int] | None = None,
                 init: LatentBatch | None = None):
    """Purify B inputs independently (vectorised). Returns ``(generated (B,K,*shape), traces, latents)``."""
    cfg.validate()
    x = as_tensor(x_hats, "x_hats")
    b = x.shape[0]
    shape = tuple(x.shape[1:])
    d = int(np.prod(shape))
    if d != cm.dim:
        raise NumericsError(f"sample size {d} != model dimension {cm.dim}")
    ids = list(range(b)) if sample_ids is None else list(sample_ids)
    if len(ids) != b:
        raise NumericsError("one sample id per input is required")
    sigma_t = cfg.latent_scale(cm)
    state = init or init_latents(cfg, d, [sample_stream(cfg, i) for i in ids], sigma_t)
    xf = x.reshape(b, d)
    traces = [PurifyTrace() for _ in range(b)]
    for it in range(cfg.iterations):
        state, recs, gen = purify_step(state, xf, cm, cfg, shape, sigma_t)
        for tr, r, g in zip(traces, recs, gen):
            tr.records.append(r)
            if it % cfg.snapshot_stride == 0:
                tr.snapshots[it] = g.reshape(cfg.k, *shape)
    final = _generate(cm, state.latents)
    for tr, g in zip(traces, final):
        tr.snapshots[cfg.iterations] = g.reshape(cfg.k, *shape)
    return final.reshape(b, cfg.k, *shape), traces, state.latents


def purify(x_hat, cm: CmParams, cfg: PurifyConfig, sample_id: int = 0):
    """Purify one input. Returns ``(K generated samples, trace)``."""
    x = as_tensor(x_hat, "x_hat")
    gen, traces, _ = purify_batch(x[None], cm, cfg, [sample_id])
    return gen[0], traces[0]


def vote(labels, num_classes: int | None = None) -> tuple[int, np.ndarray]:
    """Majority label and per-class counts; ties go to the lowest label."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size < 1:
        raise NumericsError("vote needs a non-empty 1-D label list")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0:
        raise NumericsError("labels must be non-negative integers")
    if num_classes is not None and labels.max() >= num_classes:
        raise NumericsError(f"label {labels.max()} outside [0, {num_classes})")
    counts = np.bincount(labels, minlength=num_classes or 0)
    return int(np.argmax(counts)), counts


def _classify(clf, samples: np.ndarray, data_range) -> np.ndarray:
    if data_range is not None:
        samples = np.clip(samples, *data_range)
    _, labels = clf_mod.predict(clf, samples.reshape(samples.shape[0], -1))
    return np.atleast_1d(labels)


def purify_predict_batch(x_hats, cm: CmParams, clf, cfg: PurifyConfig,
                         sample_ids: Sequence[int] | None = None,
                         curve: bool = False) -> list[PurifyResult]:
    gen, traces, latents = purify_batch(x_hats, cm, cfg, sample_ids)
    out = []
    for i, (g, tr) in enumerate(zip(gen, traces)):
        labels = _classify(clf, g, cfg.data_range)
        voted, counts = vote(labels, clf.num_classes)
        vc = []
        if curve:
            vc = [(it, vote(_classify(clf, snap, cfg.data_range), clf.num_classes)[0])
                  for it, snap in sorted(tr.snapshots.items())]
        out.append(PurifyResult(g, labels, voted, counts, tr, latents[i], vc))
    return out


def purify_predict(x_hat, cm: CmParams, clf, cfg: PurifyConfig, sample_id: int = 0,
                   curve: bool = False) -> PurifyResult:
    x = as_tensor(x_hat, "x_hat")
    return purify_predict_batch(x[None], cm, clf, cfg, [sample_id], curve)[0]


def _predict_chunk(args) -> list[PurifyResult]:
    return purify_predict_batch(*args)


def predict_many(x_hats, cm: CmParams, clf, cfg: PurifyConfig, sample_ids: Sequence[int],
                 chunk: int = 50, curve: bool = False, workers: int = 1) -> list[PurifyResult]:
    """Purify and vote on many inputs in fixed-size chunks.

    Chunk boundaries do not depend on ``workers``, so results are identical
    for any worker count.
    """
    x = as_tensor(x_hats, "x_hats")
    ids = list(sample_ids)
    jobs = [(x[s:s + chunk], cm, clf, cfg, ids[s:s + chunk], curve) for s in range(0, len(x), chunk)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_predict_chunk, jobs))
    else:
        parts = [_predict_chunk(j) for j in jobs]
    return [r for p in parts for r in p]


# ---------------------------------------------------------------------------
# persistence


def write_trace_csv(trace: PurifyTrace, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in trace.records:
            w.writerow([r["iteration"]] + [repr(r[c]) for c in TRACE_COLUMNS[1:]])


def read_trace_csv(path: str | Path) -> PurifyTrace:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0]) != TRACE_COLUMNS:
        raise NumericsError(f"unexpected trace columns {list(rows[0])}")
    recs = [{"iteration": int(r["iteration"]), **{c: float(r[c]) for c in TRACE_COLUMNS[1:]}}
            for r in rows]
    return PurifyTrace(recs)


def result_to_dict(res: PurifyResult, true_label: int | None, input_kind: str) -> dict:
    return {
        "true_label": None if true_label is None else int(true_label),
        "input_kind": input_kind,
        "votes": [int(c) for c in res.counts],
        "voted_label": int(res.voted),
        "branch_labels": [int(v) for v in res.labels],
    }


def write_result_json(res: PurifyResult, path: str | Path, true_label: int | None = None,
                      input_kind: str = "clean") -> None:
    Path(path).write_text(json.dumps(result_to_dict(res, true_label, input_kind), indent=2))


def pooled_latent_stats(latents: np.ndarray) -> tuple[float, float, float]:
    """Pooled mean, its standard error and pooled std over every latent entry."""
    flat = np.asarray(latents, dtype=np.float64).reshape(-1)
    sd = float(flat.std())
    return float(flat.mean()), sd / math.sqrt(flat.size), sd
