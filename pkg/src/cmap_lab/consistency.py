"""Consistency models: noise schedule, skip/out parameterisation, analytic
Gaussian backend, neural backend and its training by consistency training
(CT), one-step consistency distillation (CD) or trajectory distillation (TD).

TD solves the teacher probability-flow ODE to its end for a pool of latents
and regresses ``f(x_t, t)`` onto each trajectory's endpoint. That target is
the consistency function itself, so no bootstrapping through the EMA target
is needed, which makes TD far cheaper than CT/CD for image data.

Samples are flat vectors: ``x`` has shape ``(d,)`` or ``(n, d)``. The diffusion
convention is ``x_t = x + t * z`` with ``z ~ N(0, I)``, so the latent at the
largest time is ``z_T ~ N(0, sigma_max**2 I)``.

Model snapshot: a directory holding ``manifest.json``::

    {"format": "cmap-lab-cm", "version": 1, "backend": "analytic" | "neural",
     "schedule": {"sigma_min":..., "sigma_max":..., "rho":..., "n":..., "sigma_data":...},
     "analytic": {"mu": [...], "sigma_x": s}            # analytic backend
     "neural": {"ema_decay": r, "dim": d}}               # neural backend

plus ``online.json`` and ``target.json`` in the MLP snapshot format for the
neural backend.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import neural
from .neural import AdamState, MlpParams
from .numerics import NumericsError, RngStream, as_tensor

_T_TOL = 1e-12


class UnsupportedOperation(NumericsError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    n: int = 18
    sigma_data: float = 0.5

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise NumericsError("need 0 < sigma_min < sigma_max")
        if self.n < 2 or self.rho <= 0 or self.sigma_data <= 0:
            raise NumericsError("need n >= 2, rho > 0, sigma_data > 0")

    def with_n(self, n: int) -> "NoiseSchedule":
        return NoiseSchedule(self.sigma_min, self.sigma_max, self.rho, n, self.sigma_data)


def karras_grid(sigma_min: float, sigma_max: float, rho: float, n: int) -> np.ndarray:
    """``t_i = (smin^(1/rho) + (i-1)/(n-1) (smax^(1/rho) - smin^(1/rho)))^rho``, increasing."""
    ramp = np.arange(n) / (n - 1)
    lo = sigma_min ** (1.0 / rho)
    hi = sigma_max ** (1.0 / rho)
    t = (lo + ramp * (hi - lo)) ** rho
    t[0], t[-1] = sigma_min, sigma_max
    return t


def karras_timesteps(schedule: NoiseSchedule) -> np.ndarray:
    return karras_grid(schedule.sigma_min, schedule.sigma_max, schedule.rho, schedule.n)


def _check_t(schedule: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    lo, hi = schedule.sigma_min, schedule.sigma_max
    if np.any(t < lo * (1 - _T_TOL)) or np.any(t > hi * (1 + _T_TOL)):
        raise NumericsError(f"t outside [{lo}, {hi}]")
    return t


def skip_out_coeffs(schedule: NoiseSchedule, t):
    t = _check_t(schedule, t)
    sd2 = schedule.sigma_data ** 2
    dt = t - schedule.sigma_min
    c_skip = sd2 / (dt * dt + sd2)
    c_out = schedule.sigma_data * dt / np.sqrt(sd2 + t * t)
    return c_skip, c_out


def input_scale(schedule: NoiseSchedule, t):
    return 1.0 / np.sqrt(np.asarray(t, dtype=np.float64) ** 2 + schedule.sigma_data ** 2)


def time_embedding(t):
    return np.log(t) / 4.0


@dataclass
class AnalyticBackend:
    mu: np.ndarray
    sigma_x: float

    def __post_init__(self):
        self.mu = as_tensor(self.mu, "mu").reshape(-1)
        if not self.sigma_x > 0:
            raise NumericsError("sigma_x must be positive")


@dataclass
class NeuralBackend:
    online: MlpParams
    target: MlpParams
    ema_decay: float = 0.99

    def __post_init__(self):
        if not 0 <= self.ema_decay < 1:
            raise NumericsError("ema_decay must lie in [0, 1)")
        if [w.shape for w, _ in self.online.layers] != [w.shape for w, _ in self.target.layers]:
            raise NumericsError("online and target networks differ in shape")


@dataclass
class CmParams:
    schedule: NoiseSchedule
    backend: AnalyticBackend | NeuralBackend

    @property
    def dim(self) -> int:
        if isinstance(self.backend, AnalyticBackend):
            return self.backend.mu.size
        return self.backend.online.output_dim

    @property
    def is_analytic(self) -> bool:
        return isinstance(self.backend, AnalyticBackend)


def analytic_cm(mu, sigma_x: float, schedule: NoiseSchedule = NoiseSchedule()) -> CmParams:
    return CmParams(schedule, AnalyticBackend(np.asarray(mu, dtype=np.float64), float(sigma_x)))


def init_neural_cm(dim: int, stream: RngStream, schedule: NoiseSchedule = NoiseSchedule(),
                   hidden: tuple[int, ...] = (256, 256, 256), ema_decay: float = 0.99) -> CmParams:
    net = neural.init_mlp([dim + 1, *hidden, dim], stream, "gelu", out_scale=0.1)
    return CmParams(schedule, NeuralBackend(net, net.copy(), ema_decay))


# ---------------------------------------------------------------------------
# evaluation


def _as_batch(x, dim: int) -> tuple[np.ndarray, bool]:
    x = as_tensor(x, "x")
    if x.shape[-1] != dim:
        raise NumericsError(f"sample dimension {x.shape[-1]} != model dimension {dim}")
    single = x.ndim == 1
    return (x[None, :] if single else x.reshape(-1, dim)), single


def _row_t(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.full(n, float(t)) if t.ndim == 0 else t.reshape(n)


def _net_input(schedule: NoiseSchedule, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.concatenate([x * input_scale(schedule, t)[:, None], time_embedding(t)[:, None]], axis=1)


def _neural_apply(schedule: NoiseSchedule, net: MlpParams, x: np.ndarray, t: np.ndarray) -> np.ndarray:
    c_skip, c_out = skip_out_coeffs(schedule, t)
    return c_skip[:, None] * x + c_out[:, None] * neural.mlp_forward(net, _net_input(schedule, x, t))


def _analytic_ratio(b: AnalyticBackend, schedule: NoiseSchedule, t):
    s2 = b.sigma_x ** 2
    return np.sqrt((s2 + schedule.sigma_min ** 2) / (s2 + np.asarray(t) ** 2))


def cm_apply(params: CmParams, x_t, t, use_target: bool = False) -> np.ndarray:
    """``f(x_t, t)``; ``t`` is a scalar or one time per row of ``x_t``."""
    xb, single = _as_batch(x_t, params.dim)
    t = _check_t(params.schedule, _row_t(t, xb.shape[0]))
    b = params.backend
    if isinstance(b, AnalyticBackend):
        ratio = _analytic_ratio(b, params.schedule, t)
        out = b.mu + (xb - b.mu) * ratio[:, None]
        out[t <= params.schedule.sigma_min] = xb[t <= params.schedule.sigma_min]
    else:
        out = _neural_apply(params.schedule, b.target if use_target else b.online, xb, t)
    return out[0] if single else out.reshape(np.shape(x_t))


def cm_generate(params: CmParams, z) -> np.ndarray:
    return cm_apply(params, z, params.schedule.sigma_max)


def cm_vjp(params: CmParams, z, cotangent, t: float | None = None) -> np.ndarray:
    """Gradient of ``<cotangent, f(z, t)>`` with respect to ``z`` (``t`` defaults to sigma_max)."""
    zb, single = _as_batch(z, params.dim)
    cot = as_tensor(cotangent, "cotangent")
    if cot.shape != np.shape(z):
        raise NumericsError(f"cotangent shape {cot.shape} != latent shape {np.shape(z)}")
    cb = cot[None, :] if single else cot.reshape(-1, params.dim)
    t = _check_t(params.schedule, _row_t(params.schedule.sigma_max if t is None else t, zb.shape[0]))
    b = params.backend
    if isinstance(b, AnalyticBackend):
        g = cb * _analytic_ratio(b, params.schedule, t)[:, None]
    else:
        c_skip, c_out = skip_out_coeffs(params.schedule, t)
        inp = _net_input(params.schedule, zb, t)
        _, gin = neural.mlp_vjp(b.online, inp, cb * c_out[:, None], need_params=False)
        g = c_skip[:, None] * cb + gin[:, :-1] * input_scale(params.schedule, t)[:, None]
    return g[0] if single else g.reshape(np.shape(z))


def analytic_score(mu, sigma_x: float, x, t) -> np.ndarray:
    """Score of ``N(mu, (sigma_x^2 + t^2) I)`` at ``x``; ``t`` scalar or per row."""
    if not sigma_x > 0:
        raise NumericsError("sigma_x must be positive")
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    var = sigma_x ** 2 + t ** 2
    if var.ndim == 1 and x.ndim == 2:
        var = var[:, None]
    return -(x - np.asarray(mu, dtype=np.float64)) / var


def empirical_score(reference: np.ndarray, x, t) -> np.ndarray:
    """Exact score of the Gaussian-smoothed empirical distribution of ``reference``.

    ``p_t = (1/m) sum_j N(r_j, t^2 I)``; the score is the softmax-weighted pull
    towards reference points, ``(sum_j w_j r_j - x) / t^2``.
    """
    ref = np.asarray(reference, dtype=np.float64)
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = _row_t(t, xb.shape[0])
    d2 = (xb * xb).sum(1)[:, None] - 2.0 * xb @ ref.T + (ref * ref).sum(1)[None, :]
    logits = -0.5 * d2 / (t * t)[:, None]
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    out = (w @ ref - xb) / (t * t)[:, None]
    return out.reshape(np.shape(x))


def tweedie_score(params: CmParams, x, t) -> np.ndarray:
    """Score estimate ``(f(x_t, t) - x_t) / t^2`` from a consistency model."""
    xb, single = _as_batch(x, params.dim)
    tt = _row_t(t, xb.shape[0])
    s = (cm_apply(params, xb, tt) - xb) / (tt * tt)[:, None]
    return s[0] if single else s.reshape(np.shape(x))


# ---------------------------------------------------------------------------
# training losses


def _distance(diff: np.ndarray, kind: str, huber_c: float):
    """Per-row distance and its gradient w.r.t. ``diff``."""
    sq = (diff * diff).sum(axis=1)
    if kind == "l2":
        return sq, 2.0 * diff
    if kind == "huber":
        root = np.sqrt(sq + huber_c ** 2)
        return root - huber_c, diff / root[:, None]
    raise NumericsError(f"unknown distance {kind!r}")


def _pair_loss(params: CmParams, x_hi: np.ndarray, t_hi: np.ndarray, x_lo: np.ndarray,
               t_lo: np.ndarray, distance: str, huber_c: float):
    b = params.backend
    if not isinstance(b, NeuralBackend):
        raise UnsupportedOperation("consistency losses need the neural backend")
    sched = params.schedule
    target = _neural_apply(sched, b.target, x_lo, t_lo)  # gradient-stopped branch
    c_skip, c_out = skip_out_coeffs(sched, t_hi)
    inp = _net_input(sched, x_hi, t_hi)
    pred = c_skip[:, None] * x_hi + c_out[:, None] * neural.mlp_forward(b.online, inp)
    per_row, dd = _distance(pred - target, distance, huber_c)
    n = x_hi.shape[0]
    loss = float(per_row.mean())
    grads, _ = neural.mlp_vjp(b.online, inp, dd * (c_out[:, None] / n))
    return loss, grads


def ct_loss(params: CmParams, batch, t_n, t_n1, stream: RngStream, distance: str = "l2",
            huber_c: float = 0.03):
    """Consistency-training loss ``d(f(x + t_{n+1} z, t_{n+1}), f^-(x + t_n z, t_n))``.

    Returns ``(loss, online-parameter gradients)``.
    """
    if not isinstance(params.backend, NeuralBackend):
        raise UnsupportedOperation("ct_loss needs the neural backend")
    x, _ = _as_batch(batch, params.dim)
    n = x.shape[0]
    t_n, t_n1 = _row_t(t_n, n), _row_t(t_n1, n)
    z = stream.generator().standard_normal(x.shape)
    return _pair_loss(params, x + t_n1[:, None] * z, t_n1, x + t_n[:, None] * z, t_n,
                      distance, huber_c)


def euler_step(x_hi: np.ndarray, t_hi: np.ndarray, t_lo: np.ndarray, score: np.ndarray) -> np.ndarray:
    """One Euler step of ``dx/dt = -t * score`` from ``t_hi`` down to ``t_lo``."""
    return x_hi + (t_lo - t_hi)[:, None] * (-t_hi[:, None] * score)


def cd_loss(params: CmParams, batch, t_n, t_n1, stream: RngStream, mu=None, sigma_x=None,
            score_fn: Callable | None = None, distance: str = "l2", huber_c: float = 0.03):
    """Consistency-distillation loss with an Euler teacher step.

    The teacher score is ``analytic_score(mu, sigma_x, ...)`` unless ``score_fn(x, t)``
    is given.
    """
    if not isinstance(params.backend, NeuralBackend):
        raise UnsupportedOperation("cd_loss needs the neural backend")
    if score_fn is None:
        if mu is None or sigma_x is None:
            raise NumericsError("cd_loss needs (mu, sigma_x) or score_fn")
        score_fn = lambda xx, tt: analytic_score(mu, sigma_x, xx, tt)  # noqa: E731
    x, _ = _as_batch(batch, params.dim)
    n = x.shape[0]
    t_n, t_n1 = _row_t(t_n, n), _row_t(t_n1, n)
    z = stream.generator().standard_normal(x.shape)
    x_hi = x + t_n1[:, None] * z
    x_lo = euler_step(x_hi, t_n1, t_n, score_fn(x_hi, t_n1))
    return _pair_loss(params, x_hi, t_n1, x_lo, t_n, distance, huber_c)


def ct_cd_gap(params: CmParams, data, n: int, batches: int, batch: int, stream: RngStream,
              score_fn: Callable) -> float:
    """Mean ``|ct_loss - cd_loss|`` over batches on the ``n``-point grid.

    Both losses see the same data rows, timestep pairs and noise draw, so the
    gap isolates the teacher's Euler step against the CT plug-in estimate.
    """
    x = as_tensor(data, "data").reshape(len(data), -1)
    ts = karras_timesteps(params.schedule.with_n(n))
    gaps = []
    for i in range(batches):
        gen = stream.child(i, 0).generator()
        rows = gen.integers(0, len(x), batch)
        k = gen.integers(0, len(ts) - 1, batch)
        s = stream.child(i, 1)
        lc, _ = ct_loss(params, x[rows], ts[k], ts[k + 1], s)
        ld, _ = cd_loss(params, x[rows], ts[k], ts[k + 1], s, score_fn=score_fn)
        gaps.append(abs(lc - ld))
    return math.fsum(gaps) / len(gaps)


def _regression_loss(params: CmParams, x_t: np.ndarray, t: np.ndarray, y: np.ndarray,
                     distance: str, huber_c: float):
    b = params.backend
    sched = params.schedule
    c_skip, c_out = skip_out_coeffs(sched, t)
    inp = _net_input(sched, x_t, t)
    pred = c_skip[:, None] * x_t + c_out[:, None] * neural.mlp_forward(b.online, inp)
    per_row, dd = _distance(pred - y, distance, huber_c)
    grads, _ = neural.mlp_vjp(b.online, inp, dd * (c_out[:, None] / x_t.shape[0]))
    return float(per_row.mean()), grads


def heun_trajectories(score_fn: Callable, z: np.ndarray, grid: np.ndarray,
                      chunk: int = 1000) -> np.ndarray:
    """Deterministic Heun solve of ``dx/dt = -t score(x, t)`` along a decreasing ``grid``.

    Returns float32 states of shape ``(len(grid), n, d)``; the last slice is the endpoint.
    """
    n, d = z.shape
    out = np.empty((len(grid), n, d), dtype=np.float32)
    for s in range(0, n, chunk):
        x = z[s:s + chunk].astype(np.float64)
        out[0, s:s + chunk] = x
        for i in range(len(grid) - 1):
            ta, tb = grid[i], grid[i + 1]
            d1 = -ta * score_fn(x, ta)
            xe = x + (tb - ta) * d1
            if i < len(grid) - 2:
                x = x + (tb - ta) * 0.5 * (d1 - tb * score_fn(xe, tb))
            else:
                x = xe
            out[i + 1, s:s + chunk] = x
    return out


def ema_update(target: MlpParams, online: MlpParams, decay: float) -> MlpParams:
    return MlpParams([(decay * wt + (1.0 - decay) * wo, decay * bt + (1.0 - decay) * bo)
                      for (wt, bt), (wo, bo) in zip(target.layers, online.layers)],
                     list(online.activations))


@dataclass
class TrainConfig:
    mode: str = "CT"  # CT | CD | TD
    steps: int = 20000
    batch: int = 256
    lr: float = 1e-3
    ema_decay: float = 0.99
    schedule: NoiseSchedule = field(default_factory=lambda: NoiseSchedule(n=150))
    hidden: tuple[int, ...] = (256, 256, 256)
    distance: str = "l2"
    seed: int = 0
    teacher: str = "gaussian"  # CD teacher: gaussian | empirical
    n_start: int | None = 10  # discretisation curriculum start; None keeps schedule.n fixed
    log_every: int = 100
    td_trajectories: int = 8000  # TD latent pool size
    td_grid: int = 40  # TD teacher solver grid size


def curriculum_n(step: int, total: int, n_start: int | None, n_final: int) -> int:
    """Discretisation count at ``step``: grows like a square root from ``n_start`` to ``n_final``."""
    if n_start is None or n_start >= n_final or total <= 1:
        return n_final
    frac = step / (total - 1)
    n = math.ceil(math.sqrt(frac * ((n_final + 1) ** 2 - n_start ** 2) + n_start ** 2) - 1) + 1
    return int(min(max(n, n_start), n_final))


def _teacher_score(dataset, config: TrainConfig) -> Callable:
    x = dataset.flat()
    if config.teacher == "gaussian":
        mu = x.mean(axis=0)
        sigma = float(np.sqrt(((x - mu) ** 2).mean()))
        if "means" in dataset.extra and len(dataset.extra["means"]) == 1:
            mu = np.asarray(dataset.extra["means"][0])
            sigma = float(dataset.extra["sigma_x"][0])
        return lambda xx, tt: analytic_score(mu, sigma, xx, tt)
    if config.teacher == "empirical":
        return lambda xx, tt: empirical_score(x, xx, tt)
    raise NumericsError(f"unknown teacher {config.teacher!r}")


def train_consistency(dataset, config: TrainConfig = TrainConfig(),
                      init: CmParams | None = None) -> tuple[CmParams, list[dict]]:
    """Train the neural backend by CT or CD. Returns ``(params, training_curve)``."""
    if config.mode not in ("CT", "CD", "TD"):
        raise NumericsError(f"unknown training mode {config.mode!r}")
    root = RngStream(config.seed, 0xC0DE)
    x_all = dataset.flat()
    dim = x_all.shape[1]
    params = init or init_neural_cm(dim, root.child(0), config.schedule, config.hidden,
                                    config.ema_decay)
    grids: dict[int, np.ndarray] = {}
    score_fn = _teacher_score(dataset, config) if config.mode != "CT" else None
    if config.mode == "TD":
        td_grid = karras_timesteps(params.schedule.with_n(config.td_grid))[::-1].copy()
        z = root.child(2).generator().standard_normal((config.td_trajectories, dim))
        states = heun_trajectories(score_fn, z * params.schedule.sigma_max, td_grid)
        ends = states[-1].astype(np.float64)
    opt = neural.adam_init(params.backend.online.flat(), lr=config.lr)
    curve: list[dict] = []
    acc = 0.0
    for step in range(config.steps):
        s = root.child(1, step)
        gen = s.child(0).generator()
        rows = gen.integers(0, x_all.shape[0], config.batch)
        n_k = curriculum_n(step, config.steps, config.n_start, params.schedule.n)
        if n_k not in grids:
            grids[n_k] = karras_timesteps(params.schedule.with_n(n_k))
        ts = grids[n_k]
        idx = gen.integers(0, len(ts) - 1, config.batch)
        batch = x_all[rows]
        if config.mode == "TD":
            rows = gen.integers(0, len(ends), config.batch)
            k = gen.integers(0, len(td_grid) - 1, config.batch)
            loss, grads = _regression_loss(params, states[k, rows].astype(np.float64), td_grid[k],
                                           ends[rows], config.distance, 0.03)
        elif config.mode == "CT":
            loss, grads = ct_loss(params, batch, ts[idx], ts[idx + 1], s.child(1), config.distance)
        else:
            loss, grads = cd_loss(params, batch, ts[idx], ts[idx + 1], s.child(1),
                                  score_fn=score_fn, distance=config.distance)
        if not math.isfinite(loss):
            raise TrainingError("consistency loss diverged", step)
        b = params.backend
        opt, online = neural.adam_step_mlp(opt, b.online, grads)
        target = ema_update(b.target, online, b.ema_decay)
        params = CmParams(params.schedule, NeuralBackend(online, target, b.ema_decay))
        acc += loss
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            k = (step % config.log_every) + 1
            curve.append({"step": step + 1, "loss": acc / k})
            acc = 0.0
    return params, curve


# ---------------------------------------------------------------------------
# self-consistency


def analytic_transport(mu, sigma_x: float, x_from, t_from, t_to) -> np.ndarray:
    """Move ``x_from`` along the Gaussian probability-flow trajectory from ``t_from`` to ``t_to``."""
    s2 = sigma_x ** 2
    ratio = np.sqrt((s2 + np.asarray(t_to) ** 2) / (s2 + np.asarray(t_from) ** 2))
    mu = np.asarray(mu, dtype=np.float64)
    x_from = np.asarray(x_from, dtype=np.float64)
    if np.ndim(ratio) == 1 and x_from.ndim == 2:
        ratio = ratio[:, None]
    return mu + (x_from - mu) * ratio


def self_consistency_residual(params: CmParams, x, t: float, t_prime: float, stream: RngStream,
                              pairing: str = "trajectory", reference=None) -> float:
    """``||f(x_t, t) - f(x_t', t')|| / ||f(x_t', t')||``.

    ``x_t' = x + t' z``. With ``pairing="trajectory"`` the partner ``x_t`` is the
    point on the same Gaussian probability-flow trajectory (reference ``(mu,
    sigma_x)``, defaulting to the analytic backend's own); ``"shared-noise"``
    uses ``x_t = x + t z`` instead, which is only trajectory-consistent in the
    limit.
    """
    x = as_tensor(x, "x")
    z = stream.generator().standard_normal(x.shape)
    x_tp = x + t_prime * z
    if pairing == "shared-noise":
        x_t = x + t * z
    elif pairing == "trajectory":
        if reference is None:
            if not params.is_analytic:
                raise NumericsError("trajectory pairing needs a (mu, sigma_x) reference")
            reference = (params.backend.mu, params.backend.sigma_x)
        x_t = analytic_transport(reference[0], reference[1], x_tp, t_prime, t)
    else:
        raise NumericsError(f"unknown pairing {pairing!r}")
    a = cm_apply(params, x_t, t)
    b = cm_apply(params, x_tp, t_prime)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


# ---------------------------------------------------------------------------
# snapshots


def save_cm(params: CmParams, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "cmap-lab-cm", "version": 1, "schedule": asdict(params.schedule)}
    b = params.backend
    if isinstance(b, AnalyticBackend):
        manifest["backend"] = "analytic"
        manifest["analytic"] = {"mu": b.mu.tolist(), "sigma_x": b.sigma_x}
    else:
        manifest["backend"] = "neural"
        manifest["neural"] = {"ema_decay": b.ema_decay, "dim": params.dim}
        neural.save_mlp(b.online, d / "online.json")
        neural.save_mlp(b.target, d / "target.json")
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_cm(directory: str | Path) -> CmParams:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    if m.get("format") != "cmap-lab-cm":
        raise NumericsError(f"{d} is not a consistency-model snapshot")
    schedule = NoiseSchedule(**m["schedule"])
    if m["backend"] == "analytic":
        return analytic_cm(m["analytic"]["mu"], m["analytic"]["sigma_x"], schedule)
    online = neural.load_mlp(d / "online.json")
    target = neural.load_mlp(d / "target.json")
    return CmParams(schedule, NeuralBackend(online, target, m["neural"]["ema_decay"]))
