"""Restoration losses, latent moment loss and distribution observations.

``loss_a`` is the MAE/SSIM restoration loss of the purifier, ``loss_d`` the
latent moment-matching penalty. ``mmd2``, ``eps_feature`` and
``observation_histogram`` reproduce the clean/adversarial/generated MMD
observation.

Histogram CSVs written by :func:`write_observation_csvs`:

* values: ``probe_kind,sample_index,mmd2``
* bins: ``bin_lo,bin_hi,count_clean,count_adv,count_gen``
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .numerics import NumericsError, RngStream, as_tensor, check_same_shape

STD_GUARD = 1e-12


# ---------------------------------------------------------------------------
# MAE


def mae(x, y, reduction: str = "mean") -> float:
    x, y = as_tensor(x, "x"), as_tensor(y, "y")
    check_same_shape(x, y, "mae")
    s = np.abs(x - y)
    return float(s.mean() if reduction == "mean" else s.sum())


# ---------------------------------------------------------------------------
# SSIM


@dataclass(frozen=True)
class SsimConfig:
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    window: str = "global"  # global | gaussian
    size: int = 7
    sigma: float = 1.5

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


def _window_matrix(n: int, size: int, sigma: float) -> np.ndarray:
    """Valid-mode 1-D Gaussian averaging as an ``(n - size + 1, n)`` matrix."""
    if size % 2 == 0 or size > n:
        raise NumericsError("gaussian window size must be odd and at most the image side")
    k = np.exp(-0.5 * ((np.arange(size) - size // 2) / sigma) ** 2)
    k /= k.sum()
    m = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        m[i, i:i + size] = k
    return m


def _ssim_terms(a_mu, b_mu, a_var, b_var, cov, c1, c2):
    num1 = 2.0 * a_mu * b_mu + c1
    num2 = 2.0 * cov + c2
    den1 = a_mu * a_mu + b_mu * b_mu + c1
    den2 = a_var + b_var + c2
    return num1, num2, den1, den2


def ssim_batch(xs: np.ndarray, y: np.ndarray, cfg: SsimConfig = SsimConfig(),
               need_grad: bool = True):
    """SSIM of images ``xs`` (..., H, W) against ``y`` broadcastable to them, plus d/dxs.

    Returns per-image values of shape ``xs.shape[:-2]``.
    """
    xs = np.asarray(xs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim < 2 or xs.ndim < 2 or xs.shape[-2:] != y.shape[-2:]:
        raise NumericsError(f"ssim needs images: got {xs.shape} vs {y.shape}")
    c1, c2 = cfg.c1, cfg.c2
    ax = (-2, -1)
    if cfg.window == "global":
        n = y.shape[-1] * y.shape[-2]
        mx = xs.mean(axis=ax, keepdims=True)
        my = y.mean(axis=ax, keepdims=True)
        dx = xs - mx
        dy = y - my
        vx = (dx * dx).mean(axis=ax, keepdims=True)
        vy = (dy * dy).mean(axis=ax, keepdims=True)
        cov = (dx * dy).mean(axis=ax, keepdims=True)
        n1, n2, d1, d2 = _ssim_terms(mx, my, vx, vy, cov, c1, c2)
        s = (n1 * n2) / (d1 * d2)
        if not need_grad:
            return s[..., 0, 0], None
        # dS = S (dn1/n1 + dn2/n2 - dd1/d1 - dd2/d2)
        g = (s * (2.0 * my / n1 - 2.0 * mx / d1)
             + (s * 2.0 / n2) * dy - (s * 2.0 / d2) * dx) / n
        return s[..., 0, 0], g
    if cfg.window != "gaussian":
        raise NumericsError(f"unknown ssim window {cfg.window!r}")
    h, w = y.shape[-2:]
    mr = _window_matrix(h, cfg.size, cfg.sigma)
    mc = _window_matrix(w, cfg.size, cfg.sigma)

    def filt(a):
        return mr @ a @ mc.T

    mx = filt(xs)
    my = filt(y)
    vx = filt(xs * xs) - mx * mx
    vy = filt(y * y) - my * my
    cov = filt(xs * y) - mx * my
    n1, n2, d1, d2 = _ssim_terms(mx, my, vx, vy, cov, c1, c2)
    smap = (n1 * n2) / (d1 * d2)
    npos = smap.shape[-1] * smap.shape[-2]
    s = smap.mean(axis=ax)
    if not need_grad:
        return s, None
    # partials of the map w.r.t. (mx, E[x^2], E[xy]), then the window adjoint
    g_n1, g_n2 = smap / n1, smap / n2
    g_d1, g_d2 = -smap / d1, -smap / d2
    g_mx = 2.0 * my * (g_n1 - g_n2) + 2.0 * mx * (g_d1 - g_d2)
    g_exy = 2.0 * g_n2

    def adj(a):
        return mr.T @ a @ mc

    g = (adj(g_mx) + 2.0 * xs * adj(g_d2) + y * adj(g_exy)) / npos
    return s, g


def ssim(x, y, cfg: SsimConfig = SsimConfig()) -> float:
    x, y = as_tensor(x, "x"), as_tensor(y, "y")
    check_same_shape(x, y, "ssim")
    s, _ = ssim_batch(x[None], y, cfg, need_grad=False)
    return float(s[0])


def ssim_grad(x, y, cfg: SsimConfig = SsimConfig()) -> tuple[float, np.ndarray]:
    x, y = as_tensor(x, "x"), as_tensor(y, "y")
    check_same_shape(x, y, "ssim")
    s, g = ssim_batch(x[None], y, cfg)
    return float(s[0]), g[0]


# ---------------------------------------------------------------------------
# purification losses


def loss_a_batch(generated: np.ndarray, x_hat: np.ndarray, alpha: float,
                 cfg: SsimConfig = SsimConfig(), image: bool = True, reduction: str = "mean"):
    """Per-sample restoration loss for ``generated`` (B, K, *shape) vs ``x_hat`` (B, *shape)."""
    b, k = generated.shape[:2]
    diff = generated - x_hat[:, None]
    n = diff[0, 0].size
    scale = 1.0 / n if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise NumericsError(f"unknown reduction {reduction!r}")
    maes = np.abs(diff).reshape(b, k, -1).sum(axis=2) * scale
    grad = np.sign(diff) * scale
    per_branch = maes
    if alpha != 0:
        if not image:
            raise NumericsError("alpha must be 0 for point-cloud data (no SSIM)")
        s, gs = ssim_batch(generated, x_hat[:, None], cfg)
        per_branch = per_branch - alpha * s
        grad = grad - alpha * gs
    return per_branch.mean(axis=1), grad / k


def loss_a(generated, x_hat, alpha: float, cfg: SsimConfig = SsimConfig(), kind: str = "image",
           reduction: str = "mean") -> tuple[float, np.ndarray]:
    """``(1/K) sum_i [MAE(g_i, x_hat) - alpha * SSIM(g_i, x_hat)]`` and its gradient.

    ``generated`` has shape ``(K, *sample_shape)``; the gradient has the same
    shape and flows to the generated samples only. Point clouds (``kind ==
    "points"``) take no SSIM term.
    """
    gen = as_tensor(generated, "generated")
    x_hat = as_tensor(x_hat, "x_hat")
    if gen.ndim < 2 or gen.shape[1:] != x_hat.shape or gen.shape[0] < 1:
        raise NumericsError(f"generated {gen.shape} does not stack samples shaped {x_hat.shape}")
    if kind not in ("image", "points"):
        raise NumericsError(f"unknown data kind {kind!r}")
    if kind == "image" and alpha != 0 and x_hat.ndim != 2:
        raise NumericsError("SSIM needs 2-D images")
    v, g = loss_a_batch(gen[None], x_hat[None], alpha, cfg, kind == "image", reduction)
    return float(v[0]), g[0]


def loss_d_batch(latents: np.ndarray, mu_z: float = 0.0, sigma_z: float = 80.0):
    """Per-sample moment loss for latents (B, K, d); returns values (B,) and gradient."""
    k = latents.shape[1]
    m = latents.mean(axis=1, keepdims=True)
    c = latents - m
    s = np.sqrt((c * c).mean(axis=1, keepdims=True) + STD_GUARD)
    dm = m - mu_z
    ds = s - sigma_z
    value = (dm * dm).sum(axis=(1, 2)) + (ds * ds).sum(axis=(1, 2))
    grad = 2.0 * dm / k + 2.0 * ds * c / (k * s)
    return value, grad


def latent_moments(latents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and guarded population std over the first axis."""
    m = latents.mean(axis=0)
    var = ((latents - m) ** 2).mean(axis=0)
    return m, np.sqrt(var + STD_GUARD)


def loss_d(latents, mu_z: float = 0.0, sigma_z: float = 80.0) -> tuple[float, np.ndarray]:
    """``||mean(z) - mu_z||^2 + ||std(z) - sigma_z||^2`` over coordinates, with gradient.

    ``latents`` is ``(K, d)`` (or ``(K, *shape)``); std is the population form.
    """
    z = as_tensor(latents, "latents")
    if z.ndim < 2 or z.shape[0] < 2:
        raise NumericsError("loss_d needs at least two latents")
    v, g = loss_d_batch(z.reshape(1, z.shape[0], -1), mu_z, sigma_z)
    return float(v[0]), g[0].reshape(z.shape)


# ---------------------------------------------------------------------------
# MMD


@dataclass(frozen=True)
class MmdConfig:
    bandwidths: tuple[float, ...] | None = None  # None -> median heuristic
    multi_scale: bool = False  # {0.5, 1, 2} x median
    estimator: str = "biased"  # biased | unbiased


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] - 2.0 * a @ b.T + (b * b).sum(1)[None, :]
    return np.maximum(d, 0.0)


def median_bandwidth(x: np.ndarray) -> float:
    d = _sqdist(x, x)
    iu = np.triu_indices(len(x), 1)
    med = float(np.sqrt(np.median(d[iu])))
    return med if med > 0 else 1.0


def resolve_bandwidths(pooled: np.ndarray, cfg: MmdConfig) -> tuple[float, ...]:
    if cfg.bandwidths is not None:
        if not cfg.bandwidths or any(b <= 0 for b in cfg.bandwidths):
            raise NumericsError("bandwidths must be positive")
        return tuple(cfg.bandwidths)
    med = median_bandwidth(pooled)
    return (0.5 * med, med, 2.0 * med) if cfg.multi_scale else (med,)


def _kernel(d2: np.ndarray, bws: Sequence[float]) -> np.ndarray:
    return sum(np.exp(-d2 / (2.0 * h * h)) for h in bws) / len(bws)


def mmd2(x, y, cfg: MmdConfig = MmdConfig(), bandwidths: Sequence[float] | None = None) -> float:
    """RBF-kernel MMD^2 between sample sets ``x`` (n, d) and ``y`` (m, d)."""
    x = np.atleast_2d(as_tensor(x, "x"))
    y = np.atleast_2d(as_tensor(y, "y"))
    if len(x) < 2 or len(y) < 1:
        raise NumericsError("mmd2 needs |X| >= 2 and |Y| >= 1")
    bws = bandwidths or resolve_bandwidths(np.vstack([x, y]), cfg)
    kxx = _kernel(_sqdist(x, x), bws)
    kyy = _kernel(_sqdist(y, y), bws)
    kxy = _kernel(_sqdist(x, y), bws)
    n, m = len(x), len(y)
    if cfg.estimator == "unbiased":
        txx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        tyy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1)) if m > 1 else kyy.mean()
    elif cfg.estimator == "biased":
        txx, tyy = kxx.mean(), kyy.mean()
    else:
        raise NumericsError(f"unknown estimator {cfg.estimator!r}")
    return float(txx + tyy - 2.0 * kxy.mean())


# ---------------------------------------------------------------------------
# EPS features


@dataclass(frozen=True)
class EpsConfig:
    m: int = 16  # timesteps per sample
    t_max: float = 1.0
    t_min: float = 0.01
    replicas: int = 2  # antithetic noise pairs per timestep


def eps_feature(score_fn: Callable, x, cfg: EpsConfig, stream: RngStream) -> np.ndarray:
    """Expected perturbation score ``E_t E_z score(x + t z, t)``, one feature row per sample.

    Each replica is an antithetic pair ``(z, -z)``, which cancels the
    zero-mean noise term of the score exactly for Gaussian scores.
    """
    if cfg.m < 1 or cfg.t_max <= 0 or cfg.replicas < 1:
        raise NumericsError("invalid EPS configuration")
    xb = np.atleast_2d(as_tensor(x, "x"))
    n, d = xb.shape
    out = np.empty_like(xb)
    for i in range(n):
        gen = stream.child(i).generator()
        t = gen.uniform(cfg.t_min, cfg.t_max, cfg.m)
        z = gen.standard_normal((cfg.m, cfg.replicas, d))
        tt = np.repeat(t, 2 * cfg.replicas)
        zz = np.concatenate([z, -z], axis=1).reshape(-1, d)
        pts = xb[i] + tt[:, None] * zz
        out[i] = score_fn(pts, tt).mean(axis=0)
    return out if np.ndim(x) > 1 else out[0]


# ---------------------------------------------------------------------------
# observation histograms


@dataclass
class ObservationResult:
    values: dict[str, np.ndarray]
    bin_edges: np.ndarray
    counts: dict[str, np.ndarray]
    bandwidths: tuple[float, ...] = field(default_factory=tuple)


def _rows_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    seen = {row.tobytes() for row in np.ascontiguousarray(a)}
    return any(row.tobytes() in seen for row in np.ascontiguousarray(b))


def observation_histogram(clean_ref, probes: dict[str, np.ndarray], mmd_cfg: MmdConfig = MmdConfig(),
                          feature_fn: Callable | None = None, bins: int = 40) -> ObservationResult:
    """Per-probe MMD^2 between the reference set and each singleton probe.

    ``clean_ref`` and the probe sets are raw samples ``(n, d)``; ``feature_fn``
    maps ``(kind, samples) -> features`` (identity when omitted). The kernel
    bandwidth is fixed once from the reference features so all probes share it.
    """
    ref = np.atleast_2d(as_tensor(clean_ref, "clean_ref"))
    if not probes or any(len(v) == 0 for v in probes.values()):
        raise NumericsError("at least one non-empty probe set is required")
    if "clean" in probes and _rows_overlap(ref, np.atleast_2d(probes["clean"])):
        raise NumericsError("clean probes overlap the reference set")
    feat = feature_fn or (lambda kind, s: s)
    ref_f = feat("reference", ref)
    bws = resolve_bandwidths(ref_f, mmd_cfg)
    kxx_term = None
    values = {}
    for kind, samples in probes.items():
        pf = np.atleast_2d(feat(kind, np.atleast_2d(samples)))
        if kxx_term is None:
            kxx = _kernel(_sqdist(ref_f, ref_f), bws)
            n = len(ref_f)
            kxx_term = ((kxx.sum() - np.trace(kxx)) / (n * (n - 1))
                        if mmd_cfg.estimator == "unbiased" else kxx.mean())
        kxy = _kernel(_sqdist(pf, ref_f), bws).mean(axis=1)
        values[kind] = kxx_term + 1.0 - 2.0 * kxy  # k(y, y) = 1 for RBF
    pooled = np.concatenate(list(values.values()))
    edges = np.linspace(pooled.min(), pooled.max(), bins + 1)
    if edges[0] == edges[-1]:
        edges = np.linspace(edges[0] - 0.5, edges[0] + 0.5, bins + 1)
    counts = {k: np.histogram(v, bins=edges)[0] for k, v in values.items()}
    return ObservationResult(values, edges, counts, bws)


def write_observation_csvs(result: ObservationResult, values_path: str | Path,
                           bins_path: str | Path) -> None:
    with open(values_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe_kind", "sample_index", "mmd2"])
        for kind, vals in result.values.items():
            for i, v in enumerate(vals):
                w.writerow([kind, i, repr(float(v))])
    kinds = ["clean", "adv", "gen"]
    with open(bins_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi"] + [f"count_{k}" for k in kinds])
        for j in range(len(result.bin_edges) - 1):
            row = [repr(float(result.bin_edges[j])), repr(float(result.bin_edges[j + 1]))]
            row += [int(result.counts[k][j]) if k in result.counts else 0 for k in kinds]
            w.writerow(row)
