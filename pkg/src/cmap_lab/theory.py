"""Numerical checks of the latent-shift theorem, its root remark and the
reconstruction bound, in the isotropic Gaussian setting.

Simulation model (time normalised to [0, 1], ``dt = 1/T``, left grid
``t_k = k dt``). Each branch starts at its input ``x0`` and accumulates

    x_T = x0 + sum_k [dt * t_k * drift_k + sqrt(dt) * t_k * xi_k]

with ``drift_k = -(x0 - mu) / (s^2 + t_k^2)`` and ``xi_k`` the score evaluated
at a fresh noisy sample of the marginal, ``xi_k ~ N(0, 1 / (s^2 + t_k^2))``.
The two branches draw independent noise. Then ``x_T - x_hat_T`` has mean
``(0.5 ln(1 + 1/s^2) - 1) eps_a`` and variance ``2 (1 - s arctan(1/s))``.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import bisect

from .consistency import CmParams, cm_generate
from .metrics import SsimConfig, loss_a_batch, loss_d_batch
from .numerics import NumericsError, QuadratureSpec, RngStream, integrate

THEOREM_STREAM = 0x7E01
CHUNK = 2500


def coeff_mu(sigma_x: float) -> float:
    """``0.5 ln(1 + 1/s^2) - 1``: mean latent shift per unit of input perturbation."""
    if not sigma_x > 0:
        raise NumericsError("sigma_x must be positive")
    return 0.5 * math.log1p(1.0 / sigma_x ** 2) - 1.0


def coeff_mu_quadrature(sigma_x: float, nodes: int = 256) -> float:
    s2 = sigma_x ** 2
    return integrate(lambda t: t / (s2 + t * t), QuadratureSpec(nodes)) - 1.0


def sigma_cl2(sigma_x: float) -> float:
    """``E_t t^2 / (s^2 + t^2)`` for ``t ~ U(0, 1)``, i.e. ``1 - s arctan(1/s)``."""
    if not sigma_x > 0:
        raise NumericsError("sigma_x must be positive")
    return 1.0 - sigma_x * math.atan(1.0 / sigma_x)


def sigma_cl2_quadrature(sigma_x: float, nodes: int = 256) -> float:
    s2 = sigma_x ** 2
    return integrate(lambda t: t * t / (s2 + t * t), QuadratureSpec(nodes))


def discrete_mean_coeff(sigma_x: float, t_steps: int) -> float:
    """Exact expectation of the simulated shift coefficient on the left grid."""
    t = np.arange(t_steps) / t_steps
    return math.fsum(t / (sigma_x ** 2 + t * t)) / t_steps - 1.0


def discrete_var(sigma_x: float, t_steps: int) -> float:
    """Exact per-branch variance of the simulated latent on the left grid."""
    t = np.arange(t_steps) / t_steps
    return math.fsum(t * t / (sigma_x ** 2 + t * t)) / t_steps


def simulate_branch(x0, sigma_x: float, mu, t_steps: int, xi: np.ndarray) -> np.ndarray:
    """Accumulate one branch given unit noise ``xi`` of shape ``(t_steps, *x0.shape)``.

    ``xi`` is standard normal; it is rescaled to the marginal score noise here.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape[0] != t_steps or xi.shape[1:] != x0.shape:
        raise NumericsError(f"noise shape {xi.shape} does not match ({t_steps}, {x0.shape})")
    dt = 1.0 / t_steps
    t = np.arange(t_steps) * dt
    var = sigma_x ** 2 + t * t
    shape = (t_steps,) + (1,) * x0.ndim
    drift = dt * math.fsum(t / var) * -(x0 - np.asarray(mu))
    noise = (math.sqrt(dt) * (t / np.sqrt(var))).reshape(shape) * xi
    return x0 + drift + noise.sum(axis=0)


def simulate_latent_pair(x, eps_a, sigma_x: float, mu, t_steps: int,
                         streams: tuple[RngStream, RngStream]) -> tuple[np.ndarray, np.ndarray]:
    """Latents reached from ``x`` and ``x + eps_a`` with independent noise per branch.

    ``x`` may hold many trials as ``(n, d)``. Passing the same stream twice
    shares noise between branches.
    """
    if t_steps < 100:
        raise NumericsError("t_steps must be at least 100")
    x = np.asarray(x, dtype=np.float64)
    x_hat = x + np.asarray(eps_a, dtype=np.float64)
    xi = streams[0].generator().standard_normal((t_steps,) + x.shape)
    xi_hat = streams[1].generator().standard_normal((t_steps,) + x.shape)
    return (simulate_branch(x, sigma_x, mu, t_steps, xi),
            simulate_branch(x_hat, sigma_x, mu, t_steps, xi_hat))


@dataclass
class TheoremConfig:
    d: int = 8
    sigma_x: float = 1.0
    eps_a: float | list[float] = 0.1  # scalar -> that magnitude on every coordinate
    random_signs: bool = False
    mu: float = 0.0
    t_steps: int = 200
    trials: int = 200_000
    seed: int = 0
    z_threshold: float = 4.0
    var_tol: float = 0.04
    workers: int = 1

    def validate(self) -> None:
        if self.sigma_x <= 0 or self.d < 1:
            raise NumericsError("need sigma_x > 0 and d >= 1")
        if self.t_steps < 100:
            raise NumericsError("t_steps must be at least 100")
        if self.trials < 10_000:
            raise NumericsError("trials must be at least 10^4")

    def eps_vector(self) -> np.ndarray:
        if np.ndim(self.eps_a) == 0:
            e = np.full(self.d, float(self.eps_a))
            if self.random_signs:
                signs = RngStream(self.seed, THEOREM_STREAM).child(0).generator().integers(0, 2, self.d)
                e = e * (2 * signs - 1)
            return e
        e = np.asarray(self.eps_a, dtype=np.float64)
        if e.shape != (self.d,):
            raise NumericsError("eps_a vector must have length d")
        return e


@dataclass
class TheoremReport:
    config: dict
    analytic_mean: list[float]
    analytic_var: float
    empirical_mean: list[float]
    empirical_var: list[float]
    mean_se: list[float]
    z_scores: list[float]
    var_ratio: list[float]
    mean_pass: bool
    var_pass: bool
    discretized_mean: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.mean_pass and self.var_pass

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def _chunk_shifts(args) -> np.ndarray:
    cfg_d, sigma, mu, eps, t_steps, seed, idx, n = args
    root = RngStream(seed, THEOREM_STREAM).child(1, idx)
    x = mu + sigma * root.child(0).generator().standard_normal((n, cfg_d))
    a, b = simulate_latent_pair(x, eps, sigma, mu, t_steps, (root.child(1), root.child(2)))
    return a - b


def latent_shifts(cfg: TheoremConfig) -> np.ndarray:
    """All per-trial shifts ``x_T - x_hat_T`` as ``(trials, d)``, chunked independently of workers."""
    cfg.validate()
    eps = cfg.eps_vector()
    jobs = []
    for idx, start in enumerate(range(0, cfg.trials, CHUNK)):
        n = min(CHUNK, cfg.trials - start)
        jobs.append((cfg.d, cfg.sigma_x, cfg.mu, eps, cfg.t_steps, cfg.seed, idx, n))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as ex:
            chunks = list(ex.map(_chunk_shifts, jobs))
    else:
        chunks = [_chunk_shifts(j) for j in jobs]
    return np.concatenate(chunks)


def verify_theorem1(cfg: TheoremConfig, shifts: np.ndarray | None = None) -> TheoremReport:
    """Compare simulated shifts against the closed-form mean and variance."""
    shifts = latent_shifts(cfg) if shifts is None else shifts
    n = len(shifts)
    mean = np.array([math.fsum(shifts[:, j]) / n for j in range(cfg.d)])
    var = np.array([math.fsum((shifts[:, j] - mean[j]) ** 2) for j in range(cfg.d)]) / (n - 1)
    eps = cfg.eps_vector()
    a_mean = coeff_mu(cfg.sigma_x) * eps
    a_var = 2.0 * sigma_cl2(cfg.sigma_x)
    se = np.sqrt(var / n)
    z = (mean - a_mean) / se
    ratio = var / a_var
    return TheoremReport(
        config=asdict(cfg),
        analytic_mean=a_mean.tolist(), analytic_var=a_var,
        empirical_mean=mean.tolist(), empirical_var=var.tolist(),
        mean_se=se.tolist(), z_scores=z.tolist(), var_ratio=ratio.tolist(),
        mean_pass=bool(np.all(np.abs(z) < cfg.z_threshold)),
        var_pass=bool(np.all(np.abs(ratio - 1.0) <= cfg.var_tol)),
        discretized_mean=(discrete_mean_coeff(cfg.sigma_x, cfg.t_steps) * eps).tolist(),
    )


def remark_root(lo: float = 1e-6, hi: float = 10.0, tol: float = 1e-10) -> float:
    """Variance ``s^2`` at which the mean shift vanishes, by bisection."""
    return bisect(lambda s2: coeff_mu(math.sqrt(s2)), lo, hi, xtol=tol)


def remark_report() -> dict:
    root = remark_root()
    stated = 1.0 / 99.0
    return {
        "root_sigma2": root,
        "closed_form_sigma2": 1.0 / (math.e ** 2 - 1.0),
        "stated_sigma2": stated,
        "coeff_mu_at_root": coeff_mu(math.sqrt(root)),
        "coeff_mu_at_stated": coeff_mu(math.sqrt(stated)),
        "stated_is_root": abs(coeff_mu(math.sqrt(stated))) < 1e-9,
    }


# ---------------------------------------------------------------------------
# reconstruction bound


@dataclass
class Prop1Instance:
    x: np.ndarray  # clean sample
    eps_a: np.ndarray  # perturbation, x_hat = x + eps_a
    generated: np.ndarray  # (K, *shape)
    latents: np.ndarray | None = None  # (K, d); needed for L_d unless loss_d given
    loss_d: float | None = None


def prop1_sides(inst: Prop1Instance, alpha: float, beta: float, sigma_t: float,
                ssim: SsimConfig = SsimConfig(), image: bool = True) -> tuple[float, float]:
    """``(LHS, RHS)`` of ``mean MAE(g_i, x) + b L_d <= mean|eps| + alpha + L_a + b L_d``."""
    g = np.asarray(inst.generated, dtype=np.float64)
    x = np.asarray(inst.x, dtype=np.float64)
    x_hat = x + inst.eps_a
    ld = inst.loss_d
    if ld is None:
        ld = float(loss_d_batch(np.asarray(inst.latents)[None], 0.0, sigma_t)[0][0])
    la = float(loss_a_batch(g[None], x_hat[None], alpha, ssim, image and alpha != 0)[0][0])
    mae_clean = float(np.abs(g - x).reshape(len(g), -1).mean(axis=1).mean())
    lhs = mae_clean + beta * ld
    rhs = float(np.abs(inst.eps_a).mean()) + alpha + la + beta * ld
    return lhs, rhs


def verify_prop1(instances: Sequence[Prop1Instance], alpha: float, beta: float, sigma_t: float,
                 ssim: SsimConfig = SsimConfig(), image: bool = True, tol: float = 1e-12) -> dict:
    slack = []
    for inst in instances:
        lhs, rhs = prop1_sides(inst, alpha, beta, sigma_t, ssim, image)
        slack.append(rhs - lhs)
    s = np.array(slack)
    return {"count": len(s), "violations": int(np.sum(s < -tol)),
            "min_slack": float(s.min()) if len(s) else None,
            "median_slack": float(np.median(s)) if len(s) else None, "slack": s.tolist()}


def random_prop1_instances(cm: CmParams, count: int, k: int, shape: tuple[int, ...],
                           stream: RngStream, max_eps: float = 0.1) -> list[Prop1Instance]:
    """Random clean samples, perturbations with mean|eps| in [0, max_eps] and latent sets."""
    out = []
    sigma_t = cm.schedule.sigma_max
    d = int(np.prod(shape))
    for i in range(count):
        gen = stream.child(i).generator()
        x = gen.uniform(0.0, 1.0, shape)
        eps = gen.uniform(-1.0, 1.0, shape) * gen.uniform(0.0, max_eps)
        z = gen.standard_normal((k, d)) * sigma_t * gen.uniform(0.5, 1.5)
        out.append(Prop1Instance(x, eps, cm_generate(cm, z).reshape(k, *shape), z))
    return out


def write_theorem_report(report: TheoremReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))


def write_shifts_csv(shifts: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial"] + [f"coord_{j}" for j in range(shifts.shape[1])])
        for i, row in enumerate(shifts):
            w.writerow([i] + [repr(float(v)) for v in row])
