"""Adversaries: PGD (optionally with EOT), gradients through a diffuse-then-denoise
surrogate purifier, the consistency-disruption attack on latent purification,
and robustness evaluation.

Attack result CSV columns: ``sample_index,attack_tag,norm,epsilon,
success_undefended,success_defended,achieved_norm``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import classifier as clf_mod
from . import neural
from .consistency import CmParams, cm_apply, cm_vjp
from .metrics import loss_a_batch, loss_d_batch
from .numerics import NumericsError, RngStream, as_tensor
from .purifier import PurifyConfig, predict_many, purify_batch

ATTACK_COLUMNS = ["sample_index", "attack_tag", "norm", "epsilon", "success_undefended",
                  "success_defended", "achieved_norm"]
ATTACK_STREAM = 0xA77C
_NORM_SLACK = 1e-12


@dataclass
class AttackConfig:
    norm: str = "linf"  # linf | l2
    epsilon: float = 8.0 / 255.0
    steps: int = 40
    step_size: float | None = None  # None -> epsilon / 4
    n_eot: int = 20
    t_diff: float = 0.3  # in sigma units
    lam: float = 1.0  # consistency-disruption CE weight
    t_adv: int = 50  # consistency-disruption iterations
    eta_adv: float | None = None  # None -> the defense step size
    proj_grad: str = "straight-through"  # straight-through | exact
    seed: int = 0
    data_range: tuple[float, float] | None = (0.0, 1.0)

    def validate(self, cm: CmParams | None = None) -> None:
        if self.norm not in ("linf", "l2"):
            raise NumericsError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0 or self.steps < 1 or self.n_eot < 1 or self.t_adv < 0:
            raise NumericsError("need epsilon >= 0, steps >= 1, n_eot >= 1, t_adv >= 0")
        if self.proj_grad not in ("straight-through", "exact"):
            raise NumericsError(f"unknown projection gradient {self.proj_grad!r}")
        if cm is not None and not cm.schedule.sigma_min <= self.t_diff < cm.schedule.sigma_max:
            raise NumericsError("t_diff must lie in [sigma_min, sigma_max)")

    @property
    def alpha_step(self) -> float:
        return self.epsilon / 4.0 if self.step_size is None else self.step_size


@dataclass
class AdvExample:
    """A batch of adversarial inputs; ``candidates`` holds K per sample for disruption attacks."""
    x: np.ndarray
    x_adv: np.ndarray
    y: np.ndarray
    tag: str
    norm: str
    epsilon: float
    achieved_norm: np.ndarray
    candidates: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _rows(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1)


def perturbation_norm(x_adv, x, norm: str) -> np.ndarray:
    d = _rows(np.asarray(x_adv) - np.asarray(x))
    return np.abs(d).max(axis=1) if norm == "linf" else np.sqrt((d * d).sum(axis=1))


def project_ball(x_cand, x, epsilon: float, norm: str = "linf",
                 data_range: tuple[float, float] | None = (0.0, 1.0), batched: bool = False) -> np.ndarray:
    """Project into the ``epsilon``-ball around ``x`` and then into the data range.

    With ``batched`` the first axis indexes independent samples (one ball each).
    """
    xc = as_tensor(x_cand, "x_cand")
    x = as_tensor(x, "x")
    if xc.shape != x.shape:
        raise NumericsError(f"shape mismatch {xc.shape} vs {x.shape}")
    if epsilon < 0:
        raise NumericsError("epsilon must be non-negative")
    if epsilon == 0:
        return x.copy()
    xb, cb = (x, xc) if batched else (x[None], xc[None])
    if norm == "linf":
        out = np.clip(cb, xb - epsilon, xb + epsilon)
    elif norm == "l2":
        d = _rows(cb - xb)
        nrm = np.sqrt((d * d).sum(axis=1))
        scale = np.where(nrm > epsilon * (1 + _NORM_SLACK), epsilon / np.maximum(nrm, 1e-300), 1.0)
        out = xb + (d * scale[:, None]).reshape(xb.shape)
    else:
        raise NumericsError(f"unknown norm {norm!r}")
    if data_range is not None:
        out = np.clip(out, *data_range)
    return out if batched else out[0]


def _ascent_direction(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    r = _rows(g)
    n = np.sqrt((r * r).sum(axis=1))
    return (r / np.maximum(n, 1e-12)[:, None]).reshape(g.shape)


GradProvider = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def plain_gradient(clf) -> GradProvider:
    return lambda xa, y, step: clf_input_grad_rows(clf, xa, y)


def clf_input_grad_rows(clf, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return clf_mod.clf_input_grad(clf, _rows(x), y).reshape(x.shape)


def pgd(clf, x, y, cfg: AttackConfig, grad_provider: GradProvider | None = None,
        tag: str = "pgd") -> AdvExample:
    """Projected gradient ascent on the cross-entropy for a batch ``x`` (B, *shape)."""
    cfg.validate()
    x = as_tensor(x, "x")
    y = np.asarray(y, dtype=np.int64)
    gp = grad_provider or plain_gradient(clf)
    xa = x.copy()
    if cfg.epsilon > 0:
        for step in range(cfg.steps):
            g = gp(xa, y, step)
            xa = project_ball(xa + cfg.alpha_step * _ascent_direction(g, cfg.norm), x, cfg.epsilon,
                              cfg.norm, cfg.data_range, batched=True)
    return AdvExample(x, xa, y, tag, cfg.norm, cfg.epsilon, perturbation_norm(xa, x, cfg.norm))


def eot_gradient(stochastic_loss_grad: Callable[[np.ndarray, RngStream], np.ndarray], x,
                 n_eot: int, stream: RngStream) -> np.ndarray:
    """Mean of ``n_eot`` gradient draws, each with its own substream."""
    if n_eot < 1:
        raise NumericsError("n_eot must be at least 1")
    acc = None
    for j in range(n_eot):
        g = stochastic_loss_grad(x, stream.child(j))
        acc = g if acc is None else acc + g
    return acc / n_eot


def surrogate_purifier(cm: CmParams, x, t_diff: float, stream: RngStream) -> np.ndarray:
    """Diffuse to ``t_diff`` and denoise in one consistency-model step."""
    x = as_tensor(x, "x")
    z = stream.generator().standard_normal(x.shape)
    return cm_apply(cm, (x + t_diff * z).reshape(-1, cm.dim), t_diff).reshape(x.shape)


def surrogate_vjp(cm: CmParams, x, t_diff: float, stream: RngStream, cotangent) -> np.ndarray:
    """Gradient of ``<cotangent, surrogate_purifier(x)>`` w.r.t. ``x`` under the same noise draw."""
    x = as_tensor(x, "x")
    z = stream.generator().standard_normal(x.shape)
    xt = (x + t_diff * z).reshape(-1, cm.dim)
    return cm_vjp(cm, xt, np.asarray(cotangent).reshape(xt.shape), t=t_diff).reshape(x.shape)


def surrogate_gradient(clf, cm: CmParams, t_diff: float, n_eot: int, stream: RngStream) -> GradProvider:
    """EOT gradient of CE(clf(surrogate_purifier(x))) for use inside :func:`pgd`."""

    def one(xa, s, y):
        purified = surrogate_purifier(cm, xa, t_diff, s)
        return surrogate_vjp(cm, xa, t_diff, s, clf_input_grad_rows(clf, purified, y))

    return lambda xa, y, step: eot_gradient(lambda xx, s: one(xx, s, y), xa, n_eot, stream.child(step))


def attack_through_purifier(clf, cm: CmParams, x, y, cfg: AttackConfig) -> AdvExample:
    cfg.validate(cm)
    stream = RngStream(cfg.seed, ATTACK_STREAM).child(1)
    gp = surrogate_gradient(clf, cm, cfg.t_diff, cfg.n_eot, stream)
    return pgd(clf, x, y, cfg, gp, tag="pgd-eot")


def _error_rate(clf, x: np.ndarray, y: np.ndarray) -> float:
    _, pred = clf_mod.predict(clf, _rows(x))
    return float(np.mean(pred != y))


def t_diff_sweep(clf, cm: CmParams, x, y, cfg: AttackConfig, grid: Sequence[float]) -> tuple[list[dict], float]:
    """Attack-success table over ``t_diff`` and the value that balances both ASRs.

    ``asr_clf`` is the error of the bare classifier on the adversarial inputs,
    ``asr_pur`` the error after a fresh surrogate purification. The selected
    ``t_diff`` maximises ``min(asr_clf, asr_pur)`` (first on ties).
    """
    rows = []
    for t in grid:
        c = replace(cfg, t_diff=float(t))
        adv = attack_through_purifier(clf, cm, x, y, c)
        check = RngStream(cfg.seed, ATTACK_STREAM).child(2)
        purified = surrogate_purifier(cm, adv.x_adv, float(t), check)
        rows.append({"t_diff": float(t), "asr_clf": _error_rate(clf, adv.x_adv, adv.y),
                     "asr_pur": _error_rate(clf, purified, adv.y)})
    best = max(rows, key=lambda r: min(r["asr_clf"], r["asr_pur"]))
    return rows, best["t_diff"]


# ---------------------------------------------------------------------------
# consistency disruption


def consistency_disruption(x, y, cm: CmParams, clf, cfg: AttackConfig, purify_cfg: PurifyConfig,
                           sample_ids: Sequence[int] | None = None) -> AdvExample:
    """Optimise the purifier's own latents to produce adversarial generations.

    Latents start from purification of the clean ``x``; the attack then runs
    ``t_adv`` steps on ``L_a + beta L_d - lam * CE(clf(Proj(f(z))), y)``, with
    ``L_a`` measured against ``x``. Every generated sample is projected into
    the ``epsilon``-ball around ``x``; the K projected samples are the candidates.
    """
    cfg.validate()
    x = as_tensor(x, "x")
    y = np.asarray(y, dtype=np.int64)
    b = x.shape[0]
    shape = tuple(x.shape[1:])
    d = int(np.prod(shape))
    k = purify_cfg.k
    ids = list(range(b)) if sample_ids is None else list(sample_ids)
    _, traces, z = purify_batch(x, cm, purify_cfg, ids)
    sigma_t = purify_cfg.latent_scale(cm)
    xf = x.reshape(b, d)
    opt = neural.adam_init([z], lr=purify_cfg.eta if cfg.eta_adv is None else cfg.eta_adv)
    yk = np.repeat(y, k)
    image = len(shape) == 2
    adv_stats = []

    def project(gen):
        return project_ball(gen.reshape(b, k, d), np.broadcast_to(xf[:, None], (b, k, d)),
                            cfg.epsilon, cfg.norm, cfg.data_range, batched=True)

    for _ in range(cfg.t_adv):
        gen = cm_apply(cm, z.reshape(b * k, d), cm.schedule.sigma_max).reshape(b, k, d)
        _, g_gen = loss_a_batch(gen.reshape(b, k, *shape), x, purify_cfg.alpha, purify_cfg.ssim,
                                image, purify_cfg.reduction)
        g_gen = g_gen.reshape(b, k, d)
        p = project(gen)
        g_ce = clf_input_grad_rows(clf, p.reshape(b * k, d), yk).reshape(b, k, d)
        if cfg.proj_grad == "exact":
            lo = np.maximum(xf[:, None] - cfg.epsilon, cfg.data_range[0] if cfg.data_range else -np.inf)
            hi = np.minimum(xf[:, None] + cfg.epsilon, cfg.data_range[1] if cfg.data_range else np.inf)
            g_ce = g_ce * ((gen > lo) & (gen < hi))
        g_gen = g_gen - cfg.lam * g_ce
        _, g_d = loss_d_batch(z, 0.0, sigma_t)
        g = cm_vjp(cm, z.reshape(b * k, d), g_gen.reshape(b * k, d)).reshape(b, k, d)
        g = g + purify_cfg.beta * g_d
        opt, (z,) = neural.adam_step(opt, [z], [g])
        adv_stats.append([float(np.linalg.norm(z[i].mean(axis=0))) for i in range(b)])
    gen = cm_apply(cm, z.reshape(b * k, d), cm.schedule.sigma_max).reshape(b, k, d)
    cands = project(gen).reshape(b, k, *shape)
    achieved = perturbation_norm(cands.reshape(b * k, d), np.repeat(xf, k, axis=0), cfg.norm)
    return AdvExample(x, cands[:, 0], y, "disruption", cfg.norm, cfg.epsilon,
                      achieved.reshape(b, k).max(axis=1), cands,
                      {"latent_mean_norm_adv": np.array(adv_stats).T.max(axis=1) if adv_stats else np.zeros(b),
                       "latent_mean_norm_def": np.array([snap_latent_mean(tr) for tr in traces])})


def snap_latent_mean(trace) -> float:
    """Largest per-iteration pooled latent mean norm recorded during purification."""
    return max(r["latent_mean_norm"] for r in trace.records)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSpec:
    defense: str = "cmap"  # none | cmap | surrogate
    attack: str = "pgd"  # none | pgd | pgd-eot | disruption
    chunk: int = 50


def craft(attack: str, clf, cm: CmParams | None, x, y, cfg: AttackConfig,
          purify_cfg: PurifyConfig | None = None, sample_ids=None) -> AdvExample | None:
    if attack == "none":
        return None
    if attack == "pgd":
        return pgd(clf, x, y, cfg)
    if attack == "pgd-eot":
        return attack_through_purifier(clf, cm, x, y, cfg)
    if attack == "disruption":
        return consistency_disruption(x, y, cm, clf, cfg, purify_cfg, sample_ids)
    raise NumericsError(f"unknown attack {attack!r}")


def defended_labels(defense: str, clf, cm: CmParams | None, x: np.ndarray, purify_cfg: PurifyConfig | None,
                    attack_cfg: AttackConfig, sample_ids: Sequence[int], chunk: int = 50,
                    workers: int = 1, curve: bool = False):
    """Labels after the defense.

    With ``curve`` (CMAP only) also returns ``{"labels": {iteration: labels},
    "latent_std": (iterations, samples) array}`` of pooled latent std recorded
    along purification.
    """
    curves: dict = {}
    if defense == "none":
        lab = np.atleast_1d(clf_mod.predict(clf, _rows(x))[1])
    elif defense == "surrogate":
        s = RngStream(attack_cfg.seed, ATTACK_STREAM).child(3)
        lab = np.atleast_1d(clf_mod.predict(clf, _rows(surrogate_purifier(cm, x, attack_cfg.t_diff, s)))[1])
    elif defense == "cmap":
        res = predict_many(x, cm, clf, purify_cfg, list(sample_ids), chunk, curve, workers)
        lab = np.array([r.voted for r in res])
        if curve:
            curves["labels"] = {it: np.array([r.vote_curve[j][1] for r in res])
                                for j, (it, _) in enumerate(res[0].vote_curve)}
            curves["latent_std"] = np.stack([r.trace.column("latent_std_pooled") for r in res], axis=1)
    else:
        raise NumericsError(f"unknown defense {defense!r}")
    return (lab, curves) if curve else lab


def evaluate_robustness(spec: EvalSpec, clf, cm: CmParams | None, x, y, attack_cfg: AttackConfig,
                        purify_cfg: PurifyConfig | None = None, sample_ids: Sequence[int] | None = None,
                        workers: int = 1, curve: bool = False):
    """Standard and robust accuracy of one (defense, attack) pair on a data slice.

    Returns ``(summary, per_sample_rows)``; rows follow :data:`ATTACK_COLUMNS`.
    For disruption attacks a sample counts as broken when any of its K
    candidates is misclassified after defense. With ``curve`` (CMAP defense,
    single-candidate attacks) the summary also holds the robust accuracy at
    every purification snapshot under ``"curve"`` and per-iteration
    ``(iteration, min, mean, max)`` latent std over samples under ``"latent_std"``.
    """
    x = as_tensor(x, "x")
    y = np.asarray(y, dtype=np.int64)
    ids = list(range(len(x))) if sample_ids is None else list(sample_ids)
    std_pred = defended_labels(spec.defense, clf, cm, x, purify_cfg, attack_cfg, ids, spec.chunk, workers)
    std_ok = std_pred == y
    adv = craft(spec.attack, clf, cm, x, y, attack_cfg, purify_cfg, ids)
    curve_rows, std_rows = [], []
    if adv is None:
        rob_ok = std_ok
        und_ok = np.atleast_1d(clf_mod.predict(clf, _rows(x))[1]) == y
        achieved = np.zeros(len(x))
    elif adv.candidates is not None:
        b, k = adv.candidates.shape[:2]
        flat = adv.candidates.reshape(b * k, *x.shape[1:])
        cand_ids = [i * k + j for i in ids for j in range(k)]
        lab = defended_labels(spec.defense, clf, cm, flat, purify_cfg, attack_cfg, cand_ids, spec.chunk,
                              workers)
        rob_ok = (lab.reshape(b, k) == y[:, None]).all(axis=1)
        und = np.atleast_1d(clf_mod.predict(clf, _rows(flat))[1]).reshape(b, k)
        und_ok = (und == y[:, None]).all(axis=1)
        achieved = adv.achieved_norm
    else:
        want_curve = curve and spec.defense == "cmap"
        out = defended_labels(spec.defense, clf, cm, adv.x_adv, purify_cfg, attack_cfg, ids, spec.chunk,
                              workers, want_curve)
        lab, curves = out if want_curve else (out, {})
        rob_ok = lab == y
        if curves:
            curve_rows = [(it, float(np.mean(v == y))) for it, v in sorted(curves["labels"].items())]
            std_rows = [(it, float(r.min()), float(r.mean()), float(r.max()))
                        for it, r in enumerate(curves["latent_std"])]
        und_ok = np.atleast_1d(clf_mod.predict(clf, _rows(adv.x_adv))[1]) == y
        achieved = adv.achieved_norm
    rows = [{"sample_index": int(i), "attack_tag": spec.attack, "norm": attack_cfg.norm,
             "epsilon": attack_cfg.epsilon, "success_undefended": int(not u),
             "success_defended": int(not r), "achieved_norm": float(a)}
            for i, u, r, a in zip(ids, und_ok, rob_ok, achieved)]
    summary = {"defense": spec.defense, "attack": spec.attack, "norm": attack_cfg.norm,
               "epsilon": attack_cfg.epsilon, "standard_acc": float(np.mean(std_ok)),
               "robust_acc": float(np.mean(rob_ok)),
               "undefended_robust_acc": float(np.mean(und_ok))}
    if curve_rows:
        summary["curve"] = curve_rows
        summary["latent_std"] = std_rows
    if adv is not None and adv.extra:
        summary["extra"] = adv.extra
    return summary, rows


def write_attack_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ATTACK_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "epsilon": repr(float(r["epsilon"])),
                        "achieved_norm": repr(float(r["achieved_norm"]))})
