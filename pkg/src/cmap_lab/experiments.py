"""Experiment runners behind the command line.

Each runner takes a typed config plus an output directory, writes only inside
that directory, and returns ``(passed, files)``; ``passed`` is only meaningful
for verification runners. Config schemas are the dataclasses below; paths in
configs are resolved against the working directory.
"""
from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import attacks as atk
from . import classifier as clf_mod
from . import consistency as cmod
from . import data as dmod
from . import purifier as pur
from . import theory
from .metrics import EpsConfig, MmdConfig, eps_feature, observation_histogram, write_observation_csvs
from .numerics import NumericsError, RngStream

SUBSET_STREAM = 0x5E1
OBSERVE_STREAM = 0x0B5
PROP_STREAM = 0x9A0
EVAL_COLUMNS = ["run", "defense", "attack", "norm", "epsilon", "standard_acc", "robust_acc"]


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise NumericsError(f"config field {what!r} is required")
    p = Path(path)
    if not p.exists():
        raise NumericsError(f"{what} path {path!r} does not exist")
    return p


def select_indices(n_total: int, n: int | None, seed: int, replica: int = 0) -> np.ndarray:
    """Sorted random subset of size ``n`` (all indices when ``n`` is None or too large)."""
    if n is None or n >= n_total:
        return np.arange(n_total)
    if n < 1:
        raise NumericsError("subset size must be positive")
    gen = RngStream(seed, SUBSET_STREAM).child(replica).generator()
    return np.sort(gen.choice(n_total, n, replace=False))


# ---------------------------------------------------------------------------
# data and training


@dataclass
class GenDataConfig:
    spec: dmod.SyntheticSpec = field(default_factory=dmod.SyntheticSpec)
    n_train: int | None = None  # None -> one "data" snapshot, else "train" + "test"


def run_gen_data(cfg: GenDataConfig, out: Path) -> tuple[bool, list[Path]]:
    ds = dmod.generate(cfg.spec)
    if cfg.n_train is None:
        dmod.save_dataset(ds, out / "data")
        return True, [out / "data"]
    tr, te = dmod.train_test_split(ds, cfg.n_train)
    dmod.save_dataset(tr, out / "train")
    dmod.save_dataset(te, out / "test")
    return True, [out / "train", out / "test"]


@dataclass
class TrainCmConfig:
    data: str = ""
    backend: str = "neural"  # neural | analytic (moment fit of the data)
    train: cmod.TrainConfig = field(default_factory=cmod.TrainConfig)


def run_train_cm(cfg: TrainCmConfig, out: Path) -> tuple[bool, list[Path]]:
    ds = dmod.load_dataset(_need(cfg.data, "data"))
    files = [out / "cm"]
    if cfg.backend == "analytic":
        x = ds.flat()
        mu = x.mean(axis=0)
        cm = cmod.analytic_cm(mu, float(np.sqrt(((x - mu) ** 2).mean())), cfg.train.schedule)
    elif cfg.backend == "neural":
        cm, curve = cmod.train_consistency(ds, cfg.train)
        with open(out / "train_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for r in curve:
                w.writerow([r["step"], repr(r["loss"])])
        files.append(out / "train_curve.csv")
    else:
        raise NumericsError(f"unknown backend {cfg.backend!r}")
    cmod.save_cm(cm, out / "cm")
    return True, files


@dataclass
class TrainClfConfig:
    data: str = ""
    test_data: str | None = None
    clf: clf_mod.ClfConfig = field(default_factory=clf_mod.ClfConfig)


def run_train_clf(cfg: TrainClfConfig, out: Path) -> tuple[bool, list[Path]]:
    ds = dmod.load_dataset(_need(cfg.data, "data"))
    params, report = clf_mod.train_clf(ds, cfg.clf)
    clf_mod.save_clf(params, out / "clf")
    metrics = {"train_acc": clf_mod.accuracy(params, ds), "report": report}
    if cfg.test_data:
        metrics["test_acc"] = clf_mod.accuracy(params, dmod.load_dataset(_need(cfg.test_data, "test_data")))
    return True, [out / "clf", _write_json(out / "clf_metrics.json", metrics)]


# ---------------------------------------------------------------------------
# attack / purify


def _load_models(clf_path: str | None, cm_path: str | None, need_cm: bool):
    clf = clf_mod.load_clf(_need(clf_path, "clf"))
    cm = cmod.load_cm(_need(cm_path, "cm")) if need_cm else None
    return clf, cm


@dataclass
class AttackRunConfig:
    data: str = ""
    clf: str = ""
    cm: str | None = None
    attack: str = "pgd"  # pgd | pgd-eot | disruption
    defense: str = "none"  # none | cmap | surrogate
    attack_cfg: atk.AttackConfig = field(default_factory=atk.AttackConfig)
    purify: pur.PurifyConfig = field(default_factory=pur.PurifyConfig)
    t_diff_grid: list[float] | None = None  # pgd-eot: sweep t_diff first and keep the balanced value
    n: int | None = 100
    seed: int = 0


def _sweep_t_diff(clf, cm, x, y, acfg: atk.AttackConfig, grid, out: Path, files: list) -> atk.AttackConfig:
    rows, best = atk.t_diff_sweep(clf, cm, x, y, acfg, grid)
    path = out / "t_diff_sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_diff", "asr_clf", "asr_pur", "selected"])
        for r in rows:
            w.writerow([repr(r["t_diff"]), repr(r["asr_clf"]), repr(r["asr_pur"]), int(r["t_diff"] == best)])
    files.append(path)
    return replace(acfg, t_diff=best)


def run_attack(cfg: AttackRunConfig, out: Path, workers: int = 1) -> tuple[bool, list[Path]]:
    ds = dmod.load_dataset(_need(cfg.data, "data"))
    needs_cm = cfg.attack in ("pgd-eot", "disruption") or cfg.defense != "none"
    clf, cm = _load_models(cfg.clf, cfg.cm, needs_cm)
    idx = select_indices(len(ds), cfg.n, cfg.seed)
    x, y = ds.samples[idx], ds.labels[idx]
    files: list[Path] = []
    acfg = cfg.attack_cfg
    if cfg.attack == "pgd-eot" and cfg.t_diff_grid:
        acfg = _sweep_t_diff(clf, cm, x, y, acfg, cfg.t_diff_grid, out, files)
    summary, rows = atk.evaluate_robustness(atk.EvalSpec(cfg.defense, cfg.attack), clf, cm, x, y, acfg,
                                            cfg.purify, idx.tolist(), workers)
    atk.write_attack_csv(rows, out / "attacks.csv")
    files.append(out / "attacks.csv")
    adv = atk.craft(cfg.attack, clf, cm, x, y, acfg, cfg.purify, idx.tolist())
    dmod.save_dataset(dmod.Dataset(ds.kind, adv.x_adv, y, ds.value_range, ds.num_classes,
                                   {"source_indices": idx.tolist(), "attack": cfg.attack}), out / "adversarial")
    files.append(out / "adversarial")
    files.append(_write_json(out / "attack_summary.json", {**summary, "t_diff": acfg.t_diff}))
    return True, files


@dataclass
class PurifyRunConfig:
    data: str = ""
    cm: str = ""
    clf: str | None = None
    purify: pur.PurifyConfig = field(default_factory=pur.PurifyConfig)
    input_kind: str = "clean"
    n: int | None = 20
    seed: int = 0


def run_purify(cfg: PurifyRunConfig, out: Path, workers: int = 1) -> tuple[bool, list[Path]]:
    ds = dmod.load_dataset(_need(cfg.data, "data"))
    cm = cmod.load_cm(_need(cfg.cm, "cm"))
    idx = select_indices(len(ds), cfg.n, cfg.seed)
    x = ds.samples[idx]
    # dataset extra may remember where adversarial samples came from; ids follow the source
    ids = ds.extra.get("source_indices")
    ids = [ids[i] for i in idx] if ids else idx.tolist()
    trace_dir = out / "traces"
    trace_dir.mkdir()
    files: list[Path] = [trace_dir]
    if cfg.clf:
        clf = clf_mod.load_clf(_need(cfg.clf, "clf"))
        results = pur.predict_many(x, cm, clf, cfg.purify, ids, workers=workers)
        dicts = [pur.result_to_dict(r, int(ds.labels[i]), cfg.input_kind) for r, i in zip(results, idx)]
        traces = [r.trace for r in results]
        acc = float(np.mean([d["voted_label"] == d["true_label"] for d in dicts]))
    else:
        _, traces, _ = pur.purify_batch(x, cm, cfg.purify, ids)
        dicts, acc = [], None
    for i, tr in zip(ids, traces):
        pur.write_trace_csv(tr, trace_dir / f"trace_{i:06d}.csv")
    sigma_t = cfg.purify.latent_scale(cm)
    std = np.array([tr.column("latent_std_pooled") for tr in traces])
    summary = {"accuracy": acc, "sigma_t": sigma_t, "latent_std_min": float(std.min()),
               "latent_std_max": float(std.max()), "count": len(ids)}
    files.append(_write_json(out / "results.json", dicts))
    files.append(_write_json(out / "purify_summary.json", summary))
    return True, files


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalConfig:
    data: str = ""
    clf: str = ""
    cm: str | None = None
    defense: str = "cmap"
    attack: str = "pgd"
    attack_cfg: atk.AttackConfig = field(default_factory=atk.AttackConfig)
    purify: pur.PurifyConfig = field(default_factory=pur.PurifyConfig)
    t_diff_grid: list[float] | None = None
    t_diff_sweep_n: int = 20
    n: int | None = 100
    replicas: int = 3
    seed: int = 0
    chunk: int = 50
    curve: bool = False


def _mean_std(values: list[float]) -> tuple[float, float]:
    mean = math.fsum(values) / len(values)
    return mean, (statistics.stdev(values) if len(values) > 1 else float("nan"))


def evaluate(cfg: EvalConfig, ds: dmod.Dataset, clf, cm, workers: int = 1, out: Path | None = None,
             files: list | None = None, tag: str = "") -> dict:
    """Run all replicas of one evaluation; returns ``{"runs", "mean", "std", ...}``."""
    if cfg.replicas < 1:
        raise NumericsError("replicas must be at least 1")
    acfg = cfg.attack_cfg
    if cfg.attack == "pgd-eot" and cfg.t_diff_grid:
        idx = select_indices(len(ds), cfg.t_diff_sweep_n, cfg.seed, replica=10_000)
        acfg = _sweep_t_diff(clf, cm, ds.samples[idx], ds.labels[idx], acfg, cfg.t_diff_grid,
                             out, files) if out is not None else acfg
    runs = []
    for r in range(cfg.replicas):
        idx = select_indices(len(ds), cfg.n, cfg.seed, r)
        a = replace(acfg, seed=acfg.seed + r)
        p = replace(cfg.purify, seed=cfg.purify.seed + r)
        summary, rows = atk.evaluate_robustness(atk.EvalSpec(cfg.defense, cfg.attack, cfg.chunk), clf, cm,
                                                ds.samples[idx], ds.labels[idx], a, p, idx.tolist(),
                                                workers, cfg.curve)
        if out is not None:
            path = out / f"attacks{tag}_run{r}.csv"
            atk.write_attack_csv(rows, path)
            files.append(path)
        runs.append(summary)
    std_m, std_s = _mean_std([s["standard_acc"] for s in runs])
    rob_m, rob_s = _mean_std([s["robust_acc"] for s in runs])
    return {"runs": runs, "standard_acc": (std_m, std_s), "robust_acc": (rob_m, rob_s),
            "t_diff": acfg.t_diff}


def write_eval_csv(cfg: EvalConfig, result: dict, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        head = [cfg.defense, cfg.attack, cfg.attack_cfg.norm, repr(cfg.attack_cfg.epsilon)]
        for r, s in enumerate(result["runs"]):
            w.writerow([r] + head + [repr(s["standard_acc"]), repr(s["robust_acc"])])
        for j, name in enumerate(("mean", "std")):
            w.writerow([name] + head + [repr(result["standard_acc"][j]), repr(result["robust_acc"][j])])


def run_eval(cfg: EvalConfig, out: Path, workers: int = 1) -> tuple[bool, list[Path]]:
    ds = dmod.load_dataset(_need(cfg.data, "data"))
    needs_cm = cfg.defense != "none" or cfg.attack in ("pgd-eot", "disruption")
    clf, cm = _load_models(cfg.clf, cfg.cm, needs_cm)
    files: list[Path] = []
    result = evaluate(cfg, ds, clf, cm, workers, out, files)
    write_eval_csv(cfg, result, out / "eval.csv")
    files.append(out / "eval.csv")
    files.append(_write_json(out / "eval_summary.json", result))
    return True, files


# ---------------------------------------------------------------------------
# ablation


ABLATE_PARAMS = ("alpha", "beta", "k", "t_diff", "lambda")


@dataclass
class AblateConfig:
    param: str = "beta"
    grid: list[float] = field(default_factory=list)
    base: EvalConfig = field(default_factory=EvalConfig)
    attacks: list[str] = field(default_factory=lambda: ["pgd"])
    curve: bool | None = None  # None -> curves for the beta sweep only


def _with_param(base: EvalConfig, param: str, value) -> EvalConfig:
    if param == "alpha":
        return replace(base, purify=replace(base.purify, alpha=float(value)))
    if param == "beta":
        return replace(base, purify=replace(base.purify, beta=float(value)))
    if param == "k":
        if float(value) != int(value):
            raise NumericsError("K grid values must be integers")
        return replace(base, purify=replace(base.purify, k=int(value)))
    if param == "t_diff":
        return replace(base, attack_cfg=replace(base.attack_cfg, t_diff=float(value)), t_diff_grid=None)
    if param == "lambda":
        return replace(base, attack_cfg=replace(base.attack_cfg, lam=float(value)))
    raise NumericsError(f"cannot ablate {param!r}; choose from {ABLATE_PARAMS}")


def run_ablate(cfg: AblateConfig, out: Path, workers: int = 1) -> tuple[bool, list[Path]]:
    if not cfg.grid:
        raise NumericsError("ablation grid must be non-empty")
    if not cfg.attacks:
        raise NumericsError("at least one attack is required")
    for v in cfg.grid:
        _with_param(cfg.base, cfg.param, v)
    base = cfg.base
    ds = dmod.load_dataset(_need(base.data, "base.data"))
    needs_cm = base.defense != "none" or any(a in ("pgd-eot", "disruption") for a in cfg.attacks)
    clf, cm = _load_models(base.clf, base.cm, needs_cm)
    want_curve = cfg.param == "beta" if cfg.curve is None else cfg.curve
    files: list[Path] = []
    table, curves, std_rows = [], [], []
    for gi, v in enumerate(cfg.grid):
        per_attack = {}
        for ai, name in enumerate(cfg.attacks):
            ec = replace(_with_param(base, cfg.param, v), attack=name, curve=want_curve and ai == 0)
            per_attack[name] = evaluate(ec, ds, clf, cm, workers, out, files, tag=f"_g{gi}_{name}")
        primary = per_attack[cfg.attacks[0]]
        rob = [s["robust_acc"] for s in primary["runs"]]
        mean, std = _mean_std(rob)
        table.append({"param_value": v, "standard_acc": primary["standard_acc"][0],
                      **{f"robust_acc_{a}": per_attack[a]["robust_acc"][0] for a in cfg.attacks},
                      "mean": mean, "std": std})
        if want_curve:
            runs = primary["runs"]
            for j, (it, _) in enumerate(runs[0].get("curve", [])):
                curves.append((v, it, math.fsum(r["curve"][j][1] for r in runs) / len(runs)))
            for j, (it, *_rest) in enumerate(runs[0].get("latent_std", [])):
                std_rows.append((v, it, min(r["latent_std"][j][1] for r in runs),
                                 math.fsum(r["latent_std"][j][2] for r in runs) / len(runs),
                                 max(r["latent_std"][j][3] for r in runs)))
    cols = ["param_value", "standard_acc"] + [f"robust_acc_{a}" for a in cfg.attacks] + ["mean", "std"]
    with open(out / "ablate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in table:
            w.writerow([repr(float(row[c])) for c in cols])
    files.append(out / "ablate.csv")
    if want_curve:
        with open(out / "ablate_curves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param_value", "iteration", "robust_acc"])
            w.writerows([repr(float(v)), it, repr(a)] for v, it, a in curves)
        with open(out / "ablate_latent_std.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param_value", "iteration", "std_min", "std_mean", "std_max"])
            w.writerows([repr(float(v)), it, repr(a), repr(b), repr(c)] for v, it, a, b, c in std_rows)
        files += [out / "ablate_curves.csv", out / "ablate_latent_std.csv"]
    selected = min(table, key=lambda r: r["mean"])["param_value"]
    files.append(_write_json(out / "ablate_summary.json",
                             {"param": cfg.param, "rows": table, "selected_min_robust": selected}))
    return True, files


def read_curves(path: str | Path) -> dict[float, list[tuple[int, float]]]:
    out: dict[float, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(float(r["param_value"]), []).append((int(r["iteration"]), float(r["robust_acc"])))
    return out


def late_decline(curves: dict[float, list[tuple[int, float]]], unconstrained: float, reference: float,
                 factor: int = 5) -> dict:
    """Compare two curves ``factor`` times past the unconstrained run's peak iteration.

    The comparison iteration is clipped to the last recorded iteration.
    """
    a = dict(curves[unconstrained])
    b = dict(curves[reference])
    its = sorted(a)
    peak = max(its, key=lambda it: (a[it], -it))
    target = min(max(factor * peak, its[0]), its[-1])
    at = max(it for it in its if it <= target)
    return {"peak_iteration": peak, "compare_iteration": at, "unconstrained_acc": a[at],
            "reference_acc": b[at], "declined": a[at] < b[at]}


# ---------------------------------------------------------------------------
# verification


@dataclass
class TheoremRunConfig:
    theorem: theory.TheoremConfig = field(default_factory=theory.TheoremConfig)
    sigmas: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    include_root: bool = True
    write_shifts: bool = False


def run_verify_theorem(cfg: TheoremRunConfig, out: Path, workers: int = 1) -> tuple[bool, list[Path]]:
    sigmas = [float(s) for s in cfg.sigmas]
    if cfg.include_root:
        sigmas.append(math.sqrt(theory.remark_root()))
    if not sigmas:
        raise NumericsError("no sigma values to verify")
    reports, files = [], []
    for i, s in enumerate(sigmas):
        tc = replace(cfg.theorem, sigma_x=s, workers=workers)
        shifts = theory.latent_shifts(tc)
        rep = theory.verify_theorem1(tc, shifts)
        d = rep.to_dict()
        d["config"].pop("workers", None)
        reports.append(d)
        if cfg.write_shifts:
            path = out / f"shifts_{i}.csv"
            theory.write_shifts_csv(shifts, path)
            files.append(path)
    passed = all(r["passed"] for r in reports)
    files.append(_write_json(out / "theorem_report.json",
                             {"runs": reports, "remark": theory.remark_report(), "passed": passed}))
    return passed, files


@dataclass
class PropRunConfig:
    instances: int = 1000
    k: int = 10
    side: int = 8
    alpha: float = 2.0
    beta: float = 5e-4
    max_eps: float = 0.1
    cm: str | None = None  # None -> analytic Gaussian image model below
    mu: float = 0.5
    sigma_x: float = 0.15
    replay_samples: int = 4
    replay: pur.PurifyConfig = field(default_factory=lambda: pur.PurifyConfig(iterations=50, snapshot_stride=1))
    seed: int = 0
    tol: float = 1e-12


def run_verify_prop(cfg: PropRunConfig, out: Path, workers: int = 1) -> tuple[bool, list[Path]]:
    if cfg.cm:
        cm = cmod.load_cm(_need(cfg.cm, "cm"))
        side = int(round(math.sqrt(cm.dim)))
        if side * side != cm.dim:
            raise NumericsError("prop replay needs a square image model")
    else:
        side = cfg.side
        cm = cmod.analytic_cm(np.full(side * side, cfg.mu), cfg.sigma_x)
    shape = (side, side)
    sigma_t = cm.schedule.sigma_max
    root = RngStream(cfg.seed, PROP_STREAM)
    inst = theory.random_prop1_instances(cm, cfg.instances, cfg.k, shape, root.child(0), cfg.max_eps)
    rand = theory.verify_prop1(inst, cfg.alpha, cfg.beta, sigma_t, cfg.replay.ssim, True, cfg.tol)
    pcfg = replace(cfg.replay, k=cfg.k, alpha=cfg.alpha, beta=cfg.beta, snapshot_stride=1, sigma_t=None)
    gen = root.child(1).generator()
    x = np.clip(cfg.mu + cfg.sigma_x * gen.standard_normal((cfg.replay_samples, *shape)), 0, 1) \
        if not cfg.cm else gen.uniform(0, 1, (cfg.replay_samples, *shape))
    eps = gen.uniform(-cfg.max_eps, cfg.max_eps, x.shape)
    replay_inst = []
    if cfg.replay_samples:
        _, traces, _ = pur.purify_batch(x + eps, cm, pcfg, list(range(cfg.replay_samples)))
        for i, tr in enumerate(traces):
            for rec in tr.records:
                replay_inst.append(theory.Prop1Instance(x[i], eps[i], tr.snapshots[rec["iteration"]],
                                                        loss_d=rec["loss_d"]))
    rep = theory.verify_prop1(replay_inst, cfg.alpha, cfg.beta, sigma_t, cfg.replay.ssim, True, cfg.tol) \
        if replay_inst else {"count": 0, "violations": 0, "min_slack": None, "median_slack": None, "slack": []}
    passed = rand["violations"] == 0 and rep["violations"] == 0
    report = {"random": {k: v for k, v in rand.items() if k != "slack"},
              "replay": {k: v for k, v in rep.items() if k != "slack"}, "passed": passed}
    path = out / "prop_slack.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "index", "slack"])
        for src, r in (("random", rand), ("replay", rep)):
            for i, s in enumerate(r["slack"]):
                w.writerow([src, i, repr(float(s))])
    return passed, [_write_json(out / "prop_report.json", report), path]


# ---------------------------------------------------------------------------
# observation


PROBE_KINDS = ("clean", "adv", "gen")


@dataclass
class ObserveConfig:
    train: str = ""
    test: str = ""
    cm: str = ""
    clf: str = ""
    probes: list[str] = field(default_factory=lambda: list(PROBE_KINDS))
    n_ref: int = 500
    n_probe: int = 200
    score: str = "empirical"  # empirical (reference-set score) | tweedie (from the consistency model)
    eps: EpsConfig = field(default_factory=EpsConfig)
    mmd: MmdConfig = field(default_factory=MmdConfig)
    attack_cfg: atk.AttackConfig = field(default_factory=atk.AttackConfig)
    bins: int = 40
    seed: int = 0


def run_observe(cfg: ObserveConfig, out: Path, workers: int = 1) -> tuple[bool, list[Path]]:
    if not cfg.probes:
        raise NumericsError("at least one probe kind is required")
    bad = set(cfg.probes) - set(PROBE_KINDS)
    if bad:
        raise NumericsError(f"unknown probe kinds {sorted(bad)}")
    if cfg.score not in ("empirical", "tweedie"):
        raise NumericsError(f"unknown score {cfg.score!r}")
    train = dmod.load_dataset(_need(cfg.train, "train"))
    test = dmod.load_dataset(_need(cfg.test, "test"))
    cm = cmod.load_cm(_need(cfg.cm, "cm"))
    clf = clf_mod.load_clf(_need(cfg.clf, "clf")) if "adv" in cfg.probes else None
    root = RngStream(cfg.seed, OBSERVE_STREAM)
    ref = train.flat()[select_indices(len(train), cfg.n_ref, cfg.seed, 0)]
    pidx = select_indices(len(test), cfg.n_probe, cfg.seed, 1)
    probes: dict[str, np.ndarray] = {}
    if "clean" in cfg.probes:
        probes["clean"] = test.flat()[pidx]
    if "adv" in cfg.probes:
        adv = atk.pgd(clf, test.samples[pidx], test.labels[pidx], cfg.attack_cfg)
        probes["adv"] = adv.x_adv.reshape(len(pidx), -1)
    if "gen" in cfg.probes:
        z = root.child(0).generator().standard_normal((cfg.n_probe, cm.dim)) * cm.schedule.sigma_max
        g = cmod.cm_generate(cm, z)
        probes["gen"] = np.clip(g, *train.value_range) if train.value_range else g
    if cfg.score == "empirical":
        full = train.flat()
        score_fn = lambda pts, tt: cmod.empirical_score(full, pts, tt)  # noqa: E731
    else:
        score_fn = lambda pts, tt: cmod.tweedie_score(cm, pts, tt)  # noqa: E731
    kind_ids = {"reference": 0, "clean": 1, "adv": 2, "gen": 3}
    feat = lambda kind, s: eps_feature(score_fn, s, cfg.eps, root.child(1, kind_ids[kind]))  # noqa: E731
    res = observation_histogram(ref, probes, cfg.mmd, feat, cfg.bins)
    write_observation_csvs(res, out / "mmd_values.csv", out / "mmd_bins.csv")
    summary = {"means": {k: float(np.mean(v)) for k, v in res.values.items()},
               "bandwidths": list(res.bandwidths)}
    if "adv" in res.values:
        summary["rank_tests"] = {
            f"adv>{k}": float(stats.mannwhitneyu(res.values["adv"], res.values[k],
                                                 alternative="greater").pvalue)
            for k in res.values if k != "adv"}
    return True, [out / "mmd_values.csv", out / "mmd_bins.csv", _write_json(out / "observe_summary.json", summary)]

