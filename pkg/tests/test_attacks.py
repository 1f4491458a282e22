import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmap_lab import neural
from cmap_lab.attacks import (AttackConfig, EvalSpec, attack_through_purifier, consistency_disruption,
                              eot_gradient, evaluate_robustness, perturbation_norm, pgd, project_ball,
                              surrogate_purifier, surrogate_vjp, t_diff_sweep, write_attack_csv)
from cmap_lab.classifier import ClfParams, accuracy, cross_entropy, predict, softmax
from cmap_lab.consistency import analytic_cm
from cmap_lab.neural import MlpParams
from cmap_lab.numerics import NumericsError, RngStream
from cmap_lab.purifier import PurifyConfig

EPS = 8 / 255


def _linear(w, b):
    return ClfParams(MlpParams([(np.asarray(w, float), np.asarray(b, float))], []), len(b))


def test_project_ball_examples(rng):
    x = rng.uniform(0.2, 0.8, (4, 4))
    inside = x + rng.uniform(-0.01, 0.01, x.shape)
    assert np.array_equal(project_ball(inside, x, 0.05), inside)
    assert np.array_equal(project_ball(inside + 1, x, 0.0), x)
    c = np.array([2.0, 0.0, 0.0])
    out = project_ball(c, np.zeros(3), 1.0, "l2", None)
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-15) and out[0] > 0
    with pytest.raises(NumericsError):
        project_ball(x, x[:2], 0.1)
    with pytest.raises(NumericsError):
        project_ball(x, x, 0.1, "l1")


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-2, 2)), arrays(np.float64, 6, elements=st.floats(0, 1)),
       st.floats(0.001, 0.5), st.sampled_from(["linf", "l2"]))
def test_project_ball_idempotent_and_bounded(cand, x, eps, norm):
    p = project_ball(cand, x, eps, norm)
    assert np.array_equal(project_ball(p, x, eps, norm), p)
    assert perturbation_norm(p[None], x[None], norm)[0] <= eps + 1e-9
    assert p.min() >= 0 and p.max() <= 1


def test_pgd_zero_budget_returns_input(clf_small, shapes_small):
    x = shapes_small[1].samples[:5]
    adv = pgd(clf_small, x, shapes_small[1].labels[:5], AttackConfig(epsilon=0.0))
    assert np.array_equal(adv.x_adv, x)


def test_single_step_matches_fgsm_closed_form():
    w = np.array([[1.0, -2.0, 0.5], [0.5, 3.0, -1.0]])
    b = np.array([0.1, -0.3, 0.2])
    clf = _linear(w, b)
    x = np.array([[0.4, 0.7]])
    y = np.array([1])
    p = softmax(x @ w + b)[0]
    grad = w @ (p - np.eye(3)[1])
    expected = np.clip(x + 0.05 * np.sign(grad), 0, 1)
    adv = pgd(clf, x, y, AttackConfig(epsilon=0.05, steps=1, step_size=0.05))
    assert np.array_equal(adv.x_adv, expected)


def test_pgd_breaks_undefended_classifier(clf_small, shapes_small):
    test = shapes_small[1]
    x, y = test.samples[:100], test.labels[:100]
    adv = pgd(clf_small, x, y, AttackConfig())
    assert np.all(adv.achieved_norm <= EPS + 1e-9)
    assert adv.x_adv.min() >= 0 and adv.x_adv.max() <= 1
    assert np.mean(predict(clf_small, adv.x_adv.reshape(100, -1))[1] == y) <= 0.10


def test_more_steps_never_weaker(clf_small, shapes_small):
    test = shapes_small[1]
    x, y = test.samples[:100], test.labels[:100]
    cfg = AttackConfig(epsilon=2 / 255)
    accs = [np.mean(predict(clf_small, pgd(clf_small, x, y, replace(cfg, steps=s)).x_adv.reshape(100, -1))[1] == y)
            for s in (10, 40, 100)]
    assert accs[1] <= accs[0] + 0.02 and accs[2] <= accs[1] + 0.02


def test_l2_pgd_respects_budget(clf_small, shapes_small):
    x, y = shapes_small[1].samples[:10], shapes_small[1].labels[:10]
    adv = pgd(clf_small, x, y, AttackConfig(norm="l2", epsilon=0.5, steps=10))
    assert np.all(adv.achieved_norm <= 0.5 + 1e-9)


def test_eot_deterministic_inner_and_single_draw():
    x = np.arange(4.0)
    det = eot_gradient(lambda v, s: 2 * v, x, 7, RngStream(0))
    assert np.allclose(det, 2 * x, atol=1e-15)
    one = eot_gradient(lambda v, s: s.generator().standard_normal(4), x, 1, RngStream(5))
    assert np.array_equal(one, RngStream(5).child(0).generator().standard_normal(4))
    with pytest.raises(NumericsError):
        eot_gradient(lambda v, s: v, x, 0, RngStream(0))


def test_eot_variance_scales_inversely():
    noisy = lambda v, s: v + s.generator().standard_normal(v.shape)  # noqa: E731
    x = np.zeros(50)
    single = np.array([eot_gradient(noisy, x, 1, RngStream(1, i)) for i in range(100)]).var()
    averaged = np.array([eot_gradient(noisy, x, 20, RngStream(2, i)) for i in range(100)]).var()
    assert single / averaged == pytest.approx(20, rel=0.15)


def test_surrogate_purifier_closed_form_and_determinism():
    mu, sx = np.array([0.3, -0.1, 0.8]), 0.7
    cm = analytic_cm(mu, sx)
    x = np.array([[0.5, 0.0, 1.0]])
    t = 0.9
    out = surrogate_purifier(cm, x, t, RngStream(4))
    z = RngStream(4).generator().standard_normal(x.shape)
    s0 = cm.schedule.sigma_min
    hand = mu + (x + t * z - mu) * np.sqrt((sx ** 2 + s0 ** 2) / (sx ** 2 + t ** 2))
    assert np.allclose(out, hand, atol=1e-13)
    assert np.array_equal(out, surrogate_purifier(cm, x, t, RngStream(4)))
    near = surrogate_purifier(cm, x, s0, RngStream(4))
    assert np.max(np.abs(near - x)) < 0.01


def test_surrogate_vjp_finite_differences(rng):
    cm = analytic_cm(np.full(5, 0.4), 0.3)
    x, ct = rng.uniform(0, 1, (2, 1, 5))
    f = lambda v: float((surrogate_purifier(cm, v, 1.3, RngStream(8)) * ct).sum())  # noqa: E731
    err = neural.finite_diff_check(f, lambda v: surrogate_vjp(cm, v, 1.3, RngStream(8), ct), x)
    assert err < 1e-6


def test_through_purifier_degenerates_to_plain_pgd_at_boundary():
    clf = _linear([[1.0, -1.0], [-0.5, 0.5]], [0.0, 0.1])
    cm = analytic_cm(np.zeros(2), 1.0)
    x = np.array([[0.3, 0.6], [0.7, 0.2]])
    y = np.array([0, 1])
    cfg = AttackConfig(epsilon=0.1, steps=5, n_eot=1, t_diff=cm.schedule.sigma_min)
    assert np.array_equal(attack_through_purifier(clf, cm, x, y, cfg).x_adv, pgd(clf, x, y, cfg).x_adv)


def test_through_purifier_deterministic_and_validated(clf_small, analytic_image_cm, shapes_small):
    x, y = shapes_small[1].samples[:3], shapes_small[1].labels[:3]
    cfg = AttackConfig(steps=3, n_eot=2)
    a = attack_through_purifier(clf_small, analytic_image_cm, x, y, cfg)
    assert np.array_equal(a.x_adv, attack_through_purifier(clf_small, analytic_image_cm, x, y, cfg).x_adv)
    assert np.all(a.achieved_norm <= EPS + 1e-9)
    with pytest.raises(NumericsError):
        attack_through_purifier(clf_small, analytic_image_cm, x, y, replace(cfg, t_diff=100.0))


def test_t_diff_sweep_table_and_selection(clf_small, analytic_image_cm, shapes_small):
    x, y = shapes_small[1].samples[:20], shapes_small[1].labels[:20]
    cfg = AttackConfig(steps=10, n_eot=2)
    rows, best = t_diff_sweep(clf_small, analytic_image_cm, x, y, cfg, [0.01, 0.1, 1.0])
    assert [r["t_diff"] for r in rows] == [0.01, 0.1, 1.0]
    assert best == max(rows, key=lambda r: min(r["asr_clf"], r["asr_pur"]))["t_diff"]
    assert rows[0]["asr_clf"] >= rows[0]["asr_pur"]


def test_disruption_candidates_within_ball(clf_small, analytic_image_cm, shapes_small):
    x, y = shapes_small[1].samples[:4], shapes_small[1].labels[:4]
    pcfg = PurifyConfig(iterations=10, beta=0.0)
    base = AttackConfig(t_adv=10)
    benign = consistency_disruption(x, y, analytic_image_cm, clf_small, replace(base, lam=0.0), pcfg)
    hostile = consistency_disruption(x, y, analytic_image_cm, clf_small, replace(base, lam=50.0), pcfg)
    for adv in (benign, hostile):
        assert adv.candidates.shape == (4, 10, 16, 16)
        assert np.all(adv.achieved_norm <= EPS + 1e-9)
        assert adv.candidates.min() >= 0 and adv.candidates.max() <= 1
    ce = lambda a: cross_entropy(clf_small, a.candidates.reshape(40, -1), np.repeat(y, 10))  # noqa: E731
    assert ce(hostile).mean() > ce(benign).mean()


def test_disruption_exact_projection_gradient_runs(clf_small, analytic_image_cm, shapes_small):
    x, y = shapes_small[1].samples[:2], shapes_small[1].labels[:2]
    adv = consistency_disruption(x, y, analytic_image_cm, clf_small, AttackConfig(t_adv=3, proj_grad="exact"),
                                 PurifyConfig(iterations=3))
    assert adv.extra["latent_mean_norm_adv"].shape == (2,)


def test_evaluate_without_defense_or_attack_is_plain_accuracy(clf_small, shapes_small):
    test = shapes_small[1]
    summary, rows = evaluate_robustness(EvalSpec("none", "none"), clf_small, None, test.samples, test.labels,
                                        AttackConfig())
    assert summary["standard_acc"] == accuracy(clf_small, test) == summary["robust_acc"]
    assert len(rows) == len(test.labels)


def test_attack_csv_columns(tmp_path, clf_small, shapes_small):
    x, y = shapes_small[1].samples[:5], shapes_small[1].labels[:5]
    _, rows = evaluate_robustness(EvalSpec("none", "pgd"), clf_small, None, x, y, AttackConfig(steps=5))
    write_attack_csv(rows, tmp_path / "a.csv")
    with open(tmp_path / "a.csv") as fh:
        got = list(csv.DictReader(fh))
    assert list(got[0]) == ["sample_index", "attack_tag", "norm", "epsilon", "success_undefended",
                            "success_defended", "achieved_norm"]
    assert len(got) == 5 and all(float(r["achieved_norm"]) <= EPS + 1e-9 for r in got)
