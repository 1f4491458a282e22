import math

import numpy as np
import pytest

from cmap_lab.consistency import analytic_cm
from cmap_lab.numerics import NumericsError, RngStream
from cmap_lab.theory import (Prop1Instance, TheoremConfig, coeff_mu, coeff_mu_quadrature, discrete_mean_coeff,
                             discrete_var, latent_shifts, prop1_sides, random_prop1_instances, remark_report,
                             remark_root, sigma_cl2, sigma_cl2_quadrature, simulate_branch,
                             simulate_latent_pair, verify_prop1, verify_theorem1, write_shifts_csv)

ROOT_S2 = 1.0 / (math.e ** 2 - 1.0)


def test_coeff_mu_values():
    assert coeff_mu(1.0) == pytest.approx(0.5 * math.log(2) - 1, abs=1e-15)
    assert coeff_mu(1.0) == pytest.approx(-0.6534264, abs=1e-7)
    assert abs(coeff_mu_quadrature(1.0) - coeff_mu(1.0)) < 1e-12
    assert abs(coeff_mu(1e3) + 1) < 5e-7
    with pytest.raises(NumericsError):
        coeff_mu(0.0)


def test_sigma_cl2_values():
    assert sigma_cl2(1.0) == pytest.approx(1 - math.pi / 4, abs=1e-15)
    assert sigma_cl2(1.0) == pytest.approx(0.2146018, abs=1e-7)
    for s in (0.3, 1.0, 2.0):
        assert abs(sigma_cl2_quadrature(s) - sigma_cl2(s)) < 1e-12
    assert sigma_cl2(1e3) < 1e-6
    assert abs(sigma_cl2(1e-4) - 1) < 1e-3
    with pytest.raises(NumericsError):
        sigma_cl2(-1.0)


def test_discrete_coefficients_approach_continuum():
    for s in (0.5, 1.0, 2.0):
        errs = [abs(discrete_mean_coeff(s, n) - coeff_mu(s)) for n in (200, 800)]
        assert errs[1] < errs[0] / 3
        assert abs(discrete_var(s, 3200) - sigma_cl2(s)) < 1e-3


def test_shared_noise_zero_perturbation_is_exact():
    x = RngStream(0).generator().standard_normal((5, 3))
    a, b = simulate_latent_pair(x, np.zeros(3), 1.0, 0.0, 100, (RngStream(1), RngStream(1)))
    assert np.array_equal(a, b)


def test_three_step_hand_unrolled():
    xi = np.array([[0.3], [-1.2], [0.7]])
    x0, mu, s = np.array([0.8]), 0.1, 1.0
    dt = 1 / 3
    total = x0[0]
    for k in range(3):
        t = k * dt
        total += dt * t * -(x0[0] - mu) / (s * s + t * t) + math.sqrt(dt) * t * xi[k, 0] / math.sqrt(s * s + t * t)
    assert simulate_branch(x0, s, mu, 3, xi)[0] == pytest.approx(total, abs=1e-12)


def test_simulation_validation():
    with pytest.raises(NumericsError):
        simulate_latent_pair(np.zeros(2), np.zeros(2), 1.0, 0.0, 50, (RngStream(0), RngStream(1)))
    with pytest.raises(NumericsError):
        simulate_branch(np.zeros(2), 1.0, 0.0, 4, np.zeros((3, 2)))
    with pytest.raises(NumericsError):
        TheoremConfig(trials=100).validate()
    with pytest.raises(NumericsError):
        TheoremConfig(eps_a=[0.1, 0.2]).eps_vector()


def test_theorem_mean_and_variance_moderate_trials():
    rep = verify_theorem1(TheoremConfig(trials=40_000))
    assert rep.passed
    assert rep.analytic_mean[0] == pytest.approx(-0.06534264, abs=1e-8)
    assert rep.analytic_var == pytest.approx(0.4292037, abs=1e-7)


def test_zero_perturbation_mean_is_zero():
    rep = verify_theorem1(TheoremConfig(trials=20_000, eps_a=0.0, seed=4))
    assert rep.mean_pass and max(abs(z) for z in rep.z_scores) < 4


def test_root_variance_cancels_mean_shift():
    rep = verify_theorem1(TheoremConfig(trials=20_000, sigma_x=math.sqrt(ROOT_S2), seed=2))
    assert rep.passed and abs(rep.analytic_mean[0]) < 1e-12


def test_shifts_do_not_depend_on_workers():
    cfg = TheoremConfig(trials=10_000, d=2)
    two = TheoremConfig(trials=10_000, d=2, workers=2)
    assert np.array_equal(latent_shifts(cfg), latent_shifts(two))


def test_random_signs_seeded():
    e = TheoremConfig(random_signs=True, seed=3).eps_vector()
    assert np.array_equal(np.abs(e), np.full(8, 0.1))
    assert np.array_equal(e, TheoremConfig(random_signs=True, seed=3).eps_vector())


def test_remark_root():
    root = remark_root()
    assert root == pytest.approx(ROOT_S2, abs=1e-9)
    assert abs(coeff_mu(math.sqrt(root))) < 1e-9
    rep = remark_report()
    assert rep["stated_is_root"] is False
    assert rep["coeff_mu_at_stated"] > 1.0


def test_bound_zero_perturbation_slack():
    gen = RngStream(6).generator()
    x = gen.uniform(0, 1, (8, 8))
    g = np.clip(x + 0.05 * gen.standard_normal((3, 8, 8)), 0, 1)
    inst = Prop1Instance(x, np.zeros_like(x), g, loss_d=2.0)
    lhs, rhs = prop1_sides(inst, 2.0, 5e-4, 80.0)
    from cmap_lab.metrics import ssim
    mean_ssim = np.mean([ssim(gi, x) for gi in g])
    assert lhs - rhs == pytest.approx(-2.0 * (1 - mean_ssim), abs=1e-12)


def test_bound_strict_when_generation_is_exact():
    gen = RngStream(7).generator()
    x = gen.uniform(0, 1, (8, 8))
    eps = gen.uniform(-0.05, 0.05, (8, 8))
    inst = Prop1Instance(x, eps, np.stack([x, x]), loss_d=0.0)
    lhs, rhs = prop1_sides(inst, 2.0, 5e-4, 80.0)
    assert lhs == 0.0 and rhs > 0.0


def test_randomised_instances_have_no_violations(tmp_path):
    cm = analytic_cm(np.full(64, 0.5), 0.15)
    inst = random_prop1_instances(cm, 200, 4, (8, 8), RngStream(1))
    rep = verify_prop1(inst, 2.0, 5e-4, 80.0)
    assert rep["count"] == 200 and rep["violations"] == 0 and rep["min_slack"] >= -1e-12
    pts = verify_prop1(random_prop1_instances(analytic_cm(np.zeros(5), 1.0), 50, 3, (5,), RngStream(2)),
                       0.0, 5e-4, 80.0, image=False)
    assert pts["violations"] == 0


def test_shifts_csv(tmp_path):
    write_shifts_csv(np.array([[0.5, -1.0]]), tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines() == ["trial,coord_0,coord_1", "0,0.5,-1.0"]


def test_shift_independent_of_data_mean():
    base = verify_theorem1(TheoremConfig(trials=20_000, seed=5))
    moved = verify_theorem1(TheoremConfig(trials=20_000, seed=5, mu=1.5))
    assert moved.passed
    assert np.allclose(base.empirical_mean, moved.empirical_mean, atol=1e-12)
