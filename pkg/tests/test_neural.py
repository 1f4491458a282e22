import numpy as np
import pytest

from cmap_lab import neural
from cmap_lab.neural import MlpParams, NumericsError
from cmap_lab.numerics import RngStream


def _net(sizes=(3, 8, 8, 2), seed=0):
    return neural.init_mlp(list(sizes), RngStream(seed))


def _reference_forward(params, x):
    h = x
    for i, (w, b) in enumerate(params.layers):
        h = np.einsum("ni,ij->nj", h, w) + b
        if i < len(params.layers) - 1:
            h = h / (1.0 + np.exp(-1.702 * h))
    return h


def test_zero_weights_output_bias(rng):
    p = _net()
    p = MlpParams([(np.zeros_like(w), b + 0.25 * (i + 1)) for i, (w, b) in enumerate(p.layers)], p.activations)
    out = neural.mlp_forward(p, rng.standard_normal((5, 3)))
    assert np.array_equal(out, np.tile(p.layers[-1][1], (5, 1)))


def test_single_linear_layer_is_affine(rng):
    w = rng.standard_normal((3, 2))
    b = rng.standard_normal(2)
    p = MlpParams([(w, b)], [])
    x = rng.standard_normal((4, 3))
    assert np.allclose(neural.mlp_forward(p, x), x @ w + b, rtol=0, atol=1e-15)
    _, gin = neural.mlp_vjp(p, x, np.ones((4, 2)))
    assert np.allclose(gin, np.ones((4, 2)) @ w.T, atol=1e-15)


def test_forward_matches_independent_implementation(rng):
    p = _net()
    x = rng.standard_normal((7, 3))
    assert np.max(np.abs(neural.mlp_forward(p, x) - _reference_forward(p, x))) < 1e-12


def test_dimension_mismatch_rejected(rng):
    p = _net()
    with pytest.raises(NumericsError):
        neural.mlp_forward(p, rng.standard_normal((2, 4)))
    with pytest.raises(NumericsError):
        neural.mlp_vjp(p, rng.standard_normal((2, 3)), np.zeros((2, 3)))


def test_vjp_matches_finite_differences(rng):
    p = _net()
    x = rng.standard_normal((4, 3))
    cot = rng.standard_normal((4, 2))
    grads, gin = neural.mlp_vjp(p, x, cot)
    f = lambda xx: float(np.sum(cot * neural.mlp_forward(p, xx)))  # noqa: E731
    assert neural.gradient_error(gin, neural.numeric_grad(f, x)) < 1e-6
    for li in range(len(p.layers)):
        for j in range(2):
            def fw(a, li=li, j=j):
                q = p.copy()
                w, b = q.layers[li]
                q.layers[li] = (a, b) if j == 0 else (w, a)
                return float(np.sum(cot * neural.mlp_forward(q, x)))
            assert neural.gradient_error(grads[li][j], neural.numeric_grad(fw, p.layers[li][j])) < 1e-6


def test_zero_cotangent_zero_gradients(rng):
    p = _net()
    grads, gin = neural.mlp_vjp(p, rng.standard_normal((3, 3)), np.zeros((3, 2)))
    assert not np.any(gin)
    assert all(not np.any(g) for wb in grads for g in wb)


def test_adam_zero_gradient_and_first_step():
    a = [np.array([1.0, -2.0])]
    st = neural.adam_init(a, lr=0.1)
    st1, out = neural.adam_step(st, a, [np.zeros(2)])
    assert np.array_equal(out[0], a[0]) and st1.step == 1
    _, out = neural.adam_step(st, a, [np.array([3.0, -0.5])])
    # bias-corrected first step moves each coordinate by lr * g / (|g| + eps)
    assert np.allclose(out[0] - a[0], [-0.1, 0.1], atol=1e-8)


def test_adam_deterministic(rng):
    p = _net()
    x = rng.standard_normal((8, 3))

    def run():
        q, st = p.copy(), neural.adam_init(p.flat())
        for _ in range(5):
            g, _ = neural.mlp_vjp(q, x, neural.mlp_forward(q, x))
            st, q = neural.adam_step_mlp(st, q, g)
        return q

    a, b = run(), run()
    assert all(np.array_equal(u, v) for u, v in zip(a.flat(), b.flat()))


def test_finite_diff_check_examples(rng):
    x = rng.standard_normal(6)
    assert neural.finite_diff_check(lambda v: float(v @ v), lambda v: 2 * v, x) < 1e-8
    assert neural.finite_diff_check(lambda v: float(np.sin(v).sum()), np.cos, x) < 1e-8
    p = _net((3, 8, 1))
    head = lambda v: float(neural.mlp_forward(p, v[None])[0, 0])  # noqa: E731
    grad = lambda v: neural.mlp_vjp(p, v[None], np.ones((1, 1)), need_params=False)[1][0]  # noqa: E731
    assert neural.finite_diff_check(head, grad, rng.standard_normal(3)) < 1e-6
    with pytest.raises(NumericsError):
        neural.finite_diff_check(head, grad, rng.standard_normal(3), h=0.0)


def test_snapshot_round_trip_bit_exact(tmp_path, rng):
    p = _net()
    neural.save_mlp(p, tmp_path / "m.json")
    q = neural.load_mlp(tmp_path / "m.json")
    x = rng.standard_normal((5, 3))
    assert np.array_equal(neural.mlp_forward(p, x), neural.mlp_forward(q, x))


def test_layer_chain_validated():
    with pytest.raises(NumericsError):
        MlpParams([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((5, 2)), np.zeros(2))], ["gelu"])
