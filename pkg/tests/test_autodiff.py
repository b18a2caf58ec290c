import numpy as np
import pytest

from vila import autodiff as ad


def test_l2_normalize_345_triangle():
    out = ad.l2_normalize(ad.Tensor([3.0, 4.0]))
    np.testing.assert_allclose(out.data, [0.6, 0.8], atol=1e-7)


def test_cosine_sim_self_is_one():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = ad.Tensor(rng.normal(size=7))
        assert ad.cosine_sim(x, x).item() == pytest.approx(1.0, abs=1e-6)


def test_logsumexp_two_zeros_is_ln2():
    out = ad.logsumexp(ad.Tensor([0.0, 0.0]), axis=0)
    assert out.item() == pytest.approx(np.log(2.0), abs=1e-7)


def test_mse_backward_matches_mean_reduction():
    # d/dx mean((x - 0)^2) = 2x / n
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    loss = ad.mse(x, ad.Tensor([0.0, 0.0]))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, [1.0, 2.0], atol=1e-7)


def test_relu_backward_gates_negative_input():
    x = ad.Tensor([-1.0, 2.0], requires_grad=True)
    ad.backward(ad.reduce_sum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_grad_check_quadratic_is_sharp():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4, 3))
    err = ad.grad_check(lambda x: ad.scale(ad.frobenius_sq(x), 0.5), [x0])
    assert err < 1e-6


def _mlp_params(rng, dims):
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(rng.uniform(-0.1, 0.1, size=fan_out))
    return params


def _relu_mlp_loss(x, *params):
    h = x
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = ad.affine(h, params[2 * i], params[2 * i + 1])
        if i < n_layers - 1:
            h = ad.relu(h)
    return ad.scale(ad.frobenius_sq(h), 0.5)


def _preactivations_clear_of_kink(x0, params, margin=0.05):
    h = x0
    n_layers = len(params) // 2
    for i in range(n_layers - 1):
        h = h @ params[2 * i] + params[2 * i + 1]
        if np.abs(h).min() < margin:
            return False
        h = np.maximum(h, 0)
    return True


def test_five_layer_mlp_matches_finite_differences():
    dims = (6, 8, 8, 8, 8, 4)
    # Resample until every relu preactivation sits clear of the kink, so
    # the finite-difference probes stay on one side of it.
    for seed in range(200):
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(-2.0, 2.0, size=(1, dims[0]))
        params = _mlp_params(rng, dims)
        if _preactivations_clear_of_kink(x0, params):
            break
    else:
        pytest.fail("no kink-free sample found")
    err = ad.grad_check(_relu_mlp_loss, [x0, *params])
    assert err < 1e-3


UNARY_OPS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "exp": ad.exp,
    "sqrt": ad.sqrt,
    "log": ad.log,
    "scale": lambda x: ad.scale(x, -1.7),
    "clip_min": lambda x: ad.clip_min(x, 0.33),
    "transpose": ad.transpose,
    "reshape": lambda x: ad.reshape(x, (-1,)),
    "narrow": lambda x: ad.narrow(x, 0, 1, 2),
    "softmax": lambda x: ad.softmax(x, axis=1),
    "logsumexp": lambda x: ad.logsumexp(x, axis=1),
    "l2_normalize": lambda x: ad.l2_normalize(x, axis=1),
    "reduce_mean": lambda x: ad.reduce_mean(x, axis=0),
    "reduce_sum_keepdims": lambda x: ad.reduce_sum(x, axis=1, keepdims=True),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_ops_pass_grad_check(name):
    op = UNARY_OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    # Bounded away from 0 so log/sqrt stay in-domain and relu/clip_min
    # probes cannot cross their kinks.
    x0 = rng.uniform(0.6, 2.0, size=(4, 3))
    err = ad.grad_check(lambda x: ad.reduce_sum(ad.mul(op(x), op(x))), [x0])
    assert err < 1e-3


BINARY_OPS = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": ad.div,
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "mse": ad.mse,
    "frobenius_sq": ad.frobenius_sq,
    "concat": lambda a, b: ad.concat([a, b], axis=1),
}


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
def test_binary_ops_pass_grad_check(name):
    op = BINARY_OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    a0 = rng.uniform(0.5, 2.0, size=(4, 3))
    b0 = rng.uniform(0.5, 2.0, size=(4, 3))
    err = ad.grad_check(lambda a, b: ad.reduce_sum(ad.exp(ad.scale(op(a, b), 0.1))), [a0, b0])
    assert err < 1e-3


def test_broadcast_gradients_sum_over_expanded_axes():
    rng = np.random.default_rng(11)
    col = rng.normal(size=(5, 1))
    row = rng.normal(size=(1, 5))
    err = ad.grad_check(lambda a, b: ad.frobenius_sq(ad.mul(ad.add(a, b), b)), [col, row])
    assert err < 1e-3


def test_cosine_sim_grad_check():
    rng = np.random.default_rng(12)
    err = ad.grad_check(ad.cosine_sim, [rng.normal(size=6), rng.normal(size=6)])
    assert err < 1e-3


def test_backward_is_deterministic():
    def build():
        rng = np.random.default_rng(5)
        x = ad.Tensor(rng.normal(size=(8, 6)).astype(np.float32), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(6, 4)).astype(np.float32), requires_grad=True)
        h = ad.tanh(ad.matmul(x, w))
        loss = ad.add(ad.frobenius_sq(h), ad.reduce_sum(ad.l2_normalize(h, axis=1)))
        ad.backward(loss)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = build()
    gx2, gw2 = build()
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_gradients_accumulate_across_reuse():
    x = ad.Tensor([2.0], requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))  # x^2 + 3x
    ad.backward(ad.reduce_sum(y))
    np.testing.assert_allclose(x.grad, [7.0], atol=1e-6)


def test_non_scalar_loss_rejected():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.mul(x, x))


def test_non_finite_result_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.Tensor([-1.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.div(ad.Tensor([1.0]), ad.Tensor([0.0]))


def test_shape_mismatch_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_storage_is_float32_by_default():
    t = ad.Tensor([1, 2, 3])
    assert t.data.dtype == np.float32
    out = ad.add(t, ad.Tensor([1.0, 1.0, 1.0]))
    assert out.data.dtype == np.float32
