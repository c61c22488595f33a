import numpy as np
import pytest

from metrosynth import autodiff as ad
from _compositions import check_composition, random_composition


def grad_of(fn, x):
    v = ad.variable(x)
    return ad.backward(fn(v), [v])[v]


def test_tanh_at_origin():
    x = ad.variable(0.0)
    y = ad.tanh(x)
    assert y.value == 0.0
    np.testing.assert_allclose(ad.backward(y, [x])[x], 1.0)


def test_square_derivative():
    np.testing.assert_allclose(grad_of(lambda x: x * x, 3.0), 6.0)


def test_identity_matmul():
    v = np.array([0.3, -1.2])
    np.testing.assert_array_equal((ad.constant(np.eye(2)) @ ad.constant(v)).value, v)


def test_matmul_gradients_match_numpy_rules():
    rng = np.random.default_rng(0)
    A, B = ad.variable(rng.normal(size=(3, 4))), ad.variable(rng.normal(size=(4, 2)))
    W = rng.normal(size=(3, 2))
    g = ad.backward(ad.sum((A @ B) * W), [A, B])
    np.testing.assert_allclose(g[A], W @ B.value.T)
    np.testing.assert_allclose(g[B], A.value.T @ W)


def test_stop_gradient_examples():
    np.testing.assert_allclose(grad_of(lambda x: ad.stop_gradient(x) * x, 2.0), 2.0)
    assert ad.stop_gradient(ad.constant(5.0)).value == 5.0
    np.testing.assert_allclose(grad_of(lambda x: ad.stop_gradient(x * x), 1.7), 0.0)


def test_backward_examples():
    np.testing.assert_allclose(grad_of(lambda v: ad.sum(ad.square(v)), [1.0, 2.0]), [2.0, 4.0])
    x, z = ad.variable(1.0), ad.variable([1.0, 2.0])
    out = ad.backward(x * 3.0, [x, z])
    np.testing.assert_array_equal(out[z], np.zeros(2))
    for x0 in (-3.0, 0.0, 2.5):
        np.testing.assert_allclose(grad_of(lambda x: ad.log(ad.exp(x)), x0), 1.0)


def test_gradient_map_has_every_variable_once():
    a, b = ad.variable(np.ones((2, 3))), ad.variable(2.0)
    out = ad.backward(ad.sum(a) * b, [a, b])
    assert list(out) == [a, b]
    assert out[a].shape == (2, 3) and out[b].shape == ()


def test_errors():
    with pytest.raises(ValueError, match="do not broadcast"):
        ad.add(ad.constant(np.ones(3)), ad.constant(np.ones(4)))
    with pytest.raises(ValueError, match="non-positive"):
        ad.log(ad.constant([1.0, 0.0]))
    with pytest.raises(ValueError, match="non-positive"):
        ad.sqrt(ad.constant(-1.0))
    with pytest.raises(ValueError, match="scalar"):
        x = ad.variable([1.0, 2.0])
        ad.backward(x * 2.0, [x])
    with pytest.raises(ValueError, match="rank"):
        ad.constant(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError, match="inner dimensions"):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_scalar_broadcast_unbroadcasts_adjoint():
    s = ad.variable(2.0)
    m = ad.variable(np.ones((2, 3)))
    g = ad.backward(ad.sum(s * m), [s, m])
    np.testing.assert_allclose(g[s], 6.0)
    np.testing.assert_allclose(g[m], np.full((2, 3), 2.0))


@pytest.mark.parametrize("seed", range(0, 100, 7))
def test_random_compositions_match_finite_differences(seed):
    worst, checked = check_composition(seed)
    assert checked > 0
    assert worst < 1e-5


def test_forward_identical_without_recording():
    for seed in range(10):
        f, inputs = random_composition(seed)
        with_grad = f([ad.variable(x) for x in inputs]).value
        with ad.no_grad():
            without = f([ad.variable(x) for x in inputs]).value
        assert with_grad.tobytes() == without.tobytes()


def test_stop_gradient_equals_fresh_constant():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=3)
    x = ad.variable(x0)
    u = ad.tanh(x) * 2.0
    g1 = ad.backward(ad.sum(ad.stop_gradient(u) * ad.sin(x) + u), [x])[x]
    x2 = ad.variable(x0)
    u2 = ad.tanh(x2) * 2.0
    g2 = ad.backward(ad.sum(ad.constant(u2.value) * ad.sin(x2) + u2), [x2])[x2]
    np.testing.assert_array_equal(g1, g2)


def test_backward_is_deterministic():
    f, inputs = random_composition(11)
    runs = []
    for _ in range(2):
        xs = [ad.variable(x) for x in inputs]
        g = ad.backward(f(xs), xs)
        runs.append(np.concatenate([g[v].ravel() for v in xs]))
    assert runs[0].tobytes() == runs[1].tobytes()


def test_special_ops_against_finite_differences():
    rng = np.random.default_rng(5)
    h = 1e-6
    cases = {
        "psd_sqrt": (lambda a: ad.sum(ad.psd_sqrt(a, 2) * np.array([0.3, -1.0, 0.7, 2.0])), np.array([2.0, 0.4, 0.4, 1.0])),
        "poisson_pmf": (lambda m: ad.sum(ad.poisson_pmf(np.array([0, 1, 3]), m)), np.array([0.7, 1.3, 2.2])),
        "log_softmax": (lambda z: ad.sum(ad.log_softmax(ad.reshape(z, (1, 3)), axis=1) * np.array([1.0, -2.0, 0.5])), rng.normal(size=3)),
        "gather": (lambda a: ad.sum(ad.gather(ad.reshape(a, (1, 4)), np.array([[0, 0, 3]])) * np.array([1.0, 2.0, -1.0])), rng.normal(size=4)),
    }
    for name, (fn, x0) in cases.items():
        g = grad_of(fn, x0)
        fd = np.zeros_like(x0)
        for i in range(x0.size):
            e = np.zeros_like(x0)
            e[i] = h
            fd[i] = (fn(ad.constant(x0 + e)).value - fn(ad.constant(x0 - e)).value) / (2 * h)
        if name == "psd_sqrt":
            # input is a symmetric matrix; compare the symmetrised adjoint
            fd = 0.5 * (fd + fd.reshape(2, 2).T.ravel())
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9, err_msg=name)


def test_psd_sqrt_clamps_negative_eigenvalues():
    s = ad.psd_sqrt(ad.constant(np.array([1.0, 0.0, 0.0, -1e-12])), 2)
    np.testing.assert_allclose(s.value, [1.0, 0.0, 0.0, 0.0])


def test_glorot_normal_init():
    rng = np.random.default_rng(0)
    var = np.mean([ad.glorot_normal_init(64, 64, rng).var() for _ in range(10)])
    assert abs(var - 1 / 64) < 0.2 / 64
    ones = [ad.glorot_normal_init(1, 1, np.random.default_rng(s))[0, 0] for s in range(4000)]
    assert abs(np.var(ones) - 1.0) < 0.1
    a = ad.glorot_normal_init(5, 3, np.random.default_rng(9))
    b = ad.glorot_normal_init(5, 3, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        ad.glorot_normal_init(0, 3, rng)
