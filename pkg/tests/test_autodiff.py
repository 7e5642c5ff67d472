import numpy as np
import pytest

from amrod import autodiff as ad


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_op(build, x, h=1e-6, tol=1e-5):
    """build(tensor) -> tensor; compares d sum(w * out) / dx against central differences."""
    wrng = np.random.default_rng(99)
    probe = None

    def scalar(xv, with_grad=False):
        nonlocal probe
        g = ad.Graph()
        t = g.param("x", xv)
        out = build(t)
        if probe is None:
            probe = wrng.normal(size=out.shape)
        loss = ad.sum(ad.mul(out, probe))
        if with_grad:
            return g.backward(loss)["x"]
        return loss.item()

    analytic = scalar(x, True)
    numeric = fd_grad(scalar, x, h)
    assert np.max(np.abs(analytic - numeric)) < tol


UNARY = {
    "relu": ad.relu,
    "exp": ad.exp,
    "log": lambda t: ad.log(ad.add(ad.square(t), 1.0)),
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "square": ad.square,
    "sqrt": lambda t: ad.sqrt(ad.add(ad.square(t), 0.5)),
    "abs": ad.abs,
    "smooth_l1": ad.smooth_l1,
    "softmax": ad.softmax,
    "log_softmax": ad.log_softmax,
    "sum_axis0": lambda t: ad.sum(t, axis=0),
    "mean_axis1": lambda t: ad.mean(t, axis=1, keepdims=True),
    "transpose": ad.transpose,
    "reshape": lambda t: ad.reshape(t, (-1,)),
    "take": lambda t: ad.take(t, np.array([[0, 3], [5, 5]])),
    "rows": lambda t: ad.rows(t, np.array([2, 0])),
    "l2_normalize": ad.l2_normalize,
    "clamp": lambda t: ad.clamp(t, -0.5, 0.5),
    "concat": lambda t: ad.concat([t, ad.square(t)], axis=0),
    "neg": ad.neg,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(10))
def test_unary_ops_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    # keep kinks of relu/abs/clamp/smooth_l1 away from the probe points
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.3, x)
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, 1.3, x)
    check_op(UNARY[name], x)


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0)),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "cosine": ad.cosine_similarity,
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", range(10))
def test_binary_ops_match_finite_differences_on_both_sides(name, seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    op = BINARY[name]
    check_op(lambda t: op(t, t.graph.constant(b0)), a0)
    check_op(lambda t: op(t.graph.constant(a0), t), b0)


def test_broadcast_bias_gradient_sums_rows():
    g = ad.Graph()
    x = g.constant(np.ones((4, 3)))
    b = g.param("b", np.zeros(3))
    grads = g.backward(ad.sum(ad.add(x, b)))
    np.testing.assert_array_equal(grads["b"], [4.0, 4.0, 4.0])


def test_matmul_identity():
    g = ad.Graph()
    out = ad.matmul(g.constant([[1.0, 0.0], [0.0, 1.0]]), g.constant([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_softmax_symmetric():
    g = ad.Graph()
    np.testing.assert_array_equal(ad.softmax(g.constant([0.0, 0.0])).data, [0.5, 0.5])


def test_log_softmax_gradient_at_1_2():
    z0 = np.array([1.0, 2.0])
    w = np.array([0.3, -1.1])

    def f(z):
        g = ad.Graph()
        t = g.param("z", z)
        return g, t, ad.sum(ad.mul(ad.log(ad.softmax(t)), w))

    g, _, loss = f(z0)
    analytic = g.backward(loss)["z"]
    numeric = fd_grad(lambda z: f(z)[2].item(), z0, 1e-6)
    assert np.max(np.abs(analytic - numeric)) < 1e-6


def test_backward_sum_gives_ones():
    g = ad.Graph()
    p = g.param("p", np.zeros(3))
    np.testing.assert_array_equal(g.backward(ad.sum(p))["p"], [1.0, 1.0, 1.0])


def test_backward_square_hand_derivative():
    g = ad.Graph()
    p = g.param("p", [1.0, 2.0])
    np.testing.assert_array_equal(g.backward(ad.sum(p * p))["p"], [2.0, 4.0])


def test_unreachable_parameter_gets_zero_gradient():
    g = ad.Graph()
    p = g.param("p", [1.0, 2.0])
    q = g.param("q", [[5.0, 6.0]])
    grads = g.backward(ad.sum(p))
    assert grads["q"].shape == (1, 2)
    np.testing.assert_array_equal(grads["q"], 0.0)


def test_second_backward_is_rejected():
    g = ad.Graph()
    p = g.param("p", [1.0])
    loss = ad.sum(p * p)
    g.backward(loss)
    with pytest.raises(ad.GraphError):
        g.backward(loss)
    with pytest.raises(ad.GraphError):
        ad.add(p, 1.0)


def test_non_scalar_loss_rejected():
    g = ad.Graph()
    p = g.param("p", [1.0, 2.0])
    with pytest.raises(ad.GraphError):
        g.backward(p * 2.0)


def test_shape_error_names_op_and_shapes():
    g = ad.Graph()
    with pytest.raises(ad.ShapeError) as e:
        ad.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3))))
    msg = str(e.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_duplicate_param_name_rejected():
    g = ad.Graph()
    g.param("p", [1.0])
    with pytest.raises(ad.GraphError):
        g.param("p", [2.0])


def test_clamp_zero_gradient_outside_range():
    g = ad.Graph()
    p = g.param("p", [-2.0, 0.1, 3.0])
    np.testing.assert_array_equal(g.backward(ad.sum(ad.clamp(p, -1.0, 1.0)))["p"], [0.0, 1.0, 0.0])


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 5))

    def grads():
        g = ad.Graph()
        t = g.param("x", x)
        return g.backward(ad.sum(ad.log_softmax(ad.matmul(t, ad.transpose(t)))))["x"]

    assert grads().tobytes() == grads().tobytes()


def test_grad_of_intermediate_matches_shape():
    g = ad.Graph()
    p = g.param("p", np.ones((2, 3)))
    h = ad.relu(p)
    assert g.grad_of(h) is None
    g.backward(ad.sum(h))
    assert g.grad_of(h).shape == h.shape
