import numpy as np
import pytest

from noisegauge import tape
from noisegauge.tape import Var

from conftest import max_rel_error


def _fd_grad(f, x, h=1e-6):
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        xp, xm = xf.copy(), xf.copy()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return out


@pytest.mark.parametrize("op_name", ["add", "sub", "mul", "div", "exp", "sigmoid",
                                     "silu", "matmul", "sum", "concat", "gather"])
def test_op_gradients_match_fd(op_name):
    rng = np.random.default_rng(hash(op_name) % 2**31)
    x = rng.standard_normal((3, 4)) + 2.0  # shifted away from div singularities
    y = rng.standard_normal((3, 4)) + 2.0
    m = rng.standard_normal((4, 2))

    def build(xa):
        vx = tape.leaf(xa)
        vy = Var(y)
        if op_name == "add":
            out = vx + vy
        elif op_name == "sub":
            out = vx - vy
        elif op_name == "mul":
            out = vx * vy
        elif op_name == "div":
            out = vx / vy
        elif op_name == "exp":
            out = tape.exp(vx * 0.3)
        elif op_name == "sigmoid":
            out = tape.sigmoid(vx)
        elif op_name == "silu":
            out = tape.silu(vx)
        elif op_name == "matmul":
            out = tape.matmul(vx, Var(m))
        elif op_name == "sum":
            out = tape.vsum(vx, axis=1, keepdims=True) * 0.7
        elif op_name == "concat":
            out = tape.concat([vx, vy], axis=1)
        elif op_name == "gather":
            out = tape.gather_rows(vx, np.array([0, 2, 2, 1]))
        return tape.vsum(out * out), vx

    out, vx = build(x)
    (g,) = tape.grad(out, [vx], create_graph=False)
    fd = _fd_grad(lambda xa: build(xa)[0].item(), x)
    assert max_rel_error(g.data, fd) < 1e-7


def test_zero_upstream_and_unused_leaf():
    x = tape.leaf(np.ones(3))
    y = tape.leaf(np.ones(3))
    out = tape.vsum(x * x)
    gx, gy = tape.grad(out, [x, y], create_graph=False)
    assert np.array_equal(gx.data, 2 * np.ones(3))
    assert np.array_equal(gy.data, np.zeros(3))


def test_broadcast_bias_gradient():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 3))
    b = tape.leaf(rng.standard_normal(3))
    out = tape.vsum(tape.silu(Var(x) + b))
    (g,) = tape.grad(out, [b], create_graph=False)
    fd = _fd_grad(lambda bb: float(np.sum((lambda z: z / (1 + np.exp(-z)))(x + bb))),
                  b.data.copy())
    assert max_rel_error(g.data, fd) < 1e-7


def test_second_order_hvp_matches_fd_of_gradient():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((4, 3))
    x = rng.standard_normal((6, 4))

    def f(leaves):
        h = tape.silu(tape.matmul(Var(x), leaves["W"]))
        return tape.vsum(h * h)

    v = {"W": rng.standard_normal(W.shape)}
    hv = tape.hvp(f, {"W": W}, v)

    def grad_at(Wv):
        lv = tape.leaf(Wv)
        h = tape.silu(tape.matmul(Var(x), lv))
        (g,) = tape.grad(tape.vsum(h * h), [lv], create_graph=False)
        return g.data

    eps = 1e-6
    fd = (grad_at(W + eps * v["W"]) - grad_at(W - eps * v["W"])) / (2 * eps)
    assert max_rel_error(hv["W"], fd) < 1e-7


def test_grad_of_grad_through_sgd_step():
    # d/da of f(x - alpha * f'(x; a); a) must include the second-order path
    a = tape.leaf(np.array(1.5))
    x0 = Var(np.array(0.7))
    alpha = 0.1

    def loss(x, av):
        return av * x * x  # f = a x^2, f' = 2 a x

    l0 = loss(x0, a)
    # gradient w.r.t. x0 as a graph node
    x_leaf = tape.leaf(x0.data)
    l0 = loss(x_leaf, a)
    (gx,) = tape.grad(l0, [x_leaf])
    x1 = x_leaf - alpha * gx
    l1 = loss(x1, a)
    (ga,) = tape.grad(l1, [a], create_graph=False)
    # analytic: x1 = x0 (1 - 2 alpha a); l1 = a x0^2 (1-2 alpha a)^2
    # dl1/da = x0^2 (1-2aα)^2 + a x0^2 * 2(1-2aα)(-2α)
    x0v, av = 0.7, 1.5
    expected = x0v**2 * (1 - 2 * alpha * av) ** 2 \
        + av * x0v**2 * 2 * (1 - 2 * alpha * av) * (-2 * alpha)
    assert abs(ga.item() - expected) < 1e-12


def test_deep_graph_no_recursion_limit():
    x = tape.leaf(np.array(1.0))
    y = x
    for _ in range(5000):
        y = y * 1.0001
    (g,) = tape.grad(tape.vsum(y), [x], create_graph=False)
    assert np.isfinite(g.data)


def test_scatter_gather_roundtrip_gradient():
    rng = np.random.default_rng(2)
    table = tape.leaf(rng.standard_normal((6, 3)))
    idx = np.array([5, 0, 5, 2])
    rows = tape.gather_rows(table, idx)
    out = tape.vsum(rows * rows)
    (g,) = tape.grad(out, [table], create_graph=False)
    expected = np.zeros((6, 3))
    np.add.at(expected, idx, 2 * table.data[idx])
    assert np.allclose(g.data, expected, rtol=0, atol=0)
