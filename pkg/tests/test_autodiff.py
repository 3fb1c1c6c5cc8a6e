import numpy as np
import pytest

from augshield import autodiff as ad
from augshield.autodiff import SecondOrderUnsupported, Tape, TapeError, Tensor


def test_constant_loss_has_zero_gradient():
    theta = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    with Tape():
        loss = ad.sum_(Tensor(np.array([3.0, 4.0])))
        (g,) = ad.grad(loss, [theta])
    assert np.array_equal(g.data, np.zeros(2))


def test_square_gives_twice_theta():
    theta = Tensor(np.array(1.7), requires_grad=True)
    with Tape():
        (g,) = ad.grad(theta * theta, [theta])
    assert g.item() == pytest.approx(3.4, abs=1e-15)


def test_second_grad_on_consumed_tape_is_rejected():
    theta = Tensor(np.array(2.0), requires_grad=True)
    with Tape():
        loss = theta * theta
        ad.grad(loss, [theta])
        with pytest.raises(TapeError):
            ad.grad(loss, [theta])


def test_mixing_tapes_is_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = x * 2.0
    with Tape():
        with pytest.raises(TapeError):
            y * x


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with ad.no_grad():
            y = ad.sum_(x * x)
    assert len(tape) == 0 and not y.requires_grad


def test_reverse_over_reverse_cubic():
    # d/dx (d/dx x^3) = 6x
    x = Tensor(np.array(1.3), requires_grad=True)
    with Tape():
        y = x * x * x
        (dy,) = ad.grad(y, [x], create_graph=True)
        assert dy.item() == pytest.approx(3 * 1.3**2)
        (d2y,) = ad.grad(dy, [x])
    assert d2y.item() == pytest.approx(6 * 1.3, rel=1e-14)


def test_diamond_accumulates_and_visits_each_record_once():
    x = Tensor(np.array([0.5, -1.5]), requires_grad=True)
    with Tape() as tape:
        a = x * x
        b = x * 3.0
        y = ad.sum_(a + b)
        visits = []
        for i, rec in enumerate(tape.records):
            rec.backward = (lambda f, i: lambda g: (visits.append(i), f(g))[1])(rec.backward, i)
        (g,) = ad.grad(y, [x])
    assert visits == sorted(visits, reverse=True)
    assert len(visits) == len(set(visits))
    assert np.allclose(g.data, 2 * x.data + 3.0, rtol=0, atol=1e-15)


def test_broadcast_gradients_reduce_to_input_shape(rng):
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    with Tape():
        ga, gb = ad.grad(ad.sum_(a * b), [a, b])
    assert np.allclose(ga.data, np.broadcast_to(b.data, (4, 3)))
    assert np.allclose(gb.data, a.data.sum(axis=0))


def test_first_order_op_refuses_second_order():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape():
        y = ad.first_order_op("double", 2 * x.data, (x,), lambda g: (2 * g,))
        loss = ad.sum_(ad.mul(y, y))
        with pytest.raises(SecondOrderUnsupported):
            ad.grad(loss, [x], create_graph=True)


def test_fused_xent_is_stable_for_huge_logits():
    z = Tensor(np.array([[1e4, -1e4, 0.0]]), requires_grad=True)
    y = Tensor(np.array([[0.0, 1.0, 0.0]]))
    with Tape():
        rows = ad.softmax_xent_rows(z, y)
        (g,) = ad.grad(ad.sum_(rows), [z])
    assert rows.data[0] == pytest.approx(2e4)
    assert np.all(np.isfinite(g.data))
    assert np.allclose(g.data, [[1.0, -1.0, 0.0]])


def test_grad_without_dependence_returns_zeros():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        gx, gy = ad.grad(ad.sum_(x), [x, y])
    assert np.array_equal(gx.data, np.ones((2, 2)))
    assert np.array_equal(gy.data, np.zeros(3))
