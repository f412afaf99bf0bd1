import math

import numpy as np
import pytest

from inrlab.diffcore import NonFiniteError, Parameter
from inrlab.optim import Adam


def scalar(value=1.0, group="net"):
    return Parameter("w", np.array([[value]]), group=group)


def test_single_step_hand_case():
    p = scalar(0.0)
    p.grads[...] = 1.0
    Adam([p], lr=1e-3).step()
    assert abs(p.values[0, 0] - (-1e-3 / (1 + 1e-8))) < 1e-12


def test_two_steps_against_scalar_recursion():
    grads = [0.7, -0.2]
    p = scalar(0.5)
    opt = Adam([p], lr=1e-2)
    w, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        p.grads[...] = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 1e-2 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(p.values[0, 0] - w) < 1e-12


def test_zero_gradient_leaves_values():
    p = Parameter("w", np.random.default_rng(0).normal(size=(3, 4)))
    before = p.values.copy()
    opt = Adam([p])
    for _ in range(3):
        opt.step()
    np.testing.assert_array_equal(p.values, before)


def test_grads_untouched():
    p = scalar()
    p.grads[...] = 0.3
    Adam([p]).step()
    assert p.grads[0, 0] == 0.3


@pytest.mark.parametrize("g", [2.5, -0.4])
def test_moves_against_gradient(g):
    p = scalar(1.0)
    opt = Adam([p])
    trail = [p.values[0, 0]]
    for _ in range(2):
        p.grads[...] = g
        opt.step()
        trail.append(p.values[0, 0])
    steps = np.diff(trail)
    assert np.all(np.sign(steps) == -np.sign(g))


def test_quadratic_scale():
    p = scalar(1.0)
    opt = Adam([p], lr=1e-3)
    for _ in range(5000):
        p.grads[...] = 2 * p.values
        opt.step()
    assert abs(p.values[0, 0]) < 1e-2


def test_group_learning_rates():
    a, b = scalar(0.0, "table"), scalar(0.0, "net")
    a.grads[...] = b.grads[...] = 1.0
    Adam([a, b], lr=1e-3, group_lrs={"table": 1e-2}).step()
    assert a.values[0, 0] == pytest.approx(-1e-2, rel=1e-7)
    assert b.values[0, 0] == pytest.approx(-1e-3, rel=1e-7)


def test_cosine_decays_to_zero():
    p = scalar()
    opt = Adam([p], lr=1e-2, cosine=True, total_steps=10)
    assert opt.lr_for(p) == 1e-2
    opt.step_count = 5
    assert opt.lr_for(p) == pytest.approx(5e-3)
    opt.step_count = 10
    assert opt.lr_for(p) == pytest.approx(0.0, abs=1e-18)


def test_nan_names_parameter():
    p = Parameter("trunk.0.weight", np.ones((2, 2)))
    p.grads[1, 1] = np.nan
    with pytest.raises(NonFiniteError, match="trunk.0.weight"):
        Adam([p]).step()


def test_deterministic_trajectories():
    def run():
        rng = np.random.default_rng(3)
        p = Parameter("w", rng.normal(size=(4, 3)))
        opt = Adam([p], lr=1e-2)
        for _ in range(50):
            p.grads[...] = np.sin(p.values) + rng.normal(size=p.shape)
            opt.step()
        return p.values.tobytes()

    assert run() == run()
