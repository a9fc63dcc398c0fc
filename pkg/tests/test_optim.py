import numpy as np
import pytest

from gradsense.optim import AdamState, LBFGSState, adam_step, lbfgs_step, parse_optimizer


def quadratic(c):
    def f(x):
        d = x - c
        return float(d @ d), 2 * d
    return f


def rosenbrock(x):
    a, b = x
    f = (1 - a) ** 2 + 100 * (b - a * a) ** 2
    g = np.array([-2 * (1 - a) - 400 * a * (b - a * a), 200 * (b - a * a)])
    return float(f), g


def run_lbfgs(obj, x, steps, state=None):
    state = state or LBFGSState()
    values = []
    for _ in range(steps):
        state, x, v = lbfgs_step(state, obj, x)
        values.append(v)
    return state, x, values


def test_quadratic_bowl():
    c = np.array([1.0, 2.0])
    _, x, _ = run_lbfgs(quadratic(c), np.zeros(2), 10)
    assert np.linalg.norm(x - c) < 1e-8


def test_rosenbrock():
    state, x, values = run_lbfgs(rosenbrock, np.array([-1.2, 1.0]), 200)
    assert rosenbrock(x)[0] < 1e-6
    # the same budget of steepest-descent steps gets nowhere near
    sd = LBFGSState(m=1)
    y = np.array([-1.2, 1.0])
    for _ in range(200):
        sd.reset()
        sd, y, _ = lbfgs_step(sd, rosenbrock, y)
    assert rosenbrock(y)[0] > 1e-3


def test_stationary_start():
    x0 = np.array([1.0, 2.0])
    state, x, v = lbfgs_step(LBFGSState(), quadratic(x0), x0.copy())
    assert np.array_equal(x, x0) and v == 0.0 and state.status == "stationary"


@pytest.mark.parametrize("seed", range(10))
def test_descent_and_quadratic_exactness(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 11))
    M = rng.normal(size=(n, n))
    A = M @ M.T + n * np.eye(n)
    b = rng.normal(size=n)

    def f(x):
        return float(0.5 * x @ A @ x - b @ x), A @ x - b

    state, x, values = run_lbfgs(f, np.zeros(n), 3 * n, LBFGSState(m=10))
    assert np.linalg.norm(A @ x - b) < 1e-9
    # non-increasing, up to the rounding resolution of f once at the optimum
    floor = 64 * np.finfo(float).eps
    assert all(v2 <= v1 + floor * abs(v1) for v1, v2 in zip(values, values[1:]))


def test_descent_exact_away_from_rounding_floor():
    _, _, values = run_lbfgs(rosenbrock, np.array([-1.2, 1.0]), 40)
    assert all(v2 <= v1 for v1, v2 in zip(values, values[1:]))


def test_history_bounded_and_curvature():
    state, _, _ = run_lbfgs(rosenbrock, np.array([-1.2, 1.0]), 50, LBFGSState(m=3))
    assert len(state.history) <= 3
    assert all(np.dot(s, y) > 0 for s, y, _ in state.history)


def test_nonfinite_rejected_and_reset():
    state = LBFGSState()
    state.history.append((np.ones(2), np.ones(2), 0.5))
    state, x, v = lbfgs_step(state, lambda x: (float("nan"), np.zeros(2)), np.zeros(2))
    assert state.status == "nonfinite" and not state.history and np.array_equal(x, np.zeros(2))


def test_failed_line_search_rejects():
    # a gradient that lies: the function increases along -g
    def liar(x):
        return float(np.sum(x)), -np.ones_like(x)

    state, x, _ = lbfgs_step(LBFGSState(max_evals=5), liar, np.zeros(3))
    assert state.status == "rejected" and np.array_equal(x, np.zeros(3))


def test_scale_invariance_bitwise():
    # scaling by a power of two leaves every accepted iterate unchanged
    c = np.array([0.3, -1.1, 2.0])

    def f(x):
        v, g = rosenbrock(x[:2])
        return v + float(np.sum((x - c) ** 2)), np.append(g, 0.0) + 2 * (x - c)

    def f8(x):
        v, g = f(x)
        return v / 8, g / 8

    _, xa, va = run_lbfgs(f, np.zeros(3), 30)
    _, xb, vb = run_lbfgs(f8, np.zeros(3), 30)
    assert np.array_equal(xa, xb)
    assert np.array_equal(np.array(va) / 8, vb)


def test_adam_zero_gradient():
    _, x = adam_step(AdamState(), np.zeros(3), np.ones(3))
    assert np.array_equal(x, np.ones(3))


def test_adam_first_step_is_lr_times_sign():
    g = np.array([3.0, -0.2, 1e-3])
    _, x = adam_step(AdamState(lr=0.1), g, np.zeros(3))
    assert np.allclose(x, -0.1 * np.sign(g), rtol=1e-4)


def test_adam_deterministic_and_state():
    def run():
        s, x = AdamState(), np.array([1.0, -1.0])
        for _ in range(20):
            s, x = adam_step(s, 2 * x, x)
        return s, x

    (s1, x1), (_, x2) = run(), run()
    assert np.array_equal(x1, x2) and s1.t == 20
    with pytest.raises(FloatingPointError):
        adam_step(AdamState(), np.array([np.inf]), np.zeros(1))


def test_parse_optimizer():
    assert str(parse_optimizer("lbfgs")) == "lbfgs"
    assert parse_optimizer("lbfgs:m=5,max_evals=7").new_state().m == 5
    assert parse_optimizer("adam:lr=0.05").lr == 0.05
    for bad in ("sgd", "adam:beta=1", "lbfgs:m"):
        with pytest.raises(ValueError):
            parse_optimizer(bad)
