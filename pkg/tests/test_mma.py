import numpy as np
import pytest

from couplopt.mma import MMAError, MmaState, estimate_multipliers, kkt_residual, mma_update

N = 5
LO, HI = -10 * np.ones(N), 10 * np.ones(N)


def problem(x, constrained):
    f0, df0 = float(np.sum((x - 1) ** 2)), 2 * (x - 1)
    if constrained:
        return f0, df0, np.array([2.0 - x[0]]), -np.eye(N)[:1]
    return f0, df0, np.zeros(0), np.zeros((0, N))


def solve(constrained, iters=50, state=None, x=None):
    state = state or MmaState.create(LO, HI)
    x = np.zeros(N) if x is None else x
    xs = [x]
    for _ in range(iters):
        f0, df0, g, dg = problem(x, constrained)
        if kkt_residual(x, LO, HI, df0, g, dg, estimate_multipliers(x, LO, HI, df0, g, dg)) < 1e-6:
            break
        x = mma_update(state, x, f0, df0, g, dg)
        xs.append(x)
    return x, xs


def test_unconstrained_quadratic():
    x, xs = solve(False)
    assert len(xs) - 1 <= 30
    assert np.linalg.norm(x - 1) < 1e-6


def test_single_active_constraint():
    x, xs = solve(True)
    assert len(xs) - 1 <= 50
    assert x[0] == pytest.approx(2.0, abs=1e-6)
    assert np.allclose(x[1:], 1.0, atol=1e-6)
    _, df0, g, dg = problem(x, True)
    lam = estimate_multipliers(x, LO, HI, df0, g, dg)
    assert lam[0] == pytest.approx(2.0, abs=1e-5)
    assert kkt_residual(x, LO, HI, df0, g, dg, lam) < 1e-6


def test_iterates_stay_in_box_and_move_limit():
    _, xs = solve(True)
    span = HI - LO
    for a, b in zip(xs, xs[1:]):
        assert np.all(b >= LO) and np.all(b <= HI)
        assert np.all(np.abs(b - a) <= 0.1 * span + 1e-12)


def test_stationary_point_does_not_move():
    state = MmaState.create(LO, HI)
    x = np.ones(N)
    f0, df0, g, dg = problem(x, False)
    assert np.allclose(mma_update(state, x, f0, df0, g, dg), x, atol=1e-9)


def test_deterministic():
    a = solve(True)[1]
    b = solve(True)[1]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_state_round_trip_resumes_identically():
    full = solve(True, iters=8)[1]
    state = MmaState.create(LO, HI)
    x, xs = solve(True, iters=4, state=state)
    saved = {k: (None if v is None else np.array(v)) for k, v in state.to_dict().items()}
    fresh = MmaState.create(LO, HI)
    fresh.load_dict(saved)
    _, rest = solve(True, iters=4, state=fresh, x=x)
    assert all(np.array_equal(u, v) for u, v in zip(full, xs + rest[1:]))


def test_invalid_inputs():
    with pytest.raises(MMAError, match="box"):
        MmaState.create(np.ones(2), np.ones(2))
    state = MmaState.create(LO, HI)
    with pytest.raises(MMAError, match="non-finite"):
        mma_update(state, np.zeros(N), 1.0, np.full(N, np.nan), np.zeros(0), np.zeros((0, N)))


def test_kkt_residual_flags_violation():
    x = np.ones(N)
    _, df0, g, dg = problem(x, True)
    assert kkt_residual(x, LO, HI, df0, g, dg, np.zeros(1)) == pytest.approx(1.0)
