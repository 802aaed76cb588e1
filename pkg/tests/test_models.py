import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gatelab.linalg import spectral_norm
from gatelab.models import (
    DivergenceError, ModelKind, Params, forward, forward_batch, init_params, jacobian_product,
    jacobian_stack, readout, sigmoid, step_jacobian,
)

from conftest import ALL_KINDS, kind_id


def _fd_step_jacobian(kind, p, x_prev, u, h=1e-6):
    def step(x):
        return forward(kind, p, u[None], x).states[1]
    n = len(x_prev)
    out = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        out[:, i] = (step(x_prev + e) - step(x_prev - e)) / (2 * h)
    return out


def test_kind_validation():
    with pytest.raises(ValueError):
        ModelKind("lstm")
    with pytest.raises(ValueError):
        ModelKind.leaky(1.5)
    assert ModelKind.scalar_gate().gated and not ModelKind.leaky(0.3).gated


def test_sigmoid_stable_at_extremes():
    vals = sigmoid(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_allclose(vals, [0.0, 0.5, 1.0], atol=1e-300)


@pytest.mark.parametrize("kind", ALL_KINDS, ids=kind_id)
def test_init_shapes_and_norm(kind):
    p = init_params(kind, 8, 2, 3, seed=1)
    assert p.w_rec.shape == (8, 8) and p.w_in.shape == (8, 2) and p.w_out.shape == (3, 8)
    assert spectral_norm(p.w_rec) == pytest.approx(0.9, rel=1e-12)
    if kind.name == "scalar_gate":
        assert p.w_rec_gate.shape == (1, 8) and p.w_in_gate.shape == (1, 2)
    elif kind.name == "multi_gate":
        assert p.w_rec_gate.shape == (8, 8)
    else:
        assert p.w_rec_gate is None


def test_init_is_seeded():
    a = init_params(ModelKind.multi_gate(), 5, 1, 1, seed=3)
    b = init_params(ModelKind.multi_gate(), 5, 1, 1, seed=3)
    np.testing.assert_array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), init_params(ModelKind.multi_gate(), 5, 1, 1, seed=4).flat())


def test_plain_one_step_by_hand():
    p = Params(np.array([[0.5, 0.0], [0.0, -0.5]]), np.array([[1.0], [2.0]]), np.eye(2)[:1])
    traj = forward(ModelKind.plain(), p, np.array([[0.3]]), x0=np.array([1.0, 1.0]))
    np.testing.assert_allclose(traj.states[1], np.tanh([0.5 + 0.3, -0.5 + 0.6]), rtol=1e-15)


def test_leaky_alpha_zero_freezes_state():
    p = init_params(ModelKind.plain(), 3, 1, 1, seed=0)
    traj = forward(ModelKind.leaky(0.0), p, np.ones((5, 1)), x0=np.array([0.1, -0.2, 0.3]))
    np.testing.assert_array_equal(traj.states[-1], [0.1, -0.2, 0.3])


def test_gates_fall_back_when_gate_arrays_ignored():
    base = init_params(ModelKind.scalar_gate(), 4, 1, 1, seed=2)
    plain = Params(base.w_rec, base.w_in, base.w_out, activation="tanh")
    u = np.linspace(-1, 1, 6)[:, None]
    a = forward(ModelKind.plain(), base, u).states
    b = forward(ModelKind.plain(), plain, u).states
    np.testing.assert_array_equal(a, b)


def test_identity_activation_linear_model():
    kind = ModelKind.leaky(0.5)
    p = init_params(kind, 3, 1, 1, seed=5, activation="identity")
    u = np.random.default_rng(0).standard_normal((4, 1))
    x = np.zeros(3)
    for t in range(4):
        x = x + 0.5 * (p.w_rec @ x + p.w_in @ u[t] - x)
    np.testing.assert_allclose(forward(kind, p, u).states[-1], x, rtol=1e-14)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_step():
    p = Params(np.eye(2) * 10.0, np.ones((2, 1)), np.ones((1, 2)), activation="identity")
    u = np.full((400, 1), 1.0)
    with pytest.raises(DivergenceError) as info:
        forward(ModelKind.plain(), p, u)
    assert info.value.step > 1


def test_batch_matches_single(rng):
    kind = ModelKind.multi_gate()
    p = init_params(kind, 5, 2, 1, seed=9)
    u = rng.standard_normal((3, 7, 2))
    traj = forward_batch(kind, p, u)
    for i in range(3):
        np.testing.assert_allclose(traj.states[i], forward(kind, p, u[i]).states, rtol=1e-13, atol=1e-15)
    assert readout(p, traj).shape == (3, 7, 1)


def test_shape_errors():
    kind = ModelKind.scalar_gate()
    p = init_params(kind, 4, 1, 1)
    with pytest.raises(ValueError):
        forward(kind, p, np.zeros((3, 2)))
    bad = p.copy()
    bad.w_rec_gate = np.zeros((4, 4))
    with pytest.raises(ValueError):
        forward(kind, bad, np.zeros((3, 1)))


def test_params_roundtrip():
    p = init_params(ModelKind.multi_gate(), 3, 2, 1, seed=1)
    q = Params.from_json(p.to_json())
    np.testing.assert_array_equal(p.flat(), q.flat())
    assert q.names() == p.names()


@pytest.mark.parametrize("kind", ALL_KINDS, ids=kind_id)
def test_step_jacobian_matches_fd(kind, rng):
    p = init_params(kind, 4, 1, 1, seed=11)
    u = rng.uniform(-1, 1, (8, 1))
    traj = forward(kind, p, u)
    for j in (1, 4, 8):
        dec = step_jacobian(kind, p, traj, j)
        fd = _fd_step_jacobian(kind, p, traj.states[j - 1], u[j - 1])
        assert np.max(np.abs(dec.full - fd)) < 1e-8


@pytest.mark.parametrize("kind", ALL_KINDS, ids=kind_id)
def test_decomposition_sums_and_dominant_form(kind, rng):
    p = init_params(kind, 4, 1, 1, seed=12)
    traj = forward(kind, p, rng.uniform(-1, 1, (6, 1)))
    for j in range(1, 7):
        dec = step_jacobian(kind, p, traj, j)
        np.testing.assert_allclose(dec.dominant + dec.correction, dec.full, atol=1e-15)
        g = traj.gates[j - 1]
        dphi = 1 - np.tanh(traj.preacts[j - 1]) ** 2
        expected = (g * dphi)[:, None] * p.w_rec + np.diag(1 - g * np.ones(4))
        np.testing.assert_allclose(dec.dominant, expected, atol=1e-15)
        if not kind.gated:
            assert not dec.correction.any()


def test_step_index_bounds():
    kind = ModelKind.plain()
    p = init_params(kind, 3, 1, 1)
    traj = forward(kind, p, np.zeros((4, 1)))
    with pytest.raises(IndexError):
        step_jacobian(kind, p, traj, 0)
    with pytest.raises(IndexError):
        step_jacobian(kind, p, traj, 5)


def test_jacobian_product_order_and_chain_rule(rng):
    kind = ModelKind.scalar_gate()
    p = init_params(kind, 4, 1, 1, seed=4)
    u = rng.uniform(-1, 1, (6, 1))
    traj = forward(kind, p, u)
    stack = jacobian_stack(kind, p, traj)
    prod = jacobian_product(stack, 1, 5).todense()
    manual = stack.full[4] @ stack.full[3] @ stack.full[2] @ stack.full[1]
    np.testing.assert_allclose(prod, manual, rtol=1e-13)
    # d x_5 / d x_1 by finite differences through four steps
    h = 1e-6
    fd = np.empty((4, 4))
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        up = forward(kind, p, u[1:5], traj.states[1] + e).states[-1]
        dn = forward(kind, p, u[1:5], traj.states[1] - e).states[-1]
        fd[:, i] = (up - dn) / (2 * h)
    np.testing.assert_allclose(prod, fd, atol=1e-8)
    assert np.array_equal(jacobian_product(stack, 3, 3).todense(), np.eye(4))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(ALL_KINDS))
def test_decomposition_identity_property(seed, kind):
    gen = np.random.default_rng(seed)
    p = init_params(kind, 3, 1, 1, seed=seed)
    traj = forward(kind, p, gen.uniform(-2, 2, (5, 1)))
    dec = jacobian_stack(kind, p, traj)
    np.testing.assert_allclose(dec.dominant + dec.correction, dec.full, atol=1e-14)


def test_leaky_one_equals_plain(rng):
    p = init_params(ModelKind.plain(), 4, 1, 1, seed=6)
    u = rng.uniform(-1, 1, (9, 1))
    x0 = rng.standard_normal(4)
    np.testing.assert_array_equal(forward(ModelKind.leaky(1.0), p, u, x0).states,
                                  forward(ModelKind.plain(), p, u, x0).states)


def test_zero_gate_weights_reduce_to_half_leak(rng):
    kind = ModelKind.scalar_gate()
    p = init_params(kind, 4, 1, 1, seed=6)
    p.w_rec_gate[:] = 0.0
    p.w_in_gate[:] = 0.0
    u = rng.uniform(-1, 1, (9, 1))
    traj = forward(kind, p, u)
    assert np.all(traj.gates == 0.5)
    np.testing.assert_allclose(traj.states, forward(ModelKind.leaky(0.5), p, u).states, rtol=1e-15, atol=1e-16)


def _sig(a):
    return 1.0 / (1.0 + np.exp(-a))


def test_multi_gate_against_scalar_loop():
    w = [[0.3, -0.7], [0.5, 0.2]]
    wi = [[1.0], [-0.5]]
    wg = [[0.4, 0.1], [-0.3, 0.8]]
    wig = [[0.2], [0.6]]
    p = Params(np.array(w), np.array(wi), np.eye(2), np.array(wg), np.array(wig), activation="identity")
    u = [0.5, -1.0, 0.25]
    x = [0.1, -0.2]
    traj = forward(ModelKind.multi_gate(), p, np.array(u)[:, None], np.array(x))
    for t in range(3):
        new = []
        for i in range(2):
            a = w[i][0] * x[0] + w[i][1] * x[1] + wi[i][0] * u[t]
            g = _sig(wg[i][0] * x[0] + wg[i][1] * x[1] + wig[i][0] * u[t])
            new.append(x[i] + g * (a - x[i]))
        x = new
        np.testing.assert_allclose(traj.states[t + 1], x, rtol=1e-14)


def test_readout_identity_zero_and_loop(rng):
    kind = ModelKind.plain()
    p = init_params(kind, 3, 1, 3, seed=0)
    traj = forward(kind, p, rng.uniform(-1, 1, (5, 1)))
    p.w_out = np.eye(3)
    np.testing.assert_array_equal(readout(p, traj), traj.states[1:])
    p.w_out = np.zeros((2, 3))
    assert not readout(p, traj).any()
    p.w_out = rng.standard_normal((2, 3))
    z = readout(p, traj)
    for t in range(5):
        for o in range(2):
            assert z[t, o] == pytest.approx(sum(p.w_out[o, i] * traj.states[t + 1, i] for i in range(3)), rel=1e-14)


def test_jacobian_special_cases(rng):
    p = init_params(ModelKind.plain(), 4, 1, 1, seed=2, activation="identity")
    u = rng.uniform(-1, 1, (3, 1))
    traj = forward(ModelKind.leaky(0.0), p, u)
    np.testing.assert_array_equal(step_jacobian(ModelKind.leaky(0.0), p, traj, 2).full, np.eye(4))
    traj = forward(ModelKind.plain(), p, u)
    np.testing.assert_allclose(step_jacobian(ModelKind.plain(), p, traj, 2).full, p.w_rec, rtol=1e-15)


@pytest.mark.parametrize("kind", [ModelKind.scalar_gate(), ModelKind.multi_gate()], ids=kind_id)
def test_gates_strictly_inside_unit_interval(kind, rng):
    p = init_params(kind, 6, 1, 1, seed=3)
    g = forward(kind, p, rng.uniform(-3, 3, (40, 1))).gates
    assert np.all((g > 0) & (g < 1))


def test_leaky_product_factorization_identity_activation():
    alpha = 0.3
    kind = ModelKind.leaky(alpha)
    p = init_params(kind, 5, 1, 1, seed=4, activation="identity")
    traj = forward(kind, p, np.zeros((7, 1)))
    prod = jacobian_product(jacobian_stack(kind, p, traj), 2, 7).todense()
    a = p.w_rec - np.eye(5)
    want = alpha ** 5 * np.linalg.matrix_power(np.eye(5) / alpha + a, 5)
    np.testing.assert_allclose(prod, want, rtol=0, atol=1e-12)


def test_lazy_product_action_matches_explicit(rng):
    kind = ModelKind.multi_gate()
    p = init_params(kind, 6, 1, 1, seed=5)
    stack = jacobian_stack(kind, p, forward(kind, p, rng.uniform(-1, 1, (10, 1))))
    lazy = jacobian_product(stack, 1, 9)
    dense = np.eye(6)
    for j in range(2, 10):
        dense = stack.full[j - 1] @ dense
    for _ in range(20):
        v = rng.standard_normal(6)
        assert np.linalg.norm(lazy.matvec(v) - dense @ v) <= 1e-10 * np.linalg.norm(dense @ v)
        assert np.linalg.norm(lazy.rmatvec(v) - dense.T @ v) <= 1e-10 * np.linalg.norm(dense.T @ v)
