import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feddeepgmm.data import ClientShard
from feddeepgmm.nn import IDENTITY, LEAKY_RELU, TANH, MlpSpec, ParamVector, forward, init_params
from feddeepgmm.objective import (
    EVERY_K, FROZEN, PREV_ROUND, TildeAnchor, client_grads, client_objective, federated_grads,
    federated_objective, minibatch_indices, minibatch_view, residuals,
)

from conftest import central_diff, central_diff4, per_coord_rel_err, random_params, random_shard

G_SPEC = MlpSpec((1, 4, 3, 1), LEAKY_RELU, 0.1)
F_SPEC = MlpSpec((2, 5, 1), LEAKY_RELU, 0.1)


def brute_force_u(theta, tau, tilde, shard):
    """Direct summation of the client objective, one sample at a time."""
    s1 = 0.0
    s2 = 0.0
    for k in range(shard.n):
        f = forward(tau, shard.z[k])
        s1 += f * (shard.y[k] - forward(theta, [shard.x[k]]))
        s2 += f * f * (shard.y[k] - forward(tilde, [shard.x[k]])) ** 2
    return s1 / shard.n - s2 / (4 * shard.n)


def instance(seed, n=20):
    r = np.random.default_rng(seed)
    return (random_params(G_SPEC, r), random_params(F_SPEC, r), random_params(G_SPEC, r), random_shard(r, n))


def scale_last_layer(tau, c):
    v = tau.values.copy()
    ws, bs, _ = tau.spec.layer_slices[-1]
    v[ws.start:bs.stop] *= c
    return tau.replace(v)


def test_residuals_zero_network():
    sh = ClientShard(0, np.array([0.5, 1.0]), np.array([1.0, -2.0]), np.zeros((2, 2)))
    th = ParamVector(np.zeros(G_SPEC.n_params), G_SPEC)
    assert residuals(th, sh).tolist() == [1.0, -2.0]


def test_residuals_interpolating():
    s = MlpSpec((1, 1), IDENTITY)
    th = ParamVector(np.array([2.0, 1.0]), s)
    x = np.array([0.0, 1.0, -3.0])
    sh = ClientShard(0, x, 2 * x + 1, np.zeros((3, 2)))
    assert np.array_equal(residuals(th, sh), np.zeros(3))


def test_residuals_direct(rng):
    th = random_params(G_SPEC, rng)
    sh = random_shard(rng, 5)
    want = [sh.y[k] - forward(th, [sh.x[k]]) for k in range(5)]
    assert np.allclose(residuals(th, sh), want, rtol=0, atol=1e-13)


def test_residuals_empty_shard():
    sh = ClientShard(0, np.zeros(0), np.zeros(0), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        residuals(ParamVector(np.zeros(G_SPEC.n_params), G_SPEC), sh)


def test_zero_instrument_function(rng):
    th, _, tl, sh = instance(1)
    tau = ParamVector(np.zeros(F_SPEC.n_params), F_SPEC)
    m = client_objective(th, tau, TildeAnchor(tl), sh)
    assert (m.psi, m.c_quad, m.u_value) == (0.0, 0.0, 0.0)


def test_hand_evaluated_single_sample():
    g = MlpSpec((1, 1), IDENTITY)
    f = MlpSpec((2, 1), IDENTITY)
    th = ParamVector(np.zeros(2), g)
    tau = ParamVector(np.array([0.0, 0.0, 1.0]), f)
    sh = ClientShard(0, np.array([0.3]), np.array([2.0]), np.array([[0.1, -0.2]]))
    m = client_objective(th, tau, th, sh)
    assert (m.psi, m.c_quad, m.u_value, m.n_i) == (2.0, 4.0, 1.0, 1)


@pytest.mark.parametrize("seed", range(50))
def test_objective_matches_brute_force(seed):
    th, tau, tl, sh = instance(seed)
    m = client_objective(th, tau, TildeAnchor(tl), sh)
    assert abs(m.u_value - brute_force_u(th, tau, tl, sh)) <= 1e-10
    assert m.c_quad >= 0
    assert m.u_value == m.psi - 0.25 * m.c_quad


@pytest.mark.parametrize("seed", range(50))
def test_span_maximizer_value(seed):
    th, tau, tl, sh = instance(seed)
    m = client_objective(th, tau, tl, sh)
    if m.c_quad <= 1e-12:
        pytest.skip("c_quad too small for the 1-D maximizer")
    c_star = 2 * m.psi / m.c_quad
    at_star = client_objective(th, scale_last_layer(tau, c_star), tl, sh)
    assert abs(at_star.u_value - m.psi ** 2 / m.c_quad) <= 1e-8 * max(1.0, m.psi ** 2 / m.c_quad)
    for c in (0.5 * c_star, 1.5 * c_star, -c_star):
        assert client_objective(th, scale_last_layer(tau, c), tl, sh).u_value <= at_star.u_value + 1e-12


def test_scaling_of_psi_and_cquad(rng):
    th, tau, tl, sh = instance(3)
    m = client_objective(th, tau, tl, sh)
    m2 = client_objective(th, scale_last_layer(tau, -1.7), tl, sh)
    assert np.isclose(m2.psi, -1.7 * m.psi, rtol=1e-12)
    assert np.isclose(m2.c_quad, 1.7 ** 2 * m.c_quad, rtol=1e-12)


def test_grads_zero_residuals():
    g = MlpSpec((1, 1), IDENTITY)
    th = ParamVector(np.array([2.0, 1.0]), g)
    x = np.linspace(-1, 1, 6)
    sh = ClientShard(0, x, 2 * x + 1, np.random.default_rng(0).uniform(-3, 3, (6, 2)))
    tau = init_params(F_SPEC, 3)
    _, gu = client_grads(th, tau, th, sh)
    assert np.array_equal(gu, np.zeros(F_SPEC.n_params))


def test_grad_theta_zero_when_f_zero():
    th, _, tl, sh = instance(4)
    tau = ParamVector(np.zeros(F_SPEC.n_params), F_SPEC)
    gt, _ = client_grads(th, tau, tl, sh)
    assert np.array_equal(gt, np.zeros(G_SPEC.n_params))


def _fd_check(seed, n=30, smooth=False):
    th, tau, tl, sh = instance(seed, n)
    if smooth:
        gs, fs = MlpSpec(G_SPEC.layer_widths, TANH), MlpSpec(F_SPEC.layer_widths, TANH)
        th, tau, tl = ParamVector(th.values, gs), ParamVector(tau.values, fs), ParamVector(tl.values, gs)
    anchor = TildeAnchor(tl)
    gt, gu = client_grads(th, tau, anchor, sh)
    # LeakyReLU kinks make wide stencils unreliable, so piecewise-linear nets use a narrow
    # second-order stencil and smooth nets a wider fourth-order one.
    diff = central_diff4 if smooth else central_diff
    fd_t = diff(lambda w: client_objective(th.replace(w), tau, anchor, sh).u_value, th.values)
    fd_u = diff(lambda w: client_objective(th, tau.replace(w), anchor, sh).u_value, tau.values)
    return gt, gu, fd_t, fd_u


@pytest.mark.parametrize("smooth", [False, True])
@pytest.mark.parametrize("seed", range(10))
def test_client_grads_finite_differences(seed, smooth):
    gt, gu, fd_t, fd_u = _fd_check(seed, smooth=smooth)
    assert per_coord_rel_err(gt, fd_t) <= 1e-5
    assert per_coord_rel_err(gu, fd_u) <= 1e-5


def test_grads_ignore_tilde_dependence():
    # Moving the anchor changes U but the theta-gradient formula holds it fixed.
    th, tau, tl, sh = instance(8)
    gt_a, _ = client_grads(th, tau, tl, sh)
    gt_b, _ = client_grads(th, tau, th, sh)
    assert np.array_equal(gt_a, gt_b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_names_sample(rng):
    th, tau, tl, _ = instance(2)
    sh = ClientShard(0, np.array([0.0, 1e308, 0.0]), np.zeros(3), np.zeros((3, 2)))
    big = th.replace(np.full(G_SPEC.n_params, 1e10))
    with pytest.raises(FloatingPointError, match="sample"):
        client_objective(big, tau, tl, sh)


def test_federated_objective_mean_and_symmetry(rng):
    th, tau, tl, _ = instance(5)
    shards = [random_shard(rng, n, i) for i, n in enumerate([5, 9, 13, 4, 20])]
    vals = [client_objective(th, tau, tl, s).u_value for s in shards]
    assert abs(federated_objective(th, tau, tl, shards) - np.mean(vals)) <= 1e-12
    assert federated_objective(th, tau, tl, shards[:1]) == vals[0]
    perm = [shards[i] for i in (3, 0, 4, 2, 1)]
    assert abs(federated_objective(th, tau, tl, perm) - federated_objective(th, tau, tl, shards)) <= 1e-12
    with pytest.raises(ValueError):
        federated_objective(th, tau, tl, [])


def test_federated_objective_cancellation():
    # Client 2 is client 1 with negated f-output contributions: u values +c and -c need
    # psi_1 = -psi_2 and c_quad equal, which holds with y -> -y, g == 0, tilde == 0.
    g = MlpSpec((1, 1), IDENTITY)
    zero = ParamVector(np.zeros(2), g)
    tau = ParamVector(np.array([0.4, -0.3, 0.2]), MlpSpec((2, 1), IDENTITY))
    r = np.random.default_rng(0)
    z = r.uniform(-3, 3, (8, 2))
    y = r.normal(size=8)
    a = ClientShard(0, np.zeros(8), y, z)
    b = ClientShard(1, np.zeros(8), -y, z)
    ua = client_objective(zero, tau, zero, a)
    ub = client_objective(zero, tau, zero, b)
    assert ua.c_quad == ub.c_quad and ua.psi == -ub.psi
    # With the c_quad term the values are not opposite; the psi parts cancel in the mean.
    assert abs(federated_objective(zero, tau, zero, [a, b]) - (-0.25 * ua.c_quad)) <= 1e-14


def test_federated_grads_are_means(rng):
    th, tau, tl, _ = instance(6)
    shards = [random_shard(rng, n, i) for i, n in enumerate([7, 3, 11])]
    gt, gu = federated_grads(th, tau, tl, shards)
    parts = [client_grads(th, tau, tl, s) for s in shards]
    assert np.allclose(gt, np.mean([p[0] for p in parts], axis=0), atol=1e-15)
    assert np.allclose(gu, np.mean([p[1] for p in parts], axis=0), atol=1e-15)


def test_minibatch_full_and_single():
    r = np.random.default_rng(0)
    sh = random_shard(r, 12)
    view = minibatch_view(sh, 50, np.random.default_rng(1))
    assert view.n == 12 and sorted(view.indices.tolist()) == list(range(12))
    one = ClientShard(0, np.array([1.0]), np.array([2.0]), np.array([[0.0, 0.0]]), np.array([0]))
    assert minibatch_view(one, 1, np.random.default_rng(0)).x.tolist() == [1.0]
    with pytest.raises(ValueError):
        minibatch_indices(5, 0, r)


def test_minibatch_deterministic_and_without_replacement():
    a = minibatch_indices(100, 30, np.random.default_rng(5))
    b = minibatch_indices(100, 30, np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert len(set(a.tolist())) == 30


def test_minibatch_inclusion_uniform():
    n, b, draws = 20, 5, 10000
    r = np.random.default_rng(7)
    counts = np.zeros(n)
    for _ in range(draws):
        counts[minibatch_indices(n, b, r)] += 1
    p = b / n
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) <= 3 * sigma + 1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 40))
def test_u_equals_psi_minus_quarter_cquad(seed, n):
    th, tau, tl, sh = instance(seed, n)
    m = client_objective(th, tau, tl, sh)
    assert m.c_quad >= 0
    assert m.u_value == m.psi - 0.25 * m.c_quad


def test_tilde_schedules():
    s = MlpSpec((1, 1), IDENTITY)
    p0, p1, p2 = (ParamVector(np.full(2, float(k)), s) for k in range(3))
    prev = TildeAnchor(p0)
    assert prev.advance(p1, 2).theta_tilde is p1
    frozen = TildeAnchor(p0, FROZEN)
    assert frozen.advance(p1, 2).advance(p2, 3).theta_tilde is p0
    every = TildeAnchor(p0, EVERY_K, 2)
    # Rounds 1, 3, 5 ... refresh; round 2 keeps the previous anchor.
    assert every.advance(p1, 2).theta_tilde is p0
    assert every.advance(p2, 3).theta_tilde is p2
    with pytest.raises(ValueError):
        TildeAnchor(p0, "sometimes")
    assert PREV_ROUND == prev.schedule
