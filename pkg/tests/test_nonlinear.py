import math

import numpy as np
import pytest

from dagproj.errors import DimensionMismatch
from dagproj.matrix import is_exactly_acyclic
from dagproj.metrics import expected_f1
from dagproj.projection import INF, project
from dagproj.synth import make_network, simulate_nonlinear
from dagproj.variational import MeanFieldGaussian, TrainConfig, log_likelihood
from dagproj.nonlinear import (NodeNetwork, elbo_and_gradient, estimate_elbo, fit_nonlinear,
                               flatten, forward, induced_adjacency, network_from_flat,
                               network_to_flat, nonlinear_log_likelihood,
                               nonlinear_posterior_summary, parameter_count, project_network,
                               unflatten)


def random_net(p, d, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return NodeNetwork(rng.normal(0, scale, (p, p, d)), rng.normal(size=(p, d)),
                       rng.normal(size=(p, d)), rng.normal(size=p))


def test_induced_adjacency_examples():
    net = NodeNetwork.zeros(3)
    assert not induced_adjacency(net).any()
    net.first[1, 0, :4] = 1.0
    W = induced_adjacency(net)
    assert W[0, 1] == 2.0 and np.count_nonzero(W) == 1


def test_zeroing_row_zeroes_entry():
    net = random_net(4, 5, 0)
    W = induced_adjacency(net)
    net.first[2, 3] = 0.0
    W2 = induced_adjacency(net)
    diff = W != W2
    assert diff[3, 2] and diff.sum() == 1
    assert np.all(np.diag(W) == 0)


def test_flat_layout_roundtrip():
    net = random_net(4, 3, 1)
    theta = network_to_flat(net)
    assert theta.shape == (parameter_count(4, 3),)
    back = network_from_flat(theta, 4, 3)
    for a, b in zip((net.first, net.b1, net.w2, net.b2), (back.first, back.b1, back.w2, back.b2)):
        assert np.array_equal(a, b)
    stack = np.stack([theta, 2 * theta])
    parts = unflatten(stack, 4, 3)
    assert np.array_equal(flatten(*parts), stack)


def test_projection_fixed_point():
    W = np.array([[0, 0.5, 0.4], [0, 0, 0.6], [0, 0, 0]])
    net = make_network(W, seed=1)
    Wt = induced_adjacency(net)
    out = project_network(net)
    assert np.allclose(out.first, net.first, atol=1e-6)
    assert np.allclose(induced_adjacency(out), Wt, atol=1e-6)


def test_projection_rescales_rows():
    net = NodeNetwork.zeros(2, 4)
    net.first[1, 0] = [2.0, 0, 0, 0]
    out = project_network(net, 1.0, hard_threshold=0.0)
    assert np.allclose(out.first[1, 0], 0.5 * net.first[1, 0])


def test_zero_budget_network():
    net = random_net(4, 5, 2)
    out = project_network(net, 0.0)
    assert not out.first.any()
    for k, v in net.deeper_layers.items():
        assert out.deeper_layers[k].tobytes() == v.tobytes()


def test_round_trip_and_objective_identity():
    for seed in range(10):
        net = random_net(5, 6, seed, 0.3)
        out = project_network(net)
        Wt = induced_adjacency(net)
        ref = project(Wt, INF, step_scale=0.25).projected
        W = induced_adjacency(out)
        assert np.max(np.abs(W - ref)) < 1e-8
        assert is_exactly_acyclic(W)
        lhs = np.sum((net.first - out.first) ** 2)
        assert lhs == pytest.approx(np.sum((Wt - W) ** 2), abs=1e-10)


def test_forward_examples():
    assert not forward(NodeNetwork.zeros(3), np.ones(3)).any()
    net = NodeNetwork(np.zeros((2, 2, 1)), np.zeros((2, 1)), np.ones((2, 1)), np.zeros(2))
    net.first[1, 0, 0] = 1.0
    assert forward(net, [-2.0, 0.0])[1] == 0.0
    assert forward(net, [3.0, 0.0])[1] == 3.0
    with pytest.raises(DimensionMismatch):
        forward(net, np.ones(3))


def test_forward_ignores_non_parents_bitwise():
    net = random_net(4, 5, 3)
    net.first[2, 1] = 0.0
    x = np.random.default_rng(0).normal(size=4)
    y = x.copy()
    y[1] += 3.7
    assert forward(net, x)[2] == forward(net, y)[2]


def test_log_likelihood_examples():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(6, 3))
    assert nonlinear_log_likelihood(NodeNetwork.zeros(3), X) == pytest.approx(
        log_likelihood(np.zeros((3, 3)), X))
    net = random_net(3, 4, 5)
    x = X[:1]
    r = x - forward(net, x)
    s2 = 0.7
    expect = -1.5 * math.log(2 * math.pi * s2) - np.sum(r ** 2) / (2 * s2)
    assert nonlinear_log_likelihood(net, x, s2) == pytest.approx(expect)


def test_isolated_node_adds_marginal_term():
    rng = np.random.default_rng(6)
    net = random_net(3, 4, 7)
    X = rng.normal(size=(5, 3))
    z = rng.normal(size=5)
    big = NodeNetwork.zeros(4, 4)
    big.first[:3, :3] = net.first
    big.b1[:3], big.w2[:3], big.b2[:3] = net.b1, net.w2, net.b2
    X4 = np.c_[X, z]
    marginal = -2.5 * math.log(2 * math.pi) - 0.5 * np.sum(z ** 2)
    assert nonlinear_log_likelihood(big, X4) == pytest.approx(
        nonlinear_log_likelihood(net, X) + marginal)


@pytest.mark.parametrize("lam", [INF, 2.0])
def test_elbo_gradient_finite_differences(lam):
    p, d = 3, 2
    rng = np.random.default_rng(8)
    X = rng.normal(size=(30, p))
    D = parameter_count(p, d)
    prior = MeanFieldGaussian.isotropic(D)
    q = MeanFieldGaussian(rng.normal(0, 0.5, D), rng.normal(-1.5, 0.2, D))
    cfg = TrainConfig(budget=lam, samples_per_iter=4)
    eps = rng.standard_normal((4, D))
    _, gm, gr = elbo_and_gradient(q, prior, X, cfg, eps, d)
    h = 1e-6
    for arr, g in ((q.means, gm), (q.raw_scales, gr)):
        for i in rng.choice(D, 15, replace=False):
            arr[i] += h
            up = estimate_elbo(q, prior, X, cfg, eps, d)
            arr[i] -= 2 * h
            down = estimate_elbo(q, prior, X, cfg, eps, d)
            arr[i] += h
            num = (up - down) / (2 * h)
            assert abs(num - g[i]) / max(1.0, abs(num)) < 1e-3


def test_degenerate_elbo_variance():
    W = np.array([[0, 0.5, 0], [0, 0, 0.6], [0, 0, 0]])
    net = make_network(W, hidden=3, seed=1)
    X = simulate_nonlinear(net, 40, seed=2).X
    D = parameter_count(3, 3)
    q = MeanFieldGaussian(network_to_flat(net), np.full(D, -30.0))
    prior = MeanFieldGaussian.isotropic(D)
    cfg = TrainConfig(samples_per_iter=5)
    vals = [estimate_elbo(q, prior, X, cfg, np.random.default_rng(s).standard_normal((5, D)), 3)
            for s in range(5)]
    assert np.var(vals) < 1e-6


def test_zero_learning_rate_unchanged():
    X = np.random.default_rng(9).normal(size=(20, 3))
    q = fit_nonlinear(X, None, TrainConfig(learning_rate=0.0, max_iters=3, samples_per_iter=2),
                      hidden=2)
    q0 = fit_nonlinear(X, None, TrainConfig(max_iters=0), hidden=2)
    assert q.means.tobytes() == q0.means.tobytes()
    assert q.raw_scales.tobytes() == q0.raw_scales.tobytes()
    assert q.info["architecture"]["hidden"] == 2


def test_prior_dimension_checked():
    with pytest.raises(DimensionMismatch):
        fit_nonlinear(np.zeros((5, 3)), MeanFieldGaussian.isotropic(4), TrainConfig(max_iters=0))


def test_chain_recovery_beats_empty_graph():
    W = np.array([[0, 1.0, 0], [0, 0, 1.0], [0, 0, 0]])
    net = make_network(W, seed=3)
    ds = simulate_nonlinear(net, 1000, seed=4)
    cfg = TrainConfig(max_iters=300, samples_per_iter=20, seed=0)
    q = fit_nonlinear(ds.X, None, cfg)
    s = nonlinear_posterior_summary(q, 3, budget=INF, count=100, seed=1)
    assert expected_f1(s, W) > 0.0
    assert all(is_exactly_acyclic(x) for x in s.samples)
