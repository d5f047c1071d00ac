"""Observation embedding, conditioning network gradients, amortized training."""

import numpy as np
import pytest

from funcflow.conditional import (
    CnfConfig,
    CondNet,
    MlpHead,
    TrainSet,
    amortized_stack,
    cond_forward,
    embed_observation,
    generate_training_set,
    load_condnet,
    retrain,
    save_condnet,
    train_cnf,
)
from funcflow.errors import InvalidArgumentError, InvalidConfigurationError
from funcflow.flows import kl_loss_and_grad
from funcflow.forward_models import EllipticProblem, generate_data
from funcflow.mesh_prior import PriorMeasure, build_mesh, sample_prior
from funcflow.vi_trainer import TrainConfig


@pytest.fixture(scope="module")
def setup():
    mesh = build_mesh(1, 40)
    prior = PriorMeasure.build(0.1, mesh, n_kl=40)
    problem = EllipticProblem(mesh)
    return mesh, prior, problem


def test_embedding_is_adjoint_action(setup):
    # v_i = sum_j d_j phi_i(x_j): test against an explicit loop
    _, prior, _ = setup
    pts = np.array([[0.21], [0.47], [0.83]])
    data = np.array([1.5, -0.7, 0.2])
    v = embed_observation(pts, data, prior, 6)
    for i in range(6):
        phi_i = [1.0] if i == 0 else None
        direct = sum(
            d * (1.0 if i == 0 else np.sqrt(2) * np.cos(i * np.pi * p[0]))
            for p, d in zip(pts, data)
        )
        assert v[i] == pytest.approx(direct, rel=1e-12)
    assert v.shape == (6,)
    with pytest.raises(InvalidArgumentError):
        embed_observation(pts, data[:2], prior, 6)


def test_embedding_length_independent_of_point_count(setup):
    _, prior, _ = setup
    rng = np.random.default_rng(0)
    for n_pts in (3, 17):
        pts = rng.uniform(0, 1, size=(n_pts, 1))
        v = embed_observation(pts, rng.standard_normal(n_pts), prior, 20)
        assert v.shape == (20,)


def test_training_set_generation(setup):
    _, prior, problem = setup
    pts = [[i / 10] for i in range(1, 11)]
    ts = generate_training_set(prior, problem, pts, 5, 0.02, np.random.default_rng(1))
    assert len(ts) == 5
    for case in ts.cases:
        sigma = 0.02 * np.max(np.abs(case.clean))
        assert case.obs.tau == pytest.approx(sigma**-2, rel=1e-12)
        assert np.abs(case.obs.data - case.clean).max() < 6 * sigma
        assert case.truth_values.shape == (prior.mesh.n_nodes,)
    with pytest.raises(InvalidConfigurationError):
        generate_training_set(prior, problem, pts, 0, 0.02, np.random.default_rng(1))
    with pytest.raises(InvalidConfigurationError):
        TrainSet([])


def test_mlp_head_gradient_fd():
    head = MlpHead(4, 3, widths=(8, 8), rng=np.random.default_rng(2))
    # give the zero output layer nonzero weights so all paths are exercised
    flat = head.get_flat()
    flat = np.random.default_rng(3).standard_normal(flat.size) * 0.3
    head.set_flat(flat)
    v = np.random.default_rng(4).standard_normal(4)
    g_out = np.random.default_rng(5).standard_normal(3)
    out, cache = head.forward(v)
    grad = head.backward(cache, g_out)
    eps = 1e-6
    idx = np.random.default_rng(6).choice(flat.size, size=20, replace=False)
    for j in idx:
        e = np.zeros(flat.size)
        e[j] = eps
        head.set_flat(flat + e)
        fp = float(g_out @ head.forward(v)[0])
        head.set_flat(flat - e)
        fm = float(g_out @ head.forward(v)[0])
        assert abs((fp - fm) / (2 * eps) - grad[j]) < 1e-7
    head.set_flat(flat)


def test_condnet_starts_near_identity(setup):
    # zero output weights make theta equal the bias, a valid near-identity
    # raw vector, for every embedding
    _, prior, _ = setup
    net = CondNet(["projected", "planar"], M=6, M_embed=8, seed=0)
    rng = np.random.default_rng(7)
    v1 = rng.standard_normal(8)
    v2 = rng.standard_normal(8)
    theta1, _ = net.forward(v1)
    theta2, _ = net.forward(v2)
    assert np.array_equal(theta1, theta2)
    stack = net.make_stack(prior)
    stack.set_params(theta1)
    c = np.random.default_rng(8).standard_normal(6)
    for layer in stack.layers:
        c_out, _, _ = layer.forward(c)
        assert np.all(np.isfinite(c_out))
        assert np.abs(layer.invert(c_out) - c).max() < 1e-8


def test_condnet_backward_fd(setup):
    _, prior, _ = setup
    net = CondNet(["householder", "planar"], M=4, M_embed=5, seed=1)
    flat = 0.2 * np.random.default_rng(9).standard_normal(net.n_params)
    net.set_flat(flat)
    v = np.random.default_rng(10).standard_normal(5)
    theta, caches = net.forward(v)
    g_theta = np.random.default_rng(11).standard_normal(theta.size)
    grad = net.backward(caches, g_theta)
    eps = 1e-6
    idx = np.random.default_rng(12).choice(flat.size, size=25, replace=False)
    for j in idx:
        e = np.zeros(flat.size)
        e[j] = eps
        net.set_flat(flat + e)
        fp = float(g_theta @ net.forward(v)[0])
        net.set_flat(flat - e)
        fm = float(g_theta @ net.forward(v)[0])
        assert abs((fp - fm) / (2 * eps) - grad[j]) < 1e-7
    net.set_flat(flat)


def test_condnet_validation():
    with pytest.raises(InvalidConfigurationError):
        CondNet([], M=4)
    net = CondNet(["planar"], M=4, M_embed=5)
    with pytest.raises(InvalidArgumentError):
        net.forward(np.zeros(6))
    with pytest.raises(InvalidArgumentError):
        net.set_flat(np.zeros(3))


def test_condnet_serialization(tmp_path):
    net = CondNet(["projected", "sylvester"], M=5, M_embed=7, seed=3)
    net.set_flat(0.1 * np.random.default_rng(13).standard_normal(net.n_params))
    path = str(tmp_path / "net")
    save_condnet(net, path)
    back = load_condnet(path)
    assert back.kinds == net.kinds
    assert back.M == net.M and back.M_embed == net.M_embed
    assert np.array_equal(back.get_flat(), net.get_flat())
    v = np.random.default_rng(14).standard_normal(7)
    assert np.array_equal(cond_forward(back, v), cond_forward(net, v))


def test_cnf_config_validation():
    with pytest.raises(InvalidConfigurationError):
        CnfConfig(m_batch=0)
    with pytest.raises(InvalidConfigurationError):
        CnfConfig(lr0=-1.0)
    cfg = CnfConfig(lr0=0.001, decay_factor=0.95, decay_every=1000)
    assert cfg.lr_at(999) == pytest.approx(0.001)
    assert cfg.lr_at(1000) == pytest.approx(0.00095)


def test_train_cnf_improves_amortized_loss(setup):
    mesh, prior, problem = setup
    pts = [[i / 10] for i in range(1, 11)]
    ts = generate_training_set(prior, problem, pts, 8, 0.05, np.random.default_rng(2))
    net = CondNet(["projected"], M=10, M_embed=10, seed=0)

    def mean_loss():
        rng = np.random.default_rng(99)
        samples = [sample_prior(prior, rng) for _ in range(20)]
        total = 0.0
        for case in ts.cases:
            stack = amortized_stack(net, case.obs, prior)
            loss, _ = kl_loss_and_grad(stack, prior, problem, case.obs, samples)
            total += loss
        return total / len(ts)

    before = mean_loss()
    cfg = CnfConfig(
        m_batch=2, n_u=4, n_iters=150, lr0=0.002, decay_factor=0.9, decay_every=50, seed=0
    )
    report = train_cnf(net, prior, problem, ts, cfg)
    after = mean_loss()
    assert after < before
    assert len(report.losses) == 150


def test_train_cnf_deterministic(setup):
    mesh, prior, problem = setup
    pts = [[i / 10] for i in range(1, 11)]
    ts = generate_training_set(prior, problem, pts, 4, 0.05, np.random.default_rng(3))
    cfg = CnfConfig(m_batch=2, n_u=3, n_iters=10, lr0=0.005, seed=5)
    net_a = CondNet(["planar"], M=8, M_embed=10, seed=2)
    ra = train_cnf(net_a, prior, problem, ts, cfg)
    net_b = CondNet(["planar"], M=8, M_embed=10, seed=2)
    rb = train_cnf(net_b, prior, problem, ts, cfg)
    assert ra.losses == rb.losses
    assert np.array_equal(net_a.get_flat(), net_b.get_flat())


def test_retrain_refines_case(setup):
    mesh, prior, problem = setup
    truth = lambda x: np.exp(-50 * (x - 0.3) ** 2) - np.exp(-50 * (x - 0.7) ** 2)
    obs = generate_data(
        problem, truth, [[i / 10] for i in range(1, 11)], 0.05, np.random.default_rng(4)
    )
    net = CondNet(["projected"], M=10, M_embed=10, seed=1)
    cfg = TrainConfig(n_samples=10, n_iters=60, lr0=0.02, decay_factor=0.9, decay_every=30, seed=0)
    stack, report = retrain(net, obs, prior, problem, cfg)
    rng = np.random.default_rng(55)
    samples = [sample_prior(prior, rng) for _ in range(20)]
    refined, _ = kl_loss_and_grad(stack, prior, problem, obs, samples)
    start, _ = kl_loss_and_grad(
        amortized_stack(net, obs, prior), prior, problem, obs, samples
    )
    assert refined < start
    assert len(report.losses) == 60
