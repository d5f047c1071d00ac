"""Amortized inference: observation embedding, conditioning network, training.

A fixed-length embedding of any observation set feeds one small MLP head per
flow layer; the heads emit the layer's raw parameters, and the downstream
constraint reparameterizations keep every output admissible. Training
minimizes the expected KL objective over a set of synthetic observation
cases; a per-case retraining pass refines the amortized initialization.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidArgumentError,
    InvalidConfigurationError,
    NumericalFailureError,
)
from .flows import FlowStack, kl_loss_and_grad, make_layer
from .forward_models import Observation, observe
from .mesh_prior import PriorMeasure, basis_at_points, sample_prior
from .vi_trainer import AdamState, TrainConfig, TrainReport, _clip, train_nf


def embed_observation(points, data, prior: PriorMeasure, M_embed: int = 20) -> np.ndarray:
    """Fixed-length embedding v_i = sum_j d_j phi_i(x_j).

    This is the action of the observation adjoint on the data, tested against
    the leading eigenfunctions; its length never depends on the number of
    observation points.
    """
    data = np.asarray(data, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if data.shape != (pts.shape[0],):
        raise InvalidArgumentError("data length must equal point count")
    return basis_at_points(prior, pts, M_embed).T @ data


@dataclass
class TrainCase:
    """One synthetic observation case with its generating ground truth."""

    obs: Observation
    truth_values: np.ndarray
    clean: np.ndarray


@dataclass
class TrainSet:
    cases: list

    def __post_init__(self):
        if not self.cases:
            raise InvalidConfigurationError("training set must be nonempty")

    def __len__(self):
        return len(self.cases)


def generate_training_set(
    prior: PriorMeasure,
    problem,
    obs_points,
    n_train: int,
    noise_pct: float,
    rng: np.random.Generator,
) -> TrainSet:
    """Draw prior samples, push them through the forward map, add noise.

    Each case gets its own noise level from the same rule as data generation:
    tau^-1 = (noise_pct * max|clean observations|)^2.
    """
    if n_train < 1:
        raise InvalidConfigurationError("n_train must be >= 1")
    if not noise_pct > 0:
        raise InvalidConfigurationError("noise_pct must be > 0")
    pts = np.atleast_2d(np.asarray(obs_points, dtype=float))
    cases = []
    for _ in range(n_train):
        u = sample_prior(prior, rng)
        clean = observe(problem.solve(u), pts)
        noise_std = noise_pct * float(np.max(np.abs(clean)))
        tau = noise_std**-2
        data = clean + noise_std * rng.standard_normal(clean.size)
        cases.append(TrainCase(Observation(pts, data, tau), u.values.copy(), clean))
    return TrainSet(cases)


class MlpHead:
    """Two-hidden-layer tanh MLP emitting one flow layer's raw parameters.

    The output layer starts at zero so the amortized flow begins near the
    identity regardless of the embedding.
    """

    def __init__(self, n_in: int, n_out: int, widths=(128, 128), rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        w1, w2 = widths
        self.W1 = rng.standard_normal((w1, n_in)) / np.sqrt(n_in)
        self.b1 = np.zeros(w1)
        self.W2 = rng.standard_normal((w2, w1)) / np.sqrt(w1)
        self.b2 = np.zeros(w2)
        self.W3 = np.zeros((n_out, w2))
        self.b3 = np.zeros(n_out)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in (self.W1, self.b1, self.W2, self.b2, self.W3, self.b3))

    def get_flat(self) -> np.ndarray:
        return np.concatenate(
            [a.ravel() for a in (self.W1, self.b1, self.W2, self.b2, self.W3, self.b3)]
        )

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for name in ("W1", "b1", "W2", "b2", "W3", "b3"):
            arr = getattr(self, name)
            setattr(self, name, vec[pos : pos + arr.size].reshape(arr.shape).copy())
            pos += arr.size

    def forward(self, v: np.ndarray):
        a1 = np.tanh(self.W1 @ v + self.b1)
        a2 = np.tanh(self.W2 @ a1 + self.b2)
        out = self.W3 @ a2 + self.b3
        return out, (v, a1, a2)

    def backward(self, cache, g_out: np.ndarray) -> np.ndarray:
        """Gradient of g_out . forward(v) w.r.t. all head weights, flat."""
        v, a1, a2 = cache
        gW3 = np.outer(g_out, a2)
        gb3 = g_out
        g_a2 = (self.W3.T @ g_out) * (1.0 - a2 * a2)
        gW2 = np.outer(g_a2, a1)
        gb2 = g_a2
        g_a1 = (self.W2.T @ g_a2) * (1.0 - a1 * a1)
        gW1 = np.outer(g_a1, v)
        gb1 = g_a1
        return np.concatenate(
            [a.ravel() for a in (gW1, gb1, gW2, gb2, gW3, gb3)]
        )


class CondNet:
    """One MLP head per flow layer, mapping an embedding to raw parameters."""

    def __init__(self, kinds: list, M: int, M_embed: int = 20, seed: int = 0):
        if not kinds:
            raise InvalidConfigurationError("need at least one flow layer kind")
        self.kinds = list(kinds)
        self.M = M
        self.M_embed = M_embed
        rng = np.random.default_rng(seed)
        # template layers fix the raw parameter counts and give each head's
        # output bias a valid near-identity raw vector (an all-zero output
        # would collapse direction-style parameters)
        templates = [make_layer(k, M, rng) for k in kinds]
        self.head_sizes = [t.n_params for t in templates]
        self.heads = []
        for i, template in enumerate(templates):
            head = MlpHead(M_embed, template.n_params, rng=np.random.default_rng([seed, i]))
            head.b3 = template.get_flat()
            self.heads.append(head)

    @property
    def n_params(self) -> int:
        return sum(h.n_params for h in self.heads)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([h.get_flat() for h in self.heads])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise InvalidArgumentError("network parameter length mismatch")
        pos = 0
        for h in self.heads:
            h.set_flat(vec[pos : pos + h.n_params])
            pos += h.n_params

    def forward(self, v: np.ndarray):
        """Raw flow parameters for embedding v, plus the backprop cache."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.M_embed,):
            raise InvalidArgumentError(
                f"embedding length {v.shape} does not match M_embed={self.M_embed}"
            )
        outs, caches = [], []
        for h in self.heads:
            out, cache = h.forward(v)
            outs.append(out)
            caches.append(cache)
        return np.concatenate(outs), caches

    def backward(self, caches, g_theta: np.ndarray) -> np.ndarray:
        """Chain a raw-flow-parameter cotangent into network weight space."""
        grads = []
        pos = 0
        for h, size, cache in zip(self.heads, self.head_sizes, caches):
            grads.append(h.backward(cache, g_theta[pos : pos + size]))
            pos += size
        return np.concatenate(grads)

    def make_stack(self, prior: PriorMeasure) -> FlowStack:
        rng = np.random.default_rng(0)
        return FlowStack([make_layer(k, self.M, rng) for k in self.kinds], prior)


def cond_forward(net: CondNet, v: np.ndarray) -> np.ndarray:
    """Raw flow parameters theta for one embedding; deterministic."""
    return net.forward(v)[0]


def save_condnet(net: CondNet, path: str) -> None:
    header = {"kinds": net.kinds, "M": net.M, "M_embed": net.M_embed}
    with open(path + ".json", "w") as fh:
        json.dump(header, fh)
        fh.write("\n")
    net.get_flat().astype("<f8").tofile(path + ".bin")


def load_condnet(path: str) -> CondNet:
    with open(path + ".json") as fh:
        header = json.load(fh)
    net = CondNet(header["kinds"], header["M"], header["M_embed"])
    net.set_flat(np.fromfile(path + ".bin", dtype="<f8"))
    return net


@dataclass(frozen=True)
class CnfConfig:
    """Amortized-training schedule (minibatch of cases x prior samples)."""

    m_batch: int = 10
    n_u: int = 20
    n_iters: int = 50_000
    lr0: float = 0.001
    decay_factor: float = 0.95
    decay_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.m_batch < 1 or self.n_u < 1 or self.n_iters < 1:
            raise InvalidConfigurationError("batch sizes and n_iters must be >= 1")
        if not self.lr0 > 0 or not 0 < self.decay_factor <= 1 or self.decay_every < 1:
            raise InvalidConfigurationError("invalid learning-rate schedule")

    def lr_at(self, k: int) -> float:
        return self.lr0 * self.decay_factor ** (k // self.decay_every)


def train_cnf(
    net: CondNet,
    prior: PriorMeasure,
    problem,
    trainset: TrainSet,
    config: CnfConfig,
) -> TrainReport:
    """Optimize the conditioning network in place over the training cases.

    Each step draws a minibatch of observation cases and n_u fresh prior
    samples per case; the per-case KL gradient w.r.t. raw flow parameters is
    chained into network weights.
    """
    embeddings = [
        embed_observation(case.obs.points, case.obs.data, prior, net.M_embed)
        for case in trainset.cases
    ]
    stack = net.make_stack(prior)
    adam = AdamState.fresh(net.n_params)
    weights = net.get_flat()
    report = TrainReport()
    t0 = time.perf_counter()
    for k in range(config.n_iters):
        rng = np.random.default_rng([config.seed, k])
        idx = rng.integers(0, len(trainset.cases), size=config.m_batch)
        loss_acc = 0.0
        grad_acc = np.zeros(net.n_params)
        for i in idx:
            case = trainset.cases[i]
            theta, caches = net.forward(embeddings[i])
            stack.set_params(theta)
            samples = [sample_prior(prior, rng) for _ in range(config.n_u)]
            loss, g_theta = kl_loss_and_grad(stack, prior, problem, case.obs, samples)
            loss_acc += loss
            grad_acc += net.backward(caches, g_theta)
        loss_acc /= config.m_batch
        grad_acc /= config.m_batch
        if not np.isfinite(loss_acc) or not np.all(np.isfinite(grad_acc)):
            raise NumericalFailureError(f"non-finite amortized loss at step {k}")
        report.losses.append(float(loss_acc))
        weights = weights + adam.update(_clip(grad_acc), config.lr_at(k))
        net.set_flat(weights)
    report.wall_time = time.perf_counter() - t0
    return report


def amortized_stack(net: CondNet, obs: Observation, prior: PriorMeasure) -> FlowStack:
    """Flow stack parameterized directly from one observation, no retraining."""
    v = embed_observation(obs.points, obs.data, prior, net.M_embed)
    stack = net.make_stack(prior)
    stack.set_params(cond_forward(net, v))
    return stack


def retrain(
    net: CondNet,
    obs: Observation,
    prior: PriorMeasure,
    problem,
    retrain_config: TrainConfig | None = None,
):
    """Per-case refinement from the amortized initialization.

    Returns the refined stack and its training report. The default schedule
    is 1000 iterations, 30 samples, lr 0.001 decayed by 0.9 every 200 steps.
    """
    if retrain_config is None:
        retrain_config = TrainConfig(
            n_samples=30, n_iters=1000, lr0=0.001, decay_factor=0.9, decay_every=200
        )
    stack = amortized_stack(net, obs, prior)
    report = train_nf(stack, prior, problem, obs, retrain_config)
    return stack, report
