"""Stochastic KL minimization over flow parameters and posterior sampling.

Each iteration draws fresh prior samples, evaluates the Monte-Carlo KL loss
and its exact gradient, and takes one Adam step under a step-decay learning
rate schedule. Training is deterministic given the seed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigurationError, NumericalFailureError
from .flows import FlowStack, kl_loss_and_grad
from .mesh_prior import MeshField, PriorMeasure, sample_prior

GRAD_CLIP_NORM = 100.0


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer schedule for one training run."""

    n_samples: int = 30
    n_iters: int = 5000
    lr0: float = 0.01
    decay_factor: float = 0.8
    decay_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidConfigurationError("n_samples must be >= 1")
        if self.n_iters < 1:
            raise InvalidConfigurationError("n_iters must be >= 1")
        if not self.lr0 > 0:
            raise InvalidConfigurationError("lr0 must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise InvalidConfigurationError("decay_factor must be in (0, 1]")
        if self.decay_every < 1:
            raise InvalidConfigurationError("decay_every must be >= 1")

    def lr_at(self, k: int) -> float:
        return self.lr0 * self.decay_factor ** (k // self.decay_every)


@dataclass
class AdamState:
    """First and second moment accumulators for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n_params: int) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params))

    def update(self, grad: np.ndarray, lr: float) -> np.ndarray:
        """One Adam step; returns the parameter increment (to be added)."""
        if grad.shape != self.m.shape:
            raise InvalidConfigurationError("gradient length mismatch")
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.step)
        v_hat = self.v / (1 - self.beta2**self.step)
        return -lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainReport:
    """Loss trace and timing of one run; parameters live in the stack."""

    losses: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None

    def save_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss"])
            for k, loss in enumerate(self.losses):
                writer.writerow([k, format(loss, ".17g")])


def _clip(grad: np.ndarray) -> np.ndarray:
    nrm = float(np.linalg.norm(grad))
    if nrm > GRAD_CLIP_NORM:
        return grad * (GRAD_CLIP_NORM / nrm)
    return grad


def train_nf(
    stack: FlowStack,
    prior: PriorMeasure,
    problem,
    obs,
    config: TrainConfig,
) -> TrainReport:
    """Optimize the stack in place; returns the loss trace.

    Fresh prior samples every iteration, one RNG child stream per iteration
    so runs are reproducible regardless of batch evaluation order.
    """
    adam = AdamState.fresh(stack.n_params)
    report = TrainReport()
    t0 = time.perf_counter()
    params = stack.get_params()
    for k in range(config.n_iters):
        rng = np.random.default_rng([config.seed, k])
        samples = [sample_prior(prior, rng) for _ in range(config.n_samples)]
        loss, grad = kl_loss_and_grad(stack, prior, problem, obs, samples)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalFailureError(
                f"non-finite loss/gradient at iteration {k}: loss={loss}"
            )
        report.losses.append(float(loss))
        params = params + adam.update(_clip(grad), config.lr_at(k))
        stack.set_params(params)
    report.wall_time = time.perf_counter() - t0
    return report


def sample_posterior(stack: FlowStack, prior: PriorMeasure, n: int, seed) -> list:
    """n independent pushforward samples f(u_i), u_i drawn from the prior.

    Each sample uses its own child stream [seed, i], so the i-th draw shares
    its leading coefficients across priors built on different meshes.
    """
    out = []
    for i in range(n):
        u = sample_prior(prior, np.random.default_rng([seed, i]))
        out.append(stack.forward_field(u)[0])
    return out


def sample_posterior_coeffs(stack: FlowStack, prior: PriorMeasure, n: int, seed):
    """Pushforward samples returned as (fields, leading-M coefficient rows)."""
    fields = []
    coeffs = np.empty((n, stack.M))
    for i in range(n):
        u = sample_prior(prior, np.random.default_rng([seed, i]))
        out, _, (c0, cN, _) = stack.forward_field(u)
        fields.append(out)
        coeffs[i] = cN
    return fields, coeffs
