"""Amortized inference: one conditioning network, many observation sets.

Trains a small conditional network on the 1D problem so that a new
observation vector maps directly to flow parameters, then refines one
held-out case by retraining. Prints the re-simulation error (mean
observation-space distance to the noise-free data) at each stage.
Runs in a few minutes; the network here is trained far below the
package presets, so treat the numbers as illustrative.
"""

import numpy as np

from funcflow.cli import benchmark_obs_points
from funcflow.conditional import (
    CnfConfig,
    CondNet,
    amortized_stack,
    generate_training_set,
    retrain,
    train_cnf,
)
from funcflow.diagnostics import re_simulation_error
from funcflow.forward_models import EllipticProblem
from funcflow.mesh_prior import PriorMeasure, build_mesh, sample_prior
from funcflow.vi_trainer import TrainConfig, sample_posterior


def main():
    mesh = build_mesh(1, 100)
    prior = PriorMeasure.build(0.1, mesh, n_kl=100)
    problem = EllipticProblem(mesh)
    pts = benchmark_obs_points(1)

    print("generating 50 training cases from prior draws ...")
    trainset = generate_training_set(
        prior, problem, pts, 50, 0.05, np.random.default_rng(4)
    )

    print("training the conditioning network (K = 600) ...")
    net = CondNet(["projected"] * 3, 20, M_embed=20, seed=3)
    cfg = CnfConfig(
        m_batch=4, n_u=5, n_iters=600, lr0=0.001,
        decay_factor=0.95, decay_every=200, seed=3,
    )
    report = train_cnf(net, prior, problem, trainset, cfg)
    print(f"  loss {report.losses[0]:.1f} -> {report.losses[-1]:.1f}")

    held_out = generate_training_set(
        prior, problem, pts, 1, 0.05, np.random.default_rng(100)
    )
    case = held_out.cases[0]
    n_eval = 500

    prior_samples = [
        sample_prior(prior, np.random.default_rng([7, i])) for i in range(n_eval)
    ]
    base = re_simulation_error([prior_samples], [case.clean], problem, pts)
    print(f"re-simulation error, prior (identity flow): {base:.4f}")

    stack = amortized_stack(net, case.obs, prior)
    samples = sample_posterior(stack, prior, n_eval, 8)
    am = re_simulation_error([samples], [case.clean], problem, pts)
    print(f"re-simulation error, amortized:             {am:.4f}")

    print("retraining on this case (K = 1000, N = 30) ...")
    refined, _ = retrain(
        net, case.obs, prior, problem,
        TrainConfig(n_samples=30, n_iters=1000, lr0=0.001,
                    decay_factor=0.9, decay_every=200, seed=5),
    )
    samples = sample_posterior(refined, prior, n_eval, 9)
    re = re_simulation_error([samples], [case.clean], problem, pts)
    print(f"re-simulation error, retrained:             {re:.4f}")


if __name__ == "__main__":
    main()
