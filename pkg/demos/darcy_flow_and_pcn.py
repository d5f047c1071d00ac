"""Infer a 2D log-permeability field with a Sylvester flow and a pCN chain.

Generates pressure observations on a fine 100x100 mesh, then runs both
inference methods on a 20x20 inversion mesh and compares their posterior
means. The pCN chain here is deliberately short; it gives a rough reference,
not a converged one. Runs in a few minutes.
"""

import numpy as np

from funcflow.cli import benchmark_obs_points, benchmark_truth
from funcflow.diagnostics import moments, relative_mean_error
from funcflow.flows import make_stack
from funcflow.forward_models import DarcyProblem, generate_data
from funcflow.mesh_prior import PriorMeasure, build_mesh
from funcflow.pcn import PcnConfig, ess, pcn_chain
from funcflow.vi_trainer import TrainConfig, sample_posterior, train_nf


def main():
    print("generating data on a 100x100 mesh (400 observation points) ...")
    fine = build_mesh(2, 100)
    obs = generate_data(
        DarcyProblem(fine),
        benchmark_truth(2),
        benchmark_obs_points(2),
        0.05,
        np.random.default_rng(0),
    )

    mesh = build_mesh(2, 20)
    prior = PriorMeasure.build(0.1, mesh, n_kl=400)
    problem = DarcyProblem(mesh)

    print("training a 5-layer Sylvester flow (K = 1000, N = 30) ...")
    stack = make_stack("sylvester", 5, 20, prior, 1)
    cfg = TrainConfig(
        n_samples=30, n_iters=1000, lr0=0.01,
        decay_factor=0.8, decay_every=500, seed=1,
    )
    report = train_nf(stack, prior, problem, obs, cfg)
    print(f"  loss {report.losses[0]:.1f} -> {report.losses[-1]:.1f} "
          f"in {report.wall_time:.0f} s")

    print("running a short pCN chain (2e4 steps, beta = 0.01) ...")
    chain = pcn_chain(
        prior, problem, obs,
        PcnConfig(beta=0.01, n_samples=20_000, burn_in=2_000, thin=1, seed=2),
    )
    print(f"  acceptance {chain.acceptance_rate:.2f}, "
          f"trace ESS {ess(chain.trace):.1f} (short chain, rough reference)")

    flow_mean = moments(
        sample_posterior(stack, prior, 2000, 11), with_cov=False
    ).mean
    err = relative_mean_error(flow_mean, chain.mean)
    print(f"relative mean error, flow vs chain: {err:.4f}")


if __name__ == "__main__":
    main()
