"""Function-space normalizing-flow variational inference for PDE inverse
problems, with a pCN MCMC baseline and amortized conditional inference."""

__version__ = "0.1.0"

from .mesh_prior import (
    MeshDescriptor,
    MeshField,
    PriorMeasure,
    build_mesh,
    cm_inner,
    eigenpairs,
    lift,
    project,
    sample_prior,
)
from .forward_models import (
    DarcyProblem,
    EllipticProblem,
    Observation,
    generate_data,
    grad_phi,
    observe,
    phi,
    solve_darcy,
    solve_elliptic,
)
from .flows import (
    FlowStack,
    HouseholderLayer,
    PlanarLayer,
    ProjectedLayer,
    SylvesterLayer,
    kl_loss_and_grad,
    load_stack,
    make_layer,
    make_stack,
    save_stack,
)
from .vi_trainer import TrainConfig, TrainReport, sample_posterior, train_nf
from .pcn import ChainSummary, PcnConfig, ess, pcn_chain, run_reference
from .conditional import (
    CnfConfig,
    CondNet,
    cond_forward,
    embed_observation,
    generate_training_set,
    retrain,
    train_cnf,
)
from .diagnostics import (
    MomentSummary,
    covariance_relative_errors,
    invariance_study,
    moments,
    re_simulation_error,
    relative_mean_error,
)
