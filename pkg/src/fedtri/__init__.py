"""Asynchronous federated trilevel optimization with cutting-plane relaxation."""

from .core import (
    ConsensusView,
    Dims,
    DualState,
    FedtriError,
    NonFiniteError,
    PrimalState,
    TrilevelProblem,
    estimate_mu,
    finite_diff_grad,
    project_ball_sq,
    reformulate_consensus,
)
from .cuts import (
    Cut,
    CutValidationReport,
    Polytope,
    add_cut,
    cut_violation,
    drop_inactive,
    generate_cut_I,
    generate_cut_II,
    validate_cut,
)
from .data import RegressionDataset, generate_synthetic_csv, load_dataset, make_synthetic_dataset
from .harness import (
    DelayModel,
    RunLog,
    RunResult,
    ScheduleConfig,
    comm_cost_cuts,
    comm_cost_iter,
    run,
    schedule_epoch,
    time_to_gap,
    validate_runlog,
)
from .inner import (
    InnerConfig,
    UnrollTrace,
    eval_h1,
    eval_h2,
    grad_h,
    h1_flat,
    h2_flat,
    solve_level2,
    solve_level3,
)
from .outer import (
    GapVector,
    OuterConfig,
    lagrangian,
    master_step,
    regularized_lagrangian,
    stationarity_gap,
    theorem1_step_sizes,
    worker_step,
)
from .problems import (
    QuadraticOracle,
    RobustHpo,
    RobustHpoSpec,
    build_quadratic_problem,
    build_robust_hpo_problem,
    evaluate_model,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
