"""Grounded hinge-loss energy models: LCQP inference and weight learning."""

from .model import (
    GroundedModel,
    HardConstraint,
    HingePotential,
    ModelError,
    energy,
    load_model,
    model_from_dict,
    model_to_dict,
    potential_vector,
    save_model,
)
from .lcqp import (
    CompiledLCQP,
    LCQPError,
    ValueResult,
    compile_model,
    dual_objective,
    dual_to_primal,
    primal_dual_gap,
    primal_objective,
    proximal_lcqp,
    value_function,
    with_weights,
)
from .solver import (
    InfeasibleModelError,
    SolveResult,
    SolverConfig,
    connected_components,
    solve,
    solve_cc_parallel,
    solve_lock_free,
)
from .oracle import OracleError, active_set_oracle, projected_subgradient
from .neural import DifferentiableHead, forward, linear_sigmoid_head, \
    mlp_softmax_head, vjp
from .learn import (
    AdamState,
    LearnConfig,
    LearnError,
    LearnResult,
    LearnerState,
    TrainingSample,
    adaptive_moment_step,
    augmented_lagrangian,
    energy_loss,
    fit_value_loss,
    inner_solve,
    latent_inference,
    learn,
    mirror_descent_step,
    moreau_envelope,
    outer_loop,
    prediction_loss,
    sp_loss,
    supervised_loss,
)
from . import synth

__version__ = "0.1.0"

__all__ = [
    "GroundedModel", "HardConstraint", "HingePotential", "ModelError",
    "energy", "load_model", "model_from_dict", "model_to_dict",
    "potential_vector", "save_model",
    "CompiledLCQP", "LCQPError", "ValueResult", "compile_model",
    "dual_objective", "dual_to_primal", "primal_dual_gap",
    "primal_objective", "proximal_lcqp", "value_function", "with_weights",
    "InfeasibleModelError", "SolveResult", "SolverConfig",
    "connected_components", "solve", "solve_cc_parallel", "solve_lock_free",
    "OracleError", "active_set_oracle", "projected_subgradient",
    "DifferentiableHead", "forward", "linear_sigmoid_head",
    "mlp_softmax_head", "vjp",
    "AdamState", "LearnConfig", "LearnError", "LearnResult", "LearnerState",
    "TrainingSample", "adaptive_moment_step", "augmented_lagrangian",
    "energy_loss", "fit_value_loss", "inner_solve", "latent_inference",
    "learn", "mirror_descent_step", "moreau_envelope", "outer_loop",
    "prediction_loss", "sp_loss", "supervised_loss",
    "synth",
]
