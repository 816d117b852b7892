"""Overparametrized neural TD, Q-learning and soft actor-critic on finite MDPs,
with an exact oracle for the projected Bellman fixed point."""

from .algo import (
    ConfigError,
    RunAborted,
    RunTrace,
    SoftConfig,
    TdConfig,
    expected_return,
    neural_q_learning,
    neural_soft_q,
    neural_td,
    neural_td_deep,
    soft_actor_critic,
)
from .env import (
    FeatureMap,
    FiniteMdp,
    Policy,
    StationaryDist,
    Transition,
    build_random_mdp,
    estimate_mixing,
    load_env,
    sample_iid,
    sample_markov,
    stationary_distribution,
)
from .net import (
    DeepParams,
    ProjectionSpec,
    TwoLayerParams,
    init_deep,
    init_two_layer,
    project_ball,
    q_forward,
    q_grad,
    q0_forward,
)
from .oracle import (
    FixedPoint,
    SolverError,
    estimate_nu,
    ntk_features,
    solve_projected_evaluation,
    solve_projected_optimality,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "RunAborted",
    "RunTrace",
    "SoftConfig",
    "TdConfig",
    "expected_return",
    "neural_q_learning",
    "neural_soft_q",
    "neural_td",
    "neural_td_deep",
    "soft_actor_critic",
    "FeatureMap",
    "FiniteMdp",
    "Policy",
    "StationaryDist",
    "Transition",
    "build_random_mdp",
    "estimate_mixing",
    "load_env",
    "sample_iid",
    "sample_markov",
    "stationary_distribution",
    "DeepParams",
    "ProjectionSpec",
    "TwoLayerParams",
    "init_deep",
    "init_two_layer",
    "project_ball",
    "q_forward",
    "q_grad",
    "q0_forward",
    "FixedPoint",
    "SolverError",
    "estimate_nu",
    "ntk_features",
    "solve_projected_evaluation",
    "solve_projected_optimality",
]
