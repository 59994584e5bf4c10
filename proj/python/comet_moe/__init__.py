"""Sparse mixture-of-experts with differentiable tree gates."""

from ._core import (
    CometError,
    ConfigError,
    RoutingError,
    UsageError,
    bootstrap_curve,
    combine_trees,
    entropy_penalty,
    flops,
    schedule,
    sinkhorn,
    smooth_step,
    smooth_step_derivative,
    softmax,
    solve_assignment,
    t_test_less,
    topk_softmax,
    train,
    tree_shape,
)

__version__ = "0.1.0"
