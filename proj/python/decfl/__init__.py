"""Decentralized federated learning simulator (DSGD, DSGT, local-step variants)."""

from ._core import (
    DivergenceError,
    Graph,
    IoError,
    MixingMatrix,
    NumericalError,
    Problem,
    RunConfig,
    ValidationError,
    __version__,
    build_graph,
    consensus_violation,
    full_gradient,
    global_loss,
    heterogeneous_data,
    logistic_problem,
    loss,
    metropolis_weights,
    mix,
    quadratic_problem,
    random_quadratic_problem,
    read_edge_list,
    run,
    run_experiment,
    shallow_nn_problem,
    spectral_gap,
    speedup_sweep,
    stationarity_gap,
    step_size,
    validate_spec,
)

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
