"""Variational training of sequential bit-append samplers.

The package factors into layers: ``statespace`` (the DAG of partial bit
vectors), ``nnet`` (flat-parameter MLPs with exact gradients), ``policy``
(forward/backward step distributions and trajectory sampling), ``objectives``
(balance and KL estimators with control variates), ``targets`` (rewards, MCMC
and contrastive divergence), ``evaluate`` (enumeration oracles and sampled
metrics), and ``cli`` (training, verification, sweeps, plots).
"""

from .statespace import State, Trajectory, cell_to_state, gray_decode, gray_encode
from .nnet import (
    MlpSpec,
    NonFiniteGradientError,
    OptimConfig,
    Optimizer,
    ParameterStore,
    init_mlp,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    save_checkpoint,
)
from .policy import (
    BackwardPolicy,
    ForwardPolicy,
    TrajectoryBatch,
    WeightedTrajectory,
    sample_backward_batch,
    sample_forward_batch,
)
from .objectives import (
    EstimatorOutput,
    ObjectiveConfig,
    alpha_kl_step,
    alpha_tb_step,
    cv_optimal_scaling,
    cv_scaling,
    fkl_gradient_batch,
    rkl_gradient_batch,
    shared_param_gradient,
    tb_gradient_batch,
    tb_loss,
)
from .targets import (
    DiscretizedDensity,
    EnergyModel,
    IsingTarget,
    TabularTarget,
    build_density,
    cd_gradient_step,
    mh_back_forth_step,
    sample_dataset,
)
from .evaluate import (
    EnumerationOracle,
    MetricReport,
    expected_log_weight,
    is_marginal_log_likelihood,
)

__version__ = "0.1.0"
