"""mtlkit: multitask loss balancing on a multi-exit CNN.

Six loss-combination strategies (EW, UW, RUW, RRUW, DWA, DRUW) trained and
compared on a five-block CNN with per-task exit heads, over a self-contained
reverse-mode autodiff core with compiled kernels and a NumPy fallback.
"""

from .autodiff import (
    Tape,
    Tensor,
    backward,
    conv2d,
    elementwise,
    matmul,
    pool_and_reduce,
)
from .data import GenConfig, generate_synthetic, load_dataset
from .gradcheck import grad_check
from .metrics import MetricsReport, ccc, hmean, mae, mean_ccc, uar
from .net import (
    ExitAssignment,
    MultiExitNet,
    NetConfig,
    build_net,
    forward_multi,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .training import (
    TrainConfig,
    TrainingLog,
    adamw_step,
    evaluate,
    grid_search_exits,
    task_losses,
    train,
)
from .weighting import (
    LossHistory,
    UncertaintyParams,
    WeightingConfig,
    combine_dwa,
    combine_druw,
    combine_ew,
    combine_rruw,
    combine_ruw,
    combine_uw,
    dwa_weights,
    restraint_term,
    update_history,
)

__version__ = "0.1.0"
