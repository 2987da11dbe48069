"""taskfuse: resilient multi-task model fusion over an adversarial MIMO
multiple-access channel, simulated end to end at desk scale."""

__version__ = "0.1.0"

from .params import (  # noqa: F401
    GROUP_TAGS,
    DegenerateVectorError,
    IncompatibleParametersError,
    ParameterSet,
    TaskVector,
    add_scaled,
    compute_task_vector,
    cosine_similarity,
    flatten,
    group_select,
    load_checkpoint,
    save_checkpoint,
    unflatten,
)
from .tinyvit import (  # noqa: F401
    ModelConfig,
    TrainSpec,
    TrainingDivergedError,
    evaluate,
    finetune,
    forward,
    init_model,
    logit_grad,
    loss_and_grad,
)
from .taskbench import (  # noqa: F401
    GENERATOR_KINDS,
    Split,
    TaskData,
    TaskSpec,
    default_task_specs,
    generate_task,
    task_similarity_knob,
)
from .channel import (  # noqa: F401
    ChannelState,
    LinkMetrics,
    link_metrics,
    mmse,
    report_snr,
    sample_channels,
    sic_order,
    sum_rate,
    user_rate,
)
from .adversary import (  # noqa: F401
    NoiseDesign,
    bisect,
    ideal_covariance,
    oracle_min_covariance,
    solve_p1,
    solve_p2,
)
from .fusion import (  # noqa: F401
    TransportConfig,
    fuse,
    normalized_accuracy,
    transmit_task_vector,
)
from .analysis import (  # noqa: F401
    HypothesisResult,
    WdeReport,
    cosine_matrix,
    logit_ratio,
    run_hypothesis_test,
    taylor_check,
    threshold,
    variance_of_ratio,
    wde,
)
from .defense import (  # noqa: F401
    DefenseConfig,
    apply_defense,
    realign,
    restore_frozen,
)
from .harness import (  # noqa: F401
    ExperimentConfig,
    ResultRow,
    build_bundle,
    load_config,
    run_sweep,
    save_config,
)
