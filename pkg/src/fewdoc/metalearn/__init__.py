"""Meta-learning algorithms over episodic document tasks."""

from .adam import AdamState, PlainSgdState
from .contrastive import meta_contrastive_loss, total_embedding_gradients
from .decoders import (
    DecoderArch,
    DecoderParams,
    InnerLoopConfig,
    decoder_predict,
    hc_forward,
    init_decoder,
    inner_loop_sgd,
    plain_forward,
    task_token_loss,
)
from .gradient_meta import anil_meta_step, reptile_meta_step
from .metric_meta import contrastproto_meta_step, protonet_meta_step
from .prototypes import (
    TaskStatistics,
    calibrate_threshold,
    compute_otd_prototype,
    compute_prototypes,
    fit_covariance,
    mahalanobis_score,
    nn_classify,
    otd_detect_and_classify,
    protonet_classify,
)
from .taskview import TaskView, encode_task

__all__ = [
    "AdamState",
    "PlainSgdState",
    "DecoderArch",
    "DecoderParams",
    "InnerLoopConfig",
    "TaskStatistics",
    "TaskView",
    "anil_meta_step",
    "calibrate_threshold",
    "compute_otd_prototype",
    "compute_prototypes",
    "contrastproto_meta_step",
    "decoder_predict",
    "encode_task",
    "fit_covariance",
    "hc_forward",
    "init_decoder",
    "inner_loop_sgd",
    "mahalanobis_score",
    "meta_contrastive_loss",
    "nn_classify",
    "otd_detect_and_classify",
    "plain_forward",
    "protonet_classify",
    "protonet_meta_step",
    "reptile_meta_step",
    "task_token_loss",
    "total_embedding_gradients",
]
