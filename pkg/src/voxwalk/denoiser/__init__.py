"""Small conditional 3D convolutional denoiser with hand-written gradients."""

from .model import (
    DenoiserConfig,
    DenoiserParams,
    Tape,
    config_from_params,
    forward,
    init_params,
    param_shapes,
)
from .train import (
    AdamW,
    DenoiserScoreModel,
    DivergenceError,
    TrainConfig,
    TrainState,
    as_score_model,
    load_params,
    load_state,
    loss_and_grad,
    save_params,
    train,
)
from .weights import WeightsFormatError, load_tensors, save_tensors
