from .autodiff import Var, grad_params, value_and_grad
from .mlp import (
    T_MIN,
    DenoiserModel,
    FrozenDenoiser,
    MlpSpec,
    init_params,
    load_checkpoint,
    mlp_forward,
    save_checkpoint,
)
from .optim import OptimizerState, ema_update, optimizer_step

__all__ = [
    "Var",
    "grad_params",
    "value_and_grad",
    "T_MIN",
    "DenoiserModel",
    "FrozenDenoiser",
    "MlpSpec",
    "init_params",
    "load_checkpoint",
    "mlp_forward",
    "save_checkpoint",
    "OptimizerState",
    "ema_update",
    "optimizer_step",
]
