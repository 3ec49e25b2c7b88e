"""Adaptive-moment optimizer and EMA parameter tracking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation, NumericError


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hyper):
        return cls(np.zeros_like(params), np.zeros_like(params), **hyper)


def optimizer_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update.

    Returns the new parameter vector and advances ``state`` in place. A
    non-finite gradient raises :class:`NumericError` and leaves both the
    state and the parameters untouched.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.first_moment.shape:
        raise ContractViolation(
            f"shape mismatch: params {params.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient at optimizer step {state.step_count}")

    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    k = state.step_count + 1
    m_hat = m / (1.0 - state.beta1**k)
    v_hat = v / (1.0 - state.beta2**k)
    new = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    if not np.all(np.isfinite(new)):
        raise NumericError(f"non-finite parameters after optimizer step {k}")

    state.first_moment, state.second_moment, state.step_count = m, v, k
    return new


def ema_update(shadow: np.ndarray, params: np.ndarray, decay: float) -> np.ndarray:
    """``decay * shadow + (1 - decay) * params``."""
    if not 0.0 <= decay < 1.0:
        raise ContractViolation(f"EMA decay must lie in [0, 1), got {decay}")
    shadow = np.asarray(shadow, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    if shadow.shape != params.shape:
        raise ContractViolation(f"shape mismatch: {shadow.shape} vs {params.shape}")
    return decay * shadow + (1.0 - decay) * params
