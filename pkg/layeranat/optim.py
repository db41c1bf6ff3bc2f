# layeranat/optim.py
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .tensor import ValueNode

logger = logging.getLogger(__name__)

Params = Union[Mapping[str, ValueNode], Sequence[ValueNode]]


def _named(params: Params) -> list[tuple[str, ValueNode]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(param.name or str(index), param) for index, param in enumerate(params)]


def clip_grad_norm(params: Iterable[ValueNode], max_norm: float) -> float:
    """
    Rescales gradients so their global L2 norm does not exceed max_norm.

    Only populated gradients take part; a zero global norm is a no-op.

    Args:
        params (Iterable[ValueNode]): Parameters whose gradients are clipped.
        max_norm (float): Norm ceiling.

    Returns:
        float: The global norm before clipping.
    """
    grads = [p._grad for p in params if p._grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm and total > 0:
        factor = max_norm / total
        for g in grads:
            g *= g.dtype.type(factor)
    return total


@dataclass
class OptimizerState:
    """AdamW moments and counters. m and v are kept in 64-bit."""

    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # Bias correction runs per parameter: a layer unfrozen late starts at step 1
    steps: dict[str, int] = field(default_factory=dict)

    def snapshot(self, name: str) -> tuple:
        """Copy of one parameter's slot, used to verify freeze soundness."""
        if name not in self.m:
            return (None, None, 0)
        return (self.m[name].copy(), self.v[name].copy(), self.steps[name])


def adamw_step(state: OptimizerState, params: Params) -> None:
    """
    Applies one decoupled-weight-decay Adam update.

    Parameters without a populated gradient (frozen ones) are skipped
    entirely: no decay, no moment update, no step count.

    Args:
        state (OptimizerState): Moments and hyper-parameters, updated in place.
        params: Mapping of name to parameter, or a sequence (keyed by name or position).

    Raises:
        ValueError: If a stored moment's shape disagrees with its parameter.
    """
    beta1, beta2 = state.betas
    state.t += 1
    for name, param in _named(params):
        if not param.requires_grad or param._grad is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros(param.shape, dtype=np.float64)
            state.v[name] = np.zeros(param.shape, dtype=np.float64)
            state.steps[name] = 0
        elif state.m[name].shape != param.shape:
            raise ValueError(
                f"adamw_step: state shape {state.m[name].shape} does not match "
                f"parameter {name!r} shape {param.shape}"
            )
        grad = param._grad.astype(np.float64)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        state.steps[name] += 1
        step = state.steps[name]
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        value = param.data.astype(np.float64)
        value -= state.lr * state.weight_decay * value
        value -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        param.data[...] = value


class AdamW:
    """Binds a parameter mapping to an OptimizerState."""

    def __init__(self, params: Params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(_named(params))
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def step(self):
        adamw_step(self.state, self.params)


class DivergenceError(RuntimeError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss {loss})")
        self.step = step
        self.loss = loss
