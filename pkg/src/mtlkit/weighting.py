"""Six loss-combination strategies over K tasks.

EW sums losses untouched. UW weights each task by a learned inverse variance
exp(-s_k) with regularizer s_k/2, where s_k = log(alpha_k^2) is the trainable
parameter (positivity of alpha by construction). RUW swaps the regularizer
for log(1 + s_k), floored before the log so the term stays finite. RRUW adds
a restraint |phi - sum_k |s_k/2||. DWA rescales tasks by a temperature
softmax over loss-descent ratios. DRUW is the sum of the DWA and RRUW
objectives, so each task is effectively weighted by lambda_k + exp(-s_k).
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .errors import ConfigError, DomainError, StructuralError

STRATEGIES = ("EW", "UW", "RUW", "RRUW", "DWA", "DRUW")


@dataclass
class WeightingConfig:
    strategy: str
    num_tasks: int
    restraint_target: float = 1.0
    temperature: float = 10.0
    clamp_epsilon: float = 1e-6

    def __post_init__(self):
        name = str(self.strategy).upper()
        if name not in STRATEGIES:
            raise ConfigError(
                f"strategy {self.strategy!r} not recognized; valid: {', '.join(STRATEGIES)}"
            )
        self.strategy = name
        if self.num_tasks < 2:
            raise ConfigError(f"num_tasks must be >= 2, got {self.num_tasks}")
        if self.restraint_target < 0:
            raise ConfigError(f"restraint_target must be >= 0, got {self.restraint_target}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.clamp_epsilon <= 0:
            raise ConfigError(f"clamp_epsilon must be > 0, got {self.clamp_epsilon}")


class UncertaintyParams:
    """Trainable s_k = log(alpha_k^2), one scalar leaf tensor per task."""

    def __init__(self, num_tasks: int, init_s: float = 0.0):
        if num_tasks < 1:
            raise ConfigError(f"num_tasks must be >= 1, got {num_tasks}")
        self.s = [Tensor(float(init_s), requires_grad=True) for _ in range(num_tasks)]

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "UncertaintyParams":
        p = cls(len(values))
        for t, v in zip(p.s, values):
            t.data[...] = float(v)
        return p

    def __len__(self):
        return len(self.s)

    def alphas(self):
        """alpha_k = exp(s_k / 2), always positive."""
        return [math.exp(t.item() / 2.0) for t in self.s]

    def values(self):
        return [t.item() for t in self.s]


@dataclass(frozen=True)
class LossHistory:
    """Epoch-mean task losses one and two updates back."""

    prev: Optional[tuple] = None
    prev2: Optional[tuple] = None
    epoch_index: int = 0


def update_history(history: LossHistory, epoch_mean_losses) -> LossHistory:
    losses = tuple(float(v) for v in epoch_mean_losses)
    for v in losses:
        if not math.isfinite(v) or v <= 0:
            raise DomainError(f"update_history: losses must be finite and > 0, got {v}")
    return LossHistory(prev=losses, prev2=history.prev, epoch_index=history.epoch_index + 1)


def _check_tasks(task_losses, params=None):
    if len(task_losses) < 1:
        raise StructuralError("need at least one task loss")
    if params is not None and len(params.s) != len(task_losses):
        raise StructuralError(
            f"{len(task_losses)} task losses but {len(params.s)} uncertainty parameters"
        )


def combine_ew(task_losses) -> Tensor:
    """Plain sum; every task gradient weight is exactly 1."""
    _check_tasks(task_losses)
    total = task_losses[0]
    for loss in task_losses[1:]:
        total = ad.add(total, loss)
    return total


def combine_uw(task_losses, params: UncertaintyParams) -> Tensor:
    """sum_k exp(-s_k) L_k + s_k/2, the learned inverse-variance weighting."""
    _check_tasks(task_losses, params)
    total = None
    for loss, s in zip(task_losses, params.s):
        term = ad.add(ad.mul(ad.exp(ad.negate(s)), loss), ad.scale(s, 0.5))
        total = term if total is None else ad.add(total, term)
    return total


def combine_ruw(task_losses, params: UncertaintyParams, clamp_epsilon: float = 1e-6) -> Tensor:
    """Like UW but regularized by log(1 + s_k), floored at clamp_epsilon.

    The floor keeps the term finite when s_k drops below -1, where the raw
    argument would go nonpositive.
    """
    _check_tasks(task_losses, params)
    if clamp_epsilon <= 0:
        raise ConfigError(f"clamp_epsilon must be > 0, got {clamp_epsilon}")
    total = None
    for loss, s in zip(task_losses, params.s):
        reg = ad.log(ad.clamp_min(ad.add(s, 1.0), clamp_epsilon))
        term = ad.add(ad.mul(ad.exp(ad.negate(s)), loss), reg)
        total = term if total is None else ad.add(total, term)
    return total


def restraint_term(params: UncertaintyParams, phi: float) -> Tensor:
    """| phi - sum_k |s_k/2| |; zero exactly on the manifold sum|log alpha| = phi."""
    acc = None
    for s in params.s:
        mag = ad.absolute(ad.scale(s, 0.5))
        acc = mag if acc is None else ad.add(acc, mag)
    return ad.absolute(ad.sub(float(phi), acc))


def combine_rruw(task_losses, params: UncertaintyParams, phi: float,
                 clamp_epsilon: float = 1e-6) -> Tensor:
    return ad.add(
        combine_ruw(task_losses, params, clamp_epsilon),
        restraint_term(params, phi),
    )


def dwa_weights(history: LossHistory, temperature: float, num_tasks: int):
    """K floats summing to K: softmax of loss-descent ratios, scaled by K.

    All ones until the history holds two epochs.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if history.prev is None or history.prev2 is None:
        return [1.0] * num_tasks
    if len(history.prev) != num_tasks or len(history.prev2) != num_tasks:
        raise StructuralError(
            f"history width {len(history.prev)} does not match num_tasks {num_tasks}"
        )
    for v in history.prev + history.prev2:
        if v <= 0:
            raise DomainError(f"dwa_weights: nonpositive history entry {v}")
    r = np.asarray(history.prev) / np.asarray(history.prev2)
    z = r / temperature
    z = z - z.max()  # stable softmax
    e = np.exp(z)
    lam = num_tasks * e / e.sum()
    return [float(v) for v in lam]


def combine_dwa(task_losses, history: LossHistory, temperature: float, num_tasks: int) -> Tensor:
    """sum_k lambda_k L_k with lambda treated as constants."""
    _check_tasks(task_losses)
    if len(task_losses) != num_tasks:
        raise StructuralError(
            f"{len(task_losses)} task losses but num_tasks={num_tasks}"
        )
    lam = dwa_weights(history, temperature, num_tasks)
    total = None
    for loss, w in zip(task_losses, lam):
        term = ad.scale(loss, w)
        total = term if total is None else ad.add(total, term)
    return total


def combine_druw(task_losses, params: UncertaintyParams, history: LossHistory,
                 config: WeightingConfig) -> Tensor:
    """combine_dwa + combine_rruw, exactly; tasks get weight lambda_k + exp(-s_k)."""
    return ad.add(
        combine_dwa(task_losses, history, config.temperature, config.num_tasks),
        combine_rruw(task_losses, params, config.restraint_target, config.clamp_epsilon),
    )


def combine(task_losses, params: UncertaintyParams, history: LossHistory,
            config: WeightingConfig):
    """Dispatch on config.strategy; returns (total_loss, lambdas_used)."""
    k = len(task_losses)
    lam = [1.0] * k
    name = config.strategy
    if name == "EW":
        total = combine_ew(task_losses)
    elif name == "UW":
        total = combine_uw(task_losses, params)
    elif name == "RUW":
        total = combine_ruw(task_losses, params, config.clamp_epsilon)
    elif name == "RRUW":
        total = combine_rruw(task_losses, params, config.restraint_target,
                             config.clamp_epsilon)
    elif name == "DWA":
        lam = dwa_weights(history, config.temperature, config.num_tasks)
        total = combine_dwa(task_losses, history, config.temperature, config.num_tasks)
    elif name == "DRUW":
        lam = dwa_weights(history, config.temperature, config.num_tasks)
        total = combine_druw(task_losses, params, history, config)
    else:  # unreachable, config validates
        raise ConfigError(f"unknown strategy {name!r}")
    return total, lam


def uses_uncertainty(strategy: str) -> bool:
    return strategy.upper() in ("UW", "RUW", "RRUW", "DRUW")


def single_task_descent(loss_value: float, strategy: str, phi: float = 1.0,
                        steps: int = 4000, lr: float = 0.2, init_s: float = 4.0,
                        clamp_epsilon: float = 1e-6):
    """Plain gradient descent on one uncertainty parameter with the task loss held fixed.

    Demonstrates the weighting objectives as functions of s alone. Starts on
    the high-uncertainty side (init_s = 4, alpha = e^2) for every strategy:
    for small fixed losses the RUW/RRUW objectives are unbounded below on the
    far side of s = -1 (the clamped-log region), and descent from a low or
    zero start falls into that region; from the high side UW converges to its
    analytic minimum and RRUW settles onto the restraint manifold |s| = 2*phi.
    Returns (final_objective, final_s).
    """
    name = strategy.upper()
    if name not in ("UW", "RUW", "RRUW"):
        raise ConfigError(f"single_task_descent expects UW, RUW, or RRUW, got {strategy!r}")
    if loss_value < 0:
        raise DomainError(f"loss_value must be >= 0, got {loss_value}")

    params = UncertaintyParams(1, init_s=init_s)
    s = params.s[0]
    fixed = Tensor(float(loss_value))

    def objective():
        if name == "UW":
            return combine_uw([fixed], params)
        if name == "RUW":
            return combine_ruw([fixed], params, clamp_epsilon)
        return combine_rruw([fixed], params, phi, clamp_epsilon)

    for _ in range(steps):
        s.grad = None
        with Tape():
            total = objective()
        backward(total)
        s.data[...] = s.data - lr * s.grad

    final = objective().item()
    return final, s.item()
