"""Central-difference gradient checker."""

import numpy as np

from .autodiff import Tape, Tensor, backward
from .errors import DomainError, StructuralError


def grad_check(function, point: Tensor, h: float = 1e-5) -> float:
    """Compare the analytic gradient of function at point against central differences.

    function must map the point tensor to a scalar Tensor. Returns the max
    relative error using denominator max(|analytic|, |numeric|, 1e-8).
    Avoid non-differentiable points (relu kinks, abs at 0, clamp boundaries);
    the check is meaningless there.
    """
    if h <= 0:
        raise StructuralError(f"grad_check: h must be positive, got {h}")
    was_requiring = point.requires_grad
    old_grad = point.grad
    point.requires_grad = True
    point.grad = None
    try:
        with Tape():
            out = function(point)
        if not isinstance(out, Tensor) or out.size != 1:
            raise StructuralError("grad_check: function must return a scalar Tensor")
        backward(out)
        if point.grad is None:
            analytic = np.zeros_like(point.data)
        else:
            analytic = np.asarray(point.grad, dtype=np.float64).reshape(point.data.shape)

        numeric = np.empty_like(point.data)
        flat = point.data.ravel()
        num_flat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = function(point).item()
            flat[i] = orig - h
            f_minus = function(point).item()
            flat[i] = orig
            num_flat[i] = (f_plus - f_minus) / (2.0 * h)
    finally:
        point.requires_grad = was_requiring
        point.grad = old_grad

    if np.isnan(analytic).any() or np.isnan(numeric).any():
        raise DomainError("grad_check: NaN in analytic or numeric gradient")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
