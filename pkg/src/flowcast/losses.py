"""Training objectives: flow prediction loss, l1, gradient difference, joint.

Reductions: the flow loss and l1 average over all elements so their
magnitude is resolution-independent; the gradient difference loss keeps
its per-image sum over pixels and channels and averages over the batch
only.  Inputs of rank 4 are treated as batched (B, C, H, W); lower ranks
as a single image.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import Tensor, abs_, add, as_tensor, mul, pow_scalar, square, sub, tensor_mean, tensor_sum


@dataclass
class LossWeights:
    """Weights of the joint objective and the loss-mode switch."""

    lambda_of: float = 1.0
    lambda_st: float = 1.0
    alpha: float = 1.0
    mode: str = "rgb"

    def __post_init__(self):
        if self.lambda_of < 0.0 or self.lambda_st < 0.0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha < 1.0:
            raise ValueError("gradient difference exponent must be >= 1")
        if self.mode not in ("rgb", "semantic"):
            raise ValueError(f"unknown loss mode {self.mode!r}")


def loss_of(predicted_flow, target_flow) -> Tensor:
    """Mean squared error between predicted and target flow maps."""
    return tensor_mean(square(sub(predicted_flow, target_flow)))


def loss_l1(predicted, target) -> Tensor:
    """Mean absolute difference."""
    return tensor_mean(abs_(sub(predicted, target)))


def _gdl_term(diff_target, diff_pred, alpha: float) -> Tensor:
    gap = abs_(sub(abs_(diff_target), abs_(diff_pred)))
    return gap if alpha == 1.0 else pow_scalar(gap, alpha)


def loss_gdl(predicted, target, alpha: float = 1.0) -> Tensor:
    """Gradient difference loss over both spatial directions.

    Sums |  |target gradient| - |predicted gradient|  |^alpha over pixels
    and channels of each image, then averages over the batch.
    """
    predicted, target = as_tensor(predicted), as_tensor(target)
    batched = predicted.ndim >= 4
    dy_t = sub(target[..., 1:, :], target[..., :-1, :])
    dy_p = sub(predicted[..., 1:, :], predicted[..., :-1, :])
    dx_t = sub(target[..., :, :-1], target[..., :, 1:])
    dx_p = sub(predicted[..., :, :-1], predicted[..., :, 1:])
    vertical = tensor_sum(_gdl_term(dy_t, dy_p, alpha))
    horizontal = tensor_sum(_gdl_term(dx_t, dx_p, alpha))
    total = add(vertical, horizontal)
    return total / predicted.shape[0] if batched else total


def loss_st(predicted, target, alpha: float = 1.0) -> Tensor:
    """Frame prediction loss: l1 plus gradient difference."""
    return add(loss_l1(predicted, target), loss_gdl(predicted, target, alpha))


def loss_final(pred_frame, target_frame, pred_flow, target_flow, weights: LossWeights) -> Tensor:
    """Joint objective: lambda_of * flow loss + lambda_st * frame loss.

    Semantic mode replaces the frame term with plain l1 on the per-pixel
    class maps.
    """
    of = loss_of(pred_flow, target_flow)
    if weights.mode == "semantic":
        st = loss_l1(pred_frame, target_frame)
    else:
        st = loss_st(pred_frame, target_frame, weights.alpha)
    return add(mul(weights.lambda_of, of), mul(weights.lambda_st, st))
