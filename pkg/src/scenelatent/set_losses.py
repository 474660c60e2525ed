"""Set reconstruction losses: Chamfer distance and Hungarian matching.

Both losses compare a predicted set (elements plus a mask in [0, 1]) against
a target set whose mask is binary. A predicted element contributes with its
mask value as weight, so the optimizer can switch unneeded slots off; target
elements only count where their mask is true. With an empty target the loss
degenerates to the squared predicted masks, which pushes predicted set size
toward zero.
"""
from __future__ import annotations

from typing import Any

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment


def _as_pair(obj: Any) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """Coerce a FrameSet / SetPrediction / (elements, mask) pair to tensors.

    Returns (elements, mask, was_tensor); numpy inputs are converted to
    float64 tensors so pure-python comparisons stay exact.
    """
    if hasattr(obj, "elements") and hasattr(obj, "mask"):
        elements, mask = obj.elements, obj.mask
    else:
        elements, mask = obj
    was_tensor = isinstance(elements, torch.Tensor) or isinstance(mask, torch.Tensor)
    if not isinstance(elements, torch.Tensor):
        # np.array copies, so read-only buffers (FrameSet fields) convert
        # without aliasing.
        elements = torch.as_tensor(np.array(elements, dtype=np.float64))
    if not isinstance(mask, torch.Tensor):
        mask = torch.as_tensor(np.array(mask))
    mask = mask.to(elements.dtype)
    if elements.ndim != 2 or mask.ndim != 1 or elements.shape[0] != mask.shape[0]:
        raise ValueError(
            f"set must be (n, f) elements with (n,) mask, got {tuple(elements.shape)} / {tuple(mask.shape)}"
        )
    return elements, mask, was_tensor


def pairwise_sq_dists(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean distances, shape (..., n, m)."""
    if pred.shape[-1] != target.shape[-1]:
        raise ValueError(
            f"feature widths differ: {pred.shape[-1]} vs {target.shape[-1]}"
        )
    diff = pred.unsqueeze(-2) - target.unsqueeze(-3)
    return (diff**2).sum(-1)


def chamfer_terms(
    pred_el: torch.Tensor,
    pred_mask: torch.Tensor,
    tgt_el: torch.Tensor,
    tgt_mask: torch.Tensor,
) -> torch.Tensor:
    """Batched differentiable Chamfer loss, one scalar per leading index.

    pred_el: (..., n, f), pred_mask: (..., n) in [0, 1];
    tgt_el: (..., m, f), tgt_mask: (..., m) binary.
    """
    d = pairwise_sq_dists(pred_el, tgt_el)
    tgt_valid = tgt_mask > 0
    has_target = tgt_valid.any(-1)
    # min over valid targets for each predicted element
    d_to_t = d.masked_fill(~tgt_valid.unsqueeze(-2), float("inf"))
    min_to_t = d_to_t.min(dim=-1).values
    min_to_t = torch.where(has_target.unsqueeze(-1), min_to_t, torch.zeros_like(min_to_t))
    term_pred = (pred_mask * min_to_t).sum(-1)
    # min over all predicted elements for each valid target
    min_to_p = d.min(dim=-2).values
    term_target = (min_to_p * tgt_valid.to(d.dtype)).sum(-1)
    empty_penalty = (pred_mask**2).sum(-1)
    return torch.where(has_target, term_pred + term_target, empty_penalty)


def chamfer_loss(pred: Any, target: Any) -> float | torch.Tensor:
    """Chamfer loss between one predicted set and one target set.

    Accepts FrameSet / SetPrediction objects, (elements, mask) pairs of
    arrays or tensors. Tensor inputs keep autograd; otherwise a float is
    returned.
    """
    pred_el, pred_mask, p_tensor = _as_pair(pred)
    tgt_el, tgt_mask, t_tensor = _as_pair(target)
    loss = chamfer_terms(pred_el, pred_mask, tgt_el.to(pred_el.dtype), tgt_mask.to(pred_el.dtype))
    if p_tensor or t_tensor:
        return loss
    return float(loss)


def hungarian_cost_matrix(
    pred_el: torch.Tensor,
    pred_mask: torch.Tensor,
    tgt_el: torch.Tensor,
    tgt_mask: torch.Tensor,
) -> torch.Tensor:
    """Square assignment costs: mask-weighted distances to valid targets,
    squared predicted mask for dummy (padding) targets."""
    n = pred_el.shape[0]
    if tgt_el.shape[0] != n:
        raise ValueError(
            f"pred and target capacities must match for assignment, got {n} vs {tgt_el.shape[0]}"
        )
    d = pairwise_sq_dists(pred_el, tgt_el)
    real = pred_mask.unsqueeze(1) * d
    dummy = (pred_mask**2).unsqueeze(1).expand(n, n)
    return torch.where((tgt_mask > 0).unsqueeze(0), real, dummy)


def hungarian_loss(pred: Any, target: Any) -> float | torch.Tensor:
    """Minimum-cost bijective matching loss between prediction and target.

    The target is padded with dummy slots up to the predicted capacity; the
    optimal assignment is found exactly in O(n^3), then its cost is summed
    with autograd intact for tensor inputs.
    """
    pred_el, pred_mask, p_tensor = _as_pair(pred)
    tgt_el, tgt_mask, t_tensor = _as_pair(target)
    cost = hungarian_cost_matrix(
        pred_el, pred_mask, tgt_el.to(pred_el.dtype), tgt_mask.to(pred_el.dtype)
    )
    rows, cols = linear_sum_assignment(cost.detach().cpu().numpy())
    loss = cost[rows, cols].sum()
    if p_tensor or t_tensor:
        return loss
    return float(loss)
