"""Training objectives: instance focal loss, control-point L1, character
cross-entropy, box gIoU, and their weighted decoder/encoder compositions.

Every loss is a plain sum over queries (no batch normalization) unless
``average_by_instances`` is set on the weights; matched/unmatched
membership comes from a :class:`~textspot.matching.MatchAssignment`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, ops
from .matching import FOCAL_ALPHA, FOCAL_GAMMA, PROB_EPS, MatchAssignment


@dataclass
class LossWeights:
    lambda_cls: float = 2.0
    lambda_coord: float = 5.0
    lambda_char: float = 4.0
    lambda_giou: float = 2.0
    average_by_instances: bool = False

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_coord", "lambda_char", "lambda_giou"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def for_bezier(self):
        """Bezier mode halves the character weight to rebalance the decoders."""
        return LossWeights(self.lambda_cls, self.lambda_coord,
                           self.lambda_char / 2.0, self.lambda_giou,
                           self.average_by_instances)


def _matched_mask(assignment: MatchAssignment, n_queries: int):
    if assignment.n_matched and assignment.gt_to_query.max() >= n_queries:
        raise IndexError("assignment references a query index out of range")
    mask = np.zeros(n_queries)
    mask[assignment.gt_to_query] = 1.0
    return mask


def focal_instance_loss(scores: Tensor, assignment: MatchAssignment,
                        alpha: float = FOCAL_ALPHA,
                        gamma: float = FOCAL_GAMMA) -> Tensor:
    """Focal confidence loss summed over all queries.

    Matched queries contribute -alpha*(1-b)^gamma*log(b); unmatched ones
    -(1-alpha)*b^gamma*log(1-b).
    """
    if scores.ndim != 1:
        raise ValueError(f"scores must be [Q], got {scores.shape}")
    mask = _matched_mask(assignment, scores.shape[0])
    b = ops.clamp(scores, PROB_EPS, 1.0 - PROB_EPS)
    pos = (1.0 - b) ** gamma * ops.log(b) * (-alpha)
    neg = b ** gamma * ops.log(1.0 - b) * (alpha - 1.0)
    return ops.tsum(pos * mask + neg * (1.0 - mask))


def control_point_loss(gt_points, pred_points: Tensor,
                       assignment: MatchAssignment) -> Tensor:
    """L1 regression over matched queries' control points; unmatched free."""
    gt = np.asarray(gt_points, dtype=np.float64)
    if gt.shape[0] != assignment.n_matched:
        raise ValueError("one ground-truth row per matched instance expected")
    if assignment.n_matched == 0:
        return Tensor(np.zeros((), dtype=pred_points.data.dtype), dtype=pred_points.dtype)
    if gt.shape[1:] != pred_points.shape[1:]:
        raise ValueError(
            f"control point layouts differ: gt {gt.shape} vs pred {pred_points.shape}")
    matched = ops.gather(pred_points, assignment.gt_to_query, axis=0)
    return ops.tsum(ops.absolute(matched - gt.astype(pred_points.data.dtype)))


def char_ce_loss(targets, logits: Tensor, assignment: MatchAssignment) -> Tensor:
    """Cross entropy over the M character slots of matched queries.

    ``targets`` is [G, M] integer class indices (PAD is a real class);
    ``logits`` is [Q, M, V].
    """
    tgt = np.asarray(targets)
    if logits.ndim != 3:
        raise ValueError(f"logits must be [Q, M, V], got {logits.shape}")
    if assignment.n_matched == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype), dtype=logits.dtype)
    n_classes = logits.shape[2]
    if tgt.min() < 0 or tgt.max() >= n_classes:
        raise ValueError(f"target index outside 0..{n_classes - 1}")
    if tgt.shape[1] != logits.shape[1]:
        raise ValueError(f"target length {tgt.shape[1]} != slots {logits.shape[1]}")
    matched = ops.gather(logits, assignment.gt_to_query, axis=0)
    logp = ops.log_softmax(matched, axis=-1)
    onehot = np.zeros(matched.shape, dtype=logits.data.dtype)
    g_idx, m_idx = np.meshgrid(np.arange(tgt.shape[0]), np.arange(tgt.shape[1]),
                               indexing="ij")
    onehot[g_idx, m_idx, tgt] = 1.0
    return -ops.tsum(logp * onehot)


def _corners(boxes: Tensor):
    cx, cy = boxes[:, 0], boxes[:, 1]
    hw, hh = boxes[:, 2] * 0.5, boxes[:, 3] * 0.5
    return cx - hw, cy - hh, cx + hw, cy + hh


def giou_pairs(gt_boxes, pred_boxes: Tensor) -> Tensor:
    """Differentiable gIoU of aligned box pairs (cxcywh), shape [G]."""
    gt = np.asarray(gt_boxes, dtype=np.float64)
    if (gt[:, 2:] <= 0).any():
        raise ValueError("degenerate ground-truth box")
    gt_t = Tensor(gt.astype(pred_boxes.data.dtype), dtype=pred_boxes.dtype)
    ax0, ay0, ax1, ay1 = _corners(gt_t)
    bx0, by0, bx1, by1 = _corners(pred_boxes)
    iw = ops.relu(ops.minimum(ax1, bx1) - ops.maximum(ax0, bx0))
    ih = ops.relu(ops.minimum(ay1, by1) - ops.maximum(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    ew = ops.maximum(ax1, bx1) - ops.minimum(ax0, bx0)
    eh = ops.maximum(ay1, by1) - ops.minimum(ay0, by0)
    enclosing = ew * eh
    return inter / union - (enclosing - union) / enclosing


def giou_loss(gt_boxes, pred_boxes: Tensor, assignment: MatchAssignment) -> Tensor:
    """Sum of (1 - gIoU) over matched box pairs; each term in [0, 2)."""
    if assignment.n_matched == 0:
        return Tensor(np.zeros((), dtype=pred_boxes.data.dtype), dtype=pred_boxes.dtype)
    matched = ops.gather(pred_boxes, assignment.gt_to_query, axis=0)
    return ops.tsum(1.0 - giou_pairs(gt_boxes, matched))


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict = field(default_factory=dict)

    def scalar_parts(self):
        return {k: float(v) for k, v in self.parts.items()}


def decoder_loss(gt_points, char_targets, scores: Tensor, pred_points: Tensor,
                 char_logits: Tensor, assignment: MatchAssignment,
                 weights: LossWeights) -> LossBreakdown:
    """lambda_cls * L_cls + lambda_coord * L_coord + lambda_char * L_char."""
    l_cls = focal_instance_loss(scores, assignment)
    l_coord = control_point_loss(gt_points, pred_points, assignment)
    l_char = char_ce_loss(char_targets, char_logits, assignment)
    total = (weights.lambda_cls * l_cls + weights.lambda_coord * l_coord
             + weights.lambda_char * l_char)
    if weights.average_by_instances and assignment.n_matched:
        total = total * (1.0 / assignment.n_matched)
    return LossBreakdown(total, {
        "dec_cls": l_cls.item(), "dec_coord": l_coord.item(),
        "dec_char": l_char.item(),
    })


def encoder_loss(gt_boxes, proposal_scores: Tensor, proposal_boxes: Tensor,
                 assignment: MatchAssignment, weights: LossWeights) -> LossBreakdown:
    """Intermediate supervision on proposals with gIoU box regression.

    The coordinate term is the L1 distance between the two corner points
    of each matched box pair.
    """
    l_cls = focal_instance_loss(proposal_scores, assignment)
    gt = np.asarray(gt_boxes, dtype=np.float64)
    if assignment.n_matched == 0:
        zero = Tensor(np.zeros((), dtype=proposal_boxes.data.dtype),
                      dtype=proposal_boxes.dtype)
        l_coord, l_giou = zero, zero
    else:
        matched = ops.gather(proposal_boxes, assignment.gt_to_query, axis=0)
        mx0, my0, mx1, my1 = _corners(matched)
        pred_corners = ops.stack([mx0, my0, mx1, my1], axis=1)
        half = gt[:, 2:] / 2
        gt_corners = np.concatenate([gt[:, :2] - half, gt[:, :2] + half], axis=1)
        l_coord = ops.tsum(ops.absolute(
            pred_corners - gt_corners.astype(proposal_boxes.data.dtype)))
        l_giou = ops.tsum(1.0 - giou_pairs(gt, matched))
    total = (weights.lambda_cls * l_cls + weights.lambda_coord * l_coord
             + weights.lambda_giou * l_giou)
    if weights.average_by_instances and assignment.n_matched:
        total = total * (1.0 / assignment.n_matched)
    return LossBreakdown(total, {
        "enc_cls": l_cls.item(), "enc_coord": l_coord.item(),
        "enc_giou": l_giou.item(),
    })
