"""Optimal bipartite assignment between ground truth and predictions.

The matching cost mixes a focal-derived confidence term FL' with the L1
deviation of the control point coordinates; the encoder variant matches
proposal boxes against control-point bounding boxes and adds a
(1 - gIoU) term mirroring the encoder loss. Assignments are solved
exactly; among equal-cost optima the result is the lexicographically
smallest (ground-truth index 0 takes the lowest-index optimal column,
then index 1, and so on).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
LAMBDA_CLS = 2.0
LAMBDA_COORD = 5.0
LAMBDA_GIOU = 2.0
PROB_EPS = 1e-6


@dataclass(frozen=True)
class MatchAssignment:
    """Injective map sigma from ground-truth indices to query indices."""

    gt_to_query: np.ndarray
    total_cost: float

    def __post_init__(self):
        sigma = np.asarray(self.gt_to_query, dtype=np.int64)
        if sigma.size != np.unique(sigma).size:
            raise ValueError("assignment is not injective")
        object.__setattr__(self, "gt_to_query", sigma)

    @property
    def n_matched(self):
        return self.gt_to_query.size

    def matched_queries(self):
        return set(int(j) for j in self.gt_to_query)


def _solve(cost):
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()), cols


def hungarian(cost) -> MatchAssignment:
    """Globally optimal injective assignment for a G x Q cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    g, q = cost.shape
    if g > q:
        raise ValueError(f"more ground-truth rows ({g}) than query columns ({q})")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    if g == 0:
        return MatchAssignment(np.empty(0, dtype=np.int64), 0.0)

    sigma = np.empty(g, dtype=np.int64)
    free = np.ones(q, dtype=bool)
    total = 0.0
    for i in range(g):
        cols = np.flatnonzero(free)
        sub = cost[i:, cols]
        best, assigned = _solve(sub)
        base_col = cols[assigned[0]]
        tol = 1e-9 * max(1.0, abs(best))
        chosen = base_col
        for j in cols:
            if j >= base_col:
                break
            if i + 1 == g:
                rest = 0.0
            else:
                rest_cols = cols[cols != j]
                rest, _ = _solve(cost[i + 1:, rest_cols])
            if cost[i, j] + rest <= best + tol:
                chosen = j
                break
        sigma[i] = chosen
        free[chosen] = False
        total += cost[i, chosen]
    return MatchAssignment(sigma, float(total))


def fl_prime(b_hat, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA):
    """Focal matching cost: positive term minus negative term.

    FL'(x) = -alpha * (1-x)^gamma * log(x) + (1-alpha) * x^gamma * log(1-x),
    with x clamped to [PROB_EPS, 1-PROB_EPS]. Monotonically decreasing.
    """
    x = np.clip(np.asarray(b_hat, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    pos = -alpha * (1.0 - x) ** gamma * np.log(x)
    neg = (1.0 - alpha) * x ** gamma * np.log1p(-x)
    return pos + neg


def build_decoder_cost(gt_points, pred_scores, pred_points,
                       lambda_cls: float = LAMBDA_CLS,
                       lambda_coord: float = LAMBDA_COORD,
                       mean_coords: bool = False):
    """C[i, j] = lambda_cls * FL'(b_j) + lambda_coord * sum_k |p_ik - p_jk|_1.

    gt_points: [G, N, 2]; pred_scores: [Q]; pred_points: [Q, N, 2], all in
    the same normalized frame. ``mean_coords`` averages the coordinate
    term over N instead of the plain sum.
    """
    gt = np.asarray(gt_points, dtype=np.float64)
    pred = np.asarray(pred_points, dtype=np.float64)
    scores = np.asarray(pred_scores, dtype=np.float64)
    if gt.ndim != 3 or pred.ndim != 3 or gt.shape[1:] != pred.shape[1:]:
        raise ValueError(
            f"control point layouts differ: gt {gt.shape} vs pred {pred.shape}")
    l1 = np.abs(gt[:, None] - pred[None, :]).sum(axis=(2, 3))
    if mean_coords:
        l1 = l1 / gt.shape[1]
    return lambda_cls * fl_prime(scores)[None, :] + lambda_coord * l1


def _boxes_to_corners(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    half = b[:, 2:] / 2
    return np.concatenate([b[:, :2] - half, b[:, :2] + half], axis=1)


def pairwise_giou(boxes_a, boxes_b):
    """gIoU matrix [A, B] for boxes in cxcywh form."""
    ca = _boxes_to_corners(boxes_a)
    cb = _boxes_to_corners(boxes_b)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    lo = np.maximum(ca[:, None, :2], cb[None, :, :2])
    hi = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    inter = np.clip(hi - lo, 0.0, None).prod(axis=2)
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union
    elo = np.minimum(ca[:, None, :2], cb[None, :, :2])
    ehi = np.maximum(ca[:, None, 2:], cb[None, :, 2:])
    enclosing = (ehi - elo).prod(axis=2)
    return iou - (enclosing - union) / enclosing


def build_encoder_cost(gt_boxes, proposal_scores, proposal_boxes,
                       lambda_cls: float = LAMBDA_CLS,
                       lambda_coord: float = LAMBDA_COORD,
                       lambda_giou: float = LAMBDA_GIOU):
    """Decoder-style cost on box corner points plus a (1 - gIoU) term.

    gt_boxes are the control-point bounding boxes, cxcywh normalized.
    """
    gt = np.asarray(gt_boxes, dtype=np.float64)
    prop = np.asarray(proposal_boxes, dtype=np.float64)
    if gt.ndim != 2 or gt.shape[1] != 4 or prop.ndim != 2 or prop.shape[1] != 4:
        raise ValueError(
            f"boxes must be [*, 4] cxcywh: gt {gt.shape}, proposals {prop.shape}")
    gt_corners = _boxes_to_corners(gt)
    prop_corners = _boxes_to_corners(prop)
    l1 = np.abs(gt_corners[:, None] - prop_corners[None, :]).sum(axis=2)
    scores = np.asarray(proposal_scores, dtype=np.float64)
    cls = fl_prime(scores)[None, :]
    return (lambda_cls * cls + lambda_coord * l1
            + lambda_giou * (1.0 - pairwise_giou(gt, prop)))
