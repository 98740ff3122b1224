"""Training objectives: soft counting, attribute, partial-constraint, and
set-matching reconstruction losses, plus their weighted total.

All losses return scalar Nodes on the tape of their inputs so gradients
flow back to the generator parameters. Category counts are made
differentiable by a sharpened softmax: with sharpness eps, the count of
category c over Q queries is sum_q exp(eps * z_qc) / sum_k exp(eps * z_qk),
which approaches the argmax count as eps grows (eps = 100 by default).

Partial-constraint losses are per-sample sums of absolute deviations over
the constrained slots (the trainer averages over the batch); this makes the
masked loss a term-subset of the plain one, hence never larger.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matching, numerics as nd
from .constraints import AttributeConstraint, PartialLayout, RandomMask
from .core import BOX_SLOTS, CAT_SLOTS, Category, Layout, flatten
from .errors import ShapeError, UnspecifiedAttributeError
from .numerics import Node

EPSILON_SHARPNESS = 100.0


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0    # attribute-consistent weight
    gamma: float = 0.1   # attribute-disentangled weight
    eta: float = 1.0     # masked partial-constraint weight
    epsilon_sharpness: float = EPSILON_SHARPNESS

    def __post_init__(self):
        if min(self.beta, self.gamma, self.eta) < 0.0 or self.epsilon_sharpness <= 0.0:
            raise ValueError("loss weights must be nonnegative, sharpness positive")


def _check_logits(logits: Node) -> int:
    if logits.value.ndim != 2 or logits.value.shape[1] != 5:
        raise ShapeError(f"logits must be (Q, 5), got {logits.value.shape}")
    return logits.value.shape[0]


def soft_count(logits: Node, category: Category, eps: float = EPSILON_SHARPNESS) -> Node:
    """Differentiable count of queries predicting the given category."""
    _check_logits(logits)
    p = nd.softmax_over_last_axis(logits * eps)
    onehot = np.zeros((1, 5))
    onehot[0, category] = 1.0
    return nd.sum(p * onehot)


def attribute_consistent_loss(
    logits: Node, attr: AttributeConstraint, eps: float = EPSILON_SHARPNESS
) -> Node:
    """Hinge pushing the soft count of the attribute category above one."""
    if not attr.is_specified:
        raise UnspecifiedAttributeError("attribute-consistent loss needs a concrete attribute")
    n_a = soft_count(logits, attr.attribute_category, eps)
    return nd.max_with_scalar(1.0 - n_a, 0.0)


def attribute_disentangled_loss(
    logits: Node, attr: AttributeConstraint, eps: float = EPSILON_SHARPNESS
) -> Node:
    """Sum of soft counts over the undesired categories (zero if none)."""
    if not attr.is_specified:
        raise UnspecifiedAttributeError("attribute-disentangled loss needs a concrete attribute")
    _check_logits(logits)
    if not attr.undesired:
        return logits.tape.constant(0.0)
    p = nd.softmax_over_last_axis(logits * eps)
    multihot = np.zeros((1, 5))
    for cat in attr.undesired:
        multihot[0, cat] = 1.0
    return nd.sum(p * multihot)


def flatten_predictions(probs: Node, boxes: Node) -> Node:
    """Assemble the (Q, 9) flat prediction: probabilities then box coords."""
    q = probs.value.shape[0]
    if probs.value.shape != (q, 5) or boxes.value.shape != (q, 4):
        raise ShapeError(
            f"expected probs (Q,5) and boxes (Q,4), got {probs.value.shape}, {boxes.value.shape}"
        )
    place_cat = np.zeros((5, 9))
    place_cat[:, :5] = np.eye(5)
    place_box = np.zeros((4, 9))
    place_box[:, 5:] = np.eye(4)
    return probs @ place_cat + boxes @ place_box


def partial_loss(pred_flat: Node, pl: PartialLayout) -> Node:
    """Sum of absolute deviations over the constrained slots."""
    if pred_flat.value.shape != pl.entries.shape:
        raise ShapeError(
            f"prediction shape {pred_flat.value.shape} does not match "
            f"partial layout {pl.entries.shape}"
        )
    mask = pl.presence.astype(np.float64)
    return nd.sum(nd.abs(pred_flat - pl.entries) * mask)


def masked_partial_loss(pred_flat: Node, pl: PartialLayout, mask: RandomMask) -> Node:
    """partial_loss restricted to the slots the random mask keeps."""
    if pred_flat.value.shape != pl.entries.shape:
        raise ShapeError(
            f"prediction shape {pred_flat.value.shape} does not match "
            f"partial layout {pl.entries.shape}"
        )
    if mask.mask.shape != pl.presence.shape:
        raise ShapeError("mask shape does not match partial layout")
    keep = pl.presence.astype(np.float64) * mask.mask
    return nd.sum(nd.abs(pred_flat - pl.entries) * keep)


def reconstruction_loss(
    probs: Node,
    boxes: Node,
    gt: Layout,
    lam_box: float = matching.LAMBDA_BOX,
) -> Node:
    """Set-matching reconstruction against a padded ground-truth layout.

    Queries are matched to targets by minimum cost; the loss is the mean
    negative log probability of each query's matched category plus lam_box
    times the mean L1 box distance over queries matched to real elements.
    The assignment itself is treated as a constant.
    """
    q = probs.value.shape[0]
    gt_flat = flatten(gt, q)
    cost = matching.build_cost(probs.value, boxes.value, gt_flat)
    assign = matching.hungarian(cost)
    t_cat = np.argmax(gt_flat[:, CAT_SLOTS], axis=1)

    target_onehot = np.zeros((q, 5))
    box_targets = np.zeros((q, 4))
    box_mask = np.zeros((q, 4))
    n_real = 0
    for query, t in enumerate(assign):
        target_onehot[query, t_cat[t]] = 1.0
        if t_cat[t] != Category.NONE:
            box_targets[query] = gt_flat[t, BOX_SLOTS]
            box_mask[query] = 1.0
            n_real += 1

    matched_p = (probs * target_onehot) @ np.ones((5, 1))
    ce = nd.sum(nd.log(matched_p)) * (-1.0 / q)
    if n_real == 0:
        return ce
    l1 = nd.sum(nd.abs(boxes - box_targets) * box_mask) * (1.0 / n_real)
    return ce + l1 * lam_box


def total_loss(
    l_rec: Node,
    l_ac: Node | None = None,
    l_ad: Node | None = None,
    l_plrm: Node | None = None,
    weights: LossWeights = LossWeights(),
) -> Node:
    """Weighted sum of the loss parts; absent parts contribute zero."""
    total = l_rec
    if l_ac is not None and weights.beta != 0.0:
        total = total + l_ac * weights.beta
    if l_ad is not None and weights.gamma != 0.0:
        total = total + l_ad * weights.gamma
    if l_plrm is not None and weights.eta != 0.0:
        total = total + l_plrm * weights.eta
    return total


def loss_report(
    l_rec: float,
    l_ac: float = 0.0,
    l_ad: float = 0.0,
    l_plrm: float = 0.0,
    weights: LossWeights = LossWeights(),
) -> dict:
    """The JSON-ready loss report emitted by the CLI and the trainer."""
    total = l_rec + weights.beta * l_ac + weights.gamma * l_ad + weights.eta * l_plrm
    return {
        "l_rec": float(l_rec),
        "l_ac": float(l_ac),
        "l_ad": float(l_ad),
        "l_plrm": float(l_plrm),
        "total": float(total),
    }
