"""Set-prediction training objective: Hungarian matching plus box, focal
classification and keypoint (L1 + OKS) terms.

Every loss works on torch tensors so it can be differentiated; plain arrays
and floats are accepted and give float results.
"""
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .structures import NUM_KEYPOINTS

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    mu: float = 5.0
    beta: float = 2.0
    lambda_c: float = 2.0
    omega: float = 10.0
    theta: float = 4.0
    alpha: float = 0.25
    gamma: float = 2.0
    # use alpha for positives and 1 - alpha for negatives instead of a constant alpha
    alpha_t: bool = False

    def __post_init__(self):
        for name in ("mu", "beta", "lambda_c", "omega", "theta", "alpha", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class OksConstants:
    k: tuple = field(default=(0.079,) * NUM_KEYPOINTS)
    squared: bool = False

    def __post_init__(self):
        if len(self.k) != NUM_KEYPOINTS or any(v <= 0 for v in self.k):
            raise ValueError(f"need {NUM_KEYPOINTS} positive falloff constants")


@dataclass
class Assignment:
    pairs: list
    unmatched: list

    @property
    def pred_indices(self):
        return [p for p, _ in self.pairs]

    @property
    def gt_indices(self):
        return [g for _, g in self.pairs]


def _t(x):
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def _out(value, as_tensor):
    return value if as_tensor else float(value)


def cxcywh_to_xyxy(b):
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def _giou_t(a, b):
    """GIoU for broadcastable (..., 4) xyxy tensors."""
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    lt_c = torch.minimum(a[..., :2], b[..., :2])
    rb_c = torch.maximum(a[..., 2:], b[..., 2:])
    area_c = (rb_c - lt_c).prod(-1)
    return inter / union - (area_c - union) / area_c


def giou(a, b):
    """Generalised IoU of two (x0, y0, x1, y1) boxes."""
    ta, is_t = _t(a)
    tb, _ = _t(b)
    for box in (ta, tb):
        if torch.any(box[..., 2] <= box[..., 0]) or torch.any(box[..., 3] <= box[..., 1]):
            raise ValueError("degenerate box: width and height must be positive")
    return _out(_giou_t(ta, tb), is_t)


def box_loss(pred, gt, w=LossWeights()):
    """``mu * L1 + beta * (1 - GIoU)`` for (cx, cy, w, h) boxes."""
    tp, is_t = _t(pred)
    tg, _ = _t(gt)
    if torch.any(tp[..., 2:] <= 0) or torch.any(tg[..., 2:] <= 0):
        raise ValueError("degenerate box: width and height must be positive")
    l1 = (tp - tg).abs().sum(-1)
    g = _giou_t(cxcywh_to_xyxy(tp), cxcywh_to_xyxy(tg))
    return _out(w.mu * l1 + w.beta * (1 - g), is_t)


def _focal_t(p, positive, w):
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    p_t = torch.where(positive, p, 1 - p)
    alpha = w.alpha
    if w.alpha_t:
        alpha = torch.where(positive, torch.full_like(p, w.alpha), torch.full_like(p, 1 - w.alpha))
    return -w.lambda_c * alpha * (1 - p_t) ** w.gamma * torch.log(p_t)


def focal_loss(p, y, w=LossWeights()):
    """Focal classification loss for probability ``p`` and label ``y`` in {+1, -1}."""
    tp, is_t = _t(p)
    positive = torch.as_tensor(np.asarray(y) == 1) if not isinstance(y, torch.Tensor) else y == 1
    return _out(_focal_t(tp, positive, w), is_t)


def _kp_dist(P, P_hat, squared):
    diff = P - P_hat
    return (diff**2).sum(-1) if squared else diff.abs().sum(-1)


def _oks_t(P, P_hat, vis, s, k, squared):
    mask = (vis > 0).to(P.dtype)
    d = _kp_dist(P, P_hat, squared)
    k = torch.as_tensor(k, dtype=P.dtype)
    sim = torch.exp(-d / (2 * s[..., None] ** 2 * k**2))
    return (sim * mask).sum(-1) / mask.sum(-1)


def oks_similarity(P, P_hat, v, s, k=OksConstants()):
    """Mean over visible keypoints of ``exp(-d_i / (2 s^2 k_i^2))``.

    ``d_i`` is the L1 keypoint distance (squared Euclidean when
    ``k.squared``); ``s`` is the object scale.
    """
    tP, is_t = _t(P)
    tPh, _ = _t(P_hat)
    tv = torch.as_tensor(np.asarray(v)) if not isinstance(v, torch.Tensor) else v
    ts, _ = _t(s)
    if torch.any((tv > 0).sum(-1) == 0):
        raise ValueError("oks_similarity: no visible keypoints")
    if torch.any(ts <= 0):
        raise ValueError("oks_similarity: object scale must be positive")
    return _out(_oks_t(tP, tPh, tv, ts, k.k, k.squared), is_t)


def _kp_loss_t(P, P_hat, vis, s, w, k):
    mask = (vis > 0).to(P.dtype)
    n_vis = mask.sum(-1)
    l1 = ((P - P_hat).abs().sum(-1) * mask).sum(-1) / n_vis
    return w.omega * l1 + w.theta * (1 - _oks_t(P, P_hat, vis, s, k.k, k.squared))


def keypoint_loss(P, P_hat, v, s, w=LossWeights(), k=OksConstants()):
    """``omega * L1(visible) + theta * (1 - OKS)``."""
    tP, is_t = _t(P)
    tPh, _ = _t(P_hat)
    tv = torch.as_tensor(np.asarray(v)) if not isinstance(v, torch.Tensor) else v
    ts, _ = _t(s)
    if torch.any((tv > 0).sum(-1) == 0):
        raise ValueError("keypoint_loss: no visible keypoints")
    return _out(_kp_loss_t(tP, tPh, tv, ts, w, k), is_t)


def _optimal_value(cost, rows, cols):
    if not rows or not cols:
        return 0.0
    sub = cost[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub)
    return float(sub[r, c].sum())


def hungarian_match(cost, tol=1e-9):
    """Minimum-cost assignment of rows (predictions) to columns (ground truth).

    Among optimal assignments the lexicographically smallest (row, col) pair
    list is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n_rows, n_cols = cost.shape
    if n_rows == 0 or n_cols == 0:
        return Assignment([], list(range(n_rows)))
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    target = min(n_rows, n_cols)
    best = _optimal_value(cost, list(range(n_rows)), list(range(n_cols)))
    slack = tol * max(1.0, abs(best))
    pairs, acc = [], 0.0
    free = list(range(n_cols))
    for r in range(n_rows):
        need = target - len(pairs)
        if need == 0:
            break
        rest = list(range(r + 1, n_rows))
        for c in free:
            others = [x for x in free if x != c]
            if min(len(rest), len(others)) < need - 1:
                continue
            if acc + cost[r, c] + _optimal_value(cost, rest, others) <= best + slack:
                pairs.append((r, c))
                acc += cost[r, c]
                free = others
                break
    matched = {p for p, _ in pairs}
    return Assignment(pairs, [i for i in range(n_rows) if i not in matched])


def _scale(boxes):
    return torch.sqrt(boxes[..., 2] * boxes[..., 3])


def pairwise_cost(p, boxes, kps, gt_boxes, gt_kps, gt_vis, w=LossWeights(), k=OksConstants()):
    """(Q, G) matching cost: positive focal + box loss + keypoint loss."""
    Q, G = boxes.shape[0], gt_boxes.shape[0]
    cls = _focal_t(p, torch.ones_like(p, dtype=torch.bool), w)[:, None].expand(Q, G)
    l1 = (boxes[:, None, :] - gt_boxes[None, :, :]).abs().sum(-1)
    g = _giou_t(cxcywh_to_xyxy(boxes)[:, None, :], cxcywh_to_xyxy(gt_boxes)[None, :, :])
    box = w.mu * l1 + w.beta * (1 - g)
    kp = _kp_loss_t(gt_kps[None], kps[:, None], gt_vis[None], _scale(gt_boxes)[None], w, k)
    return cls + box + kp


def match_cost(pred, gt, w=LossWeights(), k=OksConstants()):
    """Matching cost between one predicted and one ground-truth PoseInstance."""
    t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))[None]
    c = pairwise_cost(t(pred.score)[0:1].reshape(1), t(pred.box), t(pred.keypoints),
                      t(gt.box), t(gt.keypoints),
                      torch.as_tensor(gt.visibility)[None], w, k)
    return float(c[0, 0])


def set_loss(p, boxes, kps, gt_boxes, gt_kps, gt_vis, w=LossWeights(), k=OksConstants()):
    """Hungarian-matched loss for one image.

    ``p`` (Q,) probabilities, ``boxes`` (Q, 4), ``kps`` (Q, K, 2); ground truth
    (G, 4), (G, K, 2), (G, K). Ground-truth instances without visible
    keypoints contribute box and class terms only. Returns
    ``(total, {"L_h", "L_c", "L_k"}, Assignment)``; the assignment is held
    constant for differentiation.
    """
    Q = p.shape[0]
    G = gt_boxes.shape[0]
    if G:
        with torch.no_grad():
            has_kp = (gt_vis > 0).any(-1)
            safe_vis = torch.where(has_kp[:, None], gt_vis, torch.ones_like(gt_vis))
            cost = pairwise_cost(p, boxes, kps, gt_boxes, gt_kps, safe_vis, w, k)
        assign = hungarian_match(cost.double().cpu().numpy())
    else:
        assign = Assignment([], list(range(Q)))
    positive = torch.zeros(Q, dtype=torch.bool)
    zero = p.sum() * 0
    l_h = l_k = zero
    if assign.pairs:
        pi = torch.as_tensor(assign.pred_indices)
        gi = torch.as_tensor(assign.gt_indices)
        positive[pi] = True
        l1 = (boxes[pi] - gt_boxes[gi]).abs().sum(-1)
        g = _giou_t(cxcywh_to_xyxy(boxes[pi]), cxcywh_to_xyxy(gt_boxes[gi]))
        l_h = (w.mu * l1 + w.beta * (1 - g)).sum()
        has_kp = (gt_vis[gi] > 0).any(-1)
        if has_kp.any():
            l_k = _kp_loss_t(gt_kps[gi][has_kp], kps[pi][has_kp], gt_vis[gi][has_kp],
                             _scale(gt_boxes[gi][has_kp]), w, k).sum()
    l_c = _focal_t(p, positive, w).sum()
    total = l_h + l_c + l_k
    return total, {"L_h": l_h, "L_c": l_c, "L_k": l_k}, assign


def _stack_instances(instances, with_vis):
    boxes = torch.as_tensor(np.array([i.box for i in instances]).reshape(-1, 4))
    kps = torch.as_tensor(np.array([i.keypoints for i in instances]).reshape(-1, NUM_KEYPOINTS, 2))
    if not with_vis:
        return boxes, kps
    vis = torch.as_tensor(np.array([i.visibility for i in instances]).reshape(-1, NUM_KEYPOINTS))
    return boxes, kps, vis


def total_loss(preds, gts, w=LossWeights(), k=OksConstants()):
    """``L = L_h + L_c + L_k`` between lists of PoseInstance.

    Returns ``(total, breakdown)`` with floats; breakdown also carries
    ``matched_count``.
    """
    p = torch.as_tensor(np.array([i.score for i in preds], dtype=np.float64))
    boxes, kps = _stack_instances(preds, with_vis=False)
    gt_boxes, gt_kps, gt_vis = _stack_instances(gts, with_vis=True)
    total, parts, assign = set_loss(p, boxes, kps, gt_boxes, gt_kps, gt_vis, w, k)
    breakdown = {name: float(v) for name, v in parts.items()}
    breakdown["matched_count"] = len(assign.pairs)
    return float(total), breakdown
