"""Bipartite matching and the training loss stack.

The overall objective is (L_2D + L_3D + L_enc summed over objects and
decoder layers) / max(N_gt, 1) + L_dmap. Classification terms are
IoU-aware: a matched slot's target score is its 2D IoU with the matched
ground truth (quality-focal form), unmatched slots regress toward zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .depth import depth_to_bin
from .geometry import CameraCalib, project_center
from .kitti_io import Annotation
from .model import ForwardResult

PROB_EPS = 1e-7
FOCAL_GAMMA = 2.0
DMAP_ALPHA = 0.25
SQRT2 = math.sqrt(2.0)


class MatchError(ValueError):
    pass


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (prediction index, ground-truth index)
    unmatched_predictions: list[int]


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-total-cost assignment over a [n_pred, n_gt] cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchError(f"cost must be a matrix, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise MatchError("cost matrix contains NaN")
    if cost.size == 0:
        return MatchResult(pairs=[], unmatched_predictions=list(range(cost.shape[0])))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    used = {r for r, _ in pairs}
    unmatched = [i for i in range(cost.shape[0]) if i not in used]
    return MatchResult(pairs=pairs, unmatched_predictions=unmatched)


@dataclass
class ImageGroundTruth:
    """Per-image regression targets in normalized image coordinates."""

    box6: np.ndarray  # [G, 6]
    class_idx: np.ndarray  # [G]
    depth: np.ndarray  # [G] meters
    dims: np.ndarray  # [G, 3] (h, w, l)
    angle: np.ndarray  # [G, 2] (sin, cos)
    bins: np.ndarray  # [G] depth-map bin per object

    @property
    def count(self) -> int:
        return len(self.class_idx)


def ground_truth_from_annotation(
    ann: Annotation,
    calib: CameraCalib,
    categories: Sequence[str],
    bin_edges: np.ndarray,
) -> ImageGroundTruth:
    cat_index = {c: i for i, c in enumerate(categories)}
    w_img, h_img = calib.image_size
    rows, cls, depth, dims, angle, bins = [], [], [], [], [], []
    for obj in ann.objects:
        if obj.category not in cat_index:
            continue
        x_c, y_c = project_center(obj.box3d, calib)
        b = obj.box2d
        rows.append(
            np.clip(
                [
                    x_c / w_img,
                    y_c / h_img,
                    (b.x_min + b.x_max) / 2 / w_img,
                    (b.y_min + b.y_max) / 2 / h_img,
                    (b.x_max - b.x_min) / w_img,
                    (b.y_max - b.y_min) / h_img,
                ],
                0.0,
                1.0,
            )
        )
        cls.append(cat_index[obj.category])
        depth.append(obj.box3d.location[2])
        dims.append(obj.box3d.dimensions)
        angle.append((math.sin(obj.box3d.yaw), math.cos(obj.box3d.yaw)))
        bins.append(depth_to_bin(obj.box3d.location[2], bin_edges))
    return ImageGroundTruth(
        box6=np.array(rows).reshape(-1, 6),
        class_idx=np.array(cls, dtype=np.int64),
        depth=np.array(depth, dtype=np.float64),
        dims=np.array(dims, dtype=np.float64).reshape(-1, 3),
        angle=np.array(angle, dtype=np.float64).reshape(-1, 2),
        bins=np.array(bins, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# geometric pieces


def cxcywh_to_xyxy(box: np.ndarray) -> np.ndarray:
    cx, cy, w, h = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def iou_2d_matrix(pred_cxcywh: np.ndarray, gt_cxcywh: np.ndarray) -> np.ndarray:
    """Pairwise axis-aligned IoU, [n_pred, n_gt]."""
    a = cxcywh_to_xyxy(pred_cxcywh)[:, None, :]
    b = cxcywh_to_xyxy(gt_cxcywh)[None, :, :]
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def _giou_matrix(pred_cxcywh: np.ndarray, gt_cxcywh: np.ndarray) -> np.ndarray:
    a = cxcywh_to_xyxy(pred_cxcywh)[:, None, :]
    b = cxcywh_to_xyxy(gt_cxcywh)[None, :, :]
    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)
    lt_h = np.minimum(a[..., :2], b[..., :2])
    rb_h = np.maximum(a[..., 2:], b[..., 2:])
    hull = np.clip(rb_h - lt_h, 0.0, None).prod(axis=-1) + 1e-12
    return iou - (hull - union) / hull


def box6_to_xyxy(box6: Tensor) -> Tensor:
    """Differentiable cxcywh -> xyxy of the 2D part of six-vectors [..., 6]."""
    cx, cy = box6[..., 2], box6[..., 3]
    hw, hh = ad.mul(box6[..., 4], 0.5), ad.mul(box6[..., 5], 0.5)
    parts = [
        ad.add(cx, ad.mul(hw, -1.0)),
        ad.add(cy, ad.mul(hh, -1.0)),
        ad.add(cx, hw),
        ad.add(cy, hh),
    ]
    return ad.concat([p.reshape(p.shape + (1,)) for p in parts], axis=-1)


def giou_pairs(pred_xyxy: Tensor, gt_xyxy: np.ndarray) -> Tensor:
    """Differentiable GIoU of matched box pairs, [M]."""
    gt = Tensor(gt_xyxy)
    lt = ad.maximum(pred_xyxy[..., 0:2], gt[..., 0:2])
    rb = ad.minimum(pred_xyxy[..., 2:4], gt[..., 2:4])
    wh = ad.maximum(ad.add(rb, ad.mul(lt, -1.0)), 0.0)
    inter = ad.mul(wh[..., 0], wh[..., 1])
    area_p = ad.mul(
        ad.add(pred_xyxy[..., 2], ad.mul(pred_xyxy[..., 0], -1.0)),
        ad.add(pred_xyxy[..., 3], ad.mul(pred_xyxy[..., 1], -1.0)),
    )
    area_g = (gt_xyxy[..., 2] - gt_xyxy[..., 0]) * (gt_xyxy[..., 3] - gt_xyxy[..., 1])
    union = ad.add(ad.add(area_p, area_g), ad.mul(inter, -1.0))
    iou = ad.div(inter, ad.add(union, 1e-12))
    lt_h = ad.minimum(pred_xyxy[..., 0:2], gt[..., 0:2])
    rb_h = ad.maximum(pred_xyxy[..., 2:4], gt[..., 2:4])
    wh_h = ad.maximum(ad.add(rb_h, ad.mul(lt_h, -1.0)), 0.0)
    hull = ad.add(ad.mul(wh_h[..., 0], wh_h[..., 1]), 1e-12)
    return ad.add(iou, ad.mul(ad.div(ad.add(hull, ad.mul(union, -1.0)), hull), -1.0))


# ---------------------------------------------------------------------------
# classification losses


def quality_focal(probs: Tensor, targets: np.ndarray, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Sum of -|t - p|^gamma (t log p + (1-t) log(1-p)) over all entries."""
    p = ad.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(targets, dtype=np.float64)
    gap = ad.power(ad.absolute(ad.add(p, -t)), gamma)
    ce = ad.add(ad.mul(ad.log(p), t), ad.mul(ad.log(ad.add(ad.mul(p, -1.0), 1.0)), 1.0 - t))
    return ad.mul(ad.tsum(ad.mul(gap, ce)), -1.0)


def quality_focal_value(p: np.ndarray, t: np.ndarray, gamma: float = FOCAL_GAMMA) -> np.ndarray:
    """Numpy twin of quality_focal for cost matrices (no gradients)."""
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -np.abs(t - p) ** gamma * (t * np.log(p) + (1.0 - t) * np.log(1.0 - p))


def focal_loss(
    probs: Tensor,
    targets: np.ndarray,
    alpha: float,
    gamma: float,
    background_class: int,
) -> Tensor:
    """Categorical focal loss with foreground-mean reduction.

    probs: [M, n_classes] rows summing to one; targets: [M] class indices.
    Each term is -w (1 - p_t)^gamma log(p_t) with w = alpha on foreground
    rows and (1 - alpha) on background rows; the sum is divided by the
    foreground count (at least 1).
    """
    targets = np.asarray(targets, dtype=np.int64)
    m = targets.shape[0]
    pt = ad.clip(probs[np.arange(m), targets], PROB_EPS, 1.0 - PROB_EPS)
    weights = np.where(targets == background_class, 1.0 - alpha, alpha)
    n_fg = max(int(np.count_nonzero(targets != background_class)), 1)
    terms = ad.mul(ad.mul(ad.power(ad.add(ad.mul(pt, -1.0), 1.0), gamma), ad.log(pt)), -1.0)
    return ad.mul(ad.tsum(ad.mul(terms, weights)), 1.0 / n_fg)


# ---------------------------------------------------------------------------
# per-image loss terms


def match_cost(
    pred_probs: np.ndarray,
    pred_box6: np.ndarray,
    gt: ImageGroundTruth,
    lambdas: tuple[float, float, float],
) -> np.ndarray:
    """[Q, G] matching cost: IoU-aware focal + L1 on the six-vector + GIoU."""
    lam_cls, lam_l1, lam_giou = lambdas
    iou = iou_2d_matrix(pred_box6[:, 2:6], gt.box6[:, 2:6])
    p_at_class = pred_probs[:, gt.class_idx]  # [Q, G]
    cls_cost = quality_focal_value(p_at_class, iou)
    l1_cost = np.abs(pred_box6[:, None, :] - gt.box6[None, :, :]).sum(axis=-1)
    giou = _giou_matrix(pred_box6[:, 2:6], gt.box6[:, 2:6])
    return lam_cls * cls_cost + lam_l1 * l1_cost + lam_giou * (1.0 - giou)


def loss_2d_image(
    class_probs: Tensor,  # [Q, n_classes]
    box6: Tensor,  # [Q, 6]
    gt: ImageGroundTruth,
    match: MatchResult,
    lambdas: tuple[float, float, float],
) -> Tensor:
    lam_cls, lam_l1, lam_giou = lambdas
    q, n_classes = class_probs.shape
    cls_targets = np.zeros((q, n_classes))
    if match.pairs:
        pred_idx = np.array([p for p, _ in match.pairs])
        gt_idx = np.array([g for _, g in match.pairs])
        iou = iou_2d_matrix(box6.data[:, 2:6], gt.box6[:, 2:6])[pred_idx, gt_idx]
        cls_targets[pred_idx, gt.class_idx[gt_idx]] = iou
        matched_box6 = ad.take(box6, pred_idx, axis=0)
        l1 = ad.tsum(ad.absolute(ad.add(matched_box6, -gt.box6[gt_idx])))
        giou = giou_pairs(box6_to_xyxy(matched_box6), cxcywh_to_xyxy(gt.box6[gt_idx, 2:6]))
        box_terms = ad.add(ad.mul(l1, lam_l1), ad.mul(ad.tsum(ad.add(ad.mul(giou, -1.0), 1.0)), lam_giou))
    else:
        box_terms = Tensor(0.0)
    cls = quality_focal(class_probs, cls_targets)
    return ad.add(box_terms, ad.mul(cls, lam_cls))


def loss_3d_image(
    depth_mu: Tensor,  # [Q]
    depth_log_sigma: Tensor,  # [Q]
    dims: Tensor,  # [Q, 3]
    angle: Tensor,  # [Q, 2]
    gt: ImageGroundTruth,
    match: MatchResult,
) -> Tensor:
    """Laplacian depth term |mu - d| exp(-s) sqrt(2) + s, plus L1 on
    dimensions and on the normalized (sin, cos) angle, summed over matches."""
    if not match.pairs:
        return Tensor(0.0)
    pred_idx = np.array([p for p, _ in match.pairs])
    gt_idx = np.array([g for _, g in match.pairs])
    mu = ad.take(depth_mu, pred_idx, axis=0)
    sig = ad.take(depth_log_sigma, pred_idx, axis=0)
    resid = ad.absolute(ad.add(mu, -gt.depth[gt_idx]))
    depth_term = ad.add(ad.mul(ad.mul(resid, ad.exp(ad.mul(sig, -1.0))), SQRT2), sig)
    dims_term = ad.absolute(ad.add(ad.take(dims, pred_idx, axis=0), -gt.dims[gt_idx]))
    angle_term = ad.absolute(ad.add(ad.take(angle, pred_idx, axis=0), -gt.angle[gt_idx]))
    return ad.add(ad.tsum(depth_term), ad.add(ad.tsum(dims_term), ad.tsum(angle_term)))


def loss_enc_image(
    anchor_vec6: Tensor,  # [Q, 6] initial anchors
    objectness: Tensor,  # [Q] logits
    gt: ImageGroundTruth,
    lambdas: tuple[float, float, float],
    box_from_encoder: bool,
    center_from_encoder: bool,
) -> Tensor:
    """Anchor supervision: class-agnostic IoU-aware focal on the objectness
    plus L1/GIoU on whichever six-vector components the encoder produced."""
    lam_cls, lam_l1, lam_giou = lambdas
    probs = ad.sigmoid(objectness)
    q = anchor_vec6.shape[0]
    if gt.count == 0:
        return ad.mul(quality_focal(probs, np.zeros(q)), lam_cls)
    iou_mat = iou_2d_matrix(anchor_vec6.data[:, 2:6], gt.box6[:, 2:6])
    obj_mat = np.broadcast_to(probs.data.reshape(q, 1), iou_mat.shape)
    l1_cost = np.abs(anchor_vec6.data[:, None, :] - gt.box6[None, :, :]).sum(axis=-1)
    giou_mat = _giou_matrix(anchor_vec6.data[:, 2:6], gt.box6[:, 2:6])
    cost = (
        lam_cls * quality_focal_value(obj_mat, iou_mat)
        + lam_l1 * l1_cost
        + lam_giou * (1.0 - giou_mat)
    )
    match = hungarian_match(cost)
    pred_idx = np.array([p for p, _ in match.pairs])
    gt_idx = np.array([g for _, g in match.pairs])

    iou = iou_2d_matrix(anchor_vec6.data[:, 2:6], gt.box6[:, 2:6])[pred_idx, gt_idx]
    cls_targets = np.zeros(q)
    cls_targets[pred_idx] = iou
    total = ad.mul(quality_focal(probs, cls_targets), lam_cls)

    matched = ad.take(anchor_vec6, pred_idx, axis=0)
    comps: list[int] = []
    if center_from_encoder:
        comps += [0, 1]
    if box_from_encoder:
        comps += [2, 3, 4, 5]
    if comps:
        sel = np.array(comps)
        l1 = ad.tsum(ad.absolute(ad.add(matched[:, sel], -gt.box6[gt_idx][:, sel])))
        total = ad.add(total, ad.mul(l1, lam_l1))
    if box_from_encoder:
        giou = giou_pairs(box6_to_xyxy(matched), cxcywh_to_xyxy(gt.box6[gt_idx, 2:6]))
        total = ad.add(total, ad.mul(ad.tsum(ad.add(ad.mul(giou, -1.0), 1.0)), lam_giou))
    return total


def build_depth_map_targets(
    gts: Sequence[ImageGroundTruth],
    grid_hw: tuple[int, int],
    background_class: int,
) -> np.ndarray:
    """[N, H, W] bin labels: pixels inside a projected 2D box carry that
    object's depth bin, nearest object winning on overlap; else background."""
    gh, gw = grid_hw
    targets = np.full((len(gts), gh, gw), background_class, dtype=np.int64)
    for i, gt in enumerate(gts):
        if gt.count == 0:
            continue
        order = np.argsort(-gt.depth)  # far first so near objects overwrite
        for j in order:
            cx, cy, w, h = gt.box6[j, 2:6]
            x0 = int(np.clip(np.floor((cx - w / 2) * gw), 0, gw))
            x1 = int(np.clip(np.ceil((cx + w / 2) * gw), 0, gw))
            y0 = int(np.clip(np.floor((cy - h / 2) * gh), 0, gh))
            y1 = int(np.clip(np.ceil((cy + h / 2) * gh), 0, gh))
            targets[i, y0:y1, x0:x1] = gt.bins[j]
    return targets


def loss_dmap(
    depth_map_logits: Tensor,  # [N, k+1, H, W]
    gts: Sequence[ImageGroundTruth],
    background_class: int,
    alpha: float = DMAP_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> Tensor:
    n, k1, gh, gw = depth_map_logits.shape
    targets = build_depth_map_targets(gts, (gh, gw), background_class)
    probs = ad.softmax(depth_map_logits, axis=1)
    flat = probs.transpose((0, 2, 3, 1)).reshape((n * gh * gw, k1))
    return focal_loss(flat, targets.reshape(-1), alpha, gamma, background_class)


# ---------------------------------------------------------------------------
# the full objective


@dataclass
class LossBreakdown:
    l_2d: float
    l_3d: float
    l_enc: float
    l_dmap: float
    overall: float
    n_gt: int
    total: Tensor  # differentiable overall loss

    def as_dict(self) -> dict[str, float]:
        return {
            "l_2d": self.l_2d,
            "l_3d": self.l_3d,
            "l_enc": self.l_enc,
            "l_dmap": self.l_dmap,
            "overall": self.overall,
        }


def dmap_weight(cfg: RunConfig) -> float:
    if cfg["depth.variant"] == "A":
        return cfg["train.lambda_dmap_a"]
    return cfg["train.lambda_dmap_e"]


def compute_loss(result: ForwardResult, gts: Sequence[ImageGroundTruth], cfg: RunConfig) -> LossBreakdown:
    lambdas = (cfg["train.lambda_cls"], cfg["train.lambda_l1"], cfg["train.lambda_giou"])
    n = len(gts)
    n_gt = sum(gt.count for gt in gts)
    denom = max(n_gt, 1)

    l_2d = Tensor(0.0)
    l_3d = Tensor(0.0)
    for pred in result.layer_predictions:  # deep supervision on every layer
        probs = ad.sigmoid(pred.class_logits)
        for i in range(n):
            gt = gts[i]
            if gt.count == 0:
                match = MatchResult(pairs=[], unmatched_predictions=list(range(pred.box6.shape[1])))
            else:
                cost = match_cost(probs.data[i], pred.box6.data[i], gt, lambdas)
                match = hungarian_match(cost)
            l_2d = ad.add(l_2d, loss_2d_image(probs[i], pred.box6[i], gt, match, lambdas))
            l_3d = ad.add(
                l_3d,
                loss_3d_image(
                    pred.depth_mu[i], pred.depth_log_sigma[i], pred.dims[i], pred.angle[i], gt, match
                ),
            )

    l_enc = Tensor(0.0)
    if result.enc_info.objectness is not None:
        vec6 = result.initial_queries.vec6()
        for i in range(n):
            l_enc = ad.add(
                l_enc,
                loss_enc_image(
                    vec6[i],
                    result.enc_info.objectness[i],
                    gts[i],
                    lambdas,
                    result.enc_info.box_from_encoder,
                    result.enc_info.center_from_encoder,
                ),
            )

    background = result.depth_map_logits.shape[1] - 1
    l_dmap = ad.mul(loss_dmap(result.depth_map_logits, gts, background), dmap_weight(cfg))

    per_object = ad.add(ad.add(l_2d, l_3d), l_enc)
    total = ad.add(ad.mul(per_object, 1.0 / denom), l_dmap)
    return LossBreakdown(
        l_2d=l_2d.item(),
        l_3d=l_3d.item(),
        l_enc=l_enc.item(),
        l_dmap=l_dmap.item(),
        overall=total.item(),
        n_gt=n_gt,
        total=total,
    )
