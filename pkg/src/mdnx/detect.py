"""Query anchor generation, the anchor-initialized decoder, and box decoding.

Each query carries a six-vector anchor [x_c, y_c, x, y, w, h] in normalized
image coordinates: the projected 3D center plus the 2D box. Anchors live in
logit space inside the decoder so a zero refinement delta leaves them
bit-identical; the sigmoid is applied when the values are consumed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Parameter, Tensor
from .config import RunConfig
from .depth import DepthMapHead, DepthPosEmbed, depth_to_bin
from .geometry import Box2D, Box3D, CameraCalib, back_project, wrap_angle

# classification heads start near a small foreground prior instead of 0.5
FOCAL_PRIOR_BIAS = -math.log((1.0 - 0.01) / 0.01)

SIGMA_CLAMP = 5.0
DIM_LOG_CLAMP = 4.0


@dataclass
class QuerySet:
    content: Tensor  # [N, Q, C]
    anchor_logits: Tensor  # [N, Q, 6], sigmoid space deferred

    @property
    def count(self) -> int:
        return self.content.shape[1]

    def vec6(self) -> Tensor:
        return ad.sigmoid(self.anchor_logits)


@dataclass
class EncoderSupervision:
    """Pieces the anchor loss needs: selected objectness logits and which
    anchor components the encoder actually predicted."""

    objectness: Optional[Tensor]  # [N, Q]
    box_from_encoder: bool
    center_from_encoder: bool


@dataclass
class Prediction:
    class_logits: Tensor  # [N, Q, n_classes]
    box6: Tensor  # [N, Q, 6] in [0, 1]
    depth_mu: Tensor  # [N, Q] meters
    depth_log_sigma: Tensor  # [N, Q], clamped
    dims: Tensor  # [N, Q, 3] (h, w, l) meters
    angle: Tensor  # [N, Q, 2] unit (sin, cos)


def gather_tokens(tokens: Tensor, idx: np.ndarray) -> Tensor:
    """Batched gather: tokens [N, T, C] picked at idx [N, Q] -> [N, Q, C]."""
    n, t, c = tokens.shape
    q = idx.shape[1]
    flat_idx = (np.arange(n)[:, None] * t + idx).reshape(-1)
    flat = tokens.reshape((n * t, c))
    return ad.take(flat, flat_idx, axis=0).reshape((n, q, c))


class QueryGenerator(nn.Module):
    """Produces the initial QuerySet from f_v and f_D token grids.

    Strategy tokens mirror the ablation rows: components named ``enc-`` are
    regressed from encoder features at the top-Q objectness locations, the
    others come from learnable embeddings.

      l-center             all-learnable content and anchors
      l-center+enc-box     2D box from features, center learnable
      enc-center           center from the depth cross-attention, box learnable
      enc-center+enc-box   both regressed (default)
    """

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        super().__init__()
        dim = cfg["model.dim"]
        heads = cfg["encoder.heads"]
        self.count = cfg["queries.count"]
        self.strategy = cfg["queries.strategy"]
        self.box_from_encoder = "enc-box" in self.strategy or self.strategy == "enc-center+enc-box"
        self.center_from_encoder = self.strategy.startswith("enc-center")
        self.uses_encoder = self.box_from_encoder or self.center_from_encoder

        if self.uses_encoder:
            self.objectness = nn.Linear(dim, 1, rng)
            self.objectness.bias.data = np.full(1, FOCAL_PRIOR_BIAS)
            self.content_proj = nn.Linear(dim, dim, rng)
        if self.box_from_encoder:
            self.box_head = nn.MLP(dim, dim, 4, 2, rng)
        else:
            self.learned_box = Parameter(rng.normal(0.0, 0.5, size=(self.count, 4)))
        if self.center_from_encoder:
            self.center_attn = nn.MultiHeadAttention(dim, heads, rng)
            self.center_head = nn.MLP(dim, dim, 2, 2, rng)
        else:
            self.learned_center = Parameter(rng.normal(0.0, 0.5, size=(self.count, 2)))
        if not self.uses_encoder:
            self.learned_content = Parameter(rng.normal(0.0, 1.0, size=(self.count, dim)))

    def forward(self, fv_tokens: Tensor, fd_tokens: Tensor) -> tuple[QuerySet, EncoderSupervision]:
        n, t, c = fv_tokens.shape
        q = self.count
        if not self.uses_encoder:
            ones = Tensor(np.ones((n, 1, 1)))
            content = ad.mul(ones, self.learned_content.reshape((1, q, c)))
            logits = ad.mul(
                Tensor(np.ones((n, 1, 1))),
                ad.concat([self.learned_center, self.learned_box], axis=-1).reshape((1, q, 6)),
            )
            return QuerySet(content, logits), EncoderSupervision(None, False, False)
        if q > t:
            raise nn.ConfigError(f"queries.count={q} exceeds the {t} feature locations")

        obj = self.objectness(fv_tokens).reshape((n, t))
        order = np.argsort(-obj.data, axis=1, kind="stable")[:, :q]
        obj_sel = gather_tokens(obj.reshape((n, t, 1)), order).reshape((n, q))

        if self.box_from_encoder:
            box_logits = gather_tokens(self.box_head(fv_tokens), order)
        else:
            box_logits = ad.mul(Tensor(np.ones((n, 1, 1))), self.learned_box.reshape((1, q, 4)))
        if self.center_from_encoder:
            fused = self.center_attn(fv_tokens, fd_tokens, fd_tokens)
            center_logits = gather_tokens(self.center_head(fused), order)
        else:
            center_logits = ad.mul(Tensor(np.ones((n, 1, 1))), self.learned_center.reshape((1, q, 2)))

        content = self.content_proj(gather_tokens(fv_tokens, order))
        logits = ad.concat([center_logits, box_logits], axis=-1)
        return QuerySet(content, logits), EncoderSupervision(obj_sel, self.box_from_encoder, self.center_from_encoder)


class DecoderLayer(nn.Module):
    """Self-attention, depth cross-attention, visual cross-attention, FFN;
    each sub-block residual + post-norm; anchors refined additively in logit
    space by a zero-initialized delta head."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        super().__init__()
        dim = cfg["model.dim"]
        heads = cfg["encoder.heads"]
        ffn = cfg["decoder.ffn_dim"]
        self.self_attn = nn.MultiHeadAttention(dim, heads, rng)
        self.depth_attn = nn.MultiHeadAttention(dim, heads, rng)
        self.visual_attn = nn.MultiHeadAttention(dim, heads, rng)
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.ln3 = nn.LayerNorm(dim)
        self.ln4 = nn.LayerNorm(dim)
        self.ffn_in = nn.Linear(dim, ffn, rng)
        self.ffn_out = nn.Linear(ffn, dim, rng)
        self.delta_head = nn.MLP(dim, dim, 6, 2, rng)
        last = self.delta_head.layers[-1]
        last.weight.data = np.zeros_like(last.weight.data)
        last.bias.data = np.zeros_like(last.bias.data)

    def forward(
        self,
        queries: QuerySet,
        fv_tokens: Tensor,
        fd_tokens: Tensor,
        grid_pos: Tensor,
        query_pos: Tensor,
    ) -> tuple[QuerySet, Tensor]:
        c = queries.content
        qk = ad.add(c, query_pos)
        c = self.ln1(ad.add(c, self.self_attn(qk, qk, c)))
        keyed = ad.add(fd_tokens, grid_pos)
        c = self.ln2(ad.add(c, self.depth_attn(ad.add(c, query_pos), keyed, fd_tokens)))
        keyed = ad.add(fv_tokens, grid_pos)
        attended, weights = self.visual_attn(ad.add(c, query_pos), keyed, fv_tokens, return_weights=True)
        c = self.ln3(ad.add(c, attended))
        c = self.ln4(ad.add(c, self.ffn_out(ad.gelu(self.ffn_in(c)))))
        delta = self.delta_head(c)
        return QuerySet(c, ad.add(queries.anchor_logits, delta)), weights


class PredictionHeads(nn.Module):
    """Per-query output heads; the six-vector is read from the refined anchors."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        super().__init__()
        dim = cfg["model.dim"]
        n_classes = len(cfg["model.classes"])
        d_lo, d_hi = cfg["depth.range"]
        self.depth_mid = 0.5 * (d_lo + d_hi)
        self.depth_half = 0.5 * (d_hi - d_lo)
        self.class_head = nn.Linear(dim, n_classes, rng)
        self.class_head.bias.data = np.full(n_classes, FOCAL_PRIOR_BIAS)
        self.depth_head = nn.MLP(dim, dim, 2, 2, rng)
        self.dim_head = nn.MLP(dim, dim, 3, 2, rng)
        self.angle_head = nn.MLP(dim, dim, 2, 2, rng)

    def forward(self, queries: QuerySet) -> Prediction:
        c = queries.content
        depth_raw = self.depth_head(c)
        mu = ad.add(ad.mul(depth_raw[..., 0], self.depth_half), self.depth_mid)
        log_sigma = ad.clip(depth_raw[..., 1], -SIGMA_CLAMP, SIGMA_CLAMP)
        dims = ad.exp(ad.clip(self.dim_head(c), -DIM_LOG_CLAMP, DIM_LOG_CLAMP))
        raw_angle = self.angle_head(c)
        norm = ad.sqrt(ad.add(ad.tsum(ad.mul(raw_angle, raw_angle), axis=-1, keepdims=True), 1e-12))
        return Prediction(
            class_logits=self.class_head(c),
            box6=queries.vec6(),
            depth_mu=mu,
            depth_log_sigma=log_sigma,
            dims=dims,
            angle=ad.div(raw_angle, norm),
        )


class QueryPosEmbedder:
    """Computes per-layer query positional embeddings from current anchors,
    routing depth-derived indices to the table variants."""

    def __init__(self, embed: DepthPosEmbed, depth_map_head: DepthMapHead):
        self.embed = embed
        self.head = depth_map_head

    def __call__(self, queries: QuerySet, depth_map_logits: Tensor) -> Tensor:
        vec6 = queries.vec6()
        if self.embed.variant in ("3d-sincos", "2d-sincos"):
            return self.embed(vec6)
        n, _, gh, gw = depth_map_logits.shape
        centers = vec6.data[..., 0:2]  # (x_c, y_c) normalized
        gx = np.clip((centers[..., 0] * gw).astype(np.int64), 0, gw - 1)
        gy = np.clip((centers[..., 1] * gh).astype(np.int64), 0, gh - 1)
        bins = np.argmax(depth_map_logits.data[:, : self.head.k, :, :], axis=1)[
            np.arange(n)[:, None], gy, gx
        ]
        if self.embed.variant == "k-bin":
            return self.embed(vec6, bin_indices=bins)
        meters = self.head.bin_centers()[bins]
        return self.embed(vec6, depth_meters=meters)


def decode_to_boxes(
    pred: Prediction,
    calib: CameraCalib,
    categories: list[str],
    image_index: int = 0,
) -> list[tuple[Box3D, Box2D]]:
    """Turn one image's predictions into scored KITTI-frame boxes.

    The projected center ray is back-projected at the predicted depth; the
    score is the best class probability times exp(-sigma). Queries with
    non-positive depth are dropped.
    """
    w_img, h_img = calib.image_size
    box6 = pred.box6.data[image_index]
    probs = 1.0 / (1.0 + np.exp(-pred.class_logits.data[image_index]))
    mu = pred.depth_mu.data[image_index]
    sigma = np.exp(pred.depth_log_sigma.data[image_index])
    dims = pred.dims.data[image_index]
    angle = pred.angle.data[image_index]

    out = []
    for qi in range(box6.shape[0]):
        depth = float(mu[qi])
        if depth <= 0.0:
            continue
        cls = int(np.argmax(probs[qi]))
        score = float(probs[qi, cls] * math.exp(-sigma[qi]))
        x_c = float(box6[qi, 0] * w_img)
        y_c = float(box6[qi, 1] * h_img)
        center = back_project(x_c, y_c, depth, calib)
        h, w, l = (float(v) for v in dims[qi])
        location = (float(center[0]), float(center[1] + h / 2.0), float(center[2]))
        yaw = wrap_angle(math.atan2(float(angle[qi, 0]), float(angle[qi, 1])))
        box3d = Box3D(location=location, dimensions=(h, w, l), yaw=yaw, category=categories[cls], score=score)
        cx = float(box6[qi, 2] * w_img)
        cy = float(box6[qi, 3] * h_img)
        bw = max(float(box6[qi, 4] * w_img), 1e-3)
        bh = max(float(box6[qi, 5] * h_img), 1e-3)
        box2d = Box2D(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2, center3d_proj=(x_c, y_c))
        out.append((box3d, box2d))
    out.sort(key=lambda pair: -pair[0].score)
    return out


def dropped_query_count(pred: Prediction, image_index: int = 0) -> int:
    return int(np.count_nonzero(pred.depth_mu.data[image_index] <= 0.0))
