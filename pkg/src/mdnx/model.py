"""The full detector: backbone+encoder, depth branch, query decoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import RunConfig
from .depth import AccurateDepthNet, DepthMapHead, DepthPosEmbed, LightDepthNet, build_depth_net
from .detect import (
    DecoderLayer,
    EncoderSupervision,
    Prediction,
    PredictionHeads,
    QueryGenerator,
    QueryPosEmbedder,
    QuerySet,
)
from .features import FeatureNet


@dataclass
class ForwardResult:
    f_v: Tensor
    f_d: Tensor
    depth_map_logits: Tensor
    initial_queries: QuerySet
    enc_info: EncoderSupervision
    layer_queries: list[QuerySet]
    layer_predictions: list[Prediction]
    visual_attention: Tensor  # final layer, [N, heads, Q, T]

    @property
    def prediction(self) -> Prediction:
        return self.layer_predictions[-1]


class Detector(nn.Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        super().__init__()
        dim = cfg["model.dim"]
        self.cfg = cfg
        self.features = FeatureNet(cfg, rng)
        self.depth_net = build_depth_net(cfg, rng)
        self.depth_map_head = DepthMapHead(dim, cfg["depth.k"], cfg["depth.range"], rng)
        self.pos_embed = DepthPosEmbed(
            cfg.decoder_pos_embed, dim, cfg["depth.k"], cfg["depth.range"], rng
        )
        self.query_gen = QueryGenerator(cfg, rng)
        self.decoder_layers = nn.ModuleList(
            [DecoderLayer(cfg, rng) for _ in range(cfg["decoder.layers"])]
        )
        self.heads = PredictionHeads(cfg, rng)
        self._query_pos = QueryPosEmbedder(self.pos_embed, self.depth_map_head)

    def forward(self, images: Tensor) -> ForwardResult:
        pyramid, f_v = self.features(images)
        if isinstance(self.depth_net, LightDepthNet):
            f_d = self.depth_net(pyramid.s4)
        else:
            f_d = self.depth_net(images)
        if f_d.shape != f_v.shape:
            raise nn.ConfigError(f"depth features {f_d.shape} do not match visual features {f_v.shape}")
        depth_map_logits = self.depth_map_head(f_d)

        n, c, gh, gw = f_v.shape
        fv_tokens = nn.flatten_tokens(f_v)
        fd_tokens = nn.flatten_tokens(f_d)
        grid_pos = Tensor(nn.grid_sincos_2d(gh, gw, c))

        queries, enc_info = self.query_gen(fv_tokens, fd_tokens)
        initial = queries
        layer_queries: list[QuerySet] = []
        layer_predictions: list[Prediction] = []
        attn = None
        for layer in self.decoder_layers:
            query_pos = self._query_pos(queries, depth_map_logits)
            queries, attn = layer(queries, fv_tokens, fd_tokens, grid_pos, query_pos)
            layer_queries.append(queries)
            layer_predictions.append(self.heads(queries))
        return ForwardResult(
            f_v=f_v,
            f_d=f_d,
            depth_map_logits=depth_map_logits,
            initial_queries=initial,
            enc_info=enc_info,
            layer_queries=layer_queries,
            layer_predictions=layer_predictions,
            visual_attention=attn,
        )


def build_model(cfg: RunConfig, seed: int | None = None) -> Detector:
    """Deterministic model construction from a config and a seed."""
    rng = np.random.default_rng(cfg["seed"] if seed is None else seed)
    return Detector(cfg, rng)
