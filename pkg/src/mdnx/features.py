"""Backbone pyramid and the hybrid encoder.

The backbone is a small strided CNN with a stem plus four [stride-2, stride-1]
stages; the last three stages are tapped at 1/8, 1/16 and 1/32 resolution and
projected to a common channel count. The encoder runs one transformer layer
on the coarsest map and fuses the three scales down to the 1/16 grid.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import RunConfig

BACKBONE_PLAN = (16, 32, 48, 64)


def scaled_channels(plan, width: float) -> tuple[int, ...]:
    """Width-scaled channel counts, rounded to multiples of 8 (min 8) so the
    eight-way attention heads always divide evenly."""
    return tuple(max(8, int(round(c * width / 8)) * 8) for c in plan)


class FeaturePyramid:
    """Three backbone scales sharing one channel count C."""

    def __init__(self, s3: Tensor, s4: Tensor, s5: Tensor):
        if s3.shape[1] != s4.shape[1] or s4.shape[1] != s5.shape[1]:
            raise nn.ConfigError("pyramid levels disagree on channels")
        for hi, lo in ((s3, s4), (s4, s5)):
            if hi.shape[2] != 2 * lo.shape[2] or hi.shape[3] != 2 * lo.shape[3]:
                raise nn.ConfigError(
                    f"pyramid spatial dims must halve between levels: {hi.shape} vs {lo.shape}"
                )
        self.s3, self.s4, self.s5 = s3, s4, s5


class Backbone(nn.Module):
    def __init__(self, dim: int, width: float, rng: np.random.Generator):
        super().__init__()
        plan = scaled_channels(BACKBONE_PLAN, width)
        self.plan = plan
        self.stem = nn.ConvBNAct(3, plan[0], 3, rng, stride=2)
        stages = []
        prev = plan[0]
        for ch in plan:
            stages.append(
                nn.Sequential(
                    nn.ConvBNAct(prev, ch, 3, rng, stride=2),
                    nn.ConvBNAct(ch, ch, 3, rng, stride=1),
                )
            )
            prev = ch
        self.stages = nn.ModuleList(stages)
        self.proj3 = nn.Conv2d(plan[1], dim, 1, rng)
        self.proj4 = nn.Conv2d(plan[2], dim, 1, rng)
        self.proj5 = nn.Conv2d(plan[3], dim, 1, rng)

    def forward(self, image: Tensor) -> FeaturePyramid:
        n, c, h, w = image.shape
        if c != 3 or h % 32 or w % 32:
            raise nn.ConfigError(f"backbone needs [N,3,H,W] with H,W divisible by 32, got {image.shape}")
        x = self.stem(image)
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return FeaturePyramid(self.proj3(taps[1]), self.proj4(taps[2]), self.proj5(taps[3]))


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer; positions are added to Q and K only."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        super().__init__()
        self.attn = nn.MultiHeadAttention(dim, heads, rng)
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn_in = nn.Linear(dim, ffn_dim, rng)
        self.ffn_out = nn.Linear(ffn_dim, dim, rng)

    def forward(self, tokens: Tensor, pos: Tensor) -> Tensor:
        qk = ad.add(tokens, pos)
        x = self.ln1(ad.add(tokens, self.attn(qk, qk, tokens)))
        ff = self.ffn_out(ad.gelu(self.ffn_in(x)))
        return self.ln2(ad.add(x, ff))


class FusionBlock(nn.Module):
    """Adjacent-pair fusion: concat, two 3x3 conv+BN+act, 1x1 residual.

    The rt flavour drops the residual projection and uses SiLU, mirroring the
    upstream fusion design this block deviates from.
    """

    def __init__(self, dim: int, rng: np.random.Generator, residual: bool = True, act: str = "gelu"):
        super().__init__()
        self.conv1 = nn.ConvBNAct(2 * dim, dim, 3, rng, act=act)
        self.conv2 = nn.ConvBNAct(dim, dim, 3, rng, act=act)
        self.proj = nn.Conv2d(2 * dim, dim, 1, rng) if residual else None

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape[1] != b.shape[1]:
            raise nn.ConfigError(f"fusion inputs disagree on channels: {a.shape} vs {b.shape}")
        cat = ad.concat([a, b], axis=1)
        out = self.conv2(self.conv1(cat))
        if self.proj is not None:
            out = ad.add(out, self.proj(cat))
        return out


class HybridEncoder(nn.Module):
    """Single self-attention layer on the 1/32 map plus cross-scale fusion.

    Variants:
      hybrid        top-down fusion to 1/8 then bottom-up back to 1/16
      hybrid-light  one fusion pass straight to 1/16
      rt            like hybrid but with the non-residual SiLU fusion block
      plain         three encoder layers over the concatenated token pyramid
    """

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        super().__init__()
        dim = cfg["model.dim"]
        heads = cfg["encoder.heads"]
        ffn = cfg["encoder.ffn_dim"]
        self.variant = cfg["encoder.variant"]
        self.dim = dim
        if self.variant == "plain":
            self.layers = nn.ModuleList([EncoderLayer(dim, heads, ffn, rng) for _ in range(3)])
            return
        self.layer = EncoderLayer(dim, heads, ffn, rng)
        residual = self.variant != "rt"
        act = "gelu" if self.variant != "rt" else "silu"
        if self.variant in ("hybrid", "rt"):
            self.fuse_54 = FusionBlock(dim, rng, residual=residual, act=act)
            self.fuse_43 = FusionBlock(dim, rng, residual=residual, act=act)
            self.fuse_out = FusionBlock(dim, rng, residual=residual, act=act)
            self.down = nn.ConvBNAct(dim, dim, 3, rng, stride=2, act=act)
        elif self.variant == "hybrid-light":
            self.fuse_34 = FusionBlock(dim, rng, residual=residual, act=act)
            self.fuse_out = FusionBlock(dim, rng, residual=residual, act=act)
            self.down = nn.ConvBNAct(dim, dim, 3, rng, stride=2, act=act)

    def encode_s5(self, s5: Tensor) -> Tensor:
        n, c, h, w = s5.shape
        pos = Tensor(nn.grid_sincos_2d(h, w, c))
        tokens = self.layer(nn.flatten_tokens(s5), pos)
        return nn.unflatten_tokens(tokens, h, w)

    def forward(self, pyramid: FeaturePyramid) -> Tensor:
        s3, s4, s5 = pyramid.s3, pyramid.s4, pyramid.s5
        if self.variant == "plain":
            return self._plain(s3, s4, s5)
        f5 = self.encode_s5(s5)
        if self.variant in ("hybrid", "rt"):
            m4 = self.fuse_54(ad.upsample_nearest2d(f5, 2), s4)
            m3 = self.fuse_43(ad.upsample_nearest2d(m4, 2), s3)
            return self.fuse_out(self.down(m3), m4)
        # hybrid-light: single pass
        m4 = self.fuse_34(self.down(s3), s4)
        return self.fuse_out(ad.upsample_nearest2d(f5, 2), m4)

    def _plain(self, s3: Tensor, s4: Tensor, s5: Tensor) -> Tensor:
        maps = [s3, s4, s5]
        tokens = ad.concat([nn.flatten_tokens(m) for m in maps], axis=1)
        pos = Tensor(
            np.concatenate([nn.grid_sincos_2d(m.shape[2], m.shape[3], self.dim) for m in maps], axis=0)
        )
        for layer in self.layers:
            tokens = layer(tokens, pos)
        t3 = s3.shape[2] * s3.shape[3]
        t4 = s4.shape[2] * s4.shape[3]
        return nn.unflatten_tokens(tokens[:, t3 : t3 + t4, :], s4.shape[2], s4.shape[3])


class FeatureNet(nn.Module):
    """Backbone plus encoder: images to the fused 1/16 visual map f_v."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        super().__init__()
        self.backbone = Backbone(cfg["model.dim"], cfg["backbone.width"], rng)
        self.encoder = HybridEncoder(cfg, rng)

    def forward(self, image: Tensor) -> tuple[FeaturePyramid, Tensor]:
        pyramid = self.backbone(image)
        return pyramid, self.encoder(pyramid)
