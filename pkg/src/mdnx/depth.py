"""Depth predictors and the categorical foreground depth map.

Two interchangeable feature extractors emit f_D at 1/16 resolution:

  * the light variant: two 3x3 convolutions over the backbone's 1/16 map;
  * the accurate variant: a staged encoder over the raw image built from
    residual dilated-convolution blocks and channel-attention blocks, with
    the average-pooled input image re-concatenated before each downsample.

Neither staged block contains a 1x1 convolution; the optional ``pointwise``
flags add them back for ablation runs only.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Parameter, Tensor
from .config import RunConfig

STAGE_DILATIONS = (1, 2, 3)
DEPTH_PLAN = (16, 32, 48, 64)


class DilatedResidualBlock(nn.Module):
    """x + GELU(BN(Conv_r(x))) with a 3x3 kernel and padding = dilation.

    pointwise=True wraps the dilated conv in 1x1 projections (the heavier
    design this block intentionally drops); it exists for the ablation axis.
    """

    def __init__(self, channels: int, dilation: int, rng: np.random.Generator, pointwise: bool = False):
        super().__init__()
        self.dilation = dilation
        if pointwise:
            self.pw_in = nn.Conv2d(channels, channels, 1, rng)
            self.pw_out = nn.Conv2d(channels, channels, 1, rng, bias=False)
        else:
            self.pw_in = None
            self.pw_out = None
        self.conv = nn.Conv2d(channels, channels, 3, rng, dilation=dilation, padding=dilation, bias=False)
        self.bn = nn.BatchNorm2d(channels)

    def forward(self, x: Tensor) -> Tensor:
        y = x if self.pw_in is None else self.pw_in(x)
        y = ad.gelu(self.bn(self.conv(y)))
        if self.pw_out is not None:
            y = self.pw_out(y)
        return ad.add(x, y)


class ChannelAttentionBlock(nn.Module):
    """Cross-covariance attention over channels with residual nonlinearity.

    Tokens are the spatial positions; attention weights live on the C' x C'
    channel-pair grid per head, built from l2-normalized queries and keys and
    scaled by a learnable per-head temperature. The block applies

        mixed = attention(q, k, v) + x
        out   = x + GELU(LN(mixed))

    and deliberately has no output projection or feed-forward; pointwise=True
    appends a feed-forward pair for the ablation axis.
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator, pointwise: bool = False):
        super().__init__()
        if channels % heads:
            raise nn.ConfigError(f"channel count {channels} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = channels // heads
        self.channels = channels
        self.wq = nn.Linear(channels, channels, rng, bias=False)
        self.wk = nn.Linear(channels, channels, rng, bias=False)
        self.wv = nn.Linear(channels, channels, rng, bias=False)
        self.temperature = Parameter(np.ones((self.heads, 1, 1)))
        self.ln = nn.LayerNorm(channels)
        if pointwise:
            self.ffn_in = nn.Linear(channels, 2 * channels, rng)
            self.ffn_out = nn.Linear(2 * channels, channels, rng)
        else:
            self.ffn_in = None
            self.ffn_out = None

    def attention_weights(self, tokens: Tensor) -> Tensor:
        """Softmax channel-attention matrix [N, heads, C', C']."""
        q = self._heads_first(self.wq(tokens))
        k = self._heads_first(self.wk(tokens))
        qn = ad.l2_normalize(q, axis=-1)
        kn = ad.l2_normalize(k, axis=-1)
        logits = ad.mul(ad.matmul(qn, kn.transpose((0, 1, 3, 2))), self.temperature)
        return ad.softmax(logits, axis=-1)

    def _heads_first(self, x: Tensor) -> Tensor:
        n, t, c = x.shape
        # [N, T, C] -> [N, heads, C/heads, T]: channel slices become rows
        return x.reshape((n, t, self.heads, self.head_dim)).transpose((0, 2, 3, 1))

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        tokens = nn.flatten_tokens(x)
        attn = self.attention_weights(tokens)
        v = self._heads_first(self.wv(tokens))
        out = ad.matmul(attn, v)  # [N, heads, C', T]
        out = out.transpose((0, 3, 1, 2)).reshape((n, h * w, c))
        mixed = ad.add(tokens, out)
        y = ad.add(tokens, ad.gelu(self.ln(mixed)))
        if self.ffn_in is not None:
            y = ad.add(y, self.ffn_out(ad.gelu(self.ffn_in(y))))
        return nn.unflatten_tokens(y, h, w)


class DepthStage(nn.Module):
    """n dilated residual blocks (rates cycling 1,2,3) followed by one
    channel-attention block."""

    def __init__(self, channels: int, n_blocks: int, heads: int, rng: np.random.Generator,
                 sdc_pointwise: bool = False, rgfi_pointwise: bool = False):
        super().__init__()
        self.blocks = nn.ModuleList(
            [
                DilatedResidualBlock(channels, STAGE_DILATIONS[i % len(STAGE_DILATIONS)], rng, pointwise=sdc_pointwise)
                for i in range(n_blocks)
            ]
        )
        self.attn = ChannelAttentionBlock(channels, heads, rng, pointwise=rgfi_pointwise)

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.attn(x)


class LightDepthNet(nn.Module):
    """Two 3x3 convolutions over the 1/16 backbone features."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, rng, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(dim)
        self.conv2 = nn.Conv2d(dim, dim, 3, rng, padding=1)

    def forward(self, features: Tensor) -> Tensor:
        return self.conv2(ad.gelu(self.bn(self.conv1(features))))


class AccurateDepthNet(nn.Module):
    """Staged image-to-f_D encoder: stem to 1/2, then three downsample+stage
    rounds to 1/16, re-concatenating the pooled input image before each
    downsample, and a final 1x1 projection to the model dim."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        super().__init__()
        heads = cfg["encoder.heads"]
        n1, n2, n3 = cfg["depth.sdc_counts"]
        c1, c2, c3, c4 = scaled = tuple(
            max(8, int(round(c * cfg["depth.width"] / 8)) * 8) for c in DEPTH_PLAN
        )
        self.channels = scaled
        sdc_pw = cfg["depth.sdc_pointwise"]
        rgfi_pw = cfg["depth.rgfi_pointwise"]
        self.stem = nn.Sequential(
            nn.ConvBNAct(3, c1, 3, rng, stride=2),
            nn.ConvBNAct(c1, c1, 3, rng),
            nn.ConvBNAct(c1, c1, 3, rng),
        )
        self.down1 = nn.ConvBNAct(c1 + 3, c2, 3, rng, stride=2)
        self.stage1 = DepthStage(c2, n1, heads, rng, sdc_pw, rgfi_pw)
        self.down2 = nn.ConvBNAct(c2 + 3, c3, 3, rng, stride=2)
        self.stage2 = DepthStage(c3, n2, heads, rng, sdc_pw, rgfi_pw)
        self.down3 = nn.ConvBNAct(c3 + 3, c4, 3, rng, stride=2)
        self.stage3 = DepthStage(c4, n3, heads, rng, sdc_pw, rgfi_pw)
        self.proj = nn.Conv2d(c4, cfg["model.dim"], 1, rng)

    def forward(self, image: Tensor) -> Tensor:
        n, c, h, w = image.shape
        if c != 3 or h % 16 or w % 16:
            raise nn.ConfigError(f"accurate depth net needs [N,3,H,W] with H,W divisible by 16, got {image.shape}")
        pooled2 = ad.avg_pool2d(image, 2)
        pooled4 = ad.avg_pool2d(pooled2, 2)
        pooled8 = ad.avg_pool2d(pooled4, 2)
        x = self.stem(image)
        x = self.stage1(self.down1(ad.concat([x, pooled2], axis=1)))
        x = self.stage2(self.down2(ad.concat([x, pooled4], axis=1)))
        x = self.stage3(self.down3(ad.concat([x, pooled8], axis=1)))
        return self.proj(x)


def lid_bin_edges(k: int, d_min: float, d_max: float) -> np.ndarray:
    """k+1 edges with linearly increasing bin widths over [d_min, d_max]."""
    if k < 1:
        raise nn.ConfigError(f"need at least one depth bin, got k={k}")
    i = np.arange(k + 1, dtype=np.float64)
    return d_min + (d_max - d_min) * i * (i + 1) / (k * (k + 1))


def depth_to_bin(depth, edges: np.ndarray) -> np.ndarray:
    """Bin index per depth value, clamped into [0, k-1] outside the range."""
    idx = np.searchsorted(edges, np.asarray(depth, dtype=np.float64), side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


class DepthMapHead(nn.Module):
    """1x1 conv to k foreground depth bins plus one background class."""

    def __init__(self, dim: int, k: int, depth_range: tuple[float, float], rng: np.random.Generator):
        super().__init__()
        self.k = k
        self.bin_edges = lid_bin_edges(k, depth_range[0], depth_range[1])
        self.head = nn.Conv2d(dim, k + 1, 1, rng)

    @property
    def background_class(self) -> int:
        return self.k

    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def forward(self, f_d: Tensor) -> Tensor:
        return self.head(f_d)


class DepthPosEmbed(nn.Module):
    """Query positional embedding from anchor geometry or depth.

    Variants: 3d-sincos consumes the whole normalized six-vector with C/6
    channels per component; 2d-sincos consumes the projected center with C/2
    per component; meter-wise and k-bin are learnable tables indexed by the
    integer-clamped metric depth or the depth bin.
    """

    def __init__(self, variant: str, dim: int, k: int, depth_range: tuple[float, float],
                 rng: np.random.Generator):
        super().__init__()
        self.variant = variant
        self.dim = dim
        self.depth_range = depth_range
        if variant == "3d-sincos":
            if dim % 6:
                raise nn.ConfigError(f"3d-sincos needs dim divisible by 6, got {dim}")
        elif variant == "2d-sincos":
            if dim % 2:
                raise nn.ConfigError(f"2d-sincos needs dim divisible by 2, got {dim}")
        elif variant == "meter-wise":
            self.table = nn.Embedding(int(np.ceil(depth_range[1])) + 1, dim, rng)
        elif variant == "k-bin":
            self.table = nn.Embedding(k + 1, dim, rng)
        else:
            raise nn.ConfigError(f"unknown positional embedding variant {variant!r}")

    def forward(self, vec6: Tensor, depth_meters: np.ndarray | None = None,
                bin_indices: np.ndarray | None = None) -> Tensor:
        if self.variant == "3d-sincos":
            return self._sincos(vec6, 6)
        if self.variant == "2d-sincos":
            return self._sincos(vec6[..., 0:2], 2)
        if self.variant == "meter-wise":
            if depth_meters is None:
                raise ValueError("meter-wise embedding needs per-query depths")
            idx = np.clip(np.rint(depth_meters), 0, int(np.ceil(self.depth_range[1]))).astype(np.int64)
            return self._lookup(idx)
        if bin_indices is None:
            raise ValueError("k-bin embedding needs per-query bin indices")
        return self._lookup(np.asarray(bin_indices, dtype=np.int64))

    def _sincos(self, coords: Tensor, n_coords: int) -> Tensor:
        block = self.dim // n_coords
        parts = [
            sincos_features(coords[..., i], block)
            for i in range(n_coords)
        ]
        return ad.concat(parts, axis=-1)

    def _lookup(self, idx: np.ndarray) -> Tensor:
        lead = idx.shape
        flat = self.table(idx.reshape(-1))
        return flat.reshape(lead + (self.dim,))


def sincos_features(values: Tensor, dim: int, temperature: float = 10000.0) -> Tensor:
    """Differentiable interleaved sin/cos features of scalar inputs.

    Matches nn.sincos_block: values scaled by 2*pi, frequency j has period
    temperature^(2*(j//2)/dim), even channels sin and odd channels cos.
    """
    j = np.arange(dim)
    inv_freq = (2.0 * np.pi) / temperature ** (2.0 * (j // 2) / dim)
    angles = ad.mul(values.reshape(values.shape + (1,)), inv_freq)
    # sin(x + 0) on even channels, sin(x + pi/2) = cos(x) on odd ones
    phase = np.where(j % 2 == 0, 0.0, np.pi / 2.0)
    return ad.sin(ad.add(angles, phase))


def has_pointwise_conv(module: nn.Module) -> bool:
    """True if any convolution inside the module has a 1x1 kernel."""
    for _, sub in module.named_modules():
        if isinstance(sub, nn.Conv2d) and sub.kernel == 1:
            return True
    return False


def build_depth_net(cfg: RunConfig, rng: np.random.Generator) -> nn.Module:
    if cfg["depth.variant"] == "E":
        return LightDepthNet(cfg["model.dim"], rng)
    return AccurateDepthNet(cfg, rng)
