"""Residual encoder-decoder restoration network.

A small U-shaped network: conv stem, ``n_scales`` encoder stages of residual
blocks with stride-2 downsampling between them, then a mirrored decoder with
transposed-conv upsampling and additive skip connections. The bottleneck is
exposed as a token-major feature block (L x C) -- the injection point where
privileged-feature fusion plugs in. The same encoder doubles as the
privileged-feature extractor, so no second network is ever instantiated.

The final conv is zero-initialized and the model predicts a residual on top
of its input: a fresh model is an exact identity, which keeps the fused and
unfused pathways coincident at step 0. Outputs are left unclipped here;
clipping to [0,1] is an evaluation-time concern.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


@dataclass
class BackboneConfig:
    base_channels: int = 16
    n_scales: int = 3
    blocks_per_scale: int = 2
    img_channels: int = 3

    def __post_init__(self):
        if self.base_channels < 1 or self.n_scales < 1 or self.blocks_per_scale < 1:
            raise ValueError("backbone config fields must be positive")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** (self.n_scales - 1)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.n_scales - 1)

    def channels_at(self, scale: int) -> int:
        return self.base_channels * 2 ** scale


@dataclass
class FeatureMap:
    """Token-major feature block: (..., L, C) with the grid shape kept aside."""

    tokens: torch.Tensor
    spatial: tuple  # (h, w) with h * w == L

    def __post_init__(self):
        h, w = self.spatial
        if self.tokens.shape[-2] != h * w:
            raise ShapeError(
                f"token count {self.tokens.shape[-2]} != {h}x{w}")

    @property
    def channels(self) -> int:
        return self.tokens.shape[-1]

    @classmethod
    def from_grid(cls, x: torch.Tensor) -> "FeatureMap":
        """(B, C, h, w) -> tokens (B, h*w, C)."""
        b, c, h, w = x.shape
        return cls(x.flatten(2).transpose(1, 2), (h, w))

    def to_grid(self) -> torch.Tensor:
        h, w = self.spatial
        t = self.tokens
        return t.transpose(-1, -2).reshape(*t.shape[:-2], t.shape[-1], h, w)

    def with_tokens(self, tokens: torch.Tensor) -> "FeatureMap":
        return FeatureMap(tokens, self.spatial)


def _he_conv(c_in, c_out, k, stride=1, generator=None):
    conv = nn.Conv2d(c_in, c_out, k, stride=stride, padding=k // 2)
    std = math.sqrt(2.0 / (c_in * k * k))
    with torch.no_grad():
        conv.weight.normal_(0.0, std, generator=generator)
        conv.bias.zero_()
    return conv


class ResBlock(nn.Module):
    def __init__(self, channels, generator=None):
        super().__init__()
        self.conv1 = _he_conv(channels, channels, 3, generator=generator)
        self.conv2 = _he_conv(channels, channels, 3, generator=generator)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class RestorationBackbone(nn.Module):
    """Encoder-decoder with a token-major bottleneck injection point."""

    def __init__(self, cfg: BackboneConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        g = generator
        ch = [cfg.channels_at(s) for s in range(cfg.n_scales)]

        self.stem = _he_conv(cfg.img_channels, ch[0], 3, generator=g)
        self.enc_stages = nn.ModuleList(
            nn.Sequential(*[ResBlock(c, g) for _ in range(cfg.blocks_per_scale)])
            for c in ch)
        self.downs = nn.ModuleList(
            _he_conv(ch[s], ch[s + 1], 3, stride=2, generator=g)
            for s in range(cfg.n_scales - 1))

        ups = []
        for s in range(cfg.n_scales - 1):
            up = nn.ConvTranspose2d(ch[s + 1], ch[s], 2, stride=2)
            std = math.sqrt(2.0 / (ch[s + 1] * 4))
            with torch.no_grad():
                up.weight.normal_(0.0, std, generator=g)
                up.bias.zero_()
            ups.append(up)
        self.ups = nn.ModuleList(ups)
        self.dec_stages = nn.ModuleList(
            nn.Sequential(*[ResBlock(ch[s], g) for _ in range(cfg.blocks_per_scale)])
            for s in range(cfg.n_scales - 1))

        self.head = nn.Conv2d(ch[0], cfg.img_channels, 3, padding=1)
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def encode(self, img: torch.Tensor):
        """(B, 3, H, W) -> bottleneck FeatureMap plus per-scale skip features.

        The same pass extracts features from a degraded image and from a
        privileged/pseudo-privileged one; callers of the privileged path just
        drop the skips.
        """
        if img.ndim != 4:
            raise ShapeError(f"expected (B, C, H, W), got {tuple(img.shape)}")
        f = self.cfg.downsample_factor
        h, w = img.shape[-2:]
        if h % f or w % f:
            raise ShapeError(f"spatial dims {h}x{w} not divisible by {f}")
        x = self.stem(img)
        skips = []
        for s in range(self.cfg.n_scales - 1):
            x = self.enc_stages[s](x)
            skips.append(x)
            x = self.downs[s](x)
        x = self.enc_stages[-1](x)
        return FeatureMap.from_grid(x), skips

    def decode(self, bottleneck: FeatureMap, skips, input_img: torch.Tensor) -> torch.Tensor:
        """Reconstruct: input image plus the predicted residual (unclipped)."""
        if len(skips) != self.cfg.n_scales - 1:
            raise ShapeError(f"expected {self.cfg.n_scales - 1} skips, got {len(skips)}")
        x = bottleneck.to_grid()
        for s in reversed(range(self.cfg.n_scales - 1)):
            x = self.ups[s](x)
            if x.shape != skips[s].shape:
                raise ShapeError(
                    f"skip {s} shape {tuple(skips[s].shape)} vs {tuple(x.shape)}")
            x = x + skips[s]
            x = self.dec_stages[s](x)
        residual = self.head(x)
        if residual.shape != input_img.shape:
            raise ShapeError("decoded residual does not match the input image shape")
        return input_img + residual

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        feat, skips = self.encode(img)
        return self.decode(feat, skips, img)


def closed_form_param_count(cfg: BackboneConfig) -> int:
    """Parameter count derived from the layer list, independent of torch."""
    ch = [cfg.channels_at(s) for s in range(cfg.n_scales)]
    conv = lambda ci, co, k: ci * co * k * k + co
    block = lambda c: 2 * conv(c, c, 3)
    total = conv(cfg.img_channels, ch[0], 3)
    for s in range(cfg.n_scales):
        total += cfg.blocks_per_scale * block(ch[s])
    for s in range(cfg.n_scales - 1):
        total += conv(ch[s], ch[s + 1], 3)          # downsample
        total += ch[s + 1] * ch[s] * 4 + ch[s]       # 2x2 transposed conv
        total += cfg.blocks_per_scale * block(ch[s])  # decoder stage
    total += conv(ch[0], cfg.img_channels, 3)
    return total
