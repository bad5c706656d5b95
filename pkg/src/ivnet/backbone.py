"""Convolutional feature extractor producing the spatial feature map.

Three blocks of (3x3 conv, rectifier, 2x2 max-pool); pooling stops once
the configured downsampling factor is reached.  Kernels use fan-in
scaled uniform init with zero biases, so an all-zero image maps to an
all-zero feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .optim import Parameter


@dataclass
class RasterImage:
    """A [0,1]-valued raster, channel-last."""

    height: int
    width: int
    channels: int
    pixels: np.ndarray  # (height, width, channels)

    @staticmethod
    def from_array(pixels: np.ndarray) -> "RasterImage":
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise ContractError(f"raster must be (H, W, 1|3), got {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ContractError(
                f"pixel values outside [0,1]: min={pixels.min()}, max={pixels.max()}"
            )
        h, w, c = pixels.shape
        return RasterImage(h, w, c, pixels)


@dataclass
class SpatialFeatureMap:
    """An (h, w, d) feature map; ``flat`` is the (h*w, d) pure reshape."""

    tensor: Tensor  # (h, w, d)

    @property
    def h(self) -> int:
        return self.tensor.shape[0]

    @property
    def w(self) -> int:
        return self.tensor.shape[1]

    @property
    def d(self) -> int:
        return self.tensor.shape[2]

    @property
    def flat(self) -> Tensor:
        return self.tensor.reshape(self.h * self.w, self.d)


@dataclass
class BackboneConfig:
    in_channels: int = 1
    feature_dim: int = 64
    downsample: int = 4

    def block_widths(self) -> tuple[int, int, int]:
        d = self.feature_dim
        return (max(d // 8, 4), max(d // 4, 8), d)

    def pool_count(self) -> int:
        n = int(round(math.log2(self.downsample)))
        if 2 ** n != self.downsample or n > 3 or n < 0:
            raise ContractError(
                f"downsample must be a power of two in [1, 8], got {self.downsample}"
            )
        return n


def init_backbone(
    cfg: BackboneConfig, rng: np.random.Generator, prefix: str = "backbone"
) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.block_widths()):
        fan_in = 3 * 3 * cin
        limit = 1.0 / math.sqrt(fan_in)
        kernel = rng.uniform(-limit, limit, size=(3, 3, cin, cout))
        params[f"{prefix}.conv{i}.kernel"] = Parameter(kernel, f"{prefix}.conv{i}.kernel")
        params[f"{prefix}.conv{i}.bias"] = Parameter(np.zeros(cout), f"{prefix}.conv{i}.bias")
        cin = cout
    return params


def forward(
    x: Tensor, params: dict[str, Parameter], cfg: BackboneConfig, prefix: str = "backbone"
) -> Tensor:
    """Batched feature extraction: (B, H, W, C) -> (B, H/ds, W/ds, d)."""
    pools = cfg.pool_count()
    for i in range(3):
        kernel = params[f"{prefix}.conv{i}.kernel"].tensor
        bias = params[f"{prefix}.conv{i}.bias"].tensor
        x = ad.conv2d(x, kernel, padding=1) + bias
        x = x.relu()
        if i < pools:
            x = ad.maxpool2d(x, 2)
    return x


def extract_features(
    image: RasterImage | np.ndarray,
    params: dict[str, Parameter],
    cfg: BackboneConfig,
    prefix: str = "backbone",
) -> SpatialFeatureMap:
    """Single-sample contract surface over the batched forward pass."""
    if isinstance(image, np.ndarray):
        image = RasterImage.from_array(image)
    if image.channels != cfg.in_channels:
        raise ContractError(
            f"image has {image.channels} channels, backbone expects {cfg.in_channels}"
        )
    if image.height % cfg.downsample or image.width % cfg.downsample:
        raise ContractError(
            f"image {image.height}x{image.width} not divisible by downsample {cfg.downsample}"
        )
    x = Tensor(image.pixels[None, :, :, :])
    fmap = forward(x, params, cfg, prefix)
    _, h, w, d = fmap.shape
    return SpatialFeatureMap(fmap.reshape(h, w, d))
